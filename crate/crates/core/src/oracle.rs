//! Independent reference implementations used for verification: dense GeMM,
//! direct convolution, and im2col materialization.
//!
//! These are the most naive unambiguous algorithms on purpose — no blocking,
//! no fast paths — so they share nothing with the compiled kernels they
//! check. Accumulation is f64 with a single final rounding to f32, and loop
//! orders are fixed so results are reproducible bit for bit.

use crate::model::{decode_tap, DenseMatrix, ModelError, SparseMatrix, Tensor3};

/// Expands a sparse matrix to dense, zeros elsewhere.
pub fn to_dense(a: &SparseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    for (r, c, v) in a.entries() {
        out.set(r, c, v);
    }
    out
}

/// Triple-loop reference GeMM with (m, k, n) loop order and f64 accumulation.
pub fn gemm_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
    if a.cols() != b.rows() {
        return Err(ModelError::ShapeMismatch {
            rows: b.rows(),
            cols: b.cols(),
            want_rows: a.cols(),
            want_cols: b.cols(),
        });
    }
    let (m, k_dim, n) = (a.rows(), a.cols(), b.cols());
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        for k in 0..k_dim {
            let aik = a.at(i, k) as f64;
            let brow = b.row_slice(k);
            let crow = &mut acc[i * n..(i + 1) * n];
            for (c, bv) in crow.iter_mut().zip(brow) {
                *c += aik * (*bv as f64);
            }
        }
    }
    DenseMatrix::new(m, n, acc.into_iter().map(|v| v as f32).collect())
}

/// One entry of the virtual dense B matrix of the im2col lowering, computed
/// without materialization: input pixel `(y+dy-1, x+dx-1)` of channel `c_in`,
/// 0 when out of bounds; `(y, x)` decode output pixel `n` row-major.
pub fn virtual_b_lookup(x: &Tensor3, c_in: usize, dy: usize, dx: usize, n: usize) -> f32 {
    let width = x.width();
    let y = (n / width) as i64 + dy as i64 - 1;
    let xx = (n % width) as i64 + dx as i64 - 1;
    if y >= 0 && y < x.height() as i64 && xx >= 0 && xx < width as i64 {
        x.at(c_in, y as usize, xx as usize)
    } else {
        0.0
    }
}

/// Materializes the full (c_in*9) x (height*width) im2col matrix: each
/// receptive field becomes a column.
pub fn im2col(x: &Tensor3) -> DenseMatrix {
    let k_rows = x.channels() * 9;
    let n = x.height() * x.width();
    let mut out = DenseMatrix::zeros(k_rows, n);
    for k in 0..k_rows {
        let (c_in, dy, dx) = decode_tap(k);
        for col in 0..n {
            out.set(k, col, virtual_b_lookup(x, c_in, dy, dx, col));
        }
    }
    out
}

/// Classic direct convolution, 3x3 filter, pad 1, stride 1. The filter comes
/// flattened as `c_out x (c_in*9)` with tap order matching [`decode_tap`],
/// and the loop order (c_out, c_in, dy, dx, pixel) makes the accumulation
/// order identical to `gemm_dense(filter, im2col(x))`.
pub fn conv_direct(x: &Tensor3, filter_dense: &DenseMatrix) -> Result<Tensor3, ModelError> {
    let (c_in, height, width) = (x.channels(), x.height(), x.width());
    if filter_dense.cols() != c_in * 9 {
        return Err(ModelError::FilterCols {
            cols: filter_dense.cols(),
            want: c_in * 9,
        });
    }
    let c_out = filter_dense.rows();
    let n = height * width;
    let mut acc = vec![0.0f64; c_out * n];
    for co in 0..c_out {
        let out_plane = &mut acc[co * n..(co + 1) * n];
        for ci in 0..c_in {
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let w = filter_dense.at(co, ci * 9 + dy * 3 + dx) as f64;
                    for (pix, slot) in out_plane.iter_mut().enumerate() {
                        let y = (pix / width) as i64 + dy as i64 - 1;
                        let xx = (pix % width) as i64 + dx as i64 - 1;
                        if y >= 0 && y < height as i64 && xx >= 0 && xx < width as i64 {
                            *slot += w * x.at(ci, y as usize, xx as usize) as f64;
                        }
                    }
                }
            }
        }
    }
    Tensor3::new(
        c_out,
        height,
        width,
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn to_dense_example() {
        let a = SparseMatrix::from_parts(
            4,
            4,
            vec![0, 2, 3, 3, 4],
            vec![0, 2, 1, 3],
            vec![2.0, 1.0, 3.0, 4.0],
        )
        .unwrap();
        let d = to_dense(&a);
        #[rustfmt::skip]
        let expect = [
            2.0, 0.0, 1.0, 0.0,
            0.0, 3.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 4.0,
        ];
        assert_eq!(d.data(), &expect);
    }

    #[test]
    fn to_dense_empty_and_full() {
        let empty = SparseMatrix::from_parts(2, 2, vec![0, 0, 0], vec![], vec![]).unwrap();
        assert!(to_dense(&empty).data().iter().all(|&v| v == 0.0));
        let full = SparseMatrix::from_parts(
            2,
            2,
            vec![0, 2, 4],
            vec![0, 1, 0, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(to_dense(&full).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gemm_identity_and_hand_multiply() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = DenseMatrix::identity(2);
        assert_eq!(gemm_dense(&a, &i).unwrap(), a);

        let b = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let c = gemm_dense(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 4.0, 3.0, 8.0]);

        let z = DenseMatrix::zeros(2, 3);
        assert!(gemm_dense(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_rejects_mismatched_dims() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 2);
        assert!(gemm_dense(&a, &b).is_err());
    }

    #[test]
    fn im2col_single_pixel() {
        // 1x1 image: only the center tap sees the pixel.
        let x = Tensor3::new(1, 1, 1, vec![7.0]).unwrap();
        let b = im2col(&x);
        for k in 0..9 {
            let expect = if k == 4 { 7.0 } else { 0.0 };
            assert_eq!(b.at(k, 0), expect, "tap {k}");
        }
    }

    #[test]
    fn im2col_coordinate_decode() {
        // Pixel (0,0) of a 2x2 image, tap k=5 i.e. (dy,dx)=(1,2) reads x[0,0,1].
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = im2col(&x);
        assert_eq!(b.at(5, 0), 2.0);
    }

    #[test]
    fn virtual_lookup_matches_im2col_exhaustively() {
        let x = Tensor3::random(2, 3, 3, 4);
        let b = im2col(&x);
        for k in 0..x.channels() * 9 {
            let (c, dy, dx) = decode_tap(k);
            for n in 0..9 {
                assert_eq!(virtual_b_lookup(&x, c, dy, dx, n), b.at(k, n));
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor3::random(1, 3, 3, 5);
        // Single center-tap filter of weight 1 reproduces the input.
        let mut f = DenseMatrix::zeros(1, 9);
        f.set(0, 4, 1.0);
        let y = conv_direct(&x, &f).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_overlap_counts() {
        let x = Tensor3::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let f = DenseMatrix::new(1, 9, vec![1.0; 9]).unwrap();
        let y = conv_direct(&x, &f).unwrap();
        #[rustfmt::skip]
        let expect = [
            4.0, 6.0, 4.0,
            6.0, 9.0, 6.0,
            4.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn conv_zero_filter() {
        let x = Tensor3::random(2, 4, 4, 6);
        let f = DenseMatrix::zeros(3, 18);
        let y = conv_direct(&x, &f).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_equals_gemm_of_im2col_bit_exactly() {
        let x = Tensor3::random(2, 4, 5, 11);
        let f = to_dense(&SparseMatrix::random(3, 18, 0.5, 12).unwrap());
        let direct = conv_direct(&x, &f).unwrap();
        let via_gemm = gemm_dense(&f, &im2col(&x)).unwrap();
        assert_eq!(direct.data(), via_gemm.data());
    }
}
