//! Domain types: compressed-row sparse matrices, row-major dense matrices,
//! CHW tensors, and the two problem descriptions (SpMM and 3x3 convolution).
//!
//! All types are immutable after construction; constructors validate every
//! invariant and are the only way to obtain a value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

/// Validation errors for domain-type construction.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("row_ptr length {got} does not match rows+1 = {want}")]
    RowPtrLength { got: usize, want: usize },
    #[error("row_ptr does not start at 0")]
    RowPtrStart,
    #[error("row_ptr monotonicity violation at row {row}")]
    RowPtrMonotonic { row: usize },
    #[error("row_ptr[rows] = {got} does not match nnz = {nnz}")]
    RowPtrEnd { got: usize, nnz: usize },
    #[error("column index {col} out of bounds (cols = {cols}) in row {row}")]
    ColOutOfBounds { row: usize, col: usize, cols: usize },
    #[error("column indices not strictly increasing in row {row}")]
    ColOrder { row: usize },
    #[error("values length {got} does not match nnz = {nnz}")]
    ValuesLength { got: usize, nnz: usize },
    #[error("non-finite value at nonzero {index}")]
    NonFiniteValue { index: usize },
    #[error("explicit zero stored at nonzero {index}")]
    ExplicitZero { index: usize },
    #[error("density {0} out of range (0, 1]")]
    DensityRange(f64),
    #[error("data length {got} does not match {rows}x{cols}")]
    DenseDataLength {
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("tensor data length {got} does not match {channels}x{height}x{width}")]
    TensorDataLength {
        got: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("sparse matrix is {rows}x{cols}, expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("n must be at least 1")]
    BadN,
    #[error("image dimensions must be at least 1x1")]
    BadImage,
    #[error("filter has {cols} columns, expected c_in*9 = {want}")]
    FilterCols { cols: usize, want: usize },
}

/// Sparse matrix in compressed row form with sorted, duplicate-free columns.
///
/// Stored values are finite and nonzero; an explicit zero is rejected at
/// construction so nonzero accounting stays unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f32>,
}

impl SparseMatrix {
    /// Builds a matrix from raw compressed-row arrays, validating every
    /// invariant. Errors name the offending row or nonzero index.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if row_ptr.len() != rows + 1 {
            return Err(ModelError::RowPtrLength {
                got: row_ptr.len(),
                want: rows + 1,
            });
        }
        if row_ptr[0] != 0 {
            return Err(ModelError::RowPtrStart);
        }
        for r in 0..rows {
            if row_ptr[r + 1] < row_ptr[r] {
                return Err(ModelError::RowPtrMonotonic { row: r });
            }
        }
        let nnz = row_ptr[rows];
        if col_idx.len() != nnz {
            return Err(ModelError::RowPtrEnd {
                got: nnz,
                nnz: col_idx.len(),
            });
        }
        if values.len() != nnz {
            return Err(ModelError::ValuesLength {
                got: values.len(),
                nnz,
            });
        }
        for r in 0..rows {
            let mut prev: Option<usize> = None;
            for &c in &col_idx[row_ptr[r]..row_ptr[r + 1]] {
                if c >= cols {
                    return Err(ModelError::ColOutOfBounds {
                        row: r,
                        col: c,
                        cols,
                    });
                }
                if let Some(p) = prev {
                    if c <= p {
                        return Err(ModelError::ColOrder { row: r });
                    }
                }
                prev = Some(c);
            }
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteValue { index: i });
            }
            if *v == 0.0 {
                return Err(ModelError::ExplicitZero { index: i });
            }
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Deterministic random matrix: `round(rows*cols*density)` positions drawn
    /// without replacement, values from [`random_values`].
    ///
    /// The generator is frozen: a ChaCha8 stream seeded with `seed` first
    /// drives a partial Fisher-Yates draw of linear positions (one
    /// `gen_range(i..total)` call per nonzero), then continues into the value
    /// draw. Identical inputs always produce identical matrices.
    pub fn random(rows: usize, cols: usize, density: f64, seed: u64) -> Result<Self, ModelError> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(ModelError::DensityRange(density));
        }
        let total = rows * cols;
        let nnz = ((total as f64) * density).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Partial Fisher-Yates over the virtual array 0..total; only the
        // displaced entries are materialized.
        let mut displaced: HashMap<usize, usize> = HashMap::new();
        let mut picked = Vec::with_capacity(nnz);
        for i in 0..nnz {
            let j = rng.gen_range(i..total);
            let vi = *displaced.get(&i).unwrap_or(&i);
            let vj = *displaced.get(&j).unwrap_or(&j);
            picked.push(vj);
            displaced.insert(j, vi);
        }
        picked.sort_unstable();

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(nnz);
        for &p in &picked {
            row_ptr[p / cols + 1] += 1;
            col_idx.push(p % cols);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let values = draw_values(nnz, &mut rng);
        Self::from_parts(rows, cols, row_ptr, col_idx, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Fraction of stored positions: nnz / (rows*cols), 0 for a degenerate
    /// zero-area matrix.
    pub fn density(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            0.0
        } else {
            self.nnz() as f64 / total as f64
        }
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    /// Iterates one row's `(col, value)` pairs in column order.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Iterates all `(row, col, value)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }
}

/// Frozen value generator shared by [`SparseMatrix::random`] and the SMTX
/// reader's value synthesis: magnitude uniform in [0.1, 1), random sign, two
/// ChaCha8 draws per value.
pub fn random_values(count: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_values(count, &mut rng)
}

fn draw_values(count: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..count)
        .map(|_| {
            let magnitude = rng.gen_range(0.1f32..1.0);
            if rng.gen::<bool>() {
                -magnitude
            } else {
                magnitude
            }
        })
        .collect()
}

/// Dense matrix, C-style row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::DenseDataLength {
                got: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Deterministic dense matrix filled by [`random_values`]; test and
    /// tuning input plumbing.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            data: random_values(rows * cols, seed),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row_slice(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Rank-3 tensor in channel-major (CHW) layout; conv activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if data.len() != channels * height * width {
            return Err(ModelError::TensorDataLength {
                got: data.len(),
                channels,
                height,
                width,
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Deterministic tensor filled by [`random_values`].
    pub fn random(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            channels,
            height,
            width,
            data: random_values(channels * height * width, seed),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f32) {
        self.data[(channel * self.height + y) * self.width + x] = value;
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// SpMM problem: sparse A (m x k) times dense B (k x n).
#[derive(Debug, Clone)]
pub struct SpmmProblem {
    m: usize,
    k: usize,
    n: usize,
    a: SparseMatrix,
}

impl SpmmProblem {
    pub fn new(a: SparseMatrix, n: usize) -> Result<Self, ModelError> {
        if n < 1 {
            return Err(ModelError::BadN);
        }
        Ok(Self {
            m: a.rows(),
            k: a.cols(),
            n,
            a,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a(&self) -> &SparseMatrix {
        &self.a
    }
}

/// 3x3, pad-1, stride-1 convolution over an `height x width` image with a
/// sparse filter of shape `c_out x (c_in*9)`.
#[derive(Debug, Clone)]
pub struct ConvProblem {
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    filter: SparseMatrix,
}

impl ConvProblem {
    pub fn new(
        filter: SparseMatrix,
        height: usize,
        width: usize,
        c_in: usize,
    ) -> Result<Self, ModelError> {
        if height < 1 || width < 1 {
            return Err(ModelError::BadImage);
        }
        if filter.cols() != c_in * 9 {
            return Err(ModelError::FilterCols {
                cols: filter.cols(),
                want: c_in * 9,
            });
        }
        Ok(Self {
            height,
            width,
            c_in,
            c_out: filter.rows(),
            filter,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn filter(&self) -> &SparseMatrix {
        &self.filter
    }

    /// Dimensions of the induced virtual SpMM: M = c_out, K = c_in*9,
    /// N = height*width.
    pub fn induced_dims(&self) -> (usize, usize, usize) {
        (self.c_out, self.c_in * 9, self.height * self.width)
    }
}

/// Decodes a reduction-axis index of the virtual SpMM into
/// `(input channel, dy, dx)` filter-tap coordinates, each offset in {0,1,2}.
#[inline]
pub fn decode_tap(k: usize) -> (usize, usize, usize) {
    (k / 9, (k % 9) / 3, k % 3)
}
