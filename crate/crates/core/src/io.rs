//! On-disk formats: SMTX sparse text, SRTD/SRT3 dense binary, and a lossy
//! dense debug text format.
//!
//! Decimal values are printed with Rust's shortest round-trip formatting, so
//! the text formats reproduce every f32 bit-exactly on read-back.

use crate::model::{random_values, DenseMatrix, ModelError, SparseMatrix, Tensor3};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated input")]
    Truncated,
    #[error("SMTX has no values line and no synthesis seed was supplied")]
    MissingValues,
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError::Parse {
        line,
        msg: msg.into(),
    })
}

// ---------------------------------------------------------------------------
// SMTX sparse text format
// ---------------------------------------------------------------------------

/// Renders a matrix in SMTX form: `rows,cols,nnz`, then row offsets, column
/// indices, and decimal values on one line each.
pub fn write_smtx(m: &SparseMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!("{},{},{}\n", m.rows(), m.cols(), m.nnz()));
    out.push_str(&join_usize(m.row_ptr()));
    out.push('\n');
    out.push_str(&join_usize(m.col_idx()));
    out.push('\n');
    out.push_str(
        &m.values()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" "),
    );
    out.push('\n');
    out
}

/// Parses SMTX text. The values line is optional; when absent, values are
/// synthesized with [`random_values`] and `value_seed`, which must then be
/// provided by the caller.
pub fn read_smtx(text: &str, value_seed: Option<u64>) -> Result<SparseMatrix, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(FormatError::Truncated)?;
    let dims: Vec<&str> = header.trim().split(',').collect();
    if dims.len() != 3 {
        return parse_err(1, "header must be rows,cols,nnz");
    }
    let rows = parse_usize(dims[0], 1)?;
    let cols = parse_usize(dims[1], 1)?;
    let nnz = parse_usize(dims[2], 1)?;

    let row_ptr = split_usize(lines.next().unwrap_or(""), 2)?;
    if row_ptr.len() != rows + 1 {
        return parse_err(2, format!("expected {} row offsets", rows + 1));
    }
    let col_idx = split_usize(lines.next().unwrap_or(""), 3)?;
    if col_idx.len() != nnz {
        return parse_err(3, format!("expected {nnz} column indices"));
    }
    let values = match lines.next() {
        Some(line) if !line.trim().is_empty() => {
            let vals: Result<Vec<f32>, _> =
                line.split_whitespace().map(|t| t.parse::<f32>()).collect();
            match vals {
                Ok(v) if v.len() == nnz => v,
                Ok(_) => return parse_err(4, format!("expected {nnz} values")),
                Err(e) => return parse_err(4, format!("bad value: {e}")),
            }
        }
        _ => match value_seed {
            Some(seed) => random_values(nnz, seed),
            None if nnz == 0 => vec![],
            None => return Err(FormatError::MissingValues),
        },
    };
    Ok(SparseMatrix::from_parts(
        rows, cols, row_ptr, col_idx, values,
    )?)
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_usize(tok: &str, line: usize) -> Result<usize, FormatError> {
    tok.trim().parse::<usize>().map_err(|e| FormatError::Parse {
        line,
        msg: format!("bad integer {tok:?}: {e}"),
    })
}

fn split_usize(line_text: &str, line: usize) -> Result<Vec<usize>, FormatError> {
    line_text
        .split_whitespace()
        .map(|t| parse_usize(t, line))
        .collect()
}

// ---------------------------------------------------------------------------
// Dense binary formats (SRTD matrices, SRT3 tensors)
// ---------------------------------------------------------------------------

const DENSE_MAGIC: &[u8; 4] = b"SRTD";
const TENSOR_MAGIC: &[u8; 4] = b"SRT3";

pub fn write_dense_bin<W: Write>(m: &DenseMatrix, w: &mut W) -> Result<(), FormatError> {
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dense_bin<R: Read>(r: &mut R) -> Result<DenseMatrix, FormatError> {
    expect_magic(r, DENSE_MAGIC, "SRTD")?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let data = read_f32s(r, rows * cols)?;
    Ok(DenseMatrix::new(rows, cols, data)?)
}

pub fn write_tensor3_bin<W: Write>(t: &Tensor3, w: &mut W) -> Result<(), FormatError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.channels() as u32).to_le_bytes())?;
    w.write_all(&(t.height() as u32).to_le_bytes())?;
    w.write_all(&(t.width() as u32).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor3_bin<R: Read>(r: &mut R) -> Result<Tensor3, FormatError> {
    expect_magic(r, TENSOR_MAGIC, "SRT3")?;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let data = read_f32s(r, c * h * w)?;
    Ok(Tensor3::new(c, h, w, data)?)
}

fn expect_magic<R: Read>(
    r: &mut R,
    magic: &[u8; 4],
    name: &'static str,
) -> Result<(), FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| FormatError::Truncated)?;
    if &buf != magic {
        return Err(FormatError::BadMagic { expected: name });
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| FormatError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>, FormatError> {
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| FormatError::Truncated)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Dense debug text format
// ---------------------------------------------------------------------------

/// Debug text form: `rows cols` then one row of decimals per line. The
/// shortest round-trip formatting makes this lossless in practice, but only
/// the binary format guarantees it.
pub fn write_dense_text(m: &DenseMatrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row_slice(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_dense_text(text: &str) -> Result<DenseMatrix, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(FormatError::Truncated)?;
    let mut it = header.split_whitespace();
    let rows = parse_usize(it.next().unwrap_or(""), 1)?;
    let cols = parse_usize(it.next().unwrap_or(""), 1)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.take(rows).enumerate() {
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f32>().map_err(|e| FormatError::Parse {
                line: i + 2,
                msg: format!("bad value {tok:?}: {e}"),
            })?);
        }
    }
    Ok(DenseMatrix::new(rows, cols, data)?)
}
