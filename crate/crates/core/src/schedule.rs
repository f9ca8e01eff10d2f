//! Compile-time load balancing: output rows are partitioned across thread
//! blocks by nonzero count, and each block row's nonzeros are sliced into
//! equally loaded thread groups.
//!
//! Everything here is pure and runs in the inspector phase; the executor
//! generated from a schedule contains no balancing logic at all.

use crate::model::{SparseMatrix, SpmmProblem};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("m_blocks = {m_blocks} out of range [1, {rows}]")]
    BadMBlocks { m_blocks: usize, rows: usize },
    #[error("n_blocks = {n_blocks} does not divide n = {n}")]
    NBlocksDivides { n_blocks: usize, n: usize },
    #[error("gy must be at least 1")]
    BadGy,
}

/// The three tunable tiling parameters. The lane count per group is derived:
/// `gsy = n / n_blocks` (the inner loop over N tiles is fixed to one
/// iteration, so each group covers its block's whole N extent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileConfig {
    pub m_blocks: usize,
    pub n_blocks: usize,
    pub gy: usize,
}

impl TileConfig {
    pub fn new(m_blocks: usize, n_blocks: usize, gy: usize) -> Self {
        Self {
            m_blocks,
            n_blocks,
            gy,
        }
    }

    /// Derived lanes per group, or an error when `n_blocks` does not divide `n`.
    pub fn gsy(&self, n: usize) -> Result<usize, ScheduleError> {
        if self.n_blocks == 0 || !n.is_multiple_of(self.n_blocks) {
            return Err(ScheduleError::NBlocksDivides {
                n_blocks: self.n_blocks,
                n,
            });
        }
        Ok(n / self.n_blocks)
    }
}

/// One nonzero of A as the scheduler hands it to the code generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nonzero {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Concrete per-block/per-group nonzero assignment for one grid.
///
/// The same schedule is shared by every grid column of a block row; column j
/// differs only in its N interval `[j*gsy, (j+1)*gsy)`.
#[derive(Debug, Clone)]
pub struct BlockSchedule {
    /// Per block-grid row, the half-open interval of A rows it owns.
    pub row_ranges: Vec<Range<usize>>,
    /// Per (block row, group): that group's slice of the block row's
    /// nonzeros, ordered column-major (k ascending, row ascending within k).
    pub groups: Vec<Vec<Vec<Nonzero>>>,
    pub gy: usize,
    pub gsy: usize,
}

impl BlockSchedule {
    pub fn per_group_nnz(&self) -> Vec<Vec<usize>> {
        self.groups
            .iter()
            .map(|gs| gs.iter().map(|g| g.len()).collect())
            .collect()
    }

    /// Soft block-balance metric: max block nnz over mean block nnz
    /// (1.0 when there is no work at all).
    pub fn block_imbalance(&self) -> f64 {
        let counts: Vec<usize> = self
            .groups
            .iter()
            .map(|gs| gs.iter().map(|g| g.len()).sum())
            .collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return 1.0;
        }
        let mean = total as f64 / counts.len() as f64;
        let max = *counts.iter().max().unwrap() as f64;
        max / mean
    }
}

/// Greedy prefix partition of A's rows into `m_blocks` contiguous ranges
/// with roughly equal nonzero counts.
///
/// Walking rows in order, block b closes at the first row where the running
/// nonzero count reaches `round(total_nnz * (b+1) / m_blocks)`, except that
/// every remaining block is always left at least one row.
pub fn partition_blocks(
    a: &SparseMatrix,
    m_blocks: usize,
) -> Result<Vec<Range<usize>>, ScheduleError> {
    let rows = a.rows();
    if m_blocks < 1 || m_blocks > rows {
        return Err(ScheduleError::BadMBlocks { m_blocks, rows });
    }
    let total = a.nnz();
    let mut ranges = Vec::with_capacity(m_blocks);
    let mut start = 0usize;
    let mut cum = 0usize;
    for b in 0..m_blocks {
        let remaining_after = m_blocks - b - 1;
        if b == m_blocks - 1 {
            ranges.push(start..rows);
            break;
        }
        let target = ((total as f64) * ((b + 1) as f64) / (m_blocks as f64)).round() as usize;
        let mut end = start;
        // Take at least one row, stopping early so every later block keeps one.
        loop {
            cum += a.row_nnz(end);
            end += 1;
            if cum >= target || end + remaining_after >= rows {
                break;
            }
        }
        ranges.push(start..end);
        start = end;
    }
    Ok(ranges)
}

/// Slices a block row's nonzeros into `gy` consecutive groups.
///
/// Nonzeros are ordered column-major (k ascending, row ascending within k)
/// and cut into slices of `ceil(block_nnz / gy)`; the last nonempty slice may
/// be short and slices past the nonzeros are empty.
pub fn partition_groups(
    a: &SparseMatrix,
    row_range: Range<usize>,
    gy: usize,
) -> Result<Vec<Vec<Nonzero>>, ScheduleError> {
    if gy < 1 {
        return Err(ScheduleError::BadGy);
    }
    let mut entries: Vec<Nonzero> = Vec::new();
    for r in row_range {
        for (c, v) in a.row(r) {
            entries.push(Nonzero {
                row: r,
                col: c,
                value: v,
            });
        }
    }
    // Rows were appended in ascending order, so a stable sort by column
    // keeps rows ascending within each column.
    entries.sort_by_key(|e| e.col);

    let block_nnz = entries.len();
    let target = block_nnz.div_ceil(gy);
    let mut slices = Vec::with_capacity(gy);
    for g in 0..gy {
        let lo = (g * target).min(block_nnz);
        let hi = ((g + 1) * target).min(block_nnz);
        slices.push(entries[lo..hi].to_vec());
    }
    Ok(slices)
}

/// Composes [`partition_blocks`] and [`partition_groups`] for every block row.
pub fn make_schedule(
    problem: &SpmmProblem,
    config: &TileConfig,
) -> Result<BlockSchedule, ScheduleError> {
    let gsy = config.gsy(problem.n())?;
    if config.gy < 1 {
        return Err(ScheduleError::BadGy);
    }
    let row_ranges = partition_blocks(problem.a(), config.m_blocks)?;
    let mut groups = Vec::with_capacity(row_ranges.len());
    for range in &row_ranges {
        groups.push(partition_groups(problem.a(), range.clone(), config.gy)?);
    }
    Ok(BlockSchedule {
        row_ranges,
        groups,
        gy: config.gy,
        gsy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SparseMatrix;

    fn example4x4() -> SparseMatrix {
        SparseMatrix::from_parts(
            4,
            4,
            vec![0, 2, 3, 3, 4],
            vec![0, 2, 1, 3],
            vec![2.0, 1.0, 3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn partition_blocks_example() {
        let a = example4x4();
        let ranges = partition_blocks(&a, 2).unwrap();
        assert_eq!(ranges, vec![0..1, 1..4]);
        let nnz: Vec<usize> = ranges
            .iter()
            .map(|r| r.clone().map(|row| a.row_nnz(row)).sum())
            .collect();
        assert_eq!(nnz, vec![2, 2]);
    }

    #[test]
    fn partition_blocks_single() {
        let a = example4x4();
        assert_eq!(partition_blocks(&a, 1).unwrap(), vec![0..4]);
    }

    #[test]
    fn partition_blocks_uniform_equal_height() {
        let a = SparseMatrix::from_parts(6, 2, vec![0, 1, 2, 3, 4, 5, 6], vec![0; 6], vec![1.0; 6])
            .unwrap();
        let ranges = partition_blocks(&a, 3).unwrap();
        assert_eq!(ranges, vec![0..2, 2..4, 4..6]);
    }

    #[test]
    fn partition_blocks_leaves_rows_for_trailing_blocks() {
        // All mass in the last row: earlier blocks are forced to one row each.
        let a = SparseMatrix::from_parts(4, 4, vec![0, 0, 0, 0, 3], vec![0, 1, 2], vec![1.0; 3])
            .unwrap();
        let ranges = partition_blocks(&a, 4).unwrap();
        assert_eq!(ranges, vec![0..1, 1..2, 2..3, 3..4]);
    }

    #[test]
    fn partition_blocks_rejects_out_of_range() {
        let a = example4x4();
        assert!(partition_blocks(&a, 5).is_err());
        assert!(partition_blocks(&a, 0).is_err());
    }

    #[test]
    fn partition_groups_example() {
        let a = example4x4();
        let slices = partition_groups(&a, 1..4, 2).unwrap();
        assert_eq!(
            slices,
            vec![
                vec![Nonzero {
                    row: 1,
                    col: 1,
                    value: 3.0
                }],
                vec![Nonzero {
                    row: 3,
                    col: 3,
                    value: 4.0
                }],
            ]
        );
    }

    #[test]
    fn partition_groups_single_group() {
        let a = example4x4();
        let slices = partition_groups(&a, 0..4, 1).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].len(), 4);
    }

    #[test]
    fn partition_groups_ceil_fill() {
        // 5 nonzeros over 4 groups: sizes [2, 2, 1, 0].
        let a = SparseMatrix::from_parts(
            1,
            5,
            vec![0, 5],
            vec![0, 1, 2, 3, 4],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        let slices = partition_groups(&a, 0..1, 4).unwrap();
        let sizes: Vec<usize> = slices.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 0]);
    }

    #[test]
    fn partition_groups_column_major_order() {
        // Two rows sharing column 0: row order must be ascending within k.
        let a = SparseMatrix::from_parts(
            2,
            2,
            vec![0, 2, 4],
            vec![0, 1, 0, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let slices = partition_groups(&a, 0..2, 1).unwrap();
        let order: Vec<(usize, usize)> = slices[0].iter().map(|e| (e.col, e.row)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn make_schedule_example() {
        let p = SpmmProblem::new(example4x4(), 4).unwrap();
        let s = make_schedule(&p, &TileConfig::new(2, 2, 2)).unwrap();
        assert_eq!(s.gsy, 2);
        assert_eq!(s.row_ranges, vec![0..1, 1..4]);
        assert_eq!(s.per_group_nnz(), vec![vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn make_schedule_zero_work_block_is_valid() {
        // Row 2 of the example is empty; a block holding only it schedules
        // fine with all-empty groups.
        let a = example4x4();
        let slices = partition_groups(&a, 2..3, 2).unwrap();
        assert_eq!(slices, vec![vec![], vec![]]);
    }

    #[test]
    fn make_schedule_rejects_non_dividing_n_blocks() {
        let p = SpmmProblem::new(example4x4(), 4).unwrap();
        assert!(make_schedule(&p, &TileConfig::new(2, 3, 2)).is_err());
    }

    #[test]
    fn schedule_coverage() {
        let a = SparseMatrix::random(16, 24, 0.3, 5).unwrap();
        let p = SpmmProblem::new(a.clone(), 8).unwrap();
        let s = make_schedule(&p, &TileConfig::new(4, 2, 3)).unwrap();
        let mut seen: Vec<(usize, usize)> = s
            .groups
            .iter()
            .flatten()
            .flatten()
            .map(|e| (e.row, e.col))
            .collect();
        seen.sort_unstable();
        let mut expect: Vec<(usize, usize)> = a.entries().map(|(r, c, _)| (r, c)).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
    }
}
