//! Deterministic interpreter for kernel programs under the SIMT machine
//! model, the static metrics it shares with the estimator, and the ordinal
//! cost model.
//!
//! Hardware concurrency is replaced by a fixed order: blocks in row-major
//! grid order, groups ascending, lanes 0..gsy, group accumulators reduced in
//! ascending group index. Accumulation is single precision throughout, so
//! two runs are bit-identical.

use crate::codegen::{
    validate_program, Guard, Instruction, KernelProgram, MachineParams, ProblemDims,
};
use crate::model::{DenseMatrix, Tensor3};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("program expects a {want} input")]
    WrongInputKind { want: &'static str },
    #[error("B is {got_rows}x{got_cols}, program expects {want_rows}x{want_cols}")]
    MatrixDims {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("input tensor is {got:?}, program expects {want:?}")]
    TensorDims {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("invalid program: {0}")]
    Invalid(String),
}

/// Static instruction counts for one thread group (equivalently, per-lane
/// execution counts: every lane executes every instruction once).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCounts {
    pub loads: u64,
    pub fmas: u64,
    pub guarded: u64,
}

/// Per-block counts, blocks in row-major grid order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCounts {
    pub groups: Vec<GroupCounts>,
    pub slots: usize,
}

/// Everything the cost model reads. Computable from the program alone;
/// execution only cross-checks the lane counters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMetrics {
    /// Total FMA lane-executions over the whole grid.
    pub lane_fma: u64,
    /// Total B-load lane-executions (plain and virtual).
    pub b_loads: u64,
    /// Lane-executions of Mixed-guard loads.
    pub guarded_loads: u64,
    pub per_block: Vec<BlockCounts>,
    pub max_acc_slots: usize,
    /// Registers reserved but unused: sum over block rows of
    /// `(max_slots - slots) * gsy`.
    pub wasted_registers: u64,
    pub constant_footprint: u64,
    pub spill: bool,
    /// Max over mean FMA count across nonempty groups (1.0 when idle).
    pub group_imbalance: f64,
    /// Max over mean FMA count across blocks (1.0 when idle).
    pub block_imbalance: f64,
    pub gy: usize,
    pub gsy: usize,
}

impl KernelMetrics {
    pub fn from_program(p: &KernelProgram) -> Self {
        let gsy = p.gsy as u64;
        let mut per_block = Vec::with_capacity(p.block_rows.len() * p.n_blocks);
        let mut lane_fma = 0u64;
        let mut b_loads = 0u64;
        let mut guarded_loads = 0u64;
        for row in &p.block_rows {
            for col in 0..p.n_blocks {
                let mut groups = Vec::with_capacity(p.gy);
                for group in row.stream(col) {
                    let mut counts = GroupCounts::default();
                    for insn in group {
                        match insn {
                            Instruction::LoadB { .. } => counts.loads += 1,
                            Instruction::LoadBVirtual { guard, .. } => {
                                counts.loads += 1;
                                if *guard == Guard::Mixed {
                                    counts.guarded += 1;
                                }
                            }
                            Instruction::Fma { .. } => counts.fmas += 1,
                        }
                    }
                    lane_fma += counts.fmas * gsy;
                    b_loads += counts.loads * gsy;
                    guarded_loads += counts.guarded * gsy;
                    groups.push(counts);
                }
                per_block.push(BlockCounts {
                    groups,
                    slots: row.slots,
                });
            }
        }
        let max_acc_slots = p.max_slots();
        let wasted_registers = p
            .block_rows
            .iter()
            .map(|r| ((max_acc_slots - r.slots) * p.gsy) as u64)
            .sum();

        let group_fmas: Vec<u64> = per_block
            .iter()
            .flat_map(|b| b.groups.iter().map(|g| g.fmas))
            .filter(|&f| f > 0)
            .collect();
        let group_imbalance = imbalance(&group_fmas);
        let block_fmas: Vec<u64> = per_block
            .iter()
            .map(|b| b.groups.iter().map(|g| g.fmas).sum())
            .collect();
        let block_imbalance = imbalance(&block_fmas);

        Self {
            lane_fma,
            b_loads,
            guarded_loads,
            per_block,
            max_acc_slots,
            wasted_registers,
            constant_footprint: p.constant_footprint,
            spill: p.spill,
            group_imbalance,
            block_imbalance,
            gy: p.gy,
            gsy: p.gsy,
        }
    }

    /// FMA instructions summed over executed blocks (lane_fma / gsy). For
    /// SpMM this counts the shared stream once per grid column; the
    /// program-text count is `KernelProgram::total_fma`.
    pub fn total_fma_instructions(&self) -> u64 {
        self.per_block
            .iter()
            .flat_map(|b| b.groups.iter().map(|g| g.fmas))
            .sum()
    }

    pub fn total_load_instructions(&self) -> u64 {
        self.per_block
            .iter()
            .flat_map(|b| b.groups.iter().map(|g| g.loads))
            .sum()
    }
}

fn imbalance(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.is_empty() {
        return 1.0;
    }
    let mean = total as f64 / counts.len() as f64;
    let max = *counts.iter().max().unwrap() as f64;
    max / mean
}

/// Run-time operand of [`execute`].
#[derive(Debug, Clone, Copy)]
pub enum ExecInput<'a> {
    Matrix(&'a DenseMatrix),
    Tensor(&'a Tensor3),
}

/// Result matrix or tensor, matching the program kind.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputData {
    Matrix(DenseMatrix),
    Tensor(Tensor3),
}

impl OutputData {
    pub fn as_matrix(&self) -> Option<&DenseMatrix> {
        match self {
            OutputData::Matrix(m) => Some(m),
            OutputData::Tensor(_) => None,
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor3> {
        match self {
            OutputData::Tensor(t) => Some(t),
            OutputData::Matrix(_) => None,
        }
    }

    /// Flat view of the values regardless of shape.
    pub fn data(&self) -> &[f32] {
        match self {
            OutputData::Matrix(m) => m.data(),
            OutputData::Tensor(t) => t.data(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub output: OutputData,
    pub metrics: KernelMetrics,
}

/// Interprets the program: output = A*B for SpMM, the 3x3 pad-1 convolution
/// for conv. Fully deterministic; the kernel adds into a zero-filled output.
pub fn execute(
    p: &KernelProgram,
    input: ExecInput<'_>,
    machine: &MachineParams,
) -> Result<ExecutionReport, ExecError> {
    let diags = validate_program(p, machine);
    if let Some(first) = diags.first() {
        return Err(ExecError::Invalid(first.to_string()));
    }

    let (m, k_dim, n) = p.dims.mkn();
    let gsy = p.gsy;
    let mut dyn_fma = 0u64;
    let mut dyn_loads = 0u64;
    let mut dyn_guarded = 0u64;

    enum Src<'a> {
        Dense(&'a DenseMatrix),
        Virtual {
            x: &'a Tensor3,
            height: usize,
            width: usize,
        },
    }
    let src = match (&p.dims, input) {
        (ProblemDims::Spmm { .. }, ExecInput::Matrix(b)) => {
            if b.rows() != k_dim || b.cols() != n {
                return Err(ExecError::MatrixDims {
                    got_rows: b.rows(),
                    got_cols: b.cols(),
                    want_rows: k_dim,
                    want_cols: n,
                });
            }
            Src::Dense(b)
        }
        (
            ProblemDims::Conv {
                height,
                width,
                c_in,
                ..
            },
            ExecInput::Tensor(x),
        ) => {
            let got = (x.channels(), x.height(), x.width());
            let want = (*c_in, *height, *width);
            if got != want {
                return Err(ExecError::TensorDims { got, want });
            }
            Src::Virtual {
                x,
                height: *height,
                width: *width,
            }
        }
        (ProblemDims::Spmm { .. }, _) => return Err(ExecError::WrongInputKind { want: "matrix" }),
        (ProblemDims::Conv { .. }, _) => return Err(ExecError::WrongInputKind { want: "tensor" }),
    };

    let mut c = DenseMatrix::zeros(m, n);
    let mut breg = vec![0.0f32; gsy];
    for row in &p.block_rows {
        let mut tile = vec![0.0f32; row.slots * gsy];
        let mut group_acc = vec![0.0f32; row.slots * gsy];
        for col in 0..p.n_blocks {
            let n_base = col * gsy;
            tile.fill(0.0);
            for group in row.stream(col) {
                group_acc.fill(0.0);
                for insn in group {
                    match insn {
                        Instruction::LoadB { k, .. } => {
                            let Src::Dense(b) = &src else { unreachable!() };
                            breg.copy_from_slice(&b.row_slice(*k)[n_base..n_base + gsy]);
                            dyn_loads += gsy as u64;
                        }
                        Instruction::LoadBVirtual {
                            c_in,
                            dy,
                            dx,
                            guard,
                            ..
                        } => {
                            let Src::Virtual { x, height, width } = &src else {
                                unreachable!()
                            };
                            for (t, reg) in breg.iter_mut().enumerate() {
                                let pix = n_base + t;
                                let y = (pix / width) as i64 + *dy as i64 - 1;
                                let xx = (pix % width) as i64 + *dx as i64 - 1;
                                *reg = if y >= 0
                                    && y < *height as i64
                                    && xx >= 0
                                    && xx < *width as i64
                                {
                                    x.at(*c_in, y as usize, xx as usize)
                                } else {
                                    0.0
                                };
                            }
                            dyn_loads += gsy as u64;
                            if *guard == Guard::Mixed {
                                dyn_guarded += gsy as u64;
                            }
                        }
                        Instruction::Fma { acc, value, .. } => {
                            let dst = &mut group_acc[acc * gsy..(acc + 1) * gsy];
                            for (d, b) in dst.iter_mut().zip(&breg) {
                                *d += value * b;
                            }
                            dyn_fma += gsy as u64;
                        }
                    }
                }
                for (t, g) in tile.iter_mut().zip(&group_acc) {
                    *t += *g;
                }
            }
            for s in 0..row.slots {
                let out = &mut c.row_slice_mut(row.m_start + s)[n_base..n_base + gsy];
                for (o, v) in out.iter_mut().zip(&tile[s * gsy..(s + 1) * gsy]) {
                    *o += *v;
                }
            }
        }
    }

    let metrics = KernelMetrics::from_program(p);
    debug_assert_eq!(dyn_fma, metrics.lane_fma);
    debug_assert_eq!(dyn_loads, metrics.b_loads);
    debug_assert_eq!(dyn_guarded, metrics.guarded_loads);

    let output = match p.dims {
        ProblemDims::Spmm { .. } => OutputData::Matrix(c),
        ProblemDims::Conv {
            height,
            width,
            c_out,
            ..
        } => OutputData::Tensor(
            Tensor3::new(c_out, height, width, c.into_data())
                .expect("output tile has tensor shape"),
        ),
    };
    Ok(ExecutionReport { output, metrics })
}

/// Ordinal cost of a program from its static metrics.
///
/// Per group: `c_load*loads + c_fma*fmas + c_guard*guarded` (per-lane
/// counts). Per block: the max over its groups plus `c_reduce*gy*slots` for
/// the epilogue. Blocks run in waves of `sm_count` in row-major grid order;
/// the kernel cost is the sum over waves of the slowest block. A spill
/// multiplies `c_fma` by `spill_penalty` first, modeling immediate-move
/// expansion once the constant cache is exceeded.
pub fn estimate_cost(metrics: &KernelMetrics, machine: &MachineParams) -> f64 {
    let c_fma = if metrics.spill {
        machine.c_fma * machine.spill_penalty
    } else {
        machine.c_fma
    };
    let block_costs: Vec<f64> = metrics
        .per_block
        .iter()
        .map(|b| {
            let worst_group = b
                .groups
                .iter()
                .map(|g| {
                    machine.c_load * g.loads as f64
                        + c_fma * g.fmas as f64
                        + machine.c_guard * g.guarded as f64
                })
                .fold(0.0, f64::max);
            worst_group + machine.c_reduce * (metrics.gy * b.slots) as f64
        })
        .collect();
    block_costs
        .chunks(machine.sm_count.max(1))
        .map(|wave| wave.iter().copied().fold(0.0, f64::max))
        .sum()
}

/// Worst-case scaled relative error between a kernel output and its oracle:
/// `|a - e| / max(|e|, max_j |e_j|)` over all elements.
///
/// The denominator floors at the result's own largest magnitude because pure
/// elementwise relative error is unbounded where accumulation crosses zero;
/// everywhere else this is the ordinary relative error.
pub fn max_relative_error(actual: &[f32], expected: &[f32]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "shape mismatch");
    let scale = expected
        .iter()
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| {
            let diff = (a as f64 - e as f64).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / (e as f64).abs().max(scale).max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

/// Key-value dump of the scalar metrics plus the derived cost.
pub fn write_report(p: &KernelProgram, metrics: &KernelMetrics, machine: &MachineParams) -> String {
    let mut out = String::new();
    match p.dims {
        ProblemDims::Spmm { m, k, n } => {
            let _ = writeln!(out, "kind spmm\nm {m}\nk {k}\nn {n}");
        }
        ProblemDims::Conv {
            height,
            width,
            c_in,
            c_out,
        } => {
            let _ = writeln!(
                out,
                "kind conv\nh {height}\nw {width}\ncin {c_in}\ncout {c_out}"
            );
        }
    }
    let _ = writeln!(out, "lane_fma {}", metrics.lane_fma);
    let _ = writeln!(out, "b_loads {}", metrics.b_loads);
    let _ = writeln!(out, "guarded_loads {}", metrics.guarded_loads);
    let _ = writeln!(out, "fma_instructions {}", p.total_fma());
    let _ = writeln!(out, "load_instructions {}", p.total_loads());
    let _ = writeln!(out, "max_acc_slots {}", metrics.max_acc_slots);
    let _ = writeln!(out, "wasted_registers {}", metrics.wasted_registers);
    let _ = writeln!(out, "constant_footprint {}", metrics.constant_footprint);
    let _ = writeln!(out, "spill {}", u8::from(metrics.spill));
    let _ = writeln!(out, "group_imbalance {}", metrics.group_imbalance);
    let _ = writeln!(out, "block_imbalance {}", metrics.block_imbalance);
    let _ = writeln!(out, "cost {}", estimate_cost(metrics, machine));
    // Per-group instruction counts, one line per stored stream (conv lists
    // each specialized grid column; spmm shares one stream per row).
    for (i, row) in p.block_rows.iter().enumerate() {
        for (v, variant) in row.streams.iter().enumerate() {
            for (g, group) in variant.iter().enumerate() {
                let mut counts = GroupCounts::default();
                for insn in group {
                    match insn {
                        Instruction::LoadB { .. } => counts.loads += 1,
                        Instruction::LoadBVirtual { guard, .. } => {
                            counts.loads += 1;
                            if *guard == Guard::Mixed {
                                counts.guarded += 1;
                            }
                        }
                        Instruction::Fma { .. } => counts.fmas += 1,
                    }
                }
                let col = if row.streams.len() > 1 {
                    format!(" col={v}")
                } else {
                    String::new()
                };
                let _ = writeln!(
                    out,
                    "group_counts row={i}{col} group={g} loads={} fma={} guarded={}",
                    counts.loads, counts.fmas, counts.guarded
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::compile_spmm;
    use crate::model::{SparseMatrix, SpmmProblem};
    use crate::schedule::TileConfig;

    fn example_problem() -> SpmmProblem {
        let a = SparseMatrix::from_parts(
            4,
            4,
            vec![0, 2, 3, 3, 4],
            vec![0, 2, 1, 3],
            vec![2.0, 1.0, 3.0, 4.0],
        )
        .unwrap();
        SpmmProblem::new(a, 4).unwrap()
    }

    #[test]
    fn identity_input_reproduces_dense_a() {
        let p = example_problem();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let b = DenseMatrix::identity(4);
        let rep = execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()).unwrap();
        let out = rep.output.as_matrix().unwrap();
        #[rustfmt::skip]
        let expect = [
            2.0, 0.0, 1.0, 0.0,
            0.0, 3.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 4.0,
        ];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn ones_input_broadcasts_row_sums() {
        let p = example_problem();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let b = DenseMatrix::new(4, 4, vec![1.0; 16]).unwrap();
        let rep = execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()).unwrap();
        let out = rep.output.as_matrix().unwrap();
        #[rustfmt::skip]
        let expect = [
            3.0, 3.0, 3.0, 3.0,
            3.0, 3.0, 3.0, 3.0,
            0.0, 0.0, 0.0, 0.0,
            4.0, 4.0, 4.0, 4.0,
        ];
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn zero_stream_program_is_idle() {
        let a = SparseMatrix::from_parts(4, 4, vec![0; 5], vec![], vec![]).unwrap();
        let p = SpmmProblem::new(a, 4).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let b = DenseMatrix::new(4, 4, vec![5.0; 16]).unwrap();
        let rep = execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()).unwrap();
        assert!(rep.output.data().iter().all(|&v| v == 0.0));
        assert_eq!(rep.metrics.lane_fma, 0);
    }

    #[test]
    fn lane_fma_matches_work_law() {
        let a = SparseMatrix::random(12, 20, 0.3, 8).unwrap();
        let nnz = a.nnz() as u64;
        let p = SpmmProblem::new(a, 8).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(3, 2, 4), &MachineParams::default()).unwrap();
        let metrics = KernelMetrics::from_program(&prog);
        assert_eq!(metrics.lane_fma, nnz * 8);
    }

    #[test]
    fn wasted_registers_from_uneven_rows() {
        let p = example_problem();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let metrics = KernelMetrics::from_program(&prog);
        // Rows own 1 and 3 slots; the 1-slot row wastes (3-1)*gsy registers.
        assert_eq!(metrics.max_acc_slots, 3);
        assert_eq!(metrics.wasted_registers, 4);
    }

    #[test]
    fn cost_formula_example() {
        // Single block, single group, 4 loads + 16 FMAs.
        let a = SparseMatrix::random(4, 4, 1.0, 0).unwrap();
        let p = SpmmProblem::new(a, 4).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(1, 1, 1), &MachineParams::default()).unwrap();
        let mut metrics = KernelMetrics::from_program(&prog);
        let machine = MachineParams {
            c_load: 2.0,
            c_fma: 1.0,
            c_guard: 1.0,
            c_reduce: 0.0,
            spill_penalty: 4.0,
            ..MachineParams::default()
        };
        assert_eq!(estimate_cost(&metrics, &machine), 24.0);
        metrics.spill = true;
        assert_eq!(estimate_cost(&metrics, &machine), 72.0);
    }

    #[test]
    fn empty_metrics_cost_zero() {
        let metrics = KernelMetrics {
            lane_fma: 0,
            b_loads: 0,
            guarded_loads: 0,
            per_block: vec![],
            max_acc_slots: 0,
            wasted_registers: 0,
            constant_footprint: 0,
            spill: false,
            group_imbalance: 1.0,
            block_imbalance: 1.0,
            gy: 1,
            gsy: 1,
        };
        assert_eq!(estimate_cost(&metrics, &MachineParams::default()), 0.0);
    }

    #[test]
    fn execution_is_bit_deterministic() {
        let a = SparseMatrix::random(16, 16, 0.4, 2).unwrap();
        let p = SpmmProblem::new(a, 12).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(4, 3, 2), &MachineParams::default()).unwrap();
        let b = DenseMatrix::random(16, 12, 77);
        let r1 = execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()).unwrap();
        let r2 = execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()).unwrap();
        assert_eq!(r1.output.data(), r2.output.data());
        assert_eq!(r1.metrics, r2.metrics);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = example_problem();
        let prog = compile_spmm(&p, &TileConfig::new(1, 1, 1), &MachineParams::default()).unwrap();
        let b = DenseMatrix::zeros(3, 4);
        assert!(matches!(
            execute(&prog, ExecInput::Matrix(&b), &MachineParams::default()),
            Err(ExecError::MatrixDims { .. })
        ));
    }
}
