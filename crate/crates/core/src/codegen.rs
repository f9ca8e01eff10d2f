//! Executor-phase code generation: the compact transform with full unrolling.
//!
//! For every thread group the generator walks the scheduled nonzeros in
//! k-major order, emits one B load per distinct k, and bakes each sparse
//! value into an FMA instruction immediate. Nothing in the emitted program
//! indexes A at run time; the matrix exists only as instruction operands.
//!
//! The convolution path compiles the induced virtual SpMM (M = c_out,
//! K = c_in*9, N = H*W) and rewrites every B load into a virtual-tensor load
//! whose padding bounds check is resolved per output-pixel tile at compile
//! time: taps that are in bounds for a whole tile lose the check, taps that
//! are out of bounds for the whole tile are elided together with their FMAs.

use crate::io::FormatError;
use crate::model::{decode_tap, ConvProblem, SparseMatrix, SpmmProblem};
use crate::schedule::{make_schedule, Nonzero, ScheduleError, TileConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("{0}")]
    Schedule(#[from] ScheduleError),
    #[error("block size gy*gsy = {threads} exceeds max_threads_per_block = {max}")]
    TooManyThreads { threads: usize, max: usize },
    #[error(
        "reduction buffer {bytes} bytes (max_slots {slots} x gsy {gsy} x 4) \
         exceeds shared_mem_bytes = {max}"
    )]
    SharedMemExceeded {
        bytes: usize,
        slots: usize,
        gsy: usize,
        max: usize,
    },
}

/// Compile-time classification of a padding bounds check for one filter tap
/// against one output-pixel tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    /// Every lane's source pixel is in bounds; the check is dropped.
    Always,
    /// No lane's source pixel is in bounds; load and FMAs are dead code.
    Never,
    /// Some lanes are in bounds; the load keeps its per-lane check.
    Mixed,
}

/// Abstract SIMT instruction. `breg` names the live B register; the
/// generator uses a single register (r0) that each load overwrites.
#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    /// Each lane t loads B[k, n_base + t].
    LoadB { breg: u32, k: usize },
    /// Each lane t loads input[c_in, y(t)+dy-1, x(t)+dx-1] where (y,x) decode
    /// lane t's output pixel; out-of-bounds lanes substitute 0 under `Mixed`.
    LoadBVirtual {
        breg: u32,
        c_in: usize,
        dy: usize,
        dx: usize,
        guard: Guard,
    },
    /// ACC[acc][t] += value * breg[t]; `value` is the baked A immediate.
    Fma { acc: usize, breg: u32, value: f32 },
}

/// Modeled machine: structural limits plus the cost-model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineParams {
    pub sm_count: usize,
    pub max_threads_per_block: usize,
    pub shared_mem_bytes: usize,
    pub constant_cache_bytes: usize,
    pub c_load: f64,
    pub c_fma: f64,
    pub c_guard: f64,
    pub c_reduce: f64,
    pub spill_penalty: f64,
}

impl Default for MachineParams {
    /// Turing-class defaults: 40 SMs, 1024 threads per block, 48 KiB shared
    /// memory per block, 64 KiB constant cache.
    fn default() -> Self {
        Self {
            sm_count: 40,
            max_threads_per_block: 1024,
            shared_mem_bytes: 49152,
            constant_cache_bytes: 65536,
            c_load: 2.0,
            c_fma: 1.0,
            c_guard: 0.5,
            c_reduce: 1.0,
            spill_penalty: 4.0,
        }
    }
}

/// Problem dimensions echoed into the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemDims {
    Spmm {
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        height: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
    },
}

impl ProblemDims {
    /// The (M, K, N) the kernel actually iterates; for conv these are the
    /// induced virtual-SpMM dimensions.
    pub fn mkn(&self) -> (usize, usize, usize) {
        match *self {
            ProblemDims::Spmm { m, k, n } => (m, k, n),
            ProblemDims::Conv {
                height,
                width,
                c_in,
                c_out,
            } => (c_out, c_in * 9, height * width),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, ProblemDims::Conv { .. })
    }
}

/// One block-grid row of the program.
///
/// SpMM rows hold a single instruction-stream set shared by every grid
/// column (only the column's N base differs at run time). Conv rows hold one
/// set per grid column, because padding-guard specialization makes the
/// streams genuinely differ across output-pixel tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRow {
    pub m_start: usize,
    /// Accumulator slots = height of this row's range of A.
    pub slots: usize,
    /// `[variant][group][instruction]`; one variant when shared.
    pub streams: Vec<Vec<Vec<Instruction>>>,
}

impl BlockRow {
    /// The instruction stream executed by grid column `col`.
    pub fn stream(&self, col: usize) -> &[Vec<Instruction>] {
        if self.streams.len() == 1 {
            &self.streams[0]
        } else {
            &self.streams[col]
        }
    }
}

/// Fully unrolled SIMT kernel with A baked into immediates.
///
/// Epilogue contract (not represented as instructions): per block, group
/// accumulators are reduced in ascending group index, then the tile is added
/// into a zero-initialized C.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProgram {
    pub dims: ProblemDims,
    pub m_blocks: usize,
    pub n_blocks: usize,
    pub gy: usize,
    pub gsy: usize,
    pub machine: MachineParams,
    pub block_rows: Vec<BlockRow>,
    /// 4 bytes per baked FMA immediate, counted once per stored instruction.
    pub constant_footprint: u64,
    /// Set when the footprint exceeds the modeled constant cache; baked
    /// values then compile to immediate-move sequences instead.
    pub spill: bool,
}

impl KernelProgram {
    /// Total FMA instructions across all stored streams: the program-text
    /// work, and exactly `constant_footprint / 4`.
    pub fn total_fma(&self) -> u64 {
        self.block_rows
            .iter()
            .flat_map(|r| r.streams.iter().flatten().flatten())
            .filter(|i| matches!(i, Instruction::Fma { .. }))
            .count() as u64
    }

    /// Total load instructions across all stored streams.
    pub fn total_loads(&self) -> u64 {
        self.block_rows
            .iter()
            .flat_map(|r| r.streams.iter().flatten().flatten())
            .filter(|i| !matches!(i, Instruction::Fma { .. }))
            .count() as u64
    }

    /// Largest accumulator array any block needs; blocks with fewer rows
    /// still reserve this many registers per lane.
    pub fn max_slots(&self) -> usize {
        self.block_rows.iter().map(|r| r.slots).max().unwrap_or(0)
    }
}

fn check_limits(
    gy: usize,
    gsy: usize,
    max_slots: usize,
    machine: &MachineParams,
) -> Result<(), CompileError> {
    let threads = gy * gsy;
    if threads > machine.max_threads_per_block {
        return Err(CompileError::TooManyThreads {
            threads,
            max: machine.max_threads_per_block,
        });
    }
    let bytes = max_slots * gsy * 4;
    if bytes > machine.shared_mem_bytes {
        return Err(CompileError::SharedMemExceeded {
            bytes,
            slots: max_slots,
            gsy,
            max: machine.shared_mem_bytes,
        });
    }
    Ok(())
}

fn emit_spmm_group(slice: &[Nonzero], m_start: usize) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(slice.len() * 2);
    let mut live_k = None;
    for e in slice {
        if live_k != Some(e.col) {
            out.push(Instruction::LoadB { breg: 0, k: e.col });
            live_k = Some(e.col);
        }
        out.push(Instruction::Fma {
            acc: e.row - m_start,
            breg: 0,
            value: e.value,
        });
    }
    out
}

/// Generates the SpMM executor for one tile configuration.
pub fn compile_spmm(
    problem: &SpmmProblem,
    config: &TileConfig,
    machine: &MachineParams,
) -> Result<KernelProgram, CompileError> {
    let schedule = make_schedule(problem, config)?;
    let gsy = schedule.gsy;
    let max_slots = schedule
        .row_ranges
        .iter()
        .map(|r| r.len())
        .max()
        .unwrap_or(0);
    check_limits(config.gy, gsy, max_slots, machine)?;

    let mut block_rows = Vec::with_capacity(schedule.row_ranges.len());
    let mut fma_count = 0u64;
    for (range, groups) in schedule.row_ranges.iter().zip(&schedule.groups) {
        let streams: Vec<Vec<Instruction>> = groups
            .iter()
            .map(|slice| emit_spmm_group(slice, range.start))
            .collect();
        fma_count += streams
            .iter()
            .flatten()
            .filter(|i| matches!(i, Instruction::Fma { .. }))
            .count() as u64;
        block_rows.push(BlockRow {
            m_start: range.start,
            slots: range.len(),
            streams: vec![streams],
        });
    }

    let constant_footprint = 4 * fma_count;
    Ok(KernelProgram {
        dims: ProblemDims::Spmm {
            m: problem.m(),
            k: problem.k(),
            n: problem.n(),
        },
        m_blocks: config.m_blocks,
        n_blocks: config.n_blocks,
        gy: config.gy,
        gsy,
        machine: machine.clone(),
        block_rows,
        constant_footprint,
        spill: constant_footprint > machine.constant_cache_bytes as u64,
    })
}

/// Classifies the padding bounds check of filter tap `(dy, dx)` against the
/// output pixels in `n_tile` (row-major over an `height x width` image).
pub fn classify_guard(
    dy: usize,
    dx: usize,
    n_tile: Range<usize>,
    height: usize,
    width: usize,
) -> Guard {
    let mut any_in = false;
    let mut any_out = false;
    for n in n_tile {
        let y = (n / width) as i64 + dy as i64 - 1;
        let x = (n % width) as i64 + dx as i64 - 1;
        let in_bounds = y >= 0 && y < height as i64 && x >= 0 && x < width as i64;
        if in_bounds {
            any_in = true;
        } else {
            any_out = true;
        }
        if any_in && any_out {
            return Guard::Mixed;
        }
    }
    if any_out {
        Guard::Never
    } else {
        Guard::Always
    }
}

fn emit_conv_group(
    slice: &[Nonzero],
    m_start: usize,
    guards: &[[Guard; 3]; 3],
) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(slice.len() * 2);
    let mut live_k = None;
    for e in slice {
        if live_k != Some(e.col) {
            let (c_in, dy, dx) = decode_tap(e.col);
            match guards[dy][dx] {
                Guard::Never => {
                    // Dead subtree: no load, and with live_k left unset every
                    // later entry at this k re-enters here and is dropped too.
                    live_k = None;
                    continue;
                }
                guard => {
                    out.push(Instruction::LoadBVirtual {
                        breg: 0,
                        c_in,
                        dy,
                        dx,
                        guard,
                    });
                    live_k = Some(e.col);
                }
            }
        }
        out.push(Instruction::Fma {
            acc: e.row - m_start,
            breg: 0,
            value: e.value,
        });
    }
    out
}

/// Generates the im2col-fused sparse convolution executor.
///
/// Identical to [`compile_spmm`] on the induced virtual SpMM except that
/// every B load becomes a virtual-tensor load with a per-tile guard, and
/// whole-tile out-of-bounds taps are elided with their FMAs.
pub fn compile_conv(
    problem: &ConvProblem,
    config: &TileConfig,
    machine: &MachineParams,
) -> Result<KernelProgram, CompileError> {
    let (_, _, n) = problem.induced_dims();
    let virtual_problem = SpmmProblem::new(problem.filter().clone(), n)
        .expect("induced dims are valid by construction");
    let schedule = make_schedule(&virtual_problem, config)?;
    let gsy = schedule.gsy;
    let max_slots = schedule
        .row_ranges
        .iter()
        .map(|r| r.len())
        .max()
        .unwrap_or(0);
    check_limits(config.gy, gsy, max_slots, machine)?;

    let (height, width) = (problem.height(), problem.width());
    // Guard tables are per grid column: nine classifications each.
    let column_guards: Vec<[[Guard; 3]; 3]> = (0..config.n_blocks)
        .map(|j| {
            let tile = j * gsy..(j + 1) * gsy;
            let mut table = [[Guard::Always; 3]; 3];
            for (dy, row) in table.iter_mut().enumerate() {
                for (dx, g) in row.iter_mut().enumerate() {
                    *g = classify_guard(dy, dx, tile.clone(), height, width);
                }
            }
            table
        })
        .collect();

    let mut block_rows = Vec::with_capacity(schedule.row_ranges.len());
    let mut fma_count = 0u64;
    for (range, groups) in schedule.row_ranges.iter().zip(&schedule.groups) {
        let streams: Vec<Vec<Vec<Instruction>>> = column_guards
            .iter()
            .map(|guards| {
                groups
                    .iter()
                    .map(|slice| emit_conv_group(slice, range.start, guards))
                    .collect::<Vec<_>>()
            })
            .collect();
        fma_count += streams
            .iter()
            .flatten()
            .flatten()
            .filter(|i| matches!(i, Instruction::Fma { .. }))
            .count() as u64;
        block_rows.push(BlockRow {
            m_start: range.start,
            slots: range.len(),
            streams,
        });
    }

    let constant_footprint = 4 * fma_count;
    Ok(KernelProgram {
        dims: ProblemDims::Conv {
            height,
            width,
            c_in: problem.c_in(),
            c_out: problem.c_out(),
        },
        m_blocks: config.m_blocks,
        n_blocks: config.n_blocks,
        gy: config.gy,
        gsy,
        machine: machine.clone(),
        block_rows,
        constant_footprint,
        spill: constant_footprint > machine.constant_cache_bytes as u64,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A single validation finding with program coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub block_row: usize,
    pub column: Option<usize>,
    pub group: Option<usize>,
    pub instruction: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {}", self.block_row)?;
        if let Some(c) = self.column {
            write!(f, " col {c}")?;
        }
        if let Some(g) = self.group {
            write!(f, " group {g}")?;
        }
        if let Some(i) = self.instruction {
            write!(f, " insn {i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Checks instruction invariants, slot bounds, machine feasibility, and
/// footprint accounting. An empty result means the program is well formed.
pub fn validate_program(p: &KernelProgram, machine: &MachineParams) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut diag = |block_row, column, group, instruction, message: String| {
        diags.push(Diagnostic {
            block_row,
            column,
            group,
            instruction,
            message,
        });
    };

    let (m, k_dim, n) = p.dims.mkn();
    if p.n_blocks == 0 || n % p.n_blocks != 0 || n / p.n_blocks != p.gsy {
        diag(
            0,
            None,
            None,
            None,
            format!("gsy {} is not n/n_blocks = {}/{}", p.gsy, n, p.n_blocks),
        );
    }
    if p.block_rows.len() != p.m_blocks {
        diag(
            0,
            None,
            None,
            None,
            format!(
                "program has {} block rows but grid declares {}",
                p.block_rows.len(),
                p.m_blocks
            ),
        );
    }

    let threads = p.gy * p.gsy;
    if threads > machine.max_threads_per_block {
        diag(
            0,
            None,
            None,
            None,
            format!(
                "block size {} exceeds max_threads_per_block {}",
                threads, machine.max_threads_per_block
            ),
        );
    }
    let max_slots = p.max_slots();
    let reduction_bytes = max_slots * p.gsy * 4;
    if reduction_bytes > machine.shared_mem_bytes {
        diag(
            0,
            None,
            None,
            None,
            format!(
                "reduction buffer {} bytes exceeds shared_mem_bytes {}",
                reduction_bytes, machine.shared_mem_bytes
            ),
        );
    }

    let mut next_m = 0usize;
    let mut fma_total = 0u64;
    for (i, row) in p.block_rows.iter().enumerate() {
        if row.m_start != next_m {
            diag(
                i,
                None,
                None,
                None,
                format!("m_start {} does not continue previous range", row.m_start),
            );
        }
        if row.slots == 0 {
            diag(i, None, None, None, "block row owns no output rows".into());
        }
        next_m = row.m_start + row.slots;

        if row.streams.len() != 1 && row.streams.len() != p.n_blocks {
            diag(
                i,
                None,
                None,
                None,
                format!(
                    "{} stream variants; expected 1 or n_blocks = {}",
                    row.streams.len(),
                    p.n_blocks
                ),
            );
        }
        for (v, variant) in row.streams.iter().enumerate() {
            let col = if row.streams.len() == 1 {
                None
            } else {
                Some(v)
            };
            if variant.len() != p.gy {
                diag(
                    i,
                    col,
                    None,
                    None,
                    format!("{} groups; expected gy = {}", variant.len(), p.gy),
                );
            }
            for (g, group) in variant.iter().enumerate() {
                let mut live: Option<u32> = None;
                for (idx, insn) in group.iter().enumerate() {
                    match insn {
                        Instruction::LoadB { breg, k } => {
                            if p.dims.is_conv() {
                                diag(i, col, Some(g), Some(idx), "ldb in a conv program".into());
                            }
                            if *k >= k_dim {
                                diag(
                                    i,
                                    col,
                                    Some(g),
                                    Some(idx),
                                    format!("k = {} out of bounds ({})", k, k_dim),
                                );
                            }
                            live = Some(*breg);
                        }
                        Instruction::LoadBVirtual {
                            breg,
                            c_in,
                            dy,
                            dx,
                            guard,
                        } => {
                            if !p.dims.is_conv() {
                                diag(i, col, Some(g), Some(idx), "ldbv in a spmm program".into());
                            }
                            if *guard == Guard::Never {
                                diag(
                                    i,
                                    col,
                                    Some(g),
                                    Some(idx),
                                    "never-guard load survived elision".into(),
                                );
                            }
                            if *dy > 2 || *dx > 2 {
                                diag(i, col, Some(g), Some(idx), "tap offset out of range".into());
                            }
                            if let ProblemDims::Conv { c_in: total, .. } = p.dims {
                                if *c_in >= total {
                                    diag(
                                        i,
                                        col,
                                        Some(g),
                                        Some(idx),
                                        format!("input channel {} out of bounds", c_in),
                                    );
                                }
                            }
                            live = Some(*breg);
                        }
                        Instruction::Fma { acc, breg, value } => {
                            fma_total += 1;
                            if live != Some(*breg) {
                                diag(
                                    i,
                                    col,
                                    Some(g),
                                    Some(idx),
                                    format!("fma reads r{breg} with no live load"),
                                );
                            }
                            if *acc >= row.slots {
                                diag(
                                    i,
                                    col,
                                    Some(g),
                                    Some(idx),
                                    format!("acc slot {} out of bounds ({})", acc, row.slots),
                                );
                            }
                            if *value == 0.0 || !value.is_finite() {
                                diag(i, col, Some(g), Some(idx), "bad immediate".into());
                            }
                        }
                    }
                }
            }
        }
    }
    if next_m != m {
        diag(
            p.block_rows.len().saturating_sub(1),
            None,
            None,
            None,
            format!("block rows cover {} of {} output rows", next_m, m),
        );
    }
    if p.constant_footprint != 4 * fma_total {
        diag(
            0,
            None,
            None,
            None,
            format!(
                "constant_footprint {} != 4 * fma count {}",
                p.constant_footprint, fma_total
            ),
        );
    }
    if p.spill != (p.constant_footprint > machine.constant_cache_bytes as u64) {
        diag(0, None, None, None, "spill flag inconsistent".into());
    }
    diags
}

/// Recovers the baked sparse matrix from a program: each FMA contributes
/// `(m_start + slot, k-from-live-load, immediate)`. For conv programs the
/// union over grid columns is taken; a tap elided in every column (possible
/// only when it is out of bounds for every pixel) is unrecoverable and
/// contributes nothing, which preserves the output it defines.
pub fn reconstruct_sparse(p: &KernelProgram) -> Result<SparseMatrix, String> {
    let (m, k_dim, _) = p.dims.mkn();
    let mut found: BTreeMap<(usize, usize), f32> = BTreeMap::new();
    for row in &p.block_rows {
        for variant in &row.streams {
            for group in variant {
                let mut live_k: Option<usize> = None;
                for insn in group {
                    match insn {
                        Instruction::LoadB { k, .. } => live_k = Some(*k),
                        Instruction::LoadBVirtual { c_in, dy, dx, .. } => {
                            live_k = Some(c_in * 9 + dy * 3 + dx)
                        }
                        Instruction::Fma { acc, value, .. } => {
                            let k = live_k.ok_or("fma with no live load")?;
                            let key = (row.m_start + acc, k);
                            if let Some(prev) = found.insert(key, *value) {
                                if prev != *value {
                                    return Err(format!(
                                        "conflicting immediates at ({}, {})",
                                        key.0, key.1
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut row_ptr = vec![0usize; m + 1];
    let mut col_idx = Vec::with_capacity(found.len());
    let mut values = Vec::with_capacity(found.len());
    for (&(r, c), &v) in &found {
        row_ptr[r + 1] += 1;
        col_idx.push(c);
        values.push(v);
    }
    for r in 0..m {
        row_ptr[r + 1] += row_ptr[r];
    }
    SparseMatrix::from_parts(m, k_dim, row_ptr, col_idx, values).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

const PROGRAM_HEADER: &str = "srtk v1";

/// Serializes the program to the structured text schema. Decimal immediates
/// use shortest round-trip formatting, so parsing is lossless.
pub fn write_program(p: &KernelProgram) -> String {
    let mut out = String::new();
    out.push_str(PROGRAM_HEADER);
    out.push('\n');
    match p.dims {
        ProblemDims::Spmm { m, k, n } => {
            out.push_str("kind spmm\n");
            let _ = writeln!(out, "dims m={m} k={k} n={n}");
        }
        ProblemDims::Conv {
            height,
            width,
            c_in,
            c_out,
        } => {
            out.push_str("kind conv\n");
            let _ = writeln!(out, "dims h={height} w={width} cin={c_in} cout={c_out}");
        }
    }
    let _ = writeln!(out, "grid mblocks={} nblocks={}", p.m_blocks, p.n_blocks);
    let _ = writeln!(out, "groups gy={} gsy={}", p.gy, p.gsy);
    out.push_str(&write_machine(&p.machine));
    let _ = writeln!(out, "footprint {}", p.constant_footprint);
    let _ = writeln!(out, "spill {}", u8::from(p.spill));
    for (i, row) in p.block_rows.iter().enumerate() {
        let _ = writeln!(out, "row {i} mstart {} slots {}", row.m_start, row.slots);
        let per_column = row.streams.len() > 1;
        for (v, variant) in row.streams.iter().enumerate() {
            if per_column {
                let _ = writeln!(out, "col {v}");
            }
            for (g, group) in variant.iter().enumerate() {
                let _ = writeln!(out, "group {g}");
                for insn in group {
                    match insn {
                        Instruction::LoadB { breg, k } => {
                            let _ = writeln!(out, "ldb r{breg} k={k}");
                        }
                        Instruction::LoadBVirtual {
                            breg,
                            c_in,
                            dy,
                            dx,
                            guard,
                        } => {
                            let g = match guard {
                                Guard::Always => "A",
                                Guard::Mixed => "M",
                                Guard::Never => "N",
                            };
                            let _ =
                                writeln!(out, "ldbv r{breg} c={c_in} dy={dy} dx={dx} guard={g}");
                        }
                        Instruction::Fma { acc, breg, value } => {
                            let _ = writeln!(out, "fma a{acc} r{breg} {value}");
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn write_machine(m: &MachineParams) -> String {
    format!(
        "machine sm={} threads={} smem={} cbytes={}\nweights load={} fma={} guard={} reduce={} spill={}\n",
        m.sm_count,
        m.max_threads_per_block,
        m.shared_mem_bytes,
        m.constant_cache_bytes,
        m.c_load,
        m.c_fma,
        m.c_guard,
        m.c_reduce,
        m.spill_penalty
    )
}

pub(crate) struct FieldLine<'a> {
    line_no: usize,
    fields: Vec<(&'a str, &'a str)>,
}

pub(crate) fn parse_fields<'a>(
    line: &'a str,
    line_no: usize,
    expect: &str,
) -> Result<FieldLine<'a>, FormatError> {
    let mut toks = line.split_whitespace();
    let head = toks.next().unwrap_or("");
    if head != expect {
        return Err(FormatError::Parse {
            line: line_no,
            msg: format!("expected {expect:?} line, found {head:?}"),
        });
    }
    let mut fields = Vec::new();
    for tok in toks {
        let (key, val) = tok.split_once('=').ok_or_else(|| FormatError::Parse {
            line: line_no,
            msg: format!("expected key=value, found {tok:?}"),
        })?;
        fields.push((key, val));
    }
    Ok(FieldLine { line_no, fields })
}

impl FieldLine<'_> {
    pub(crate) fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError>
    where
        T::Err: std::fmt::Display,
    {
        let (_, val) =
            self.fields
                .iter()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| FormatError::Parse {
                    line: self.line_no,
                    msg: format!("missing field {key:?}"),
                })?;
        val.parse::<T>().map_err(|e| FormatError::Parse {
            line: self.line_no,
            msg: format!("bad {key}: {e}"),
        })
    }
}

pub(crate) fn parse_machine(
    machine_line: &str,
    weights_line: &str,
    line_no: usize,
) -> Result<MachineParams, FormatError> {
    let m = parse_fields(machine_line, line_no, "machine")?;
    let w = parse_fields(weights_line, line_no + 1, "weights")?;
    Ok(MachineParams {
        sm_count: m.get("sm")?,
        max_threads_per_block: m.get("threads")?,
        shared_mem_bytes: m.get("smem")?,
        constant_cache_bytes: m.get("cbytes")?,
        c_load: w.get("load")?,
        c_fma: w.get("fma")?,
        c_guard: w.get("guard")?,
        c_reduce: w.get("reduce")?,
        spill_penalty: w.get("spill")?,
    })
}

/// Parses the text schema produced by [`write_program`].
pub fn read_program(text: &str) -> Result<KernelProgram, FormatError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut pos = 0usize;
    let mut next = |expect: Option<&str>| -> Result<(usize, &str), FormatError> {
        let line = lines.get(pos).copied().ok_or(FormatError::Truncated)?;
        pos += 1;
        if let Some(e) = expect {
            if line.trim() != e {
                return Err(FormatError::Parse {
                    line: pos,
                    msg: format!("expected {e:?}"),
                });
            }
        }
        Ok((pos, line))
    };

    next(Some(PROGRAM_HEADER))?;
    let (kind_no, kind_line) = next(None)?;
    let kind = kind_line
        .trim()
        .strip_prefix("kind ")
        .ok_or_else(|| FormatError::Parse {
            line: kind_no,
            msg: "expected kind line".into(),
        })?;
    let (dims_no, dims_line) = next(None)?;
    let dims = match kind {
        "spmm" => {
            let f = parse_fields(dims_line, dims_no, "dims")?;
            ProblemDims::Spmm {
                m: f.get("m")?,
                k: f.get("k")?,
                n: f.get("n")?,
            }
        }
        "conv" => {
            let f = parse_fields(dims_line, dims_no, "dims")?;
            ProblemDims::Conv {
                height: f.get("h")?,
                width: f.get("w")?,
                c_in: f.get("cin")?,
                c_out: f.get("cout")?,
            }
        }
        other => {
            return Err(FormatError::Parse {
                line: kind_no,
                msg: format!("unknown kind {other:?}"),
            })
        }
    };
    let (grid_no, grid_line) = next(None)?;
    let grid = parse_fields(grid_line, grid_no, "grid")?;
    let (m_blocks, n_blocks) = (grid.get("mblocks")?, grid.get("nblocks")?);
    let (groups_no, groups_line) = next(None)?;
    let gf = parse_fields(groups_line, groups_no, "groups")?;
    let (gy, gsy): (usize, usize) = (gf.get("gy")?, gf.get("gsy")?);
    let (mach_no, machine_line) = next(None)?;
    let (_, weights_line) = next(None)?;
    let machine = parse_machine(machine_line, weights_line, mach_no)?;
    let (fp_no, fp_line) = next(None)?;
    let constant_footprint = fp_line
        .trim()
        .strip_prefix("footprint ")
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(|| FormatError::Parse {
            line: fp_no,
            msg: "expected footprint line".into(),
        })?;
    let (sp_no, sp_line) = next(None)?;
    let spill = match sp_line.trim().strip_prefix("spill ") {
        Some("0") => false,
        Some("1") => true,
        _ => {
            return Err(FormatError::Parse {
                line: sp_no,
                msg: "expected spill 0|1".into(),
            })
        }
    };

    let mut block_rows: Vec<BlockRow> = Vec::new();
    while pos < lines.len() {
        let (line_no, line) = (pos + 1, lines[pos]);
        pos += 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("row") => {
                let rest: Vec<&str> = toks.collect();
                if rest.len() != 5 || rest[1] != "mstart" || rest[3] != "slots" {
                    return Err(FormatError::Parse {
                        line: line_no,
                        msg: "expected: row <i> mstart <s> slots <c>".into(),
                    });
                }
                let m_start = parse_num(rest[2], line_no)?;
                let slots = parse_num(rest[4], line_no)?;
                block_rows.push(BlockRow {
                    m_start,
                    slots,
                    streams: Vec::new(),
                });
            }
            Some("col") => {
                let row = current_row(&mut block_rows, line_no)?;
                row.streams.push(Vec::new());
            }
            Some("group") => {
                let row = current_row(&mut block_rows, line_no)?;
                if row.streams.is_empty() {
                    row.streams.push(Vec::new());
                }
                row.streams.last_mut().unwrap().push(Vec::new());
            }
            Some(op @ ("ldb" | "ldbv" | "fma")) => {
                let args: Vec<&str> = toks.collect();
                let insn = parse_instruction(op, &args, line_no)?;
                let row = current_row(&mut block_rows, line_no)?;
                let group = row
                    .streams
                    .last_mut()
                    .and_then(|v| v.last_mut())
                    .ok_or_else(|| FormatError::Parse {
                        line: line_no,
                        msg: "instruction before any group".into(),
                    })?;
                group.push(insn);
            }
            Some(other) => {
                return Err(FormatError::Parse {
                    line: line_no,
                    msg: format!("unexpected token {other:?}"),
                })
            }
            None => {}
        }
    }

    Ok(KernelProgram {
        dims,
        m_blocks,
        n_blocks,
        gy,
        gsy,
        machine,
        block_rows,
        constant_footprint,
        spill,
    })
}

fn current_row(rows: &mut [BlockRow], line_no: usize) -> Result<&mut BlockRow, FormatError> {
    rows.last_mut().ok_or(FormatError::Parse {
        line: line_no,
        msg: "content before any row line".into(),
    })
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, FormatError>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| FormatError::Parse {
        line,
        msg: format!("bad number {tok:?}: {e}"),
    })
}

fn parse_reg(tok: &str, line: usize) -> Result<u32, FormatError> {
    tok.strip_prefix('r')
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or(FormatError::Parse {
            line,
            msg: format!("bad register {tok:?}"),
        })
}

fn parse_instruction(op: &str, args: &[&str], line: usize) -> Result<Instruction, FormatError> {
    let kv = |tok: &str, key: &str| -> Result<usize, FormatError> {
        tok.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or(FormatError::Parse {
                line,
                msg: format!("expected {key}=<int>, found {tok:?}"),
            })
    };
    match op {
        "ldb" => {
            if args.len() != 2 {
                return Err(FormatError::Parse {
                    line,
                    msg: "expected: ldb r<b> k=<k>".into(),
                });
            }
            Ok(Instruction::LoadB {
                breg: parse_reg(args[0], line)?,
                k: kv(args[1], "k")?,
            })
        }
        "ldbv" => {
            if args.len() != 5 {
                return Err(FormatError::Parse {
                    line,
                    msg: "expected: ldbv r<b> c=<c> dy=<d> dx=<d> guard=<A|M>".into(),
                });
            }
            let guard = match args[4] {
                "guard=A" => Guard::Always,
                "guard=M" => Guard::Mixed,
                "guard=N" => Guard::Never,
                other => {
                    return Err(FormatError::Parse {
                        line,
                        msg: format!("bad guard {other:?}"),
                    })
                }
            };
            Ok(Instruction::LoadBVirtual {
                breg: parse_reg(args[0], line)?,
                c_in: kv(args[1], "c")?,
                dy: kv(args[2], "dy")?,
                dx: kv(args[3], "dx")?,
                guard,
            })
        }
        "fma" => {
            if args.len() != 3 {
                return Err(FormatError::Parse {
                    line,
                    msg: "expected: fma a<slot> r<b> <value>".into(),
                });
            }
            let acc = args[0]
                .strip_prefix('a')
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or(FormatError::Parse {
                    line,
                    msg: format!("bad accumulator {:?}", args[0]),
                })?;
            Ok(Instruction::Fma {
                acc,
                breg: parse_reg(args[1], line)?,
                value: parse_num(args[2], line)?,
            })
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SparseMatrix;

    fn example4x4() -> SpmmProblem {
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
    fn spmm_emission_example() {
        let p = example4x4();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        assert_eq!(prog.gsy, 2);
        // Block row 1 owns rows [1,4): group 0 = {(1,1)=3}, group 1 = {(3,3)=4}.
        let row1 = &prog.block_rows[1];
        assert_eq!(row1.m_start, 1);
        assert_eq!(row1.slots, 3);
        assert_eq!(
            row1.stream(0)[0],
            vec![
                Instruction::LoadB { breg: 0, k: 1 },
                Instruction::Fma {
                    acc: 0,
                    breg: 0,
                    value: 3.0
                },
            ]
        );
        assert_eq!(
            row1.stream(1)[1],
            vec![
                Instruction::LoadB { breg: 0, k: 3 },
                Instruction::Fma {
                    acc: 2,
                    breg: 0,
                    value: 4.0
                },
            ]
        );
        assert_eq!(prog.total_fma(), 4);
        assert_eq!(prog.constant_footprint, 16);
        assert!(!prog.spill);
    }

    #[test]
    fn spmm_zero_matrix_compiles_to_empty_streams() {
        let a = SparseMatrix::from_parts(4, 4, vec![0; 5], vec![], vec![]).unwrap();
        let p = SpmmProblem::new(a, 4).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        assert_eq!(prog.total_fma(), 0);
        assert!(prog
            .block_rows
            .iter()
            .all(|r| r.streams[0].iter().all(|g| g.is_empty())));
        assert!(validate_program(&prog, &MachineParams::default()).is_empty());
    }

    #[test]
    fn spmm_dense_full_enumeration() {
        let a = SparseMatrix::random(4, 4, 1.0, 0).unwrap();
        let p = SpmmProblem::new(a, 4).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(1, 1, 1), &MachineParams::default()).unwrap();
        let stream = &prog.block_rows[0].streams[0][0];
        let loads = stream
            .iter()
            .filter(|i| matches!(i, Instruction::LoadB { .. }))
            .count();
        assert_eq!(loads, 4);
        assert_eq!(prog.total_fma(), 16);
        // k-major: each load is followed by 4 FMAs.
        assert!(matches!(stream[0], Instruction::LoadB { k: 0, .. }));
        assert!(matches!(stream[5], Instruction::LoadB { k: 1, .. }));
    }

    #[test]
    fn compile_rejects_infeasible_configs() {
        let p = example4x4();
        let tiny = MachineParams {
            max_threads_per_block: 4,
            ..MachineParams::default()
        };
        // gy=2 * gsy=4 = 8 threads > 4.
        let err = compile_spmm(&p, &TileConfig::new(1, 1, 2), &tiny).unwrap_err();
        assert!(matches!(
            err,
            CompileError::TooManyThreads { threads: 8, max: 4 }
        ));

        let small_smem = MachineParams {
            shared_mem_bytes: 32,
            ..MachineParams::default()
        };
        // max_slots=4 * gsy=4 * 4 = 64 bytes > 32.
        let err = compile_spmm(&p, &TileConfig::new(1, 1, 1), &small_smem).unwrap_err();
        assert!(matches!(
            err,
            CompileError::SharedMemExceeded { bytes: 64, .. }
        ));
    }

    #[test]
    fn guard_classification_examples() {
        // 4x4 image. Row-1 interior-ish tile {5,6}, center tap: in bounds.
        assert_eq!(classify_guard(1, 1, 5..7, 4, 4), Guard::Always);
        // Row-0 tile {0,1}, any dy=0 tap reads y=-1 for every lane.
        assert_eq!(classify_guard(0, 0, 0..2, 4, 4), Guard::Never);
        assert_eq!(classify_guard(0, 1, 0..2, 4, 4), Guard::Never);
        assert_eq!(classify_guard(0, 2, 0..2, 4, 4), Guard::Never);
        // Row-0 tile {0,1}, (dy,dx)=(1,0): lane x-1 in {-1, 0}.
        assert_eq!(classify_guard(1, 0, 0..2, 4, 4), Guard::Mixed);
    }

    #[test]
    fn conv_elides_never_taps() {
        // 1x4x4 image, full 1x9 filter, one tile per pixel row (gsy=4).
        let f = SparseMatrix::random(1, 9, 1.0, 3).unwrap();
        let p = ConvProblem::new(f, 4, 4, 1).unwrap();
        let prog = compile_conv(&p, &TileConfig::new(1, 4, 1), &MachineParams::default()).unwrap();
        let row = &prog.block_rows[0];
        assert_eq!(row.streams.len(), 4);
        // Tile 0 (image row 0): dy=0 taps elided -> 6 FMAs of 9 remain.
        let fma0 = row.streams[0][0]
            .iter()
            .filter(|i| matches!(i, Instruction::Fma { .. }))
            .count();
        assert_eq!(fma0, 6);
        // Interior tiles keep all 9.
        let fma1 = row.streams[1][0]
            .iter()
            .filter(|i| matches!(i, Instruction::Fma { .. }))
            .count();
        assert_eq!(fma1, 9);
        assert!(validate_program(&prog, &MachineParams::default()).is_empty());
    }

    #[test]
    fn validate_flags_undefined_register() {
        let p = example4x4();
        let mut prog =
            compile_spmm(&p, &TileConfig::new(1, 1, 1), &MachineParams::default()).unwrap();
        // Break the stream: FMA with no preceding load.
        prog.block_rows[0].streams[0][0].insert(
            0,
            Instruction::Fma {
                acc: 0,
                breg: 0,
                value: 1.0,
            },
        );
        prog.constant_footprint += 4;
        let diags = validate_program(&prog, &MachineParams::default());
        assert!(diags.iter().any(|d| d.message.contains("no live load")));
    }

    #[test]
    fn program_text_round_trip_spmm() {
        let p = example4x4();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let text = write_program(&prog);
        let back = read_program(&text).unwrap();
        assert_eq!(prog, back);
        assert_eq!(write_program(&back), text);
    }

    #[test]
    fn program_text_round_trip_conv() {
        let f = SparseMatrix::random(3, 18, 0.5, 9).unwrap();
        let p = ConvProblem::new(f, 3, 4, 2).unwrap();
        let prog = compile_conv(&p, &TileConfig::new(2, 3, 2), &MachineParams::default()).unwrap();
        let text = write_program(&prog);
        let back = read_program(&text).unwrap();
        assert_eq!(prog, back);
    }

    #[test]
    fn reconstruct_recovers_matrix() {
        let a = SparseMatrix::random(8, 12, 0.4, 17).unwrap();
        let p = SpmmProblem::new(a.clone(), 6).unwrap();
        let prog = compile_spmm(&p, &TileConfig::new(3, 2, 2), &MachineParams::default()).unwrap();
        let back = reconstruct_sparse(&prog).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn program_parse_rejects_malformed_text() {
        let p = example4x4();
        let prog = compile_spmm(&p, &TileConfig::new(2, 2, 2), &MachineParams::default()).unwrap();
        let text = write_program(&prog);

        assert!(read_program("not a program\n").is_err());
        assert!(read_program(&text.replace("srtk v1", "srtk v2")).is_err());
        assert!(read_program(&text.replace("spill 0", "spill maybe")).is_err());
        assert!(read_program(&text.replace("ldb r0 k=1", "ldx r0 k=1")).is_err());
        assert!(read_program(&text.replace("fma a0 r0 3", "fma a0 r0 three")).is_err());
        // An instruction before any row/group is structurally invalid.
        let stray = text.replace(
            "row 0 mstart 0 slots 1",
            "fma a0 r0 1\nrow 0 mstart 0 slots 1",
        );
        assert!(read_program(&stray).is_err());
        // Truncated header.
        let head: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(read_program(&head).is_err());
    }

    #[test]
    fn reconstruct_detects_conflicting_immediates() {
        let f = SparseMatrix::random(1, 9, 1.0, 3).unwrap();
        let p = ConvProblem::new(f, 4, 4, 1).unwrap();
        let mut prog =
            compile_conv(&p, &TileConfig::new(1, 4, 1), &MachineParams::default()).unwrap();
        // Perturb one grid column's copy of a baked value; the union over
        // columns is no longer consistent.
        if let Instruction::Fma { value, .. } = &mut prog.block_rows[0].streams[2][0][1] {
            *value += 1.0;
        } else {
            panic!("expected an fma after the first load");
        }
        assert!(reconstruct_sparse(&prog).is_err());
    }

    #[test]
    fn validate_flags_surviving_never_guard() {
        let f = SparseMatrix::random(1, 9, 1.0, 3).unwrap();
        let p = ConvProblem::new(f, 4, 4, 1).unwrap();
        let mut prog =
            compile_conv(&p, &TileConfig::new(1, 4, 1), &MachineParams::default()).unwrap();
        if let Instruction::LoadBVirtual { guard, .. } = &mut prog.block_rows[0].streams[1][0][0] {
            *guard = Guard::Never;
        }
        let diags = validate_program(&prog, &MachineParams::default());
        assert!(diags.iter().any(|d| d.message.contains("never-guard")));
    }

    #[test]
    fn compilation_is_deterministic() {
        let a = SparseMatrix::random(10, 10, 0.3, 23).unwrap();
        let p = SpmmProblem::new(a, 8).unwrap();
        let config = TileConfig::new(2, 4, 2);
        let machine = MachineParams::default();
        let one = compile_spmm(&p, &config, &machine).unwrap();
        let two = compile_spmm(&p, &config, &machine).unwrap();
        assert_eq!(write_program(&one), write_program(&two));
    }
}
