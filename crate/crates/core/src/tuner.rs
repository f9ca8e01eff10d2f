//! Compile-time autotuning: enumerate feasible tile configurations from the
//! divisor heuristics, evaluate each by compiling (and optionally running)
//! it, and pick the cheapest under the ordinal cost model.
//!
//! The candidate universe is divisor-based — m_blocks divides M, n_blocks
//! divides N with gsy inside a window, gy from a fixed power-of-two list —
//! filtered by block-size and shared-memory feasibility. When the universe
//! exceeds `max_candidates` it is thinned to a hand-picked subset by
//! preferring block sizes near 256 threads, which keeps every problem at or
//! under the candidate budget while preserving the spread of tilings.
//!
//! Selection is driven by the static cost model, never by wall-clock time;
//! the cost is ordinal and exists to rank configurations.

use crate::codegen::{
    compile_conv, compile_spmm, parse_fields, parse_machine, write_machine, CompileError,
    KernelProgram, MachineParams, ProblemDims,
};
use crate::io::FormatError;
use crate::model::{ConvProblem, DenseMatrix, SpmmProblem, Tensor3};
use crate::oracle::{conv_direct, gemm_dense, to_dense};
use crate::schedule::TileConfig;
use crate::vgpu::{
    estimate_cost, execute, max_relative_error, ExecError, ExecInput, KernelMetrics,
};
use std::fmt::Write as _;
use thiserror::Error;

/// Verification tolerances used by `tune` and `run` when cross-checking
/// against the oracle.
pub const SPMM_TOLERANCE: f64 = 1e-5;
pub const CONV_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("no feasible tile configurations; binding constraint: {0}")]
    EmptyCandidates(String),
    #[error("all {count} candidate configurations failed to compile; first: {first}")]
    AllFailed { count: usize, first: String },
    #[error(
        "config (mblocks={m_blocks} nblocks={n_blocks} gy={gy}) failed verification: \
         max relative error {error:e} exceeds {tolerance:e}"
    )]
    VerifyFailed {
        m_blocks: usize,
        n_blocks: usize,
        gy: usize,
        error: f64,
        tolerance: f64,
    },
    #[error("input operand rejected: {0}")]
    BadInput(String),
    #[error("execution failed: {0}")]
    Exec(#[from] ExecError),
}

/// Candidate-generation knobs.
#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub min_gsy: usize,
    pub max_gsy: usize,
    pub gy_candidates: Vec<usize>,
    /// Upper bound on the candidate list; the generator thins past this.
    pub max_candidates: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            min_gsy: 8,
            max_gsy: 256,
            gy_candidates: vec![1, 2, 4, 8, 16, 32],
            max_candidates: 100,
        }
    }
}

fn divisors(x: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= x {
        if x.is_multiple_of(d) {
            small.push(d);
            if d != x / d {
                large.push(x / d);
            }
        }
        d += 1;
    }
    large.reverse();
    small.extend(large);
    small
}

/// Enumerates feasible tile configurations for an M x N output, in
/// lexicographic (m_blocks, n_blocks, gy) order.
pub fn enumerate_configs(
    m: usize,
    n: usize,
    machine: &MachineParams,
    opts: &TuneOptions,
) -> Result<Vec<TileConfig>, TuneError> {
    let mut out = Vec::new();
    let mut rejected_gsy = 0usize;
    let mut rejected_threads = 0usize;
    let mut rejected_smem = 0usize;
    for mb in divisors(m) {
        // Conservative slot bound: the greedy row partition may exceed the
        // even split by a little, so feasibility screens with one extra slot
        // and the compiler re-checks the real maximum.
        let slot_bound = m.div_ceil(mb) + 1;
        for nb in divisors(n) {
            let gsy = n / nb;
            if gsy < opts.min_gsy || gsy > opts.max_gsy {
                rejected_gsy += opts.gy_candidates.len();
                continue;
            }
            for &gy in &opts.gy_candidates {
                if gy * gsy > machine.max_threads_per_block {
                    rejected_threads += 1;
                    continue;
                }
                if slot_bound * gsy * 4 > machine.shared_mem_bytes {
                    rejected_smem += 1;
                    continue;
                }
                out.push(TileConfig::new(mb, nb, gy));
            }
        }
    }
    if out.is_empty() {
        let binding = [
            (
                rejected_gsy,
                format!("gsy window [{}, {}]", opts.min_gsy, opts.max_gsy),
            ),
            (
                rejected_threads,
                format!("max_threads_per_block = {}", machine.max_threads_per_block),
            ),
            (
                rejected_smem,
                format!("shared_mem_bytes = {}", machine.shared_mem_bytes),
            ),
        ]
        .into_iter()
        .max_by_key(|(count, _)| *count)
        .map(|(_, label)| label)
        .unwrap();
        return Err(TuneError::EmptyCandidates(binding));
    }
    if out.len() > opts.max_candidates {
        let target = (256.0f64).ln();
        let mut ranked: Vec<(f64, TileConfig)> = out
            .iter()
            .map(|c| {
                let threads = (c.gy * (n / c.n_blocks)) as f64;
                ((threads.ln() - target).abs(), *c)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out = ranked
            .into_iter()
            .take(opts.max_candidates)
            .map(|(_, c)| c)
            .collect();
        out.sort();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    /// Cost from static program metrics; nothing is executed.
    Estimate,
    /// Runs every candidate on a seeded input; costs are identical to
    /// estimate mode by construction since the cost reads static metrics.
    Simulate,
}

#[derive(Debug, Clone)]
pub enum TuneProblem<'a> {
    Spmm(&'a SpmmProblem),
    Conv(&'a ConvProblem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedConfig {
    pub config: TileConfig,
    pub cost: f64,
    pub spill: bool,
    pub fma: u64,
    pub loads: u64,
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFailure {
    pub config: TileConfig,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub problem: ProblemDims,
    pub machine: MachineParams,
    pub evaluated: Vec<EvaluatedConfig>,
    pub failures: Vec<ConfigFailure>,
    pub chosen: TileConfig,
}

impl TuneResult {
    /// The compiled program for the chosen config.
    pub fn compile_chosen(&self, problem: &TuneProblem<'_>) -> Result<KernelProgram, CompileError> {
        compile(problem, &self.chosen, &self.machine)
    }
}

fn compile(
    problem: &TuneProblem<'_>,
    config: &TileConfig,
    machine: &MachineParams,
) -> Result<KernelProgram, CompileError> {
    match problem {
        TuneProblem::Spmm(p) => compile_spmm(p, config, machine),
        TuneProblem::Conv(p) => compile_conv(p, config, machine),
    }
}

/// Exhaustive evaluation over [`enumerate_configs`].
///
/// Every candidate is compiled; compile failures are recorded and skipped.
/// Simulate mode (and any `verify` run) executes each candidate on `input`
/// when given, or on a `seed`-generated operand otherwise. With `verify`
/// set, each candidate's output is checked against the dense oracle and the
/// first mismatch aborts. The chosen config has minimal cost, ties broken by
/// the lexicographically smallest (m_blocks, n_blocks, gy).
pub fn tune(
    problem: &TuneProblem<'_>,
    machine: &MachineParams,
    mode: TuneMode,
    verify: bool,
    input: Option<ExecInput<'_>>,
    seed: u64,
    opts: &TuneOptions,
) -> Result<TuneResult, TuneError> {
    let (dims, tolerance) = match problem {
        TuneProblem::Spmm(p) => (
            ProblemDims::Spmm {
                m: p.m(),
                k: p.k(),
                n: p.n(),
            },
            SPMM_TOLERANCE,
        ),
        TuneProblem::Conv(p) => (
            ProblemDims::Conv {
                height: p.height(),
                width: p.width(),
                c_in: p.c_in(),
                c_out: p.c_out(),
            },
            CONV_TOLERANCE,
        ),
    };
    let (m, _, n) = dims.mkn();
    let configs = enumerate_configs(m, n, machine, opts)?;

    let run_kernels = verify || mode == TuneMode::Simulate;
    // Input operand (caller-supplied or seeded) and the shared oracle output.
    let mut owned_dense: Option<DenseMatrix> = None;
    let mut owned_tensor: Option<Tensor3> = None;
    let mut expected: Option<Vec<f32>> = None;
    if run_kernels {
        match problem {
            TuneProblem::Spmm(p) => {
                let b = match input {
                    Some(ExecInput::Matrix(b)) => b,
                    Some(ExecInput::Tensor(_)) => {
                        return Err(TuneError::BadInput(
                            "spmm problem takes a dense matrix operand".into(),
                        ))
                    }
                    None => {
                        owned_dense = Some(DenseMatrix::random(p.k(), p.n(), seed));
                        owned_dense.as_ref().unwrap()
                    }
                };
                expected = Some(
                    gemm_dense(&to_dense(p.a()), b)
                        .map_err(|e| TuneError::BadInput(e.to_string()))?
                        .into_data(),
                );
            }
            TuneProblem::Conv(p) => {
                let x = match input {
                    Some(ExecInput::Tensor(x)) => x,
                    Some(ExecInput::Matrix(_)) => {
                        return Err(TuneError::BadInput(
                            "conv problem takes a tensor operand".into(),
                        ))
                    }
                    None => {
                        owned_tensor = Some(Tensor3::random(p.c_in(), p.height(), p.width(), seed));
                        owned_tensor.as_ref().unwrap()
                    }
                };
                expected = Some(
                    conv_direct(x, &to_dense(p.filter()))
                        .map_err(|e| TuneError::BadInput(e.to_string()))?
                        .into_data(),
                );
            }
        }
    }

    let mut evaluated = Vec::new();
    let mut failures = Vec::new();
    for config in &configs {
        let program = match compile(problem, config, machine) {
            Ok(p) => p,
            Err(e) => {
                failures.push(ConfigFailure {
                    config: *config,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let metrics = if run_kernels {
            let operand = match (problem, input) {
                (_, Some(given)) => given,
                (TuneProblem::Spmm(_), None) => ExecInput::Matrix(owned_dense.as_ref().unwrap()),
                (TuneProblem::Conv(_), None) => ExecInput::Tensor(owned_tensor.as_ref().unwrap()),
            };
            let report = execute(&program, operand, machine)?;
            if verify {
                let error = max_relative_error(report.output.data(), expected.as_ref().unwrap());
                if error > tolerance {
                    return Err(TuneError::VerifyFailed {
                        m_blocks: config.m_blocks,
                        n_blocks: config.n_blocks,
                        gy: config.gy,
                        error,
                        tolerance,
                    });
                }
            }
            report.metrics
        } else {
            KernelMetrics::from_program(&program)
        };
        evaluated.push(EvaluatedConfig {
            config: *config,
            cost: estimate_cost(&metrics, machine),
            spill: metrics.spill,
            fma: program.total_fma(),
            loads: program.total_loads(),
            imbalance: metrics.group_imbalance,
        });
    }

    if evaluated.is_empty() {
        return Err(TuneError::AllFailed {
            count: failures.len(),
            first: failures
                .first()
                .map(|f| f.reason.clone())
                .unwrap_or_default(),
        });
    }
    // Candidates arrive in lexicographic order, so strict improvement keeps
    // the lexicographically smallest among cost ties.
    let mut chosen = evaluated[0].config;
    let mut best_cost = evaluated[0].cost;
    for e in &evaluated[1..] {
        if e.cost < best_cost {
            chosen = e.config;
            best_cost = e.cost;
        }
    }
    Ok(TuneResult {
        problem: dims,
        machine: machine.clone(),
        evaluated,
        failures,
        chosen,
    })
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

const TUNE_HEADER: &str = "srtt v1";

pub fn write_tune_result(r: &TuneResult) -> String {
    let mut out = String::new();
    out.push_str(TUNE_HEADER);
    out.push('\n');
    match r.problem {
        ProblemDims::Spmm { m, k, n } => {
            let _ = writeln!(out, "problem spmm m={m} k={k} n={n}");
        }
        ProblemDims::Conv {
            height,
            width,
            c_in,
            c_out,
        } => {
            let _ = writeln!(
                out,
                "problem conv h={height} w={width} cin={c_in} cout={c_out}"
            );
        }
    }
    out.push_str(&write_machine(&r.machine));
    for e in &r.evaluated {
        let _ = writeln!(
            out,
            "config mblocks={} nblocks={} gy={} cost={} spill={} fma={} loads={} imbalance={}",
            e.config.m_blocks,
            e.config.n_blocks,
            e.config.gy,
            e.cost,
            u8::from(e.spill),
            e.fma,
            e.loads,
            e.imbalance
        );
    }
    for f in &r.failures {
        let _ = writeln!(
            out,
            "failed mblocks={} nblocks={} gy={} reason={}",
            f.config.m_blocks, f.config.n_blocks, f.config.gy, f.reason
        );
    }
    let _ = writeln!(
        out,
        "chosen: mblocks={} nblocks={} gy={}",
        r.chosen.m_blocks, r.chosen.n_blocks, r.chosen.gy
    );
    out
}

pub fn read_tune_result(text: &str) -> Result<TuneResult, FormatError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim()) != Some(TUNE_HEADER) {
        return Err(FormatError::Parse {
            line: 1,
            msg: format!("expected {TUNE_HEADER:?} header"),
        });
    }
    let problem_line = lines.get(1).copied().ok_or(FormatError::Truncated)?;
    let problem = if problem_line.starts_with("problem spmm") {
        let f = parse_fields(problem_line.strip_prefix("problem ").unwrap(), 2, "spmm")?;
        ProblemDims::Spmm {
            m: f.get("m")?,
            k: f.get("k")?,
            n: f.get("n")?,
        }
    } else if problem_line.starts_with("problem conv") {
        let f = parse_fields(problem_line.strip_prefix("problem ").unwrap(), 2, "conv")?;
        ProblemDims::Conv {
            height: f.get("h")?,
            width: f.get("w")?,
            c_in: f.get("cin")?,
            c_out: f.get("cout")?,
        }
    } else {
        return Err(FormatError::Parse {
            line: 2,
            msg: "expected problem line".into(),
        });
    };
    let machine_line = lines.get(2).copied().ok_or(FormatError::Truncated)?;
    let weights_line = lines.get(3).copied().ok_or(FormatError::Truncated)?;
    let machine = parse_machine(machine_line, weights_line, 3)?;

    let mut evaluated = Vec::new();
    let mut failures = Vec::new();
    let mut chosen: Option<TileConfig> = None;
    for (i, line) in lines.iter().enumerate().skip(4) {
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix("config ") {
            let tagged = format!("c {rest}");
            let f = parse_fields(&tagged, line_no, "c")?;
            evaluated.push(EvaluatedConfig {
                config: TileConfig::new(f.get("mblocks")?, f.get("nblocks")?, f.get("gy")?),
                cost: f.get("cost")?,
                spill: f.get::<u8>("spill")? != 0,
                fma: f.get("fma")?,
                loads: f.get("loads")?,
                imbalance: f.get("imbalance")?,
            });
        } else if let Some(rest) = line.strip_prefix("failed ") {
            let (params, reason) =
                rest.split_once(" reason=")
                    .ok_or_else(|| FormatError::Parse {
                        line: line_no,
                        msg: "failed line missing reason".into(),
                    })?;
            let tagged = format!("f {params}");
            let f = parse_fields(&tagged, line_no, "f")?;
            failures.push(ConfigFailure {
                config: TileConfig::new(f.get("mblocks")?, f.get("nblocks")?, f.get("gy")?),
                reason: reason.to_string(),
            });
        } else if let Some(rest) = line.strip_prefix("chosen: ") {
            let tagged = format!("c {rest}");
            let f = parse_fields(&tagged, line_no, "c")?;
            chosen = Some(TileConfig::new(
                f.get("mblocks")?,
                f.get("nblocks")?,
                f.get("gy")?,
            ));
        } else if !line.trim().is_empty() {
            return Err(FormatError::Parse {
                line: line_no,
                msg: format!("unexpected line {line:?}"),
            });
        }
    }
    Ok(TuneResult {
        problem,
        machine,
        evaluated,
        failures,
        chosen: chosen.ok_or(FormatError::Truncated)?,
    })
}
