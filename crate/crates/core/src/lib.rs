//! Sparse-kernel compiler and deterministic virtual-GPU executor.
//!
//! The pipeline mirrors an inspector-executor flow for pruned-network
//! inference: a compile-time-known sparse matrix is tiled and load-balanced
//! across a SIMT grid ([`schedule`]), lowered to a fully unrolled kernel
//! with the sparse values baked into instruction immediates ([`codegen`]),
//! interpreted deterministically to produce outputs and work metrics
//! ([`vgpu`]), verified against naive dense references ([`oracle`]), and
//! autotuned over divisor-based tilings ([`tuner`]). SpMM (sparse A times
//! dense B) and im2col-fused sparse 3x3 convolution share the whole path.

pub mod codegen;
pub mod io;
pub mod model;
pub mod oracle;
pub mod schedule;
pub mod tuner;
pub mod vgpu;

pub use codegen::{
    classify_guard, compile_conv, compile_spmm, read_program, reconstruct_sparse, validate_program,
    write_program, Guard, Instruction, KernelProgram, MachineParams, ProblemDims,
};
pub use model::{ConvProblem, DenseMatrix, SparseMatrix, SpmmProblem, Tensor3};
pub use schedule::{make_schedule, partition_blocks, partition_groups, BlockSchedule, TileConfig};
pub use tuner::{
    enumerate_configs, read_tune_result, tune, write_tune_result, TuneMode, TuneOptions,
    TuneProblem, TuneResult,
};
pub use vgpu::{
    estimate_cost, execute, max_relative_error, write_report, ExecInput, ExecutionReport,
    KernelMetrics, OutputData,
};
