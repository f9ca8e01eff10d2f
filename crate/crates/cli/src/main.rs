//! Command-line driver: generate matrices, compile kernels, execute them on
//! the virtual GPU, autotune, and run the bundled benchmark suite.

mod suite;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spargen::io;
use spargen::tuner::{self, TuneMode, TuneOptions, TuneProblem};
use spargen::vgpu::{self, ExecInput, KernelMetrics};
use spargen::{
    codegen, oracle, ConvProblem, KernelProgram, MachineParams, ProblemDims, SparseMatrix,
    SpmmProblem, TileConfig,
};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use suite::{parse_suite, SuiteEntry, SuiteKind, DEFAULT_SUITE};

#[derive(Parser)]
#[command(
    name = "spargen",
    about = "Sparse-kernel compiler and deterministic virtual-GPU executor",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random sparse matrix in SMTX form.
    Gen(GenArgs),
    /// Compile a kernel program from a sparse matrix.
    Compile {
        #[command(subcommand)]
        kind: CompileKind,
    },
    /// Execute a compiled program on an input file.
    Run(RunArgs),
    /// Grid-search tile configurations and report the cheapest.
    Tune {
        #[command(subcommand)]
        kind: TuneKind,
    },
    /// Run the bundled layer-shape suite end to end.
    Bench(BenchArgs),
}

/// Modeled machine; defaults match the library's Turing-class parameters.
#[derive(Args, Clone)]
struct MachineFlags {
    #[arg(long, default_value_t = MachineParams::default().sm_count)]
    sm_count: usize,
    #[arg(long, default_value_t = MachineParams::default().max_threads_per_block)]
    max_threads: usize,
    #[arg(long, default_value_t = MachineParams::default().shared_mem_bytes)]
    shared_mem: usize,
    #[arg(long, default_value_t = MachineParams::default().constant_cache_bytes)]
    const_cache: usize,
    #[arg(long, default_value_t = MachineParams::default().c_load)]
    c_load: f64,
    #[arg(long, default_value_t = MachineParams::default().c_fma)]
    c_fma: f64,
    #[arg(long, default_value_t = MachineParams::default().c_guard)]
    c_guard: f64,
    #[arg(long, default_value_t = MachineParams::default().c_reduce)]
    c_reduce: f64,
    #[arg(long, default_value_t = MachineParams::default().spill_penalty)]
    spill_penalty: f64,
}

impl MachineFlags {
    fn to_params(&self) -> MachineParams {
        MachineParams {
            sm_count: self.sm_count,
            max_threads_per_block: self.max_threads,
            shared_mem_bytes: self.shared_mem,
            constant_cache_bytes: self.const_cache,
            c_load: self.c_load,
            c_fma: self.c_fma,
            c_guard: self.c_guard,
            c_reduce: self.c_reduce,
            spill_penalty: self.spill_penalty,
        }
    }
}

#[derive(Args, Clone)]
struct TuneFlags {
    #[arg(long, default_value_t = TuneOptions::default().min_gsy)]
    min_gsy: usize,
    #[arg(long, default_value_t = TuneOptions::default().max_gsy)]
    max_gsy: usize,
    #[arg(long, default_value_t = TuneOptions::default().max_candidates)]
    max_candidates: usize,
}

impl TuneFlags {
    fn to_options(&self) -> TuneOptions {
        TuneOptions {
            min_gsy: self.min_gsy,
            max_gsy: self.max_gsy,
            max_candidates: self.max_candidates,
            ..TuneOptions::default()
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    density: f64,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum CompileKind {
    /// SpMM kernel: sparse A (from SMTX) times dense K x N.
    Spmm(CompileSpmmArgs),
    /// Fused im2col sparse 3x3 convolution kernel.
    Conv(CompileConvArgs),
}

#[derive(Args)]
struct CompileSpmmArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Dense matrix column count N.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    mblocks: usize,
    #[arg(long)]
    nblocks: usize,
    #[arg(long)]
    gy: usize,
    /// Seed for value synthesis when the SMTX file has no values line.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    machine: MachineFlags,
}

#[derive(Args)]
struct CompileConvArgs {
    /// Filter matrix, c_out x (c_in*9), in SMTX form.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long = "h")]
    height: usize,
    #[arg(long = "w")]
    width: usize,
    #[arg(long)]
    cin: usize,
    #[arg(long)]
    cout: usize,
    #[arg(long)]
    mblocks: usize,
    #[arg(long)]
    nblocks: usize,
    #[arg(long)]
    gy: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    machine: MachineFlags,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    program: PathBuf,
    /// Input operand: SRTD dense matrix for spmm, SRT3 tensor for conv.
    #[arg(long)]
    b: PathBuf,
    /// Output file (SRTD or SRT3 to match the program kind).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the full metrics report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Cross-check the output against the dense oracle; exit nonzero on
    /// mismatch.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    machine: MachineFlags,
}

#[derive(Subcommand)]
enum TuneKind {
    Spmm(TuneSpmmArgs),
    Conv(TuneConvArgs),
}

#[derive(Args)]
struct TuneSpmmArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, value_parser = parse_mode, default_value = "estimate")]
    mode: TuneMode,
    #[arg(long)]
    verify: bool,
    /// Seed for the simulated B operand (and SMTX value synthesis).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineFlags,
    #[command(flatten)]
    tune: TuneFlags,
}

#[derive(Args)]
struct TuneConvArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long = "h")]
    height: usize,
    #[arg(long = "w")]
    width: usize,
    #[arg(long)]
    cin: usize,
    #[arg(long)]
    cout: usize,
    #[arg(long, value_parser = parse_mode, default_value = "estimate")]
    mode: TuneMode,
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineFlags,
    #[command(flatten)]
    tune: TuneFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite file; the bundled suite runs when omitted.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineFlags,
    #[command(flatten)]
    tune: TuneFlags,
}

fn parse_mode(s: &str) -> Result<TuneMode, String> {
    match s {
        "estimate" => Ok(TuneMode::Estimate),
        "simulate" => Ok(TuneMode::Simulate),
        other => Err(format!("unknown mode {other:?} (estimate|simulate)")),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Compile { kind } => cmd_compile(kind),
        Command::Run(args) => cmd_run(args),
        Command::Tune { kind } => cmd_tune(kind),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn load_matrix(path: &Path, seed: Option<u64>) -> Result<SparseMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    io::read_smtx(&text, seed).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let m = SparseMatrix::random(args.rows, args.cols, args.density, args.seed)?;
    fs::write(&args.output, io::write_smtx(&m))
        .with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "wrote {}: {}x{} nnz={} density={}",
        args.output.display(),
        m.rows(),
        m.cols(),
        m.nnz(),
        m.density()
    );
    Ok(())
}

fn print_program_summary(p: &KernelProgram) {
    println!(
        "kind={} grid={}x{} gy={} gsy={} fma={} footprint={} spill={}",
        if p.dims.is_conv() { "conv" } else { "spmm" },
        p.m_blocks,
        p.n_blocks,
        p.gy,
        p.gsy,
        p.total_fma(),
        p.constant_footprint,
        u8::from(p.spill)
    );
}

fn cmd_compile(kind: CompileKind) -> Result<()> {
    let (program, output) = match kind {
        CompileKind::Spmm(args) => {
            let a = load_matrix(&args.matrix, args.seed)?;
            let problem = SpmmProblem::new(a, args.n)?;
            let config = TileConfig::new(args.mblocks, args.nblocks, args.gy);
            let program = codegen::compile_spmm(&problem, &config, &args.machine.to_params())?;
            (program, args.output)
        }
        CompileKind::Conv(args) => {
            let filter = load_matrix(&args.matrix, args.seed)?;
            if filter.rows() != args.cout {
                bail!(
                    "filter has {} rows but --cout is {}",
                    filter.rows(),
                    args.cout
                );
            }
            let problem = ConvProblem::new(filter, args.height, args.width, args.cin)?;
            let config = TileConfig::new(args.mblocks, args.nblocks, args.gy);
            let program = codegen::compile_conv(&problem, &config, &args.machine.to_params())?;
            (program, args.output)
        }
    };
    let diags = codegen::validate_program(&program, &program.machine);
    if !diags.is_empty() {
        bail!("generated program failed validation: {}", diags[0]);
    }
    fs::write(&output, codegen::write_program(&program))
        .with_context(|| format!("writing {}", output.display()))?;
    print_program_summary(&program);
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.program)
        .with_context(|| format!("reading {}", args.program.display()))?;
    let program = codegen::read_program(&text)?;
    let machine = args.machine.to_params();

    let input_bytes = fs::read(&args.b).with_context(|| format!("reading {}", args.b.display()))?;
    let report = match program.dims {
        ProblemDims::Spmm { .. } => {
            let b = io::read_dense_bin(&mut input_bytes.as_slice())?;
            vgpu::execute(&program, ExecInput::Matrix(&b), &machine)?
        }
        ProblemDims::Conv { .. } => {
            let x = io::read_tensor3_bin(&mut input_bytes.as_slice())?;
            vgpu::execute(&program, ExecInput::Tensor(&x), &machine)?
        }
    };

    if let Some(path) = &args.output {
        let file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        match &report.output {
            vgpu::OutputData::Matrix(m) => io::write_dense_bin(m, &mut w)?,
            vgpu::OutputData::Tensor(t) => io::write_tensor3_bin(t, &mut w)?,
        }
    }
    let report_text = vgpu::write_report(&program, &report.metrics, &machine);
    if let Some(path) = &args.report {
        fs::write(path, &report_text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{report_text}");

    if args.verify {
        let a = codegen::reconstruct_sparse(&program)
            .map_err(|e| anyhow::anyhow!("cannot reconstruct baked matrix: {e}"))?;
        let (expected, tolerance): (Vec<f32>, f64) = match program.dims {
            ProblemDims::Spmm { .. } => {
                let b = io::read_dense_bin(&mut input_bytes.as_slice())?;
                (
                    oracle::gemm_dense(&oracle::to_dense(&a), &b)?.into_data(),
                    tuner::SPMM_TOLERANCE,
                )
            }
            ProblemDims::Conv { .. } => {
                let x = io::read_tensor3_bin(&mut input_bytes.as_slice())?;
                (
                    oracle::conv_direct(&x, &oracle::to_dense(&a))?.into_data(),
                    tuner::CONV_TOLERANCE,
                )
            }
        };
        let error = vgpu::max_relative_error(report.output.data(), &expected);
        if error > tolerance {
            bail!("verification failed: max relative error {error:e} exceeds {tolerance:e}");
        }
        println!("verify ok (max relative error {error:e})");
    }
    Ok(())
}

fn write_tune_outcome(result: &tuner::TuneResult, output: Option<&Path>) -> Result<()> {
    let text = tuner::write_tune_result(result);
    if let Some(path) = output {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    } else {
        print!("{text}");
    }
    println!(
        "evaluated {} configs ({} failed), chosen: mblocks={} nblocks={} gy={}",
        result.evaluated.len(),
        result.failures.len(),
        result.chosen.m_blocks,
        result.chosen.n_blocks,
        result.chosen.gy
    );
    Ok(())
}

fn cmd_tune(kind: TuneKind) -> Result<()> {
    match kind {
        TuneKind::Spmm(args) => {
            let a = load_matrix(&args.matrix, Some(args.seed))?;
            let problem = SpmmProblem::new(a, args.n)?;
            let result = tuner::tune(
                &TuneProblem::Spmm(&problem),
                &args.machine.to_params(),
                args.mode,
                args.verify,
                None,
                args.seed,
                &args.tune.to_options(),
            )?;
            write_tune_outcome(&result, args.output.as_deref())
        }
        TuneKind::Conv(args) => {
            let filter = load_matrix(&args.matrix, Some(args.seed))?;
            if filter.rows() != args.cout {
                bail!(
                    "filter has {} rows but --cout is {}",
                    filter.rows(),
                    args.cout
                );
            }
            let problem = ConvProblem::new(filter, args.height, args.width, args.cin)?;
            let result = tuner::tune(
                &TuneProblem::Conv(&problem),
                &args.machine.to_params(),
                args.mode,
                args.verify,
                None,
                args.seed,
                &args.tune.to_options(),
            )?;
            write_tune_outcome(&result, args.output.as_deref())
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let text = match &args.suite {
        Some(path) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => DEFAULT_SUITE.to_string(),
    };
    let entries = parse_suite(&text)?;
    let machine = args.machine.to_params();
    let opts = args.tune.to_options();

    let mut out =
        String::from("# name kind dims density count nnz chosen cost lane_fma footprint spill\n");
    for entry in &entries {
        let line = bench_entry(entry, &machine, &opts)
            .with_context(|| format!("suite entry {}", entry.name))?;
        println!("{line}");
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(path) = &args.output {
        fs::write(path, &out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn bench_entry(entry: &SuiteEntry, machine: &MachineParams, opts: &TuneOptions) -> Result<String> {
    let seed = entry.seed();
    let (result, chosen_program, nnz, dims_label) = match entry.kind {
        SuiteKind::Spmm { m, k, n } => {
            let a = SparseMatrix::random(m, k, entry.density, seed)?;
            let nnz = a.nnz();
            let problem = SpmmProblem::new(a, n)?;
            let result = tuner::tune(
                &TuneProblem::Spmm(&problem),
                machine,
                TuneMode::Estimate,
                false,
                None,
                seed,
                opts,
            )?;
            let program = result.compile_chosen(&TuneProblem::Spmm(&problem))?;
            (result, program, nnz, format!("{m}x{k}x{n}"))
        }
        SuiteKind::Conv { size, c_in, c_out } => {
            let filter = SparseMatrix::random(c_out, c_in * 9, entry.density, seed)?;
            let nnz = filter.nnz();
            let problem = ConvProblem::new(filter, size, size, c_in)?;
            let result = tuner::tune(
                &TuneProblem::Conv(&problem),
                machine,
                TuneMode::Estimate,
                false,
                None,
                seed,
                opts,
            )?;
            let program = result.compile_chosen(&TuneProblem::Conv(&problem))?;
            (
                result,
                program,
                nnz,
                format!("{size}x{size}x{c_in}x{c_out}"),
            )
        }
    };
    let chosen = result
        .evaluated
        .iter()
        .find(|e| e.config == result.chosen)
        .expect("chosen config is always evaluated");
    let kind = match entry.kind {
        SuiteKind::Spmm { .. } => "spmm",
        SuiteKind::Conv { .. } => "conv",
    };
    let lane_fma = KernelMetrics::from_program(&chosen_program).lane_fma;
    Ok(format!(
        "{} {} {} {} {} {} ({},{},{}) {} {} {} {}",
        entry.name,
        kind,
        dims_label,
        entry.density,
        entry.count,
        nnz,
        result.chosen.m_blocks,
        result.chosen.n_blocks,
        result.chosen.gy,
        chosen.cost,
        lane_fma,
        chosen_program.constant_footprint,
        u8::from(chosen.spill)
    ))
}
