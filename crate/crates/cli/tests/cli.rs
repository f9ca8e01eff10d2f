//! End-to-end tests over the compiled binary: generate, compile, run,
//! verify, tune, and bench on a trimmed suite.

use spargen::io;
use spargen::oracle::to_dense;
use spargen::{DenseMatrix, SparseMatrix, Tensor3};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spargen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spargen"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_compile_run_verify_spmm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = assert_ok(&spargen(
        &[
            "gen",
            "--rows",
            "64",
            "--cols",
            "256",
            "--density",
            "0.10",
            "--seed",
            "7",
            "-o",
            "a.smtx",
        ],
        d,
    ));
    assert!(out.contains("nnz=1638"), "{out}");

    let out = assert_ok(&spargen(
        &[
            "compile",
            "spmm",
            "--matrix",
            "a.smtx",
            "--n",
            "3136",
            "--mblocks",
            "8",
            "--nblocks",
            "16",
            "--gy",
            "4",
            "-o",
            "k.srt",
        ],
        d,
    ));
    assert!(out.contains("fma=1638"), "{out}");
    assert!(out.contains("footprint=6552"), "{out}");

    let b = DenseMatrix::random(256, 3136, 11);
    let mut buf = Vec::new();
    io::write_dense_bin(&b, &mut buf).unwrap();
    fs::write(d.join("b.srtd"), buf).unwrap();

    let out = assert_ok(&spargen(
        &[
            "run",
            "--program",
            "k.srt",
            "--b",
            "b.srtd",
            "-o",
            "c.srtd",
            "--report",
            "report.txt",
            "--verify",
        ],
        d,
    ));
    // Work law surfaces in the report: 1638 * 3136 lane FMAs.
    assert!(out.contains("lane_fma 5136768"), "{out}");
    assert!(out.contains("verify ok"), "{out}");
    assert!(d.join("c.srtd").exists());
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    assert!(report.contains("constant_footprint 6552"), "{report}");
}

#[test]
fn run_on_identity_reproduces_dense_a() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&spargen(
        &[
            "gen",
            "--rows",
            "8",
            "--cols",
            "8",
            "--density",
            "0.3",
            "--seed",
            "2",
            "-o",
            "a.smtx",
        ],
        d,
    ));
    assert_ok(&spargen(
        &[
            "compile",
            "spmm",
            "--matrix",
            "a.smtx",
            "--n",
            "8",
            "--mblocks",
            "2",
            "--nblocks",
            "2",
            "--gy",
            "2",
            "-o",
            "k.srt",
        ],
        d,
    ));
    let mut buf = Vec::new();
    io::write_dense_bin(&DenseMatrix::identity(8), &mut buf).unwrap();
    fs::write(d.join("i.srtd"), buf).unwrap();
    assert_ok(&spargen(
        &["run", "--program", "k.srt", "--b", "i.srtd", "-o", "c.srtd"],
        d,
    ));

    let a = io::read_smtx(&fs::read_to_string(d.join("a.smtx")).unwrap(), None).unwrap();
    let c = io::read_dense_bin(&mut fs::read(d.join("c.srtd")).unwrap().as_slice()).unwrap();
    assert_eq!(c, to_dense(&a));
}

#[test]
fn conv_compile_run_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let filter = SparseMatrix::random(16, 8 * 9, 0.2, 5).unwrap();
    fs::write(d.join("f.smtx"), io::write_smtx(&filter)).unwrap();

    assert_ok(&spargen(
        &[
            "compile",
            "conv",
            "--matrix",
            "f.smtx",
            "--h",
            "8",
            "--w",
            "8",
            "--cin",
            "8",
            "--cout",
            "16",
            "--mblocks",
            "2",
            "--nblocks",
            "8",
            "--gy",
            "2",
            "-o",
            "k.srt",
        ],
        d,
    ));
    let x = Tensor3::random(8, 8, 8, 31);
    let mut buf = Vec::new();
    io::write_tensor3_bin(&x, &mut buf).unwrap();
    fs::write(d.join("x.srt3"), buf).unwrap();

    let out = assert_ok(&spargen(
        &[
            "run",
            "--program",
            "k.srt",
            "--b",
            "x.srt3",
            "-o",
            "y.srt3",
            "--verify",
        ],
        d,
    ));
    assert!(out.contains("verify ok"), "{out}");
    let y = io::read_tensor3_bin(&mut fs::read(d.join("y.srt3")).unwrap().as_slice()).unwrap();
    assert_eq!((y.channels(), y.height(), y.width()), (16, 8, 8));
}

#[test]
fn tune_is_byte_deterministic_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&spargen(
        &[
            "gen",
            "--rows",
            "64",
            "--cols",
            "256",
            "--density",
            "0.10",
            "--seed",
            "7",
            "-o",
            "a.smtx",
        ],
        d,
    ));
    let out = assert_ok(&spargen(
        &[
            "tune", "spmm", "--matrix", "a.smtx", "--n", "3136", "--verify", "--mode", "simulate",
            "-o", "t1.txt",
        ],
        d,
    ));
    assert!(out.contains("evaluated 100 configs"), "{out}");
    assert_ok(&spargen(
        &[
            "tune", "spmm", "--matrix", "a.smtx", "--n", "3136", "--verify", "--mode", "simulate",
            "-o", "t2.txt",
        ],
        d,
    ));
    let t1 = fs::read(d.join("t1.txt")).unwrap();
    let t2 = fs::read(d.join("t2.txt")).unwrap();
    assert_eq!(t1, t2, "tune output must be byte-identical across reruns");
}

#[test]
fn infeasible_config_and_bad_density_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&spargen(
        &[
            "gen",
            "--rows",
            "8",
            "--cols",
            "8",
            "--density",
            "0.5",
            "--seed",
            "1",
            "-o",
            "a.smtx",
        ],
        d,
    ));
    // gy=32 * gsy=8 exceeds a 64-thread machine.
    let out = spargen(
        &[
            "compile",
            "spmm",
            "--matrix",
            "a.smtx",
            "--n",
            "8",
            "--mblocks",
            "1",
            "--nblocks",
            "1",
            "--gy",
            "32",
            "--max-threads",
            "64",
            "-o",
            "k.srt",
        ],
        d,
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("max_threads_per_block"), "{stderr}");

    let out = spargen(
        &[
            "gen",
            "--rows",
            "4",
            "--cols",
            "4",
            "--density",
            "0",
            "--seed",
            "1",
            "-o",
            "z.smtx",
        ],
        d,
    );
    assert!(!out.status.success());
}

#[test]
fn bench_reports_spill_for_large_layers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let suite = "\
spmm rn50-1 64 256 3136 0.10 2
spmm rn50-7 512 2048 49 0.10 3
conv rn50c-4 7 512 512 0.10 1
";
    fs::write(d.join("suite.txt"), suite).unwrap();
    let out = assert_ok(&spargen(
        &["bench", "--suite", "suite.txt", "-o", "bench.txt"],
        d,
    ));
    let table = fs::read_to_string(d.join("bench.txt")).unwrap();
    assert_eq!(out.trim().lines().count(), 3);
    // Layer 7: 104858 nonzeros bake 419432 bytes, past the 64 KiB cache.
    let row7 = table.lines().find(|l| l.starts_with("rn50-7")).unwrap();
    assert!(row7.contains("104858"), "{row7}");
    assert!(
        row7.trim_end().ends_with(" 1"),
        "spill flag expected: {row7}"
    );
    // Layer 1 fits comfortably.
    let row1 = table.lines().find(|l| l.starts_with("rn50-1")).unwrap();
    assert!(row1.trim_end().ends_with(" 0"), "no spill expected: {row1}");
}

#[test]
fn smtx_without_values_needs_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = SparseMatrix::random(6, 6, 0.4, 9).unwrap();
    let text = io::write_smtx(&a);
    let positions_only: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
    fs::write(d.join("p.smtx"), positions_only).unwrap();

    let out = spargen(
        &[
            "compile",
            "spmm",
            "--matrix",
            "p.smtx",
            "--n",
            "4",
            "--mblocks",
            "1",
            "--nblocks",
            "1",
            "--gy",
            "1",
            "-o",
            "k.srt",
        ],
        d,
    );
    assert!(
        !out.status.success(),
        "missing values must fail without --seed"
    );
    assert_ok(&spargen(
        &[
            "compile",
            "spmm",
            "--matrix",
            "p.smtx",
            "--n",
            "4",
            "--mblocks",
            "1",
            "--nblocks",
            "1",
            "--gy",
            "1",
            "--seed",
            "3",
            "-o",
            "k.srt",
        ],
        d,
    ));
}
