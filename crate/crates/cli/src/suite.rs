//! Benchmark problem suite: a plain text table of SpMM and conv layer
//! shapes with per-network occurrence counts.

use anyhow::{bail, Context, Result};

/// The suite shipped with the binary; `bench` runs it when no file is given.
pub const DEFAULT_SUITE: &str = include_str!("../data/default_suite.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    Spmm {
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        size: usize,
        c_in: usize,
        c_out: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: SuiteKind,
    pub density: f64,
    pub count: usize,
}

impl SuiteEntry {
    /// Frozen per-row seed for weight synthesis.
    pub fn seed(&self) -> u64 {
        fnv1a(format!("{}:{}", self.name, self.density).as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn parse_suite(text: &str) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 7 {
            bail!(
                "suite line {}: expected 7 columns, got {}",
                i + 1,
                toks.len()
            );
        }
        let num = |tok: &str| -> Result<usize> {
            tok.parse::<usize>()
                .with_context(|| format!("suite line {}: bad integer {tok:?}", i + 1))
        };
        let kind = match toks[0] {
            "spmm" => SuiteKind::Spmm {
                m: num(toks[2])?,
                k: num(toks[3])?,
                n: num(toks[4])?,
            },
            "conv" => SuiteKind::Conv {
                size: num(toks[2])?,
                c_in: num(toks[3])?,
                c_out: num(toks[4])?,
            },
            other => bail!("suite line {}: unknown kind {other:?}", i + 1),
        };
        let density: f64 = toks[5]
            .parse()
            .with_context(|| format!("suite line {}: bad density", i + 1))?;
        if !(density > 0.0 && density <= 1.0) {
            bail!("suite line {}: density {density} out of (0, 1]", i + 1);
        }
        let dims_positive = match kind {
            SuiteKind::Spmm { m, k, n } => m > 0 && k > 0 && n > 0,
            SuiteKind::Conv { size, c_in, c_out } => size > 0 && c_in > 0 && c_out > 0,
        };
        if !dims_positive {
            bail!("suite line {}: dimensions must be positive", i + 1);
        }
        entries.push(SuiteEntry {
            name: toks[1].to_string(),
            kind,
            density,
            count: num(toks[6])?,
        });
    }
    Ok(entries)
}
