//! Analytic cost model and wall-clock microbenchmarks for the three
//! self-attention implementations.
//!
//! The counts make the complexity argument exact: standard self-attention
//! materializes an (N·(K+1))² map, the masked variant scores the same map but
//! only N(K+1)² + (K+1)N² − N(K+1) entries survive the mask, and the grouped
//! variant only ever builds the two small maps, at the price of running its
//! projections twice (one set per sublayer).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{group_self_attention_flat, GroupAttnParams, QueryLayout, SelfAttnMode};
use crate::error::{Error, Result};
use crate::numgrad::gradcheck::seeded_uniform;
use crate::numgrad::{ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    Standard,
    Masked,
    Grouped,
}

impl AttnVariant {
    pub const ALL: [AttnVariant; 3] = [AttnVariant::Standard, AttnVariant::Masked, AttnVariant::Grouped];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttnVariant::Standard => "standard",
            AttnVariant::Masked => "masked",
            AttnVariant::Grouped => "grouped",
        }
    }
}

impl std::str::FromStr for AttnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttnVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCase {
    pub variant: AttnVariant,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Config(format!("repeats must be ≥ 3, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::Config(format!("warmup must be ≥ 1, got {}", self.warmup)));
        }
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("bench case needs n ≥ 1 and k ≥ 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostCounts {
    /// Attention-map scalars actually scored.
    pub map_entries: u64,
    /// FLOPs spent on the map: QK dots, softmax, and value weighting.
    pub map_flops: u64,
    /// FLOPs spent on the Q/K/V/output projections.
    pub projection_flops: u64,
}

/// Analytic cost of one self-attention block in the given variant.
///
/// Map entries: standard (N(K+1))²; grouped N(K+1)² + (K+1)N²; masked is the
/// union of the two group patterns, N(K+1)² + (K+1)N² − N(K+1) (the diagonal
/// is in both). Each scored entry costs 2D for the QK dot, 2D for value
/// accumulation, and 5 for scale + softmax bookkeeping. Projections cost
/// 2RD² + RD per matrix; grouped runs the four of them twice (one set per
/// sublayer).
pub fn count_costs(case: &BenchCase) -> Result<CostCounts> {
    case.validate()?;
    let (n, k, d) = (case.n as u64, case.k as u64, case.d as u64);
    let r = n * (k + 1);
    let grouped = n * (k + 1) * (k + 1) + (k + 1) * n * n;
    let map_entries = match case.variant {
        AttnVariant::Standard => r * r,
        AttnVariant::Masked => grouped - r,
        AttnVariant::Grouped => grouped,
    };
    let proj_once = 8 * r * d * d + 4 * r * d;
    let projection_flops = match case.variant {
        AttnVariant::Grouped => 2 * proj_once,
        _ => proj_once,
    };
    Ok(CostCounts {
        map_entries,
        map_flops: map_entries * (4 * d + 5),
        projection_flops,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: AttnVariant,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub map_entries: u64,
    pub map_flops: u64,
    pub projection_flops: u64,
    pub median_ns: u64,
    pub min_ns: u64,
    /// (max − min) / median over the timed repeats.
    pub dispersion: f64,
    /// Iterations folded into each repeat when a single forward was too fast
    /// for the timer.
    pub inner_iters: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn mode_for(variant: AttnVariant) -> SelfAttnMode {
    match variant {
        AttnVariant::Standard => SelfAttnMode::Standard,
        AttnVariant::Masked => SelfAttnMode::MaskedStandard,
        AttnVariant::Grouped => SelfAttnMode::GroupUnshared,
    }
}

/// Shortest interval the wall clock can resolve, estimated once per call.
fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut dt = t0.elapsed();
        while dt.is_zero() {
            dt = t0.elapsed();
        }
        best = best.min(dt.as_nanos() as u64);
    }
    best.max(1)
}

/// Time the self-attention sublayer(s) of each case: fixed random inputs,
/// warmup runs, then the median and minimum of the timed repeats. Cases too
/// fast for the timer are folded (many forwards per measurement) so every
/// reading spans well over the timer's resolution.
pub fn run_benchmark(cases: &[BenchCase]) -> Result<BenchReport> {
    let resolution = timer_resolution_ns();
    let floor_ns = resolution.saturating_mul(200).max(20_000);
    let mut rows = Vec::with_capacity(cases.len());

    for case in cases {
        let costs = count_costs(case)?;
        let layout = QueryLayout::new(case.n, case.k)?;
        let within = layout.instance_groups();
        let across = layout.type_groups();
        let mode = mode_for(case.variant);

        let mut store: ParamStore<f64> = ParamStore::new();
        let mut seed_rng = seed_rng(0xB13C + case.n as u64 * 31 + case.k as u64);
        let params = GroupAttnParams::create(&mut store, "bench", case.d, case.heads, &mut seed_rng)?;
        let x_t = seeded_uniform::<f64>(vec![layout.total(), case.d], -1.0, 1.0, 7);

        let run_once = || -> Result<()> {
            let mut tape = Tape::inference();
            let x = tape.constant(x_t.clone());
            let y = group_self_attention_flat(&mut tape, &store, x, &within, &across, &params, mode, None)?;
            std::hint::black_box(tape.data(y)[0]);
            Ok(())
        };

        for _ in 0..case.warmup {
            run_once()?;
        }

        // probe to pick how many forwards one reading spans
        let probe = {
            let t0 = Instant::now();
            run_once()?;
            (t0.elapsed().as_nanos() as u64).max(1)
        };
        let inner_iters = if probe < floor_ns {
            (floor_ns / probe + 1) as usize
        } else {
            1
        };

        let mut samples = Vec::with_capacity(case.repeats);
        for _ in 0..case.repeats {
            let t0 = Instant::now();
            for _ in 0..inner_iters {
                run_once()?;
            }
            samples.push((t0.elapsed().as_nanos() as u64 / inner_iters as u64).max(1));
        }
        samples.sort_unstable();
        let median_ns = samples[samples.len() / 2];
        let min_ns = samples[0];
        let max_ns = *samples.last().expect("repeats ≥ 3");
        rows.push(BenchRow {
            variant: case.variant,
            n: case.n,
            k: case.k,
            d: case.d,
            heads: case.heads,
            map_entries: costs.map_entries,
            map_flops: costs.map_flops,
            projection_flops: costs.projection_flops,
            median_ns,
            min_ns,
            dispersion: (max_ns - min_ns) as f64 / median_ns as f64,
            inner_iters,
        });
    }

    Ok(BenchReport { rows })
}

fn seed_rng(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv or json)"))),
        }
    }
}

pub const CSV_HEADER: &str = "variant,N,K,D,heads,map_entries,map_flops,projection_flops,median_ns,min_ns";

pub fn emit_report(report: &BenchReport, path: &str, format: ReportFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Data(format!("writing {path}: {e}")))?;
    let mut out = BufWriter::new(file);
    let res = match format {
        ReportFormat::Csv => write_csv(&mut out, report),
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(|e| Error::Data(format!("writing {path}: {e}")))
        }
    };
    res?;
    out.flush().map_err(|e| Error::Data(format!("writing {path}: {e}")))?;
    Ok(())
}

fn write_csv(out: &mut impl Write, report: &BenchReport) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.as_str(),
            r.n,
            r.k,
            r.d,
            r.heads,
            r.map_entries,
            r.map_flops,
            r.projection_flops,
            r.median_ns,
            r.min_ns
        )?;
    }
    Ok(())
}
