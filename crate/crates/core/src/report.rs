//! Post-processing of block records: run summaries, recovery times, the
//! scalability fit, churn dips and file exports.
//!
//! Imbalance columns: `imbalance` is the max-minus-min utilization spread,
//! `imbalance_index` the mean absolute relative deviation of executed loads.
//! Summaries use the former unless a field says otherwise.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::BlockRecord;

/// Blocks the imbalance must stay below the threshold to count as recovered.
pub const HOLD_WINDOW: usize = 20;
pub const RECOVERY_THRESHOLD: f64 = 0.25;
/// Utilization below which a shard-block counts as unsaturated.
pub const UTIL_TARGET: f64 = 0.75;
/// Efficiency claimed for 64 shards alongside an overhead coefficient of 0.012.
pub const CLAIMED_ETA_64: f64 = 0.925;
pub const CLAIMED_BETA: f64 = 0.012;

/// Blocks from attack start to sustained recovery, or never.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Recovery {
    Blocks(u64),
    Never,
}

impl Recovery {
    pub fn blocks(self) -> Option<u64> {
        match self {
            Recovery::Blocks(b) => Some(b),
            Recovery::Never => None,
        }
    }
}

impl fmt::Display for Recovery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recovery::Blocks(b) => write!(f, "{b}"),
            Recovery::Never => f.write_str("inf"),
        }
    }
}

/// First offset `d >= 0` from `start` such that `series[start + d ..][..hold]`
/// is entirely below `threshold`.
pub fn recovery_time(series: &[f64], threshold: f64, start: usize, hold: usize) -> Recovery {
    let hold = hold.max(1);
    let mut run = 0usize;
    for (i, v) in series.iter().enumerate().skip(start) {
        if *v < threshold {
            run += 1;
            if run == hold {
                return Recovery::Blocks((i + 1 - hold - start) as u64);
            }
        } else {
            run = 0;
        }
    }
    Recovery::Never
}

/// Moments and order statistics of one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Nearest-rank percentile; `values` need not be sorted.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

impl ColumnStats {
    pub fn of(column: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Degenerate(format!("no values in column {column}")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            column: column.to_string(),
            mean,
            std: var.sqrt(),
            p50: percentile(values, 0.5).expect("nonempty"),
            p95: percentile(values, 0.95).expect("nonempty"),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub blocks: usize,
    pub tps: ColumnStats,
    pub latency_p95_ms: ColumnStats,
    pub imbalance: ColumnStats,
    pub imbalance_index: ColumnStats,
    /// Share of shard-blocks with `utilization` below [`UTIL_TARGET`].
    pub util_below_target: f64,
    pub cross_ratio: ColumnStats,
    pub migration_share: ColumnStats,
    pub moved_total: u64,
    /// Recovery of `imbalance` after `attack_start`, when one was given.
    pub recovery: Option<Recovery>,
    pub stake_violations: usize,
    pub gas_violations: usize,
    pub move_violations: usize,
}

fn column(records: &[BlockRecord], f: impl Fn(&BlockRecord) -> f64) -> Vec<f64> {
    records.iter().map(f).collect()
}

pub fn summarize(records: &[BlockRecord], attack_start: Option<u64>) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Degenerate("empty record stream".into()));
    }
    let imbalance = column(records, |r| r.imbalance.to_f64());
    let utils: Vec<f64> = records.iter().flat_map(|r| r.utilization.iter().map(|u| u.to_f64())).collect();
    let below = utils.iter().filter(|u| **u < UTIL_TARGET).count() as f64 / utils.len().max(1) as f64;
    let recovery = attack_start.map(|s| {
        let start = records.iter().position(|r| r.height >= s).unwrap_or(records.len());
        recovery_time(&imbalance, RECOVERY_THRESHOLD, start, HOLD_WINDOW)
    });
    Ok(RunSummary {
        blocks: records.len(),
        tps: ColumnStats::of("tps", &column(records, |r| r.tps as f64))?,
        latency_p95_ms: ColumnStats::of("latency_p95_ms", &column(records, |r| r.latency_p95_ms as f64))?,
        imbalance: ColumnStats::of("imbalance", &imbalance)?,
        imbalance_index: ColumnStats::of("imbalance_index", &column(records, |r| r.imbalance_index.to_f64()))?,
        util_below_target: below,
        cross_ratio: ColumnStats::of("cross_ratio", &column(records, |r| r.cross_ratio.to_f64()))?,
        migration_share: ColumnStats::of("migration_share", &column(records, |r| r.migration_share.to_f64()))?,
        moved_total: records.iter().map(|r| r.moved).sum(),
        recovery,
        stake_violations: records.iter().filter(|r| r.stake_violation).count(),
        gas_violations: records.iter().filter(|r| r.gas_violation).count(),
        move_violations: records.iter().filter(|r| r.move_violation).count(),
    })
}

/// `T(K) = T0 K / (1 + beta (K - 1))` fitted on `K / T = (1 - beta) / T0 + (beta / T0) K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityFit {
    pub t0: f64,
    pub beta: f64,
    pub points: Vec<(u32, f64)>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Coefficient of determination of `T(K)` against the fitted curve.
    pub r_squared: f64,
}

impl ScalabilityFit {
    pub fn predict(&self, k: u32) -> f64 {
        self.t0 * k as f64 / (1.0 + self.beta * (k as f64 - 1.0))
    }

    pub fn eta(&self, k: u32) -> f64 {
        efficiency(self.beta, k)
    }
}

pub fn efficiency(beta: f64, k: u32) -> f64 {
    1.0 / (1.0 + beta * (k as f64 - 1.0))
}

/// Gap between the claimed 64-shard efficiency and the value the formula gives
/// for the claimed coefficient.
pub fn eta_claim_gap() -> (f64, f64) {
    (CLAIMED_ETA_64, efficiency(CLAIMED_BETA, 64))
}

pub fn fit_scalability(points: &[(u32, f64)]) -> Result<ScalabilityFit> {
    let mut ks: Vec<u32> = points.iter().map(|p| p.0).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 3 {
        return Err(Error::Degenerate("scalability fit needs at least 3 distinct shard counts".into()));
    }
    if points.iter().any(|p| !(p.1 > 0.0) || p.0 == 0) {
        return Err(Error::Degenerate("throughput and shard count must be positive".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.0 as f64 / p.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let t0 = 1.0 / (intercept + slope);
    if !t0.is_finite() || t0 <= 0.0 {
        return Err(Error::Degenerate("throughput table does not fit the overhead model".into()));
    }
    let beta = (slope * t0).max(0.0);
    let mut fit = ScalabilityFit { t0, beta, points: points.to_vec(), fitted: Vec::new(), residuals: Vec::new(), r_squared: 0.0 };
    fit.fitted = points.iter().map(|p| fit.predict(p.0)).collect();
    fit.residuals = points.iter().zip(&fit.fitted).map(|(p, f)| p.1 - f).collect();
    let mt = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mt).powi(2)).sum();
    let ss_res: f64 = fit.residuals.iter().map(|r| r * r).sum();
    fit.r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(fit)
}

/// Throughput response around one epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnDip {
    pub boundary: u64,
    pub steady: f64,
    /// `1 - mean(tps[b, b+w)) / mean(tps[b-w, b))`, floored at zero.
    pub dip: f64,
    /// Blocks after the boundary until throughput is back to 90% of steady.
    pub recovery: Recovery,
}

pub fn churn_dip(tps: &[f64], boundary: usize, window: usize) -> Option<ChurnDip> {
    if boundary < window || boundary + window > tps.len() || window == 0 {
        return None;
    }
    let steady = tps[boundary - window..boundary].iter().sum::<f64>() / window as f64;
    if steady <= 0.0 {
        return None;
    }
    let after = tps[boundary..boundary + window].iter().sum::<f64>() / window as f64;
    let recovery = tps[boundary..]
        .iter()
        .position(|x| *x >= 0.9 * steady)
        .map_or(Recovery::Never, |d| Recovery::Blocks(d as u64));
    Some(ChurnDip { boundary: boundary as u64, steady, dip: (1.0 - after / steady).max(0.0), recovery })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Jsonl,
    SvgData,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            "svg-data" => Ok(Format::SvgData),
            other => Err(Error::config("format", format!("unknown format {other:?}; use csv, jsonl or svg-data"))),
        }
    }
}

/// Flat CSV row of a [`BlockRecord`]; vector columns are `;`-joined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub height: u64,
    pub arrivals: u64,
    pub tps: u64,
    pub latency_p95_ms: u64,
    pub imbalance: f64,
    pub imbalance_index: f64,
    pub cross_ratio: f64,
    pub cross_gas_ratio: f64,
    pub migration_gas: u64,
    pub migration_share: f64,
    pub submitted_moves: u64,
    pub moved: u64,
    pub max_byzantine_fraction: f64,
    pub stake_violation: bool,
    pub gas_violation: bool,
    pub move_violation: bool,
    pub committed_shards: u32,
    pub queued: u64,
    pub dropped: u64,
    pub utilization: String,
    pub demand: String,
    pub arrival_gas: u64,
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

impl From<&BlockRecord> for CsvRow {
    fn from(r: &BlockRecord) -> Self {
        Self {
            height: r.height,
            arrivals: r.arrivals,
            tps: r.tps,
            latency_p95_ms: r.latency_p95_ms,
            imbalance: r.imbalance.to_f64(),
            imbalance_index: r.imbalance_index.to_f64(),
            cross_ratio: r.cross_ratio.to_f64(),
            cross_gas_ratio: r.cross_gas_ratio.to_f64(),
            migration_gas: r.migration_gas,
            migration_share: r.migration_share.to_f64(),
            submitted_moves: r.submitted_moves,
            moved: r.moved,
            max_byzantine_fraction: r.max_byzantine_fraction.to_f64(),
            stake_violation: r.stake_violation,
            gas_violation: r.gas_violation,
            move_violation: r.move_violation,
            committed_shards: r.committed_shards,
            queued: r.queued,
            dropped: r.dropped,
            utilization: join(r.utilization.iter().map(|u| u.to_f64())),
            demand: join(r.demand.iter()),
            arrival_gas: r.arrival_gas,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.display().to_string(), line: e.position().map_or(0, |p| p.line()), msg: e.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_csv(path: &Path, records: &[BlockRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in records {
        w.serialize(CsvRow::from(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// One plot-ready series: a `# name` header then `x y` lines.
pub fn write_series(path: &Path, name: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# {name}").map_err(io)?;
    for (x, y) in points {
        writeln!(w, "{x} {y}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Series exported for plots, keyed by file stem.
pub fn plot_series(records: &[BlockRecord]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let by = |f: fn(&BlockRecord) -> f64| records.iter().map(|r| (r.height as f64, f(r))).collect::<Vec<_>>();
    let mut utils: Vec<f64> = records.iter().flat_map(|r| r.utilization.iter().map(|u| u.to_f64())).collect();
    utils.sort_by(f64::total_cmp);
    let n = utils.len().max(1) as f64;
    let cdf = utils.iter().enumerate().map(|(i, u)| (*u, (i + 1) as f64 / n)).collect();
    vec![
        ("tps", by(|r| r.tps as f64)),
        ("imbalance", by(|r| r.imbalance.to_f64())),
        ("migration_share", by(|r| r.migration_share.to_f64())),
        ("latency_p95_ms", by(|r| r.latency_p95_ms as f64)),
        ("utilization_cdf", cdf),
    ]
}

/// Writes `records` under `dir` in the given format and returns the files written.
pub fn export(dir: &Path, records: &[BlockRecord], format: Format) -> Result<Vec<std::path::PathBuf>> {
    match format {
        Format::Csv => {
            let p = dir.join("records.csv");
            write_csv(&p, records)?;
            Ok(vec![p])
        }
        Format::Jsonl => {
            let p = dir.join("records.jsonl");
            write_jsonl(&p, records)?;
            Ok(vec![p])
        }
        Format::SvgData => plot_series(records)
            .into_iter()
            .map(|(name, pts)| {
                let p = dir.join(format!("{name}.dat"));
                write_series(&p, name, &pts).map(|_| p)
            })
            .collect(),
    }
}
