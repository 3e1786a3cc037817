use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::{read_text, write_text};
use crate::metrics::{reliability_bins, welch_ttest_one_sided, Direction, ReliabilityBins, WelchResult};

use super::config::{Method, RunConfig};
use super::dump::PredictionDump;
use super::run::run_methods;
use super::summary::{mean_std, RunSummary};

/// Metrics shown in the sweep table.
pub const SWEEP_METRICS: [&str; 3] = ["acc", "nll", "ece"];

pub const SWEEP_HEADER: &str = "rank\tmethod\tacc\tnll\tece";

/// One (rank, method) cell: mean ± std per metric, or the failure message.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub rank: usize,
    pub method: Method,
    pub outcome: std::result::Result<Vec<(f64, f64)>, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, rank: usize, method: Method) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.rank == rank && c.method == method)
    }

    /// Tab-separated table, rows ordered by rank then method.
    pub fn to_table(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# mean±std over seeds {}\n{SWEEP_HEADER}\n", seeds.join(","));
        for c in &self.cells {
            let _ = write!(out, "{}\t{}", c.rank, c.method);
            match &c.outcome {
                Ok(values) => {
                    for (m, s) in values {
                        let _ = write!(out, "\t{m}±{s}");
                    }
                }
                Err(msg) => {
                    let msg = msg.replace(['\t', '\n'], " ");
                    for _ in SWEEP_METRICS {
                        let _ = write!(out, "\tFAILED");
                    }
                    let _ = write!(out, "\t# {msg}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: None, line, msg };
        let mut seeds = Vec::new();
        let mut cells = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# mean±std over seeds ") {
                seeds = super::config::parse_seed_list(rest)?;
                continue;
            }
            if line == SWEEP_HEADER {
                header_seen = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                return Err(err(i + 1, "row before the table header".into()));
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 2 + SWEEP_METRICS.len() {
                return Err(err(
                    i + 1,
                    format!("expected at least {} fields", 2 + SWEEP_METRICS.len()),
                ));
            }
            let rank = f[0].parse().map_err(|_| err(i + 1, format!("bad rank {:?}", f[0])))?;
            let method: Method = f[1].parse()?;
            let outcome = if f[2] == "FAILED" {
                Err(f.get(5).and_then(|m| m.strip_prefix("# ")).unwrap_or("").to_string())
            } else {
                let mut values = Vec::new();
                for cell in &f[2..2 + SWEEP_METRICS.len()] {
                    let (m, s) = cell
                        .split_once('±')
                        .ok_or_else(|| err(i + 1, format!("expected mean±std, got {cell:?}")))?;
                    let num = |v: &str| v.parse::<f64>().map_err(|_| err(i + 1, format!("bad number {v:?}")));
                    values.push((num(m)?, num(s)?));
                }
                Ok(values)
            };
            cells.push(SweepCell { rank, method, outcome });
        }
        if !header_seen {
            return Err(err(1, "missing sweep table header".into()));
        }
        Ok(Self { seeds, cells })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: Some(path.to_path_buf()),
                line,
                msg,
            },
            other => other,
        })
    }
}

fn cell_values(summary: &RunSummary) -> Vec<(f64, f64)> {
    SWEEP_METRICS
        .iter()
        .map(|m| summary.values(m).map_or((f64::NAN, f64::NAN), |v| mean_std(&v)))
        .collect()
}

/// Runs every method at every rank (models shared across methods within a
/// rank) and writes `sweep.tsv` under the output directory.
pub fn sweep_rank(config: &RunConfig, ranks: &[usize]) -> Result<SweepReport> {
    if ranks.is_empty() {
        return Err(Error::invalid("at least one rank is required"));
    }
    let mut cells = Vec::new();
    for &rank in ranks {
        let mut cfg = config.clone();
        cfg.lora.rank = rank;
        let outcomes: Vec<std::result::Result<Vec<(f64, f64)>, String>> = match run_methods(&cfg, &Method::ALL) {
            Ok(list) => list
                .into_iter()
                .map(|r| r.map(|s| cell_values(&s)).map_err(|e| e.to_string()))
                .collect(),
            Err(e) => Method::ALL.iter().map(|_| Err(e.to_string())).collect(),
        };
        for (method, outcome) in Method::ALL.into_iter().zip(outcomes) {
            cells.push(SweepCell { rank, method, outcome });
        }
    }
    let report = SweepReport {
        seeds: config.seeds.clone(),
        cells,
    };
    write_text(&config.out_dir.join("sweep.tsv"), &report.to_table())?;
    Ok(report)
}

/// Significance level used by [`compare_runs`].
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch: WelchResult,
    pub significant: bool,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        format!(
            "metric={}\nmean_a={}\nmean_b={}\nt={}\ndof={}\np={}\nsignificant={}\n",
            self.metric, self.mean_a, self.mean_b, self.welch.t, self.welch.dof, self.welch.p, self.significant
        )
    }
}

/// One-sided Welch test on per-seed values of `metric`; `Greater` asks
/// whether run A's mean exceeds run B's.
pub fn compare_runs(a: &RunSummary, b: &RunSummary, metric: &str, direction: Direction) -> Result<Comparison> {
    let va = a
        .values(metric)
        .ok_or_else(|| Error::invalid(format!("run A has no metric {metric}")))?;
    let vb = b
        .values(metric)
        .ok_or_else(|| Error::invalid(format!("run B has no metric {metric}")))?;
    if va.len() < 2 || vb.len() < 2 {
        return Err(Error::invalid("a significance test needs at least two seeds per run"));
    }
    let welch = welch_ttest_one_sided(&va, &vb, direction)?;
    Ok(Comparison {
        metric: metric.to_string(),
        mean_a: mean_std(&va).0,
        mean_b: mean_std(&vb).0,
        significant: welch.p < SIGNIFICANCE,
        welch,
    })
}

/// Bins one probability column of a prediction dump (the rightmost
/// available one by default) and writes the CSV with an `ece` footer.
pub fn emit_reliability_csv(
    dump_path: &Path,
    column: Option<&str>,
    bins: usize,
    out: &Path,
) -> Result<ReliabilityBins> {
    let dump = PredictionDump::load(dump_path)?;
    let column = match column {
        Some(c) => c,
        None => dump
            .default_column()
            .ok_or_else(|| Error::invalid("the dump has no complete probability column"))?,
    };
    let table = reliability_bins(&dump.prediction_set(column)?, bins)?;
    write_text(out, &format!("{}ece,{}\n", table.to_csv(), table.ece()))?;
    Ok(table)
}
