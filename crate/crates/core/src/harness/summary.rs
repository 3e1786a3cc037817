use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::{read_text, write_text};
use crate::metrics::MetricsReport;

use super::config::{parse_seed_list, Method};

/// Metrics (and run diagnostics) of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Numerical side information such as the largest Cholesky jitter.
    pub diagnostics: BTreeMap<String, f64>,
}

impl SeedResult {
    pub fn from_report(seed: u64, report: &MetricsReport) -> Self {
        let metrics = MetricsReport::FIELDS
            .iter()
            .map(|k| (k.to_string(), report.get(k).expect("known field")))
            .collect();
        Self {
            seed,
            metrics,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// Aggregate of one method over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub version: String,
    pub config_hash: String,
    pub method: Method,
    pub seeds: Vec<SeedResult>,
}

/// Mean and sample standard deviation (N − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn values(&self, metric: &str) -> Option<Vec<f64>> {
        self.seeds.iter().map(|s| s.metrics.get(metric).copied()).collect()
    }

    pub fn mean_std(&self, metric: &str) -> Option<(f64, f64)> {
        self.values(metric).map(|v| mean_std(&v))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.iter().map(|s| s.seed).collect()
    }

    /// Deterministic text form: header, per-seed sections, then mean and std.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# uqlora run summary\n");
        let _ = writeln!(out, "version = {}", self.version);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "method = {}", self.method);
        let seeds: Vec<String> = self.seed_list().iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds = {}", seeds.join(","));
        for s in &self.seeds {
            let _ = writeln!(out, "\n[seed {}]", s.seed);
            for (k, v) in &s.metrics {
                let _ = writeln!(out, "{k} = {v}");
            }
            for (k, v) in &s.diagnostics {
                let _ = writeln!(out, "diag.{k} = {v}");
            }
        }
        for (section, pick) in [("mean", 0usize), ("std", 1)] {
            let _ = writeln!(out, "\n[{section}]");
            for k in MetricsReport::FIELDS {
                if let Some(ms) = self.mean_std(k) {
                    let v = if pick == 0 { ms.0 } else { ms.1 };
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
        }
        out
    }

    /// Reads [`RunSummary::to_text`] back; mean and std are recomputed.
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.map(Path::to_path_buf),
            line,
            msg,
        };
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut seeds: Vec<SeedResult> = Vec::new();
        let mut in_seed = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                in_seed = false;
                if let Some(s) = name.strip_prefix("seed ") {
                    let seed = s.trim().parse().map_err(|_| err(i + 1, format!("bad seed {s:?}")))?;
                    seeds.push(SeedResult {
                        seed,
                        metrics: BTreeMap::new(),
                        diagnostics: BTreeMap::new(),
                    });
                    in_seed = true;
                } else if name != "mean" && name != "std" {
                    return Err(err(i + 1, format!("unknown section [{name}]")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(i + 1, "expected key = value".into()))?;
            if in_seed {
                let v: f64 = v.parse().map_err(|_| err(i + 1, format!("bad value for {k}")))?;
                let s = seeds.last_mut().expect("seed section open");
                match k.strip_prefix("diag.") {
                    Some(d) => s.diagnostics.insert(d.to_string(), v),
                    None => s.metrics.insert(k.to_string(), v),
                };
            } else if seeds.is_empty() {
                header.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| err(0, format!("missing header field {k}")))
        };
        let summary = Self {
            version: get("version")?,
            config_hash: get("config_hash")?,
            method: get("method")?.parse()?,
            seeds,
        };
        if parse_seed_list(&get("seeds")?)? != summary.seed_list() {
            return Err(err(0, "seed list does not match the seed sections".into()));
        }
        Ok(summary)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, Some(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary() -> RunSummary {
        let mk = |seed, acc: f64| {
            let mut metrics = BTreeMap::new();
            for k in MetricsReport::FIELDS {
                metrics.insert(k.to_string(), 0.5);
            }
            metrics.insert("acc".into(), acc);
            let mut diagnostics = BTreeMap::new();
            diagnostics.insert("max_jitter".into(), 1e-10);
            SeedResult {
                seed,
                metrics,
                diagnostics,
            }
        };
        RunSummary {
            version: "0.1.0".into(),
            config_hash: "abc".into(),
            method: Method::Bayesian,
            seeds: vec![mk(0, 0.8), mk(1, 0.9), mk(2, 0.1 + 0.2)],
        }
    }

    #[test]
    fn text_round_trip() {
        let s = summary();
        let text = s.to_text();
        assert!(text.contains("[mean]") && text.contains("diag.max_jitter = 0.0000000001"));
        let back = RunSummary::parse(&text, None).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    proptest! {
        #[test]
        fn std_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..8), c in -5.0f64..5.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let (m0, s0) = mean_std(&xs);
            let (m1, s1) = mean_std(&shifted);
            prop_assert!((m1 - m0 - c).abs() < 1e-9);
            prop_assert!((s1 - s0).abs() < 1e-9);
        }
    }
}
