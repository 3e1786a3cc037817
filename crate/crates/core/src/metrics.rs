//! Evaluation suite: accuracy, NLL, ECE with reliability bins, confusion
//! metrics, AUROC and a one-sided Welch t-test for comparing runs.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
const PROB_FLOOR: f64 = 1e-12;

/// Labels with their predicted class-probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    labels: Vec<u8>,
    probs: Vec<[f64; 2]>,
}

impl PredictionSet {
    pub fn new(labels: Vec<u8>, probs: Vec<[f64; 2]>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("empty prediction set"));
        }
        if labels.len() != probs.len() {
            return Err(Error::invalid("label and probability counts differ"));
        }
        for (i, (l, p)) in labels.iter().zip(&probs).enumerate() {
            if *l > 1 {
                return Err(Error::invalid(format!("example {i}: label {l} outside {{0, 1}}")));
            }
            if !p.iter().all(|v| (0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "example {i}: {p:?} is not a probability vector"
                )));
            }
        }
        Ok(Self { labels, probs })
    }

    /// Builds the set from positive-class probabilities.
    pub fn from_positive(labels: Vec<u8>, p1: &[f64]) -> Result<Self> {
        Self::new(labels, p1.iter().map(|&p| [1.0 - p, p]).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn probs(&self) -> &[[f64; 2]] {
        &self.probs
    }

    /// Class 1 wins ties at 0.5.
    pub fn predicted_class(&self, i: usize) -> u8 {
        u8::from(self.probs[i][1] >= self.probs[i][0])
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.probs[i][0].max(self.probs[i][1])
    }
}

pub fn nll(preds: &PredictionSet) -> f64 {
    let total: f64 = preds
        .labels
        .iter()
        .zip(&preds.probs)
        .map(|(&l, p)| -p[l as usize].max(PROB_FLOOR).ln())
        .sum();
    total / preds.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub accuracy: f64,
    /// Zero for empty bins.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean gap between bin accuracy and bin confidence.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,accuracy,confidence\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.accuracy, b.confidence);
        }
        out
    }

    /// Parses the CSV written by [`ReliabilityBins::to_csv`]; lines that do not
    /// have five fields (such as a trailing `ece=` footer) end the table.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "bin_lo,bin_hi,count,accuracy,confidence" => {}
            _ => return Err(parse_error(1, "missing reliability CSV header")),
        }
        let mut bins = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                break;
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_error(i + 1, &format!("bad number {s:?}")))
            };
            bins.push(ReliabilityBin {
                lo: num(fields[0])?,
                hi: num(fields[1])?,
                count: fields[2].trim().parse().map_err(|_| parse_error(i + 1, "bad count"))?,
                accuracy: num(fields[3])?,
                confidence: num(fields[4])?,
            });
        }
        Ok(Self { bins })
    }
}

fn parse_error(line: usize, msg: &str) -> Error {
    Error::Parse {
        path: None,
        line,
        msg: msg.to_string(),
    }
}

/// Equal-width confidence bins; index = min(floor(conf·M), M−1).
pub fn reliability_bins(preds: &PredictionSet, num_bins: usize) -> Result<ReliabilityBins> {
    if num_bins == 0 {
        return Err(Error::invalid("at least one bin is required"));
    }
    let m = num_bins as f64;
    let mut counts = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for i in 0..preds.len() {
        let conf = preds.confidence(i);
        let b = ((conf * m).floor() as usize).min(num_bins - 1);
        counts[b] += 1;
        conf_sum[b] += conf;
        if preds.predicted_class(i) == preds.labels[i] {
            correct[b] += 1;
        }
    }
    let bins = (0..num_bins)
        .map(|b| {
            let n = counts[b];
            let (accuracy, confidence) = if n == 0 {
                (0.0, 0.0)
            } else {
                (correct[b] as f64 / n as f64, conf_sum[b] / n as f64)
            };
            ReliabilityBin {
                lo: b as f64 / m,
                hi: (b + 1) as f64 / m,
                count: n,
                accuracy,
                confidence,
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

pub fn ece(preds: &PredictionSet, num_bins: usize) -> Result<f64> {
    Ok(reliability_bins(preds, num_bins)?.ece())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Positive prediction iff `p₁ ≥ threshold`; zero denominators give 0.
pub fn confusion_metrics(preds: &PredictionSet, threshold: f64) -> ConfusionMetrics {
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&l, p) in preds.labels.iter().zip(&preds.probs) {
        match (p[1] >= threshold, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let precision = ratio(tpf, tpf + fpf);
    let recall = ratio(tpf, tpf + fnf);
    let den = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
    ConfusionMetrics {
        tp,
        tn,
        fp,
        fn_,
        accuracy: (tpf + tnf) / preds.len() as f64,
        specificity: ratio(tnf, tnf + fpf),
        precision,
        f1: ratio(2.0 * precision * recall, precision + recall),
        mcc: ratio(tpf * tnf - fpf * fnf, den),
    }
}

/// Mann–Whitney AUROC on the class-1 probability, ties counted as ½.
pub fn auroc(preds: &PredictionSet) -> Result<f64> {
    let mut scored: Vec<(f64, u8)> = preds
        .probs
        .iter()
        .map(|p| p[1])
        .zip(preds.labels.iter().copied())
        .collect();
    let n_pos = scored.iter().filter(|s| s.1 == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes in the labels".into()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * scored[i..j].iter().filter(|s| s.1 == 1).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Alternative hypothesis: mean(a) > mean(b).
    Greater,
    /// Alternative hypothesis: mean(a) < mean(b).
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// One-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
///
/// When both samples are constant the test degenerates: equal means give
/// `p = 0.5`, unequal means give `p ∈ {0, 1}` according to `direction`.
pub fn welch_ttest_one_sided(a: &[f64], b: &[f64], direction: Direction) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two values"));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let sign = match direction {
        Direction::Greater => 1.0,
        Direction::Less => -1.0,
    };
    if se2 == 0.0 {
        let dof = (a.len() + b.len() - 2) as f64;
        let diff = sign * (ma - mb);
        let (t, p) = if diff == 0.0 {
            (0.0, 0.5)
        } else if diff > 0.0 {
            (sign * f64::INFINITY, 0.0)
        } else {
            (-sign * f64::INFINITY, 1.0)
        };
        return Ok(WelchResult { t, dof, p });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::computation(e.to_string()))?;
    let p = match direction {
        Direction::Greater => dist.sf(t),
        Direction::Less => dist.cdf(t),
    };
    Ok(WelchResult { t, dof, p })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auroc: f64,
    pub reliability: ReliabilityBins,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 8] = ["acc", "nll", "ece", "specificity", "precision", "f1", "mcc", "auroc"];

    pub fn get(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "acc" => self.acc,
            "nll" => self.nll,
            "ece" => self.ece,
            "specificity" => self.specificity,
            "precision" => self.precision,
            "f1" => self.f1,
            "mcc" => self.mcc,
            "auroc" => self.auroc,
            _ => return None,
        })
    }

    /// Flat `key=value` record, one metric per line, plus the bin count.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in Self::FIELDS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("known field"));
        }
        let _ = writeln!(out, "bins={}", self.reliability.bins.len());
        out
    }
}

/// Parses the metric lines of a `key=value` report into (name, value) pairs.
pub fn parse_kv_metrics(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_error(i + 1, "expected key=value"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| parse_error(i + 1, &format!("bad value for {k}")))?;
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}

pub fn emit_report(preds: &PredictionSet, num_bins: usize) -> Result<MetricsReport> {
    let reliability = reliability_bins(preds, num_bins)?;
    let cm = confusion_metrics(preds, 0.5);
    Ok(MetricsReport {
        acc: cm.accuracy,
        nll: nll(preds),
        ece: reliability.ece(),
        specificity: cm.specificity,
        precision: cm.precision,
        f1: cm.f1,
        mcc: cm.mcc,
        auroc: auroc(preds)?,
        reliability,
    })
}
