use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::data::{encode_dataset, generate_synthetic, load_tsv, split, write_tsv, Dataset, EncodedExample, Vocab};
use crate::ensemble::{ensemble_predict_members, member_seeds, train_ensemble, LoraEnsemble};
use crate::error::{Error, Result};
use crate::fsio::write_text;
use crate::laplace::{fit_laplace, kfac_trace_gap, LaplacePosterior};
use crate::metrics::{emit_report, nll, MetricsReport, PredictionSet};
use crate::model::{init_backbone, save_model, FrozenBackbone, LoraModel};
use crate::predict::predict_bayesian;
use crate::train::{train_from_seed, write_loss_log, LossRecord};

use super::config::{DatasetSpec, Method, RunConfig};
use super::dump::PredictionDump;
use super::summary::{RunSummary, SeedResult};

/// Slack allowed when checking ensemble NLL against the mean member NLL.
pub const JENSEN_TOLERANCE: f64 = 1e-12;

pub const SUMMARY_FILE: &str = "summary.txt";

/// The train/test split of a configured dataset, raw and encoded.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub train_encoded: Vec<EncodedExample>,
    pub test_encoded: Vec<EncodedExample>,
}

impl PreparedData {
    pub fn train_tokens(&self) -> Vec<&[u32]> {
        self.train_encoded.iter().map(|e| e.tokens.as_slice()).collect()
    }

    pub fn test_tokens(&self) -> Vec<&[u32]> {
        self.test_encoded.iter().map(|e| e.tokens.as_slice()).collect()
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            n_proteins,
            n_pairs,
            latent_dim,
            seed,
        } => Ok(generate_synthetic(*n_proteins, *n_pairs, *latent_dim, *seed)?.dataset),
        DatasetSpec::Tsv(path) => load_tsv(path),
    }
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let full = load_dataset(&config.dataset)?;
    let (train, test) = split(&full, config.train_fraction, config.split_seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("both splits must be non-empty"));
    }
    let vocab = Vocab::default();
    Ok(PreparedData {
        train_encoded: encode_dataset(&train, &vocab, config.max_len)?,
        test_encoded: encode_dataset(&test, &vocab, config.max_len)?,
        train,
        test,
    })
}

pub fn build_backbone(config: &RunConfig) -> Result<Arc<FrozenBackbone>> {
    Ok(Arc::new(init_backbone(
        &config.backbone_config(),
        config.backbone_seed,
    )?))
}

/// Output directory of a configuration: `out_dir/run-<hash prefix>`.
pub fn run_dir(config: &RunConfig) -> Result<PathBuf> {
    Ok(config.out_dir.join(format!("run-{}", config.short_hash()?)))
}

pub fn predict_map(model: &LoraModel, tokens: &[&[u32]]) -> Result<Vec<f64>> {
    tokens.iter().map(|t| Ok(model.predict_proba(t)?[1])).collect()
}

/// Positive-class Bayesian probabilities and the largest Cholesky jitter used.
pub fn predict_bayes_p1(
    model: &LoraModel,
    posterior: &LaplacePosterior,
    tokens: &[&[u32]],
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let preds = predict_bayesian(model, posterior, tokens, samples, seed)?;
    let jitter = preds.iter().map(|p| p.jitter).fold(0.0, f64::max);
    Ok((preds.into_iter().map(|p| p.probs[1]).collect(), jitter))
}

/// Averaged positive-class probabilities plus each member's own.
pub fn predict_ensemble_p1(ensemble: &LoraEnsemble, tokens: &[&[u32]]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut avg = Vec::with_capacity(tokens.len());
    let mut members = vec![Vec::with_capacity(tokens.len()); ensemble.len()];
    for t in tokens {
        let (p, per) = ensemble_predict_members(ensemble, t)?;
        avg.push(p[1]);
        for (m, q) in members.iter_mut().zip(per) {
            m.push(q[1]);
        }
    }
    Ok((avg, members))
}

/// Mean member NLL minus ensemble NLL; a negative margin beyond
/// [`JENSEN_TOLERANCE`] means the averaging is broken.
pub fn check_jensen(labels: &[u8], ensemble_p1: &[f64], member_p1: &[Vec<f64>]) -> Result<f64> {
    let ens = nll(&PredictionSet::from_positive(labels.to_vec(), ensemble_p1)?);
    let mut mean = 0.0;
    for m in member_p1 {
        mean += nll(&PredictionSet::from_positive(labels.to_vec(), m)?);
    }
    mean /= member_p1.len().max(1) as f64;
    let margin = mean - ens;
    if margin < -JENSEN_TOLERANCE {
        return Err(Error::computation(format!(
            "ensemble NLL {ens} exceeds mean member NLL {mean}"
        )));
    }
    Ok(margin)
}

/// Writes `predictions.tsv`, `report.txt` and `reliability.csv` for one
/// column of a dump; metrics are computed from exactly the dumped values.
pub fn write_evaluation(dir: &Path, dump: &PredictionDump, column: &str, bins: usize) -> Result<MetricsReport> {
    let report = emit_report(&dump.prediction_set(column)?, bins)?;
    dump.save(&dir.join("predictions.tsv"))?;
    write_text(&dir.join("report.txt"), &format!("column={column}\n{}", report.to_kv()))?;
    write_text(&dir.join("reliability.csv"), &reliability_csv(&report))?;
    Ok(report)
}

/// Reliability table followed by an `ece,<value>` footer.
pub fn reliability_csv(report: &MetricsReport) -> String {
    format!("{}ece,{}\n", report.reliability.to_csv(), report.ece)
}

fn method_column(method: Method) -> &'static str {
    match method {
        Method::Single => "map_p1",
        Method::Bayesian => "bayes_p1",
        Method::Ensemble => "ensemble_p1",
    }
}

fn write_logs(dir: &Path, logs: &[Vec<LossRecord>]) -> Result<()> {
    if logs.len() == 1 {
        return write_loss_log(&logs[0], &dir.join("loss.csv"));
    }
    for (m, log) in logs.iter().enumerate() {
        write_loss_log(log, &dir.join(format!("loss-member{m}.csv")))?;
    }
    Ok(())
}

/// Trained models of one seed, shared by every method that needs them.
struct SeedModels {
    single: LoraModel,
    single_log: Vec<LossRecord>,
    ensemble: Option<(LoraEnsemble, Vec<Vec<LossRecord>>)>,
}

fn train_seed(
    config: &RunConfig,
    backbone: &Arc<FrozenBackbone>,
    data: &PreparedData,
    seed: u64,
    with_ensemble: bool,
) -> Result<SeedModels> {
    let train = config.train_config();
    if with_ensemble {
        let seeds = member_seeds(seed, config.ensemble_size);
        let out = train_ensemble(
            backbone.clone(),
            &data.train_encoded,
            &config.lora,
            &train,
            config.ensemble_size,
            &seeds,
        )?;
        // Member 0 is trained from `seed` itself, so it is the single model.
        let single = out.ensemble.members()[0].model.clone();
        let single_log = out.loss_logs[0].clone();
        Ok(SeedModels {
            single,
            single_log,
            ensemble: Some((out.ensemble, out.loss_logs)),
        })
    } else {
        let out = train_from_seed(backbone.clone(), &config.lora, &data.train_encoded, &train, seed)?;
        Ok(SeedModels {
            single: out.model,
            single_log: out.loss_log,
            ensemble: None,
        })
    }
}

fn evaluate_seed(
    config: &RunConfig,
    method: Method,
    data: &PreparedData,
    models: &SeedModels,
    seed: u64,
    dir: &Path,
) -> Result<SeedResult> {
    let test_tokens = data.test_tokens();
    let map_p1 = predict_map(&models.single, &test_tokens)?;
    let mut dump = PredictionDump::from_map(&data.test, &map_p1)?;
    let mut diagnostics = Vec::new();
    match method {
        Method::Single => {
            save_model(&models.single, &dir.join("model.json"))?;
            write_logs(dir, std::slice::from_ref(&models.single_log))?;
        }
        Method::Bayesian => {
            let train_tokens = data.train_tokens();
            let posterior = fit_laplace(
                &models.single,
                &train_tokens,
                config.prior_precision,
                &config.kfac_options(),
            )?;
            let (p1, jitter) = predict_bayes_p1(&models.single, &posterior, &test_tokens, config.samples, seed)?;
            let gaps = kfac_trace_gap(&models.single, &train_tokens, posterior.factors())?;
            let ratios = gaps.iter().map(|g| g.ratio());
            let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
            let compressed = posterior
                .factors()
                .iter()
                .filter(|f| f.act_factor.is_compressed() || f.grad_factor.is_compressed())
                .count();
            diagnostics.push(("max_jitter", jitter));
            diagnostics.push(("min_trace_ratio", lo));
            diagnostics.push(("max_trace_ratio", hi));
            diagnostics.push(("compressed_blocks", compressed as f64));
            for (row, p) in dump.rows.iter_mut().zip(p1) {
                row.bayes_p1 = Some(p);
            }
            save_model(&models.single, &dir.join("model.json"))?;
            posterior.save(&dir.join("posterior.json"))?;
            write_logs(dir, std::slice::from_ref(&models.single_log))?;
        }
        Method::Ensemble => {
            let (ensemble, logs) = models
                .ensemble
                .as_ref()
                .ok_or_else(|| Error::computation("ensemble was not trained"))?;
            let (avg, members) = predict_ensemble_p1(ensemble, &test_tokens)?;
            let margin = check_jensen(&dump.labels(), &avg, &members)?;
            diagnostics.push(("jensen_margin", margin));
            for (row, p) in dump.rows.iter_mut().zip(avg) {
                row.ensemble_p1 = Some(p);
            }
            ensemble.save(&dir.join("ensemble.json"))?;
            write_logs(dir, logs)?;
        }
    }
    let report = write_evaluation(dir, &dump, method_column(method), config.bins)?;
    let mut result = SeedResult::from_report(seed, &report);
    for (k, v) in diagnostics {
        result.diagnostics.insert(k.to_string(), v);
    }
    Ok(result)
}

fn load_existing(dir: &Path, hash: &str) -> Option<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    RunSummary::load(&path).ok().filter(|s| s.config_hash == hash)
}

/// Runs several methods on one configuration, training each seed's models
/// once and sharing them. Each method gets its own run directory (the method
/// is part of the hash); finished runs with a summary on disk are reused.
///
/// The outer error covers data preparation and training; per-method
/// evaluation failures are returned in place.
pub fn run_methods(config: &RunConfig, methods: &[Method]) -> Result<Vec<Result<RunSummary>>> {
    let mut plans = Vec::with_capacity(methods.len());
    for &method in methods {
        let cfg = RunConfig {
            method,
            ..config.clone()
        };
        cfg.validate()?;
        let hash = cfg.hash()?;
        let dir = run_dir(&cfg)?;
        let done = load_existing(&dir, &hash);
        plans.push((cfg, hash, dir, done));
    }
    if plans.iter().all(|p| p.3.is_some()) {
        return Ok(plans.into_iter().map(|p| Ok(p.3.expect("checked"))).collect());
    }
    let data = prepare_data(config)?;
    let backbone = build_backbone(config)?;
    let with_ensemble = plans.iter().any(|p| p.3.is_none() && p.0.method == Method::Ensemble);
    let mut results: Vec<Result<Vec<SeedResult>>> = plans.iter().map(|_| Ok(Vec::new())).collect();
    for (i, (cfg, _, dir, _)) in plans.iter().enumerate() {
        if plans[i].3.is_none() {
            write_text(&dir.join("config.txt"), &cfg.to_text())?;
            write_tsv(&data.train, &dir.join("data").join("train.tsv"))?;
            write_tsv(&data.test, &dir.join("data").join("test.tsv"))?;
        }
    }
    for &seed in &config.seeds {
        let models = train_seed(config, &backbone, &data, seed, with_ensemble)?;
        for ((cfg, _, dir, done), slot) in plans.iter().zip(results.iter_mut()) {
            if done.is_some() {
                continue;
            }
            if let Ok(list) = slot {
                let seed_dir = dir.join(format!("seed-{seed}"));
                match evaluate_seed(cfg, cfg.method, &data, &models, seed, &seed_dir) {
                    Ok(r) => list.push(r),
                    Err(e) => *slot = Err(e),
                }
            }
        }
    }
    let mut out = Vec::with_capacity(plans.len());
    for ((cfg, hash, dir, done), res) in plans.into_iter().zip(results) {
        if let Some(s) = done {
            out.push(Ok(s));
            continue;
        }
        out.push(res.and_then(|seeds| {
            let summary = RunSummary {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: hash,
                method: cfg.method,
                seeds,
            };
            summary.save(&dir.join(SUMMARY_FILE))?;
            Ok(summary)
        }));
    }
    Ok(out)
}

/// Runs the configured method over every seed.
pub fn run_method(config: &RunConfig) -> Result<RunSummary> {
    run_methods(config, &[config.method])?
        .pop()
        .expect("one method requested")
}
