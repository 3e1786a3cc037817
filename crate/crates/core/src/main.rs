use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use uqlora::data::{generate_synthetic, write_tsv};
use uqlora::ensemble::{member_seeds, train_ensemble, LoraEnsemble};
use uqlora::harness::{
    build_backbone, compare_runs, emit_reliability_csv, predict_bayes_p1, predict_ensemble_p1, predict_map,
    prepare_data, run_dir, run_method, sweep_rank, write_evaluation, PredictionDump, RunConfig, RunSummary, SweepCell,
};
use uqlora::laplace::{fit_laplace, LaplacePosterior};
use uqlora::metrics::{Direction, MetricsReport};
use uqlora::model::{load_model, save_model};
use uqlora::train::{train_from_seed, write_loss_log};
use uqlora::{Error, Result};

#[derive(Parser)]
#[command(
    name = "uqlora",
    version,
    about = "LoRA fine-tuning with ensemble and Laplace uncertainty for protein-pair classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.rank=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Pair dataset TSV used instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(p) = &self.data {
            cfg.set("data.tsv", &p.to_string_lossy())?;
        }
        if let Some(r) = self.rank {
            cfg.lora.rank = r;
        }
        if let Some(s) = &self.seeds {
            cfg.set("run.seeds", s)?;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Single,
    Ensemble,
    Bayesian,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Greater,
    Less,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair dataset as TSV.
    GenData {
        #[arg(long, default_value_t = 200)]
        n_proteins: usize,
        #[arg(long, default_value_t = 2000)]
        n_pairs: usize,
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one LoRA model on the training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Train an ensemble of independently seeded LoRA models.
    TrainEnsemble {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-member loss logs.
        #[arg(long)]
        loss_dir: Option<PathBuf>,
    },
    /// Fit a K-FAC Laplace posterior around a trained model.
    LaplaceFit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the test split and write the dump, report and reliability CSV.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "ensemble", conflicts_with = "ensemble")]
        model: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Posterior for Bayesian predictions (requires --model).
        #[arg(long, requires = "model")]
        posterior: Option<PathBuf>,
        /// Seed of the predictive sampler.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method over every configured seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Run all three methods over a list of LoRA ranks.
    SweepRank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "8,16,32")]
        ranks: String,
    },
    /// One-sided Welch test between two run summaries.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "acc")]
        metric: String,
        #[arg(long, value_enum, default_value = "greater")]
        direction: DirectionArg,
    },
    /// Reliability CSV from a prediction dump.
    Reliability {
        #[arg(long)]
        dump: PathBuf,
        /// Probability column; defaults to the rightmost available one.
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_means(summary: &RunSummary) {
    for k in MetricsReport::FIELDS {
        if let Some((m, s)) = summary.mean_std(k) {
            println!("{k}\t{m}±{s}");
        }
    }
}

fn evaluate(
    cfg: &RunConfig,
    model: Option<&Path>,
    ensemble: Option<&Path>,
    posterior: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<MetricsReport> {
    let data = prepare_data(cfg)?;
    let tokens = data.test_tokens();
    if let Some(path) = ensemble {
        let ens = LoraEnsemble::load(path)?;
        let (avg, _) = predict_ensemble_p1(&ens, &tokens)?;
        let mut dump = PredictionDump::from_map(&data.test, &predict_map(&ens.members()[0].model, &tokens)?)?;
        for (row, p) in dump.rows.iter_mut().zip(avg) {
            row.ensemble_p1 = Some(p);
        }
        return write_evaluation(out, &dump, "ensemble_p1", cfg.bins);
    }
    let model = load_model(model.ok_or_else(|| Error::InvalidInput("--model or --ensemble is required".into()))?)?;
    let mut dump = PredictionDump::from_map(&data.test, &predict_map(&model, &tokens)?)?;
    match posterior {
        Some(p) => {
            let post = LaplacePosterior::load(p)?;
            let (p1, _) = predict_bayes_p1(&model, &post, &tokens, cfg.samples, seed)?;
            for (row, p) in dump.rows.iter_mut().zip(p1) {
                row.bayes_p1 = Some(p);
            }
            write_evaluation(out, &dump, "bayes_p1", cfg.bins)
        }
        None => write_evaluation(out, &dump, "map_p1", cfg.bins),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            n_proteins,
            n_pairs,
            latent_dim,
            seed,
            out,
        } => {
            let syn = generate_synthetic(n_proteins, n_pairs, latent_dim, seed)?;
            write_tsv(&syn.dataset, &out)?;
            println!(
                "wrote {} pairs ({} positive) to {}",
                syn.dataset.len(),
                syn.dataset.positives(),
                out.display()
            );
        }
        Command::Train {
            cfg,
            seed,
            out,
            loss_log,
        } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let trained = train_from_seed(
                build_backbone(&cfg)?,
                &cfg.lora,
                &data.train_encoded,
                &cfg.train_config(),
                seed,
            )?;
            save_model(&trained.model, &out)?;
            if let Some(p) = loss_log {
                write_loss_log(&trained.loss_log, &p)?;
            }
            println!("wrote {}", out.display());
        }
        Command::TrainEnsemble {
            cfg,
            seed,
            out,
            loss_dir,
        } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let seeds = member_seeds(seed, cfg.ensemble_size);
            let trained = train_ensemble(
                build_backbone(&cfg)?,
                &data.train_encoded,
                &cfg.lora,
                &cfg.train_config(),
                cfg.ensemble_size,
                &seeds,
            )?;
            for w in &trained.warnings {
                eprintln!("warning: {w}");
            }
            trained.ensemble.save(&out)?;
            if let Some(dir) = loss_dir {
                for (m, log) in trained.loss_logs.iter().enumerate() {
                    write_loss_log(log, &dir.join(format!("loss-member{m}.csv")))?;
                }
            }
            println!("wrote {}", out.display());
        }
        Command::LaplaceFit { cfg, model, out } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let model = load_model(&model)?;
            let post = fit_laplace(&model, &data.train_tokens(), cfg.prior_precision, &cfg.kfac_options())?;
            post.save(&out)?;
            println!(
                "wrote {} ({} parameters, {} blocks)",
                out.display(),
                post.dim(),
                post.factors().len()
            );
        }
        Command::Evaluate {
            cfg,
            model,
            ensemble,
            posterior,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let report = evaluate(
                &cfg,
                model.as_deref(),
                ensemble.as_deref(),
                posterior.as_deref(),
                seed,
                &out,
            )?;
            print!("{}", report.to_kv());
        }
        Command::Run { cfg, method } => {
            let mut cfg = cfg.load()?;
            if let Some(m) = method {
                cfg.method = match m {
                    MethodArg::Single => uqlora::harness::Method::Single,
                    MethodArg::Ensemble => uqlora::harness::Method::Ensemble,
                    MethodArg::Bayesian => uqlora::harness::Method::Bayesian,
                };
            }
            let summary = run_method(&cfg)?;
            println!("run {} ({})", run_dir(&cfg)?.display(), summary.method);
            print_means(&summary);
        }
        Command::SweepRank { cfg, ranks } => {
            let cfg = cfg.load()?;
            let ranks = ranks
                .split(',')
                .map(|r| {
                    r.trim()
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("bad rank {r:?}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let report = sweep_rank(&cfg, &ranks)?;
            print!("{}", report.to_table());
            let failed: Vec<&SweepCell> = report.cells.iter().filter(|c| c.outcome.is_err()).collect();
            if !failed.is_empty() {
                return Err(Error::Computation(format!("{} sweep cells failed", failed.len())));
            }
        }
        Command::Compare {
            a,
            b,
            metric,
            direction,
        } => {
            let direction = match direction {
                DirectionArg::Greater => Direction::Greater,
                DirectionArg::Less => Direction::Less,
            };
            let c = compare_runs(&RunSummary::load(&a)?, &RunSummary::load(&b)?, &metric, direction)?;
            print!("{}", c.to_text());
        }
        Command::Reliability {
            dump,
            column,
            bins,
            out,
        } => {
            let table = emit_reliability_csv(&dump, column.as_deref(), bins, &out)?;
            println!("ece={} n={} bins={}", table.ece(), table.total(), table.bins.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
