use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ss_infogan::checkpoint::{load_networks, CheckpointError};
use ss_infogan::config::{ConfigError, ExperimentConfig};
use ss_infogan::data::{labeled_count, DataError, Split};
use ss_infogan::eval::{
    cached_classifier, class_code, render_traversal_grid, zero_one_loss, EvalClassifier, EvalError, GridSpec,
};
use ss_infogan::infotheory::run_suite;
use ss_infogan::latent::{CodeKind, LatentError, LatentSpec};
use ss_infogan::trainer::{eval_header, eval_row, fit, open_csv, FitOptions, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "ss-infogan", version, about = "Semi-supervised InfoGAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set loss.lambda2=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={:?}", out.display().to_string()));
        }
        Ok(ExperimentConfig::from_file(&self.config, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, evaluations, grids and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding (or receiving) the trained evaluation classifier.
        #[arg(long)]
        classifier_cache: Option<PathBuf>,
        /// Skip 0-1 evaluations during training.
        #[arg(long)]
        no_eval: bool,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint with the reference classifier and append to the eval CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        classifier_cache: Option<PathBuf>,
        /// Number of synthetic samples (defaults to `eval.samples`).
        #[arg(long)]
        samples: Option<usize>,
        /// Output CSV (defaults to `<out_dir>/eval.csv`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render one latent traversal grid from a checkpoint.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Code to sweep along the columns.
        #[arg(long)]
        code: String,
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Categorical code enumerated along the rows.
        #[arg(long)]
        rows: Option<String>,
        /// Output PNG (defaults to `<out_dir>/traverse_<code>.png`).
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Run the information-theory oracle and print its worst-case residuals.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving `summary.csv` and `delta.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure with its exit status: 2 for configuration problems, 3 for
/// runtime aborts.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self { code: 2, message: message.to_string() }
    }
    fn runtime(message: impl ToString) -> Self {
        Self { code: 3, message: message.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

fn is_config_latent(e: &LatentError) -> bool {
    matches!(e, LatentError::UnknownCode(_))
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::NoClassCode | EvalError::ClassCount { .. } => Self::config(e),
            EvalError::Latent(l) if is_config_latent(l) => Self::config(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::SpecMismatch { .. } => Self::config(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Eval(c) => c.into(),
            TrainError::Latent(ref l) if is_config_latent(l) => Self::config(e),
            _ => Self::runtime(e),
        }
    }
}

fn classes_of(spec: &LatentSpec, index: usize) -> usize {
    match spec.codes()[index].kind {
        CodeKind::Categorical { cardinality } => cardinality,
        CodeKind::Continuous { .. } => 0,
    }
}

fn classifier(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<EvalClassifier, Failure> {
    let index = class_code(&cfg.latent, cfg.eval.class_code.as_deref())?;
    let test = cfg.dataset.load(Split::Test)?;
    let cached = cache.is_some_and(|d| d.join("classifier.json").is_file());
    let train = if cached { None } else { Some(cfg.dataset.load(Split::Train)?) };
    let started = Instant::now();
    let clf = cached_classifier(&test, train.as_ref(), classes_of(&cfg.latent, index), &cfg.classifier, cache)?;
    match (cached, clf.validation_accuracy) {
        (true, _) => eprintln!("classifier loaded from {}", cache.expect("cache").display()),
        (false, Some(acc)) => {
            eprintln!("classifier trained in {:.0?}, train-split accuracy {acc:.4}", started.elapsed())
        }
        (false, None) => eprintln!("classifier trained in {:.0?}", started.elapsed()),
    }
    Ok(clf)
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::runtime(format!("{}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join("resolved_config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &ConfigArgs, cache: Option<&Path>, no_eval: bool, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = args.load()?;
    cfg.dataset.check_paths()?;
    if !no_eval {
        class_code(&cfg.latent, cfg.eval.class_code.as_deref()).map_err(|e| Failure::config(format!("eval.class_code: {e}")))?;
    }
    write_resolved(&cfg)?;
    let train = cfg.dataset.load(Split::Train)?;
    let labeled = labeled_count(train.len(), cfg.train.fraction).map_err(|e| Failure::config(format!("train.fraction: {e}")))?;
    println!("run {} labeled={labeled} of {}", cfg.out_dir.display(), train.len());
    let clf = if no_eval { None } else { Some(classifier(&cfg, cache)?) };
    let started = Instant::now();
    let summary = fit(
        cfg.train_config(),
        &train,
        FitOptions { out_dir: &cfg.out_dir, classifier: clf.as_ref(), resume_from: resume },
    )?;
    for (step, rec) in &summary.evals {
        println!(
            "epoch {:>3} step {step:>6} accuracy {:.4} matched {:.4}",
            rec.epoch, rec.accuracy, rec.matched_accuracy
        );
    }
    println!(
        "finished {} epochs ({} steps) in {:.0?}; checkpoint {}",
        summary.epochs,
        summary.steps,
        started.elapsed(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn load_trainer(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(Trainer<f32>, usize), Failure> {
    let mut trainer = Trainer::<f32>::new(cfg.train_config())?;
    let manifest = load_networks(checkpoint, &cfg.train_config().spec_hash(), &mut trainer.nets)?;
    trainer.epoch = manifest.epoch;
    trainer.step = manifest.step;
    Ok((trainer, manifest.epoch))
}

fn cmd_eval(
    checkpoint: &Path,
    args: &ConfigArgs,
    cache: Option<&Path>,
    samples: Option<usize>,
    csv_path: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = args.load()?;
    cfg.dataset.check_paths()?;
    let (trainer, epoch) = load_trainer(&cfg, checkpoint)?;
    let index = class_code(&cfg.latent, cfg.eval.class_code.as_deref())?;
    let clf = classifier(&cfg, cache)?;
    let n = samples.unwrap_or(cfg.eval.samples);
    let rec = zero_one_loss(&trainer.nets.generator, &clf, &cfg.latent, index, n, epoch, &mut trainer.eval_rng())?;
    let path = csv_path.map(Path::to_owned).unwrap_or_else(|| cfg.out_dir.join("eval.csv"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
    }
    let mut w = open_csv(&path, &eval_header(classes_of(&cfg.latent, index)))?;
    w.write_record(eval_row(&rec, trainer.step)).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    println!("epoch {epoch} n {n} accuracy {:.4} matched {:.4}", rec.accuracy, rec.matched_accuracy);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_traverse(
    checkpoint: &Path,
    args: &ConfigArgs,
    code: &str,
    lo: f64,
    hi: f64,
    steps: usize,
    rows: Option<&str>,
    png: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = args.load()?;
    let spec = &cfg.latent;
    spec.find(code).map_err(|e| Failure::config(format!("--code: {e}")))?;
    let row_code = match rows {
        Some(name) => class_code(spec, Some(name))?,
        None => class_code(spec, cfg.eval.class_code.as_deref())
            .ok()
            .or_else(|| spec.codes().iter().position(|c| matches!(c.kind, CodeKind::Categorical { .. })))
            .ok_or_else(|| Failure::config("--rows: the latent spec has no categorical code"))?,
    };
    if steps < 2 || !(lo < hi) {
        return Err(Failure::config("traversal needs --steps >= 2 and --lo < --hi"));
    }
    let (trainer, _) = load_trainer(&cfg, checkpoint)?;
    let layout = GridSpec { lo, hi, steps, separator: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = render_traversal_grid(&trainer.nets.generator, spec, cfg.dataset.shape, code, row_code, layout, &mut rng)?;
    let path = png.map(Path::to_owned).unwrap_or_else(|| cfg.out_dir.join(format!("traverse_{code}.png")));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(&path, grid.to_png()).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_theory_csv(dir: &Path, report: &ss_infogan::infotheory::SuiteReport) -> Result<(), Box<dyn std::error::Error>> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["metric", "value"])?;
    for (k, v) in [
        ("trials", report.trials as f64),
        ("max_residual", report.max_residual),
        ("max_markov_gap", report.max_markov_gap),
        ("max_markov_conditional_mi", report.max_markov_conditional_mi),
        ("min_markov_i_xxt", report.min_markov_i_xxt),
        ("min_bivariate_mi", report.min_bivariate_mi),
        ("xor_multivariate_mi", report.xor_multivariate_mi),
    ] {
        w.write_record([k.to_owned(), v.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("delta.csv"))?;
    w.write_record(["s", "i_cx", "i_cxt", "i_xxt"])?;
    for row in &report.delta {
        w.write_record([row.s, row.i_cx, row.i_cxt, row.i_xxt].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_verify_theory(trials: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::config("--trials must be at least 1"));
    }
    let started = Instant::now();
    let report = run_suite(trials, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(Failure::runtime)?;
    println!("trials                      {}", report.trials);
    println!("max decomposition residual  {:.3e}", report.max_residual);
    println!("max Markov gap              {:.3e}", report.max_markov_gap);
    println!("max Markov I(X;X~|C)        {:.3e}", report.max_markov_conditional_mi);
    println!("min Markov I(X;X~)          {:.3e}", report.min_markov_i_xxt);
    println!("min bivariate MI            {:.3e}", report.min_bivariate_mi);
    println!("XOR multivariate MI         {:.12}", report.xor_multivariate_mi);
    println!("s,i_cx,i_cxt,i_xxt");
    for row in &report.delta {
        println!("{},{},{},{}", row.s, row.i_cx, row.i_cxt, row.i_xxt);
    }
    if let Some(dir) = out {
        write_theory_csv(dir, &report).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    println!("elapsed {:.2?}", started.elapsed());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::runtime("oracle tolerances exceeded"))
    }
}

fn main() -> ExitCode {
    ss_infogan::flush_denormals();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, classifier_cache, no_eval, resume } => {
            cmd_train(config, classifier_cache.as_deref(), *no_eval, resume.as_deref())
        }
        Command::Eval { checkpoint, config, classifier_cache, samples, csv } => {
            cmd_eval(checkpoint, config, classifier_cache.as_deref(), *samples, csv.as_deref())
        }
        Command::Traverse { checkpoint, config, code, lo, hi, steps, rows, png } => {
            cmd_traverse(checkpoint, config, code, *lo, *hi, *steps, rows.as_deref(), png.as_deref())
        }
        Command::VerifyTheory { trials, seed, out } => cmd_verify_theory(*trials, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
