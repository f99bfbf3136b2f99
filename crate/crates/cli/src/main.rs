//! `consistency-at` command-line front-end.

mod plot;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use consistency_at::attack::{pgd, AttackSpec};
use consistency_at::checkpoint::{write_atomic, Checkpoint};
use consistency_at::config::{parse_pairs, DataConfig, RunConfig};
use consistency_at::data::{load_corruptions, DatasetSplit, CORRUPTIONS};
use consistency_at::eval::{
    black_box_transfer, clean_accuracy, confusing_class_rate, mce, robust_accuracy, unseen_sweep, EvalReport,
    DEFAULT_EVAL_BATCH,
};
use consistency_at::lp::sample_norms;
use consistency_at::train::{halve_epoch_budget, run_training, RunOptions, TrainConfig};
use consistency_at::{Error, LabeledBatch, Norm, RngState};

#[derive(Parser)]
#[command(name = "consistency-at", version, about = "Consistency-regularized adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set loss.lambda=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many completed epochs; rerunning resumes.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Checkpoint the transfer adversaries are crafted against.
        #[arg(long)]
        source: Option<PathBuf>,
        #[command(flatten)]
        common: EvalArgs,
        /// Also report the most-confusing-class rate under PGD-20 (whitebox suite).
        #[arg(long)]
        confusing_class: bool,
        /// Attack preset for the transfer suite.
        #[arg(long, default_value = "pgd20_eval")]
        preset: String,
    },
    /// Attack one batch and dump per-sample results.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "pgd20_eval")]
        preset: String,
        /// Number of test images to attack.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Mean corruption error on CIFAR-10-C.
    CorruptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `<corruption>.npy` and `labels.npy`.
        #[arg(long)]
        corruption_dir: Option<PathBuf>,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Plot robust-accuracy curves and fraction sweeps.
    Plot {
        /// Metrics CSVs, one curve each.
        metrics: Vec<PathBuf>,
        /// Run directories of a data-fraction sweep (bar plot).
        #[arg(long, num_args = 1..)]
        fractions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a config with half the epochs and the same milestone fractions.
    Halve {
        #[arg(long)]
        config: PathBuf,
        /// Destination file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (overridden by CONSISTENCY_AT_DATA).
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
    /// Evaluate only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EVAL_BATCH)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Whitebox,
    Unseen,
    Corruption,
    Transfer,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Whitebox => "whitebox",
            Suite::Unseen => "unseen",
            Suite::Corruption => "corruption",
            Suite::Transfer => "transfer",
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                Error::Config { .. }
                | Error::UnknownName { .. }
                | Error::NormNotSupported(_)
                | Error::AttackLossMismatch { .. },
            ) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    const NAME: &'static str = ".consistency-at.lock";

    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "output directory {} is locked by another run ({}); use a distinct directory or remove the lock if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train {
            config,
            overrides,
            out,
            stop_after,
        } => cmd_train(&config, &overrides, out, stop_after),
        Command::Eval {
            checkpoint,
            suite,
            source,
            common,
            confusing_class,
            preset,
        } => cmd_eval(&checkpoint, suite, source.as_deref(), &common, confusing_class, &preset),
        Command::Attack {
            checkpoint,
            preset,
            count,
            common,
        } => cmd_attack(&checkpoint, &preset, count, &common),
        Command::CorruptEval {
            checkpoint,
            corruption_dir,
            common,
        } => cmd_corrupt_eval(&checkpoint, corruption_dir, &common),
        Command::Plot { metrics, fractions, out } => {
            if metrics.is_empty() && fractions.is_empty() {
                return Err(CliError::Usage("plot needs metrics CSVs or --fractions run directories".into()));
            }
            plot::run(&metrics, &fractions, &out)
        }
        Command::Halve { config, output } => cmd_halve(&config, output.as_deref()),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = parse_pairs(&text)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        pairs.retain(|(key, _)| *key != k);
        pairs.push((k, v));
    }
    Ok(RunConfig::from_pairs(&pairs)?)
}

fn cmd_train(config: &Path, overrides: &[String], out: Option<PathBuf>, stop_after: Option<usize>) -> CliResult {
    let mut cfg = load_config(config, overrides)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let data = cfg.data.load(cfg.train.model.num_classes, cfg.train.seed)?;
    let dir = cfg.output_dir.clone();
    let _lock = OutputLock::acquire(&dir)?;
    write_atomic(&dir.join("config.cfg"), cfg.to_text().as_bytes())?;
    log::info!("config {} -> {}", cfg.hash(), dir.display());
    let outcome = run_training(
        &cfg.train,
        &data,
        &RunOptions {
            out_dir: Some(dir.clone()),
            stop_after,
        },
    )?;
    if let Some(last) = outcome.metrics.last() {
        log::info!(
            "done: last pgd10 {:.2}%, best pgd10 {:.2}% (epoch {})",
            last.pgd10_acc,
            outcome.best.meta.best_pgd10.unwrap_or(f64::NAN),
            outcome.best.meta.epoch
        );
    }
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    config: TrainConfig,
}

fn load_checkpoint(path: &Path) -> CliResult<Loaded> {
    let checkpoint = Checkpoint::load(path)?;
    let value = checkpoint
        .meta
        .config
        .clone()
        .ok_or_else(|| CliError::Runtime(format!("{} carries no training config", path.display())))?;
    let config: TrainConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Runtime(format!("{}: unreadable training config: {e}", path.display())))?;
    Ok(Loaded { checkpoint, config })
}

fn test_set(loaded: &Loaded, args: &EvalArgs) -> CliResult<LabeledBatch> {
    let data_cfg = DataConfig::from_identity(&loaded.config.dataset, args.data_root.clone())?;
    let split: DatasetSplit = data_cfg.load(loaded.config.model.num_classes, loaded.config.seed)?;
    Ok(match args.limit {
        Some(n) if n < split.test.len() => split.test.slice(0, n.max(1)),
        _ => split.test,
    })
}

fn out_dir(args: &EvalArgs, checkpoint: &Path) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn cmd_eval(
    checkpoint: &Path,
    suite: Suite,
    source: Option<&Path>,
    args: &EvalArgs,
    confusing: bool,
    preset: &str,
) -> CliResult {
    if matches!(suite, Suite::Transfer) != source.is_some() {
        return Err(CliError::Usage(match suite {
            Suite::Transfer => "the transfer suite requires --source <checkpoint>".into(),
            _ => "--source is only valid with --suite transfer".into(),
        }));
    }
    if matches!(suite, Suite::Corruption) {
        return cmd_corrupt_eval(checkpoint, None, args);
    }
    let loaded = load_checkpoint(checkpoint)?;
    let model = &loaded.checkpoint.model;
    let data = test_set(&loaded, args)?;
    let rng = RngState::new(args.seed);
    let bs = args.batch_size.max(1);
    let mut report = EvalReport {
        config_hash: loaded.checkpoint.meta.config_hash.clone(),
        clean_acc: Some(clean_accuracy(model, &data)?),
        ..EvalReport::default()
    };
    match suite {
        Suite::Whitebox => {
            for (key, name) in [("pgd20", "pgd20_eval"), ("pgd100", "pgd100_eval"), ("cw100", "cw100_eval")] {
                let spec = AttackSpec::preset(name)?;
                let acc = robust_accuracy(model, &data, &spec, &rng.derive(key, 0), bs)?;
                log::info!("{key}: {acc:.2}%");
                report.robust_acc.insert(key.to_string(), acc);
            }
            if confusing {
                let spec = AttackSpec::preset("pgd20_eval")?;
                report.confusing_class_rate = confusing_class_rate(model, &data, &spec, &rng.derive("pgd20", 0), bs)?;
            }
        }
        Suite::Unseen => report.sweep = unseen_sweep(model, &data, &rng, bs)?,
        Suite::Transfer => {
            let src = load_checkpoint(source.expect("checked above"))?;
            let spec = AttackSpec::preset(preset).map_err(|e| CliError::Usage(e.to_string()))?;
            report.transfer_acc = Some(black_box_transfer(&src.checkpoint.model, model, &data, &spec, &rng, bs)?);
        }
        Suite::Corruption => unreachable!(),
    }
    let dir = out_dir(args, checkpoint);
    let _lock = OutputLock::acquire(&dir)?;
    let stem = format!("eval_{}", suite.name());
    report.write(&dir, &stem)?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn cmd_corrupt_eval(checkpoint: &Path, corruption_dir: Option<PathBuf>, args: &EvalArgs) -> CliResult {
    let loaded = load_checkpoint(checkpoint)?;
    let data_cfg = DataConfig::from_identity(&loaded.config.dataset, args.data_root.clone())?;
    let dir = corruption_dir.unwrap_or_else(|| data_cfg.corruption_dir());
    let (mut sets, missing) = load_corruptions(&dir, &CORRUPTIONS)?;
    if sets.is_empty() {
        return Err(Error::DatasetMissing {
            path: dir,
            expected: "CIFAR-10-C: one `<corruption>.npy` uint8 array [5*N, 32, 32, 3] per type plus `labels.npy`".into(),
        }
        .into());
    }
    if let Some(n) = args.limit {
        for s in &mut sets {
            for b in &mut s.severities {
                if n < b.len() {
                    *b = b.slice(0, n.max(1));
                }
            }
        }
    }
    let model = &loaded.checkpoint.model;
    let result = mce(model, &sets, missing)?;
    log::info!("mCE {:.2}% over {} corruption types", result.mce, result.per_corruption.len());
    let report = EvalReport {
        config_hash: loaded.checkpoint.meta.config_hash.clone(),
        corruption: Some(result),
        ..EvalReport::default()
    };
    let out = out_dir(args, checkpoint);
    let _lock = OutputLock::acquire(&out)?;
    report.write(&out, "eval_corruption")?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn cmd_attack(checkpoint: &Path, preset: &str, count: usize, args: &EvalArgs) -> CliResult {
    let spec = AttackSpec::preset(preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let loaded = load_checkpoint(checkpoint)?;
    let model = &loaded.checkpoint.model;
    let data = test_set(&loaded, args)?;
    let batch = data.slice(0, count.clamp(1, data.len()));
    let clean = model.predict(&batch.images)?;
    let r = pgd(model, &batch, &spec, None, &RngState::new(args.seed).derive("attack", 0))?;
    let adv = model.predict(&r.adversarial)?;
    let norms: Vec<Vec<f32>> = [Norm::LInf, Norm::L2, Norm::L1]
        .iter()
        .map(|&n| sample_norms(&r.delta, n))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "index", "label", "clean_pred", "adv_pred", "loss_before", "loss_after", "delta_linf", "delta_l2", "delta_l1",
    ])
    .map_err(Error::from)?;
    for i in 0..batch.len() {
        w.write_record([
            i.to_string(),
            batch.labels[i].to_string(),
            clean[i].to_string(),
            adv[i].to_string(),
            r.loss_before[i].to_string(),
            r.loss_after[i].to_string(),
            norms[0][i].to_string(),
            norms[1][i].to_string(),
            norms[2][i].to_string(),
        ])
        .map_err(Error::from)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)
        .expect("csv output is utf-8");
    let text = format!(
        "# config_hash={} preset={preset}\n{body}",
        loaded.checkpoint.meta.config_hash
    );
    let dir = out_dir(args, checkpoint);
    let _lock = OutputLock::acquire(&dir)?;
    write_atomic(&dir.join(format!("attack_{preset}.csv")), text.as_bytes())?;
    let fooled = adv.iter().zip(&batch.labels).filter(|(p, y)| p != y).count();
    println!("{fooled}/{} misclassified under {preset}", batch.len());
    Ok(())
}

fn cmd_halve(config: &Path, output: Option<&Path>) -> CliResult {
    let mut cfg = load_config(config, &[])?;
    cfg.train = halve_epoch_budget(&cfg.train);
    let mut dir = cfg.output_dir.clone().into_os_string();
    dir.push("_halved");
    cfg.output_dir = dir.into();
    let text = cfg.to_text();
    match output {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
