use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use pmf_core::backbone::{BackboneError, Checkpoint};
use pmf_core::dataio::{Dataset, Splits};
use pmf_core::evalharness::{comparison_csv, dump_embeddings, evaluate, evaluate_with_search, EvalMode, EvalSettings};
use pmf_core::finetune::select_learning_rate;
use pmf_core::pretrain::pretrain;
use pmf_core::protonet::{episode_loss_grad_check, history_csv, meta_train};
use pmf_core::tensor::{verification_suite, OpCheck};
use pmf_core::Error;

mod config;

use config::{parse_config, ConfigError, ExperimentConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Maximum relative gradient error accepted by `grad-check`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "pmf", version, about = "Pre-train, meta-train and fine-tune prototype few-shot classifiers")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset and write each split as CSV.
    GenData,
    /// Self-supervised pre-training from a random init.
    Pretrain,
    /// Episodic meta-training.
    Metatrain {
        /// Starting checkpoint; defaults to `<out>/pretrained.pmfc` if present, else a random init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on test episodes.
    Eval {
        /// Defaults to `<out>/metatrained.pmfc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Fine-tune each task before classifying its queries (needs --lr or --lr-search).
        #[arg(long)]
        finetune: bool,
        /// Fine-tuning learning rate; implies --finetune.
        #[arg(long, conflicts_with = "lr_search")]
        lr: Option<f64>,
        /// Pick the fine-tuning rate on the validation split first.
        #[arg(long)]
        lr_search: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Select the fine-tuning learning rate on validation episodes.
    LrSearch {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export embeddings as CSV for external visualisation.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        max_items: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Check every tape op and the episode loss against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Core(Error),
    Numeric(String),
    Usage(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<pmf_core::tensor::TensorError> for CliError {
    fn from(e: pmf_core::tensor::TensorError) -> Self {
        CliError::Core(Error::Tensor(e))
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        CliError::Core(Error::Backbone(e))
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Backbone(BackboneError::Spec(_)) => EXIT_CONFIG,
        Error::Data(_) | Error::Episode(_) | Error::Backbone(_) => EXIT_DATA,
        Error::Tensor(_) | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::AtEpisode { source, .. } => core_exit_code(source),
        Error::Io(_) => EXIT_OTHER,
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(e) => core_exit_code(e),
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Numeric(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

struct Run {
    cfg: ExperimentConfig,
    digest: String,
    out: PathBuf,
    workers: usize,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("this subcommand needs --config <path>".into()))?;
        let mut cfg = parse_config(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.out_dir = out.clone();
        }
        let digest = cfg.digest();
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)?;
        let resolved = cfg.to_pretty_json();
        std::fs::write(out.join("config.resolved.json"), format!("{resolved}\n"))?;
        println!("{resolved}");
        println!("config digest: sha256:{digest}");
        let workers = match cli.workers {
            Some(0) => return Err(CliError::Usage("--workers must be positive".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        Ok(Self { cfg, digest, out, workers })
    }

    fn splits(&self) -> Result<Splits, CliError> {
        Ok(self.cfg.load_splits()?)
    }

    fn checkpoint(&self, explicit: Option<&PathBuf>, default_name: &str) -> Result<Checkpoint, CliError> {
        let path = explicit.cloned().unwrap_or_else(|| self.out.join(default_name));
        Checkpoint::load(&path).map_err(|e| match e {
            BackboneError::Io(io) => CliError::Core(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
            other => other.into(),
        })
    }

    fn random_init(&self) -> Result<Checkpoint, CliError> {
        Ok(stamped(Checkpoint::random(self.cfg.backbone_spec())?, &self.digest))
    }
}

fn stamped(mut ckpt: Checkpoint, digest: &str) -> Checkpoint {
    ckpt.config_digest = digest.to_string();
    ckpt
}

fn pick(splits: &Splits, split: SplitArg) -> &Dataset {
    match split {
        SplitArg::Train => &splits.train,
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    }
}

fn write_split_csv(ds: &Dataset, path: &Path) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("label");
    (0..ds.item_len()).for_each(|j| write!(out, ",x{j}").expect("string write"));
    out.push('\n');
    for i in 0..ds.len() {
        write!(out, "{}", ds.label(i)).expect("string write");
        ds.item(i).iter().for_each(|v| write!(out, ",{v}").expect("string write"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn gen_data(run: &Run) -> Result<(), CliError> {
    let splits = run.splits()?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = run.out.join(format!("data_{name}.csv"));
        write_split_csv(ds, &path)?;
        println!(
            "{name}: {} items, {} classes, item shape {:?} -> {}",
            ds.len(),
            ds.num_classes(),
            ds.item_shape(),
            path.display()
        );
    }
    Ok(())
}

fn run_pretrain(run: &Run) -> Result<(), CliError> {
    let splits = run.splits()?;
    let init = run.random_init()?;
    let start = Instant::now();
    let outcome = pretrain(&init, &splits.train.unlabeled(), &run.cfg.pretrain_config(), &run.cfg.augment_policy())?;
    let ckpt = stamped(outcome.checkpoint, &run.digest);
    let path = run.out.join("pretrained.pmfc");
    ckpt.save(&path)?;
    let mut csv = String::from("step,loss\n");
    outcome.losses.iter().enumerate().for_each(|(i, l)| csv.push_str(&format!("{i},{l}\n")));
    std::fs::write(run.out.join("pretrain_losses.csv"), csv)?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrain: {} steps, loss {first:.4} -> {last:.4}, {:.1}s -> {}",
        outcome.losses.len(),
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn run_metatrain(run: &Run, init: Option<&PathBuf>) -> Result<(), CliError> {
    let splits = run.splits()?;
    let default_init = run.out.join("pretrained.pmfc");
    let init = match init {
        Some(p) => run.checkpoint(Some(p), "")?,
        None if default_init.is_file() => run.checkpoint(Some(&default_init), "")?,
        None => {
            println!("metatrain: no pretrained checkpoint, starting from a random init");
            run.random_init()?
        }
    };
    let start = Instant::now();
    let outcome = meta_train(&init, &splits.train, &splits.val, &run.cfg.sampler_config(), &run.cfg.train_config())?;
    let ckpt = stamped(outcome.checkpoint, &run.digest);
    let path = run.out.join("metatrained.pmfc");
    ckpt.save(&path)?;
    std::fs::write(run.out.join("history.csv"), history_csv(&outcome.history))?;
    println!(
        "metatrain: {} epochs, initial val acc {:.4}, best epoch {}, {:.1}s -> {}",
        outcome.history.len(),
        outcome.init_val_acc,
        outcome.best_epoch,
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

struct EvalArgs<'a> {
    checkpoint: Option<&'a PathBuf>,
    episodes: Option<usize>,
    finetune: bool,
    lr: Option<f64>,
    lr_search: bool,
    split: SplitArg,
}

fn run_eval(run: &Run, args: EvalArgs) -> Result<(), CliError> {
    if args.finetune && args.lr.is_none() && !args.lr_search {
        return Err(CliError::Usage("--finetune needs --lr <rate> or --lr-search".into()));
    }
    let splits = run.splits()?;
    let ckpt = run.checkpoint(args.checkpoint, "metatrained.pmfc")?;
    let ds = pick(&splits, args.split);
    let sampler = run.cfg.sampler_config();
    let policy = run.cfg.finetune_policy();
    let settings = EvalSettings {
        episodes: args.episodes.unwrap_or(run.cfg.eval.episodes),
        workers: run.workers,
        temperature: run.cfg.eval.temperature,
    };
    let report = if args.lr_search {
        let (report, search) = evaluate_with_search(&ckpt, ds, &splits.val, &sampler, &policy, &settings)?;
        std::fs::write(run.out.join("lr_search.json"), serde_json::to_string_pretty(&search).expect("serializes"))?;
        report
    } else if let Some(lr) = args.lr {
        evaluate(&ckpt, ds, &sampler, EvalMode::Finetune { lr }, Some(&policy), &settings)?
    } else {
        evaluate(&ckpt, ds, &sampler, EvalMode::Readout, None, &settings)?
    };
    let stem = format!("report_{}", report.mode.label().replace(['(', ')', '=', ' '], "_").trim_end_matches('_'));
    let json_path = run.out.join(format!("{stem}.json"));
    report.write_json(&json_path)?;
    std::fs::write(run.out.join(format!("{stem}.csv")), comparison_csv(std::slice::from_ref(&report)))?;
    println!(
        "eval {} on {}: {} episodes, accuracy {:.4} +- {:.4}, {:.1}s wall clock -> {}",
        report.mode.label(),
        report.domain_name,
        report.episodes,
        report.mean_accuracy,
        report.ci95,
        report.wall_clock_seconds,
        json_path.display()
    );
    Ok(())
}

fn run_lr_search(run: &Run, checkpoint: Option<&PathBuf>) -> Result<(), CliError> {
    let splits = run.splits()?;
    let ckpt = run.checkpoint(checkpoint, "metatrained.pmfc")?;
    let search = select_learning_rate(&ckpt, &splits.val, &run.cfg.sampler_config(), &run.cfg.finetune_policy())?;
    let json = serde_json::to_string_pretty(&search).expect("serializes");
    std::fs::write(run.out.join("lr_search.json"), format!("{json}\n"))?;
    for s in &search.per_lr {
        println!("lr {:<8} mean accuracy {:.4}", s.lr, s.mean_accuracy);
    }
    println!("chosen lr {}", search.chosen_lr);
    Ok(())
}

fn run_dump(run: &Run, checkpoint: Option<&PathBuf>, max_items: usize, split: SplitArg) -> Result<(), CliError> {
    let splits = run.splits()?;
    let ckpt = run.checkpoint(checkpoint, "metatrained.pmfc")?;
    let path = run.out.join("embeddings.csv");
    let rows = dump_embeddings(&ckpt, pick(&splits, split), max_items, run.cfg.sampler_config().seed, &path)?;
    println!("dump-embeddings: {rows} rows -> {}", path.display());
    Ok(())
}

fn run_grad_check(trials: usize, seed: u64) -> Result<(), CliError> {
    let mut checks: Vec<OpCheck> = verification_suite(trials, seed)?;
    checks.push(episode_loss_grad_check(trials, seed)?);
    let mut worst = 0.0f64;
    for c in &checks {
        println!("{:<24} trials {:>4}  redrawn {:>3}  max rel error {:.3e}", c.name, c.trials, c.redrawn, c.max_error);
        worst = worst.max(c.max_error);
    }
    println!("worst {worst:.3e} (tolerance {GRAD_TOLERANCE:e})");
    if worst > GRAD_TOLERANCE {
        return Err(CliError::Numeric(format!("gradient check failed: {worst:e} > {GRAD_TOLERANCE:e}")));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Command::GradCheck { trials } = cli.command {
        return run_grad_check(trials, cli.seed.unwrap_or(0));
    }
    let run = Run::new(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&run),
        Command::Pretrain => run_pretrain(&run),
        Command::Metatrain { init } => run_metatrain(&run, init.as_ref()),
        Command::Eval {
            checkpoint,
            episodes,
            finetune,
            lr,
            lr_search,
            split,
        } => run_eval(
            &run,
            EvalArgs {
                checkpoint: checkpoint.as_ref(),
                episodes: *episodes,
                finetune: *finetune,
                lr: *lr,
                lr_search: *lr_search,
                split: *split,
            },
        ),
        Command::LrSearch { checkpoint } => run_lr_search(&run, checkpoint.as_ref()),
        Command::DumpEmbeddings {
            checkpoint,
            max_items,
            split,
        } => run_dump(&run, checkpoint.as_ref(), *max_items, *split),
        Command::GradCheck { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
