mod ablate;
mod commands;
mod config;
mod errors;
mod pipeline;
mod run_dir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use depsev::evaluator::ReportFormat;

use crate::commands::{EvalSplit, ModelSource, Stage};
use crate::config::Config;
use crate::errors::{exit_code, EXIT_INVALID};
use crate::pipeline::Ctx;
use crate::run_dir::RunDir;

/// Depression-severity classification: data preparation, auxiliary
/// features, augmentation, training, evaluation and ablation grids.
#[derive(Parser)]
#[command(name = "depsev", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; any key may be omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Directory holding every artifact of this run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Top-level seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Model cache root (defaults to $DEPSEV_CACHE_DIR).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Override a config key, e.g. `--set trainer.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    /// Print debug logging.
    #[arg(long, short, global = true, conflicts_with = "quiet")]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Clean the raw dataset into `corpus.csv`.
    Prep {
        /// Raw dataset CSV with `text` and `label` columns.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Extract auxiliary features into the feature cache.
    Features,
    /// Balance minority classes with masked-token insertions and
    /// substitutions; writes `augmented.csv` and a before/after report.
    Augment {
        /// `lexicon` or a masked-LM checkpoint id/directory.
        #[arg(long)]
        predictor: Option<String>,
    },
    /// Train and score one model per seed.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        /// Train on the prepared corpus instead of the augmented one.
        #[arg(long)]
        no_augmentation: bool,
    },
    /// Score saved checkpoints on their held-out split.
    Evaluate {
        /// A single checkpoint directory (default: every run under train/).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Classify free text or a file of posts; prints one JSON object per
    /// input.
    Predict {
        /// Text to classify. Repeatable.
        #[arg(long)]
        text: Vec<String>,
        /// One post per line, or a CSV with a `text` column.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Checkpoint directory (default: train/run0 in the run directory).
        #[arg(long, conflicts_with = "zero_init")]
        checkpoint: Option<PathBuf>,
        /// Use an untrained model whose head weights are all zero.
        #[arg(long)]
        zero_init: bool,
        /// Skip text cleaning.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Run an ablation grid; one result row per cell.
    Ablate {
        /// k values, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Heads, e.g. `mlp,lstm`.
        #[arg(long, value_delimiter = ',')]
        head: Vec<String>,
        /// Encoder ids.
        #[arg(long, value_delimiter = ',')]
        encoder: Vec<String>,
        /// `on`, `off` or both.
        #[arg(long, value_delimiter = ',')]
        augmentation: Vec<String>,
    },
    /// Print stored results.
    Report {
        #[arg(long, value_enum)]
        stage: Option<Stage>,
        /// markdown, csv or json.
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

#[derive(Args)]
struct ModelFlags {
    /// Encoder id (`toy`, `toy-<layers>`, or a checkpoint id/directory).
    #[arg(long)]
    encoder: Option<String>,
    /// mlp, lstm, mm_gate or mm_xatt.
    #[arg(long)]
    head: Option<String>,
    /// Number of top layers pooled.
    #[arg(long)]
    k: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut Config) {
        if let Some(e) = &self.encoder {
            cfg.encoder.model_id = e.clone();
        }
        if let Some(h) = &self.head {
            cfg.model.head = h.clone();
        }
        if let Some(k) = self.k {
            cfg.model.k = k;
        }
    }
}

fn configure(global: &Global, command: &Command) -> anyhow::Result<Config> {
    let mut cfg = Config::load(global.config.as_deref(), &global.overrides)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    match command {
        Command::Prep { data: Some(path) } => cfg.data.path = Some(path.clone()),
        Command::Augment { predictor: Some(p) } => cfg.augment.predictor_model_id = p.clone(),
        Command::Train { model, no_augmentation } => {
            model.apply(&mut cfg);
            if *no_augmentation {
                cfg.augment.enabled = false;
            }
        }
        Command::Predict { model, .. } => model.apply(&mut cfg),
        Command::Ablate {
            k,
            head,
            encoder,
            augmentation,
        } => {
            if !k.is_empty() {
                cfg.ablate.k = k.clone();
            }
            if !head.is_empty() {
                cfg.ablate.head = head.clone();
            }
            if !encoder.is_empty() {
                cfg.ablate.encoder_id = encoder.clone();
            }
            if !augmentation.is_empty() {
                cfg.ablate.augmentation = augmentation.clone();
            }
        }
        _ => {}
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = configure(&cli.global, &cli.command)?;
    let ctx = Ctx {
        cache: depsev::encoder::cache_root(cli.global.cache_dir.as_deref()),
        run: RunDir::open(&cli.global.run_dir)?,
        cfg,
    };
    log::debug!("configuration: {:?}", ctx.cfg);
    match cli.command {
        Command::Prep { .. } => commands::prep(&ctx),
        Command::Features => commands::features(&ctx),
        Command::Augment { .. } => commands::augment(&ctx),
        Command::Train { .. } => commands::train(&ctx),
        Command::Evaluate { checkpoint, split } => commands::evaluate(&ctx, checkpoint.as_deref(), split),
        Command::Predict {
            text,
            file,
            checkpoint,
            zero_init,
            raw,
            ..
        } => {
            let source = if zero_init {
                ModelSource::ZeroInit
            } else {
                ModelSource::Checkpoint(checkpoint.unwrap_or_else(|| ctx.run.train_dir().join("run0")))
            };
            commands::predict(&ctx, text, file.as_deref(), source, raw)
        }
        Command::Ablate { .. } => ablate::ablate(&ctx),
        Command::Report { stage, format } => {
            let format: ReportFormat = format.parse()?;
            commands::report(&ctx, stage, format)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let level = if cli.global.quiet {
        "warn"
    } else if cli.global.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
