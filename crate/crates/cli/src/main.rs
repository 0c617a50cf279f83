//! `ovaxai`: augment, train, search, evaluate, explain and compare from the command line.

mod commands;
mod config;
mod error;
mod io;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovaxai::train::OptimizerKind;

use config::{RunConfig, SplitMode};
use error::CliError;

#[derive(Parser)]
#[command(name = "ovaxai", version, about = "Train, evaluate and explain image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write k augmented copies of every image plus a manifest.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Augmented copies per original.
        #[arg(long)]
        copies: Option<usize>,
    },
    /// Split, train, checkpoint and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Random search over learning rate and dropout.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        probe_epochs: Option<usize>,
        /// Replace training with a closed-form objective peaking at this iteration.
        #[arg(long)]
        stub_peak: Option<usize>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the images listed in this manifest (paths relative to --data).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Attribute one prediction with IG, LIME and/or SHAP.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        xai: XaiArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Pairwise agreement between explanation files.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Size of the top segment sets compared with Jaccard; defaults to the configured
        /// top-k, capped at the segment count.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(required = true)]
        explanations: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, value_enum)]
    split: Option<SplitMode>,
    /// Generate the synthetic five-class fixture at --data when that directory is missing or empty.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args)]
struct XaiArgs {
    /// Comma-separated subset of ig, lime, shap.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Superpixels per image side.
    #[arg(long)]
    grid: Option<usize>,
    /// Replacement for absent segments: mean, black or constant:<v>.
    #[arg(long)]
    fill: Option<String>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
    /// black or mean.
    #[arg(long)]
    ig_baseline: Option<String>,
    #[arg(long)]
    lime_samples: Option<usize>,
    #[arg(long)]
    shap_samples: Option<usize>,
    /// signed-heatmap or boundary-highlight.
    #[arg(long)]
    overlay: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut c = base_config(self.config.as_ref())?;
        c.data = self.data.or(c.data);
        c.out = self.out.or(c.out);
        c.arch = self.arch.or(c.arch);
        c.image_size = self.image_size.or(c.image_size);
        set(&mut c.batch_size, self.batch_size);
        c.epochs = self.epochs.or(c.epochs);
        c.lr = self.lr.or(c.lr);
        c.dropout = self.dropout.or(c.dropout);
        c.optimizer = self.optimizer.or(c.optimizer);
        set(&mut c.seed, self.seed);
        c.deterministic |= self.deterministic;
        set(&mut c.train_fraction, self.train_fraction);
        set(&mut c.split, self.split);
        c.synthetic.enabled |= self.synthetic;
        c.augment.seed = c.seed;
        Ok(c)
    }
}

impl XaiArgs {
    fn apply(self, c: &mut RunConfig) {
        let x = &mut c.xai;
        set(&mut x.methods, self.methods);
        set(&mut x.top_k, self.top_k);
        set(&mut x.grid, self.grid);
        set(&mut x.fill, self.fill);
        x.target = self.target.or(x.target);
        set(&mut x.ig_steps, self.ig_steps);
        set(&mut x.ig_baseline, self.ig_baseline);
        set(&mut x.lime_samples, self.lime_samples);
        set(&mut x.shap_samples, self.shap_samples);
        set(&mut x.overlay, self.overlay);
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("OVAXAI_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("OVAXAI_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Augment { common, copies } => {
            let mut c = common.resolve()?;
            set(&mut c.augment.copies, copies);
            commands::augment(&c)
        }
        Command::Train { common } => commands::train(&common.resolve()?),
        Command::Search {
            common,
            iterations,
            probe_epochs,
            stub_peak,
        } => {
            let mut c = common.resolve()?;
            set(&mut c.search.iterations, iterations);
            set(&mut c.search.probe_epochs, probe_epochs);
            c.search.stub_peak = stub_peak.or(c.search.stub_peak);
            commands::search(&c)
        }
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
        } => commands::evaluate_cmd(&common.resolve()?, &checkpoint, manifest.as_deref()),
        Command::Explain {
            common,
            xai,
            checkpoint,
            image,
        } => {
            let mut c = common.resolve()?;
            xai.apply(&mut c);
            commands::explain(&c, &checkpoint, &image)
        }
        Command::Compare {
            config,
            out,
            top_k,
            explanations,
        } => {
            let mut c = base_config(config.as_ref())?;
            c.out = out.or(c.out);
            commands::compare(&c, &explanations, top_k)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
