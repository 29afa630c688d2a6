//! The `faultclip` command line: profiling, fault sweeps, threshold tuning
//! and single injection campaigns over `.ftc` models.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faultclip_core::tuner::TuneScope;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "faultclip", version, about = "Bit-flip fault sweeps and clip-threshold tuning for CNN models")]
pub struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Activation maxima and histograms on the calibration split.
    Profile {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = faultclip_core::profiler::DEFAULT_BINS)]
        bins: usize,
    },
    /// Accuracy over the fault-rate grid for one clipping variant.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        clip: ClipMode,
        /// Tuned model for `--clip tuned`; tuned in-process when absent.
        #[arg(long)]
        tuned_model: Option<PathBuf>,
        /// Also write sweep.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Profile, clip at ACT_max, then tune every activation threshold.
    Tune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        tune: TuneArgs,
    },
    /// One fault campaign at a single rate.
    Inject {
        #[command(flatten)]
        common: CommonArgs,
        /// Per-bit flip probability; not needed with --mask-file.
        #[arg(long, required_unless_present = "mask_file")]
        rate: Option<f64>,
        /// Conv/fc layer, by name or index.
        #[arg(long, conflicts_with = "network", required_unless_present_any = ["network", "mask_file"])]
        layer: Option<String>,
        #[arg(long)]
        network: bool,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Write the drawn mask to mask.jsonl.
        #[arg(long)]
        emit_mask: bool,
        /// Replay a mask instead of drawing one.
        #[arg(long)]
        mask_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClipMode {
    None,
    Actmax,
    Tuned,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use a synthetic dataset of this many samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated fault rates, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Trials per rate in sweeps.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sweep fault scope: `network` or a conv/fc layer.
    #[arg(long)]
    pub scope: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub min_iters: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Trials per rate inside the tuner.
    #[arg(long)]
    pub tune_trials: Option<usize>,
    #[arg(long, value_enum)]
    pub tune_scope: Option<TuneScopeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuneScopeArg {
    Layer,
    Network,
}

impl From<TuneScopeArg> for TuneScope {
    fn from(s: TuneScopeArg) -> Self {
        match s {
            TuneScopeArg::Layer => TuneScope::Layer,
            TuneScopeArg::Network => TuneScope::Network,
        }
    }
}

impl CommonArgs {
    /// The config file (or defaults) with these flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let cwd_path = |p: &PathBuf| -> PathBuf {
            if cfg.base_dir.as_os_str().is_empty() {
                p.clone()
            } else {
                std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.clone())
            }
        };
        if let Some(m) = &self.model {
            cfg.model = Some(cwd_path(m));
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = cwd_path(o);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.dataset = config::DatasetConfig::Synthetic { samples: n };
        }
        if let Some(r) = &self.rates {
            cfg.sweep.fault_rates = r.clone();
        }
        if let Some(t) = self.trials {
            cfg.sweep.trials = t;
        }
        if let Some(s) = &self.scope {
            cfg.sweep.scope = s.clone();
        }
        Ok(cfg)
    }
}

impl TuneArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.tune;
        if let Some(v) = self.max_iters {
            t.max_iters = v;
        }
        if let Some(v) = self.min_iters {
            t.min_iters = v;
        }
        if let Some(v) = self.delta {
            t.delta = v;
        }
        if let Some(v) = self.tune_trials {
            t.trials = v;
        }
        if let Some(v) = self.tune_scope {
            t.scope = v.into();
        }
    }
}

/// Runs a parsed command line. Thread pool and logging are set up by the
/// caller.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Profile { common, bins } => commands::profile(&common.resolve()?, *bins),
        Command::Sweep {
            common,
            clip,
            tuned_model,
            svg,
        } => commands::sweep(&common.resolve()?, *clip, tuned_model.as_deref(), *svg),
        Command::Tune { common, tune } => {
            let mut cfg = common.resolve()?;
            tune.apply(&mut cfg);
            commands::tune(&cfg)
        }
        Command::Inject {
            common,
            rate,
            layer,
            network,
            trial,
            emit_mask,
            mask_file,
        } => commands::inject(
            &common.resolve()?,
            &commands::InjectArgs {
                rate: *rate,
                network: *network,
                layer: layer.clone(),
                trial: *trial,
                emit_mask: *emit_mask,
                mask_file: mask_file.clone(),
            },
        ),
    }
}
