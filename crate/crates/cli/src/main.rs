mod commands;
mod config;
mod datasets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use structprune::network::ConvRange;
use structprune::pruning::{Criterion, Granularity};
use structprune::{ErrorClass, Precision};

use crate::config::{DatasetKind, ExperimentConfig};

#[derive(Parser)]
#[command(name = "structprune", version, about = "Feature-map and kernel pruning experiments for CNNs")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown dataset kind {s:?}"))
}

/// Settings shared by every experiment command. Flags override the JSON
/// config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture string, e.g. "1x6(C5)-6x16(C5)-16x120(C5)-84-10".
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, value_parser = parse_kind)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training seed (shuffling, augmentation).
    #[arg(long)]
    seed: Option<u64>,
    /// Initialization seed.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Per-layer ratios over the layer range, comma separated.
    #[arg(long, value_delimiter = ',')]
    layer_ratios: Option<Vec<f64>>,
    /// Best-of-N candidate count.
    #[arg(long, short = 'n')]
    candidates: Option<usize>,
    /// Conv layers to prune, e.g. 2..6 (default: all but the first).
    #[arg(long)]
    layer_range: Option<ConvRange>,
    #[arg(long)]
    prune_seed: Option<u64>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    allow_orphans: bool,
    #[arg(long)]
    dedup: bool,
    /// Threads for mask evaluation; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Prune in this many equal steps, retraining after each.
    #[arg(long)]
    steps: Option<usize>,
    /// Leave wall-clock times out of the logs (byte-identical replays).
    #[arg(long)]
    no_wall_time: bool,
}

impl Common {
    fn resolve(&self) -> structprune::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $($dst:tt)+) => {
                if let Some(v) = $flag.clone() {
                    $($dst)+ = v.into();
                }
            };
        }
        set!(self.out => c.output);
        set!(self.arch => c.architecture);
        set!(self.dataset => c.dataset.kind);
        set!(self.data_dir.clone().map(Some) => c.dataset.dir);
        set!(self.train_images.clone().map(Some) => c.dataset.train_images);
        set!(self.train_labels.clone().map(Some) => c.dataset.train_labels);
        set!(self.test_images.clone().map(Some) => c.dataset.test_images);
        set!(self.test_labels.clone().map(Some) => c.dataset.test_labels);
        set!(self.train_limit.map(Some) => c.dataset.train_limit);
        set!(self.test_limit.map(Some) => c.dataset.test_limit);
        set!(self.val_fraction => c.dataset.val_fraction);
        set!(self.split_seed => c.dataset.split_seed);
        set!(self.epochs => c.train.epochs);
        set!(self.batch_size => c.train.batch_size);
        set!(self.lr => c.train.learning_rate);
        set!(self.seed => c.train.seed);
        set!(self.init_seed => c.init_seed);
        set!(self.precision => c.train.precision);
        if let Some(e) = self.retrain_epochs {
            let mut r = c.retrain_config();
            r.epochs = e;
            c.retrain = Some(r);
        }
        if self.no_wall_time {
            c.train.record_wall_time = false;
            if let Some(r) = &mut c.retrain {
                r.record_wall_time = false;
            }
        }
        set!(self.granularity => c.prune.granularity);
        set!(self.ratio => c.prune.ratio);
        set!(self.layer_ratios.clone().map(Some) => c.prune.ratios);
        set!(self.candidates => c.prune.candidates);
        set!(self.layer_range.map(Some) => c.prune.layer_range);
        set!(self.prune_seed => c.prune.seed);
        set!(self.criterion => c.prune.criterion);
        set!(self.workers.map(Some) => c.prune.workers);
        set!(self.steps => c.prune.steps);
        c.prune.allow_orphans |= self.allow_orphans;
        c.prune.dedup |= self.dedup;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from scratch; writes model.ckpt and the epoch log.
    Train(Common),
    /// Select and apply a pruning mask (no retraining).
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Apply this mask JSON instead of selecting one.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Retrain a pruned checkpoint with its masks held fixed.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prune-and-retrain curves over ratios for each granularity.
    SweepRatio {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "fmap,kernel")]
        granularities: Vec<Granularity>,
    },
    /// Best-of-N validation MCR as a function of N.
    SweepN {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.4")]
        ratios: Vec<f64>,
        #[arg(long = "ns", value_delimiter = ',', default_value = "1,10,100")]
        ns: Vec<usize>,
        /// Number of selection seeds per (ratio, N).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Best-of-N against the weight-sum criterion, before retraining.
    CompareCriteria {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Feature-map pruning and retraining, then kernel pruning and retraining.
    Combined {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fmap_ratio: f64,
        #[arg(long)]
        kernel_ratio: f64,
    },
    /// Per-layer pruning accounting between two checkpoints.
    Report {
        before: PathBuf,
        after: PathBuf,
        #[arg(long)]
        layer_range: Option<ConvRange>,
        /// Also write report.json and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dense vs masked convolution timings and exact MAC counts.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Architecture, parameter counts and cost model of a checkpoint.
    Info { checkpoint: PathBuf },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.cmd {
        Cmd::Train(c) => c.resolve().and_then(|cfg| commands::train(&cfg)),
        Cmd::Prune { common, checkpoint, mask } => {
            common.resolve().and_then(|cfg| commands::prune(&cfg, &checkpoint, mask.as_deref()))
        }
        Cmd::Retrain { common, checkpoint } => common.resolve().and_then(|cfg| commands::retrain(&cfg, &checkpoint)),
        Cmd::SweepRatio {
            common,
            checkpoint,
            ratios,
            granularities,
        } => common.resolve().and_then(|cfg| {
            commands::sweep_ratio(&cfg, checkpoint.as_deref(), &ratios, &granularities)
        }),
        Cmd::SweepN {
            common,
            checkpoint,
            ratios,
            ns,
            seeds,
        } => common
            .resolve()
            .and_then(|cfg| commands::sweep_n(&cfg, checkpoint.as_deref(), &ratios, &ns, seeds)),
        Cmd::CompareCriteria {
            common,
            checkpoint,
            ratios,
            seeds,
        } => common
            .resolve()
            .and_then(|cfg| commands::compare_criteria(&cfg, checkpoint.as_deref(), &ratios, seeds)),
        Cmd::Combined {
            common,
            checkpoint,
            fmap_ratio,
            kernel_ratio,
        } => common
            .resolve()
            .and_then(|cfg| commands::combined(&cfg, checkpoint.as_deref(), fmap_ratio, kernel_ratio)),
        Cmd::Report {
            before,
            after,
            layer_range,
            out,
        } => commands::report(&before, &after, layer_range, out.as_deref()),
        Cmd::Bench {
            checkpoint,
            batch,
            reps,
            warmup,
            out,
        } => commands::bench(&checkpoint, batch, reps, warmup, out.as_deref()),
        Cmd::Info { checkpoint } => commands::info(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
