mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlvit::dl::DlSign;
use dlvit::vit::MaskMode;
use dlvit::Error;

use config::{RunConfig, SelectorKind};

#[derive(Parser, Debug)]
#[command(name = "dlvit", version, about = "Delta-loss token filtering for small vision transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SignArg {
    Importance,
    Eq7Literal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Attn,
    ZeroEmbed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    DeitTiny,
    DeitSmall,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "dlvit-out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "DLVIT_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Choose ρ so this fraction of tokens is labelled keep.
    #[arg(long, global = true)]
    keep_ratio: Option<f64>,
    #[arg(long, global = true)]
    threshold: Option<f32>,
    #[arg(long, global = true)]
    use_global: Option<OnOff>,
    #[arg(long, global = true)]
    filter: Option<SelectorKind>,
    #[arg(long, global = true)]
    dl_sign: Option<SignArg>,
    #[arg(long, global = true)]
    mask_mode: Option<MaskArg>,
    /// Loss weight on keep labels when training the filter.
    #[arg(long, global = true)]
    pos_weight: Option<f32>,
    /// Weight keep labels by the drop/keep ratio.
    #[arg(long, global = true)]
    balance_labels: bool,
    /// Re-fit the filter threshold every fine-tune epoch to keep this fraction.
    #[arg(long, global = true)]
    hold_keep: Option<f64>,
    /// Keep the filter frozen during fine-tuning.
    #[arg(long, global = true)]
    no_filter_grad: bool,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    /// Evaluation and benchmark batch size.
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Untimed forward batches before throughput timing.
    #[arg(long, global = true)]
    warmup: Option<usize>,
    /// Use 512 warm-up forwards.
    #[arg(long, global = true)]
    full_warmup: bool,
    #[arg(long, global = true)]
    repeats: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub(crate) enum Cmd {
    /// Write the synthetic shapes dataset (train and val manifests).
    GenData {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        val_per_class: Option<usize>,
    },
    /// Train the backbone on full sequences.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token delta loss against a frozen backbone.
    ScoreDl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold delta-loss records into keep/drop labels.
    Label {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the token filter MLP to pseudo-labels.
    TrainFilter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train backbone and filter together on masked sequences.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one image and report the kept tokens.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Accuracy, keep ratio and MACs on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also time inference.
        #[arg(long)]
        throughput: bool,
    },
    /// Inference throughput.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic MACs and parameter counts.
    Flops {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3])]
        ratios: Vec<f64>,
        /// Per-block keep ratios of a gradual schedule to compare against.
        #[arg(long, value_delimiter = ',')]
        gradual: Option<Vec<f64>>,
        /// Report the keep ratio reaching this many MACs.
        #[arg(long)]
        target_macs: Option<f64>,
    },
    /// Delta-loss histogram and spatial grids as CSV.
    Stats {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = dlvit::stats::DEFAULT_BINS)]
        bins: usize,
    },
    /// Selector, descriptor and ρ comparison grid.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.002, 0.004])]
        rhos: Vec<f64>,
    },
    /// Every stage from data generation to evaluation, resumable.
    Pipeline {
        /// Existing training manifest instead of generated data.
        #[arg(long, requires = "val")]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
}

impl Cmd {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Cmd::GenData { .. } => "gen-data",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::ScoreDl { .. } => "score-dl",
            Cmd::Label { .. } => "label",
            Cmd::TrainFilter { .. } => "train-filter",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Infer { .. } => "infer",
            Cmd::Eval { .. } => "eval",
            Cmd::Bench { .. } => "bench",
            Cmd::Flops { .. } => "flops",
            Cmd::Stats { .. } => "stats",
            Cmd::Ablate { .. } => "ablate",
            Cmd::Pipeline { .. } => "pipeline",
        }
    }
}

fn merge(common: &Common, cmd: &Cmd) -> dlvit::Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        c.seed = v;
    }
    if let Some(v) = common.threads {
        c.threads = v;
    }
    if let Some(v) = common.rho {
        c.label.rho = v;
    }
    if let Some(v) = common.keep_ratio {
        c.label.keep_ratio = Some(v);
    }
    if let Some(v) = common.threshold {
        c.filter.threshold = v;
    }
    if let Some(v) = common.use_global {
        c.filter.use_global = matches!(v, OnOff::On);
    }
    if let Some(v) = common.filter {
        c.filter.selector = v;
    }
    if let Some(v) = common.dl_sign {
        c.label.dl_sign = match v {
            SignArg::Importance => DlSign::Importance,
            SignArg::Eq7Literal => DlSign::Eq7Literal,
        };
    }
    if let Some(v) = common.mask_mode {
        c.train.mask_mode = match v {
            MaskArg::Attn => MaskMode::Attn,
            MaskArg::ZeroEmbed => MaskMode::ZeroEmbed,
        };
    }
    if let Some(v) = common.pos_weight {
        c.filter.pos_weight = Some(v);
    }
    if common.balance_labels {
        c.filter.balance_labels = true;
    }
    if let Some(v) = common.hold_keep {
        c.filter.hold_keep = Some(v);
    }
    if common.no_filter_grad {
        c.train.filter_grad = false;
    }
    if let Some(v) = common.pretrain_epochs {
        c.train.pretrain_epochs = v;
    }
    if let Some(v) = common.finetune_epochs {
        c.train.finetune_epochs = v;
    }
    if let Some(v) = common.batch {
        c.eval.batch_size = v;
    }
    if let Some(v) = common.warmup {
        c.eval.warmup = v;
    }
    if common.full_warmup {
        c.eval.warmup = 512;
    }
    if let Some(v) = common.repeats {
        c.eval.repeats = v;
    }
    match cmd {
        Cmd::GenData {
            per_class,
            val_per_class,
        } => {
            if let Some(v) = per_class {
                c.data.train_per_class = *v;
            }
            if let Some(v) = val_per_class {
                c.data.val_per_class = *v;
            }
        }
        Cmd::Pretrain { epochs: Some(e), .. } => c.train.pretrain_epochs = *e,
        Cmd::Finetune { epochs: Some(e), .. } => c.train.finetune_epochs = *e,
        Cmd::Eval { throughput: true, .. } => c.eval.throughput = true,
        _ => {}
    }
    c.validate()?;
    Ok(c)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Training(_) => 2,
        Error::Data { .. } | Error::Format { .. } | Error::Corruption { .. } | Error::Io { .. } | Error::Csv(_) => 3,
        Error::Divergence(_) | Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.cmd.name();
    let result = merge(&cli.common, &cli.cmd).and_then(|cfg| {
        let threads = cfg.threads;
        dlvit::par::with_threads(threads, || commands::run(&cli.cmd, &cfg, &cli.common.out_dir))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dlvit {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
