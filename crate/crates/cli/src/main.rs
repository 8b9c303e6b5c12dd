//! `contourlab`: synthesize or ingest pitch tracks, segment contours, train
//! pseudotasks, embed, extract features, evaluate and report.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "contourlab", version, about = "Self-supervised pitch-contour representations")]
struct Cli {
    /// TOML run configuration; flags override its values [default: none].
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic step [default: 0, or the config value].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run everything on a single worker thread [default: off].
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic vibrato/drift corpus (CSV tracks + manifest).
    Synth(SynthArgs),
    /// Split voiced frames of every manifest track into 100-frame contours.
    Segment(SegmentArgs),
    /// Sample a labelled pair or triple dataset.
    Pairs(PairsArgs),
    /// Train a pseudotask model.
    Train(TrainArgs),
    /// Embed contours with a trained encoder.
    Embed(EmbedArgs),
    /// Compute the 17 statistical features per contour.
    Features(FeaturesArgs),
    /// Z-score and concatenate feature blocks.
    Combine(CombineArgs),
    /// Cross-validated downstream classification.
    Eval(EvalArgs),
    /// Render evaluation results as a table and JSON document.
    Report(ReportArgs),
    /// Finite-difference verification of all gradients in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of recordings [default: 40].
    #[arg(long)]
    recordings: Option<usize>,
    /// Frames per recording [default: 3000].
    #[arg(long)]
    frames: Option<usize>,
    /// Spread vibrato rates over jittered strata so every recording differs [default: off].
    #[arg(long, default_value_t = false)]
    stratify: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output contour JSON file.
    #[arg(long)]
    out: PathBuf,
    /// Minimum confidence for a voiced frame [default: 0.5].
    #[arg(long)]
    voicing_threshold: Option<f64>,
    /// Keep a random sample of this many contours [default: all].
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Args, Debug)]
struct PairsArgs {
    #[arg(long)]
    contours: PathBuf,
    /// file, contiguous or slotfill.
    #[arg(long)]
    task: String,
    /// Number of samples [default: train_samples from the config, 2000].
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// file, contiguous or slotfill.
    #[arg(long)]
    task: String,
    /// Contour JSON file (alternative to --manifest) [default: none].
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    contours: Option<PathBuf>,
    /// Manifest to segment on the fly [default: none].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoint, history and split.
    #[arg(long)]
    out: PathBuf,
    /// Maximum epochs, 30..=100 [default: 60].
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs or triples per batch [default: 50].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// VGG width multiplier in (0, 1] [default: 1.0].
    #[arg(long)]
    width: Option<f64>,
    /// Voicing threshold when segmenting --manifest [default: 0.5].
    #[arg(long)]
    voicing_threshold: Option<f64>,
    /// Size of the training set [default: 2000].
    #[arg(long)]
    train_samples: Option<usize>,
    /// Disable random transposition [default: off, augmentation on].
    #[arg(long, default_value_t = false)]
    no_augmentation: bool,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    contours: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    contours: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CombineArgs {
    /// Feature block as NAME=PATH; repeat for each block, in order.
    #[arg(long, required = true)]
    features: Vec<String>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Feature matrix as NAME=PATH or PATH; repeatable.
    #[arg(long, required = true)]
    features: Vec<String>,
    /// Manifest JSON (label per recording) or CSV (one label column per task, one row per contour).
    #[arg(long)]
    labels: PathBuf,
    /// Contours the feature rows describe; needed with a manifest [default: none].
    #[arg(long)]
    contours: Option<PathBuf>,
    /// Label key to classify; repeatable.
    #[arg(long, required = true)]
    task: Vec<String>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    folds: Option<usize>,
    /// Output JSON file (list of reports).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// JSON file with every check line [default: none].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads(deterministic: bool) -> anyhow::Result<()> {
    let cap = std::env::var("CONTOURLAB_THREADS")
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| anyhow::anyhow!("CONTOURLAB_THREADS must be a positive integer, got `{v}`"))
        })
        .transpose()?;
    let n = if deterministic { Some(1) } else { cap };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(cli.deterministic)?;
    let mut o = Overrides {
        seed: cli.seed,
        ..Overrides::default()
    };
    let base = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            o.recordings = a.recordings;
            o.frames = a.frames;
            o.stratify = a.stratify;
            commands::synth(&base.apply(&o), &a.out)
        }
        Command::Segment(a) => {
            o.voicing_threshold = a.voicing_threshold;
            commands::segment(&base.apply(&o), &a.manifest, &a.out, a.sample)
        }
        Command::Pairs(a) => commands::pairs(&base.apply(&o), &a.contours, &a.task, a.count, &a.out),
        Command::Train(a) => {
            o.epochs = a.epochs;
            o.batch_size = a.batch_size;
            o.lr = a.lr;
            o.width = a.width;
            o.voicing_threshold = a.voicing_threshold;
            o.train_samples = a.train_samples;
            o.no_augmentation = a.no_augmentation;
            let src = match (a.contours, a.manifest) {
                (Some(c), _) => commands::Source::Contours(c),
                (None, Some(m)) => commands::Source::Manifest(m),
                (None, None) => unreachable!("clap requires one source"),
            };
            commands::train(&base.apply(&o), &a.task, &src, &a.out)
        }
        Command::Embed(a) => commands::embed(&base.apply(&o), &a.checkpoint, &a.contours, &a.out),
        Command::Features(a) => commands::features(&base.apply(&o), &a.contours, &a.out),
        Command::Combine(a) => commands::combine(&base.apply(&o), &a.features, &a.out),
        Command::Eval(a) => {
            o.folds = a.folds;
            commands::eval(&base.apply(&o), &a.features, &a.labels, a.contours.as_deref(), &a.task, &a.out)
        }
        Command::Report(a) => commands::report(&a.inputs, &a.out),
        Command::Gradcheck(a) => commands::gradcheck(&base.apply(&o), a.seeds, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
