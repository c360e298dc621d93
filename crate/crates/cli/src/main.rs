use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Align frozen image and multilingual text embeddings through an English pivot.
#[derive(Debug, Parser)]
#[command(name = "pivotalign", version)]
struct Cli {
    /// Worker threads (falls back to PIVOTALIGN_THREADS, then all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with known cross-space correspondence.
    GenSynth(GenSynthArgs),
    /// Train both projection heads.
    Train(TrainArgs),
    /// Image-to-text and text-to-image recall@k.
    EvalRetrieval(EvalRetrievalArgs),
    /// Zero-shot classification against class-name embeddings.
    EvalClassify(EvalClassifyArgs),
    /// Cosine similarity matrix between two projected banks.
    Simmat(SimmatArgs),
    /// Mean per-language z-scores across models.
    Zscore(ZscoreArgs),
    /// Per-sample projection and search latency.
    Bench(BenchArgs),
    /// Print shapes, parameter counts and metadata of checkpoints or banks.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    concepts: usize,
    #[arg(long, default_value_t = 60)]
    samples_per_concept: usize,
    #[arg(long, default_value_t = 500)]
    heldout_pairs: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    clip_dim: usize,
    #[arg(long, default_value_t = 96)]
    multi_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// English queries embedded by the CLIP text encoder.
    #[arg(long)]
    queries_clip: PathBuf,
    /// The same queries embedded by the multilingual encoder.
    #[arg(long)]
    queries_multi: PathBuf,
    #[arg(long)]
    image_bank: PathBuf,
    /// Multilingual caption memory bank.
    #[arg(long)]
    text_bank: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 2048, value_parser = clap::value_parser!(u64).range(2..))]
    batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Retrieval and contrastive temperature.
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Perturbation noise variance.
    #[arg(long, default_value_t = 0.004)]
    sigma2: f64,
    /// Weight of the intra-alignment term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shared output width (defaults to the CLIP input width).
    #[arg(long)]
    out_dim: Option<usize>,
    /// Zero wall-clock fields so equal seeds give identical logs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    no_text: bool,
    #[arg(long)]
    no_pseudo: bool,
    #[arg(long)]
    no_intra: bool,
    #[arg(long)]
    no_perturb: bool,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Both,
    I2t,
    T2i,
}

#[derive(Debug, Args)]
struct EvalRetrievalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Caption labels; caption j matches image i when labels agree. Defaults
    /// to the captions' .labels sidecar. Images use their own sidecar or
    /// their row index.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    direction: DirectionArg,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalClassifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Class-name bank; row c is class c.
    #[arg(long)]
    classes: PathBuf,
    /// Image labels; defaults to the images' .labels sidecar.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimmatArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bank_a: PathBuf,
    #[arg(long)]
    bank_b: PathBuf,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    pgm_out: Option<PathBuf>,
    /// Projected rows of bank A as CSV.
    #[arg(long)]
    export_a: Option<PathBuf>,
    /// Projected rows of bank B as CSV.
    #[arg(long)]
    export_b: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ZscoreArgs {
    /// CSV with rows model,language,value.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(10..))]
    repeats: u64,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint directories, .upc heads or .ueb banks.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(e.code);
    }
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::EvalRetrieval(a) => commands::eval_retrieval(a),
        Command::EvalClassify(a) => commands::eval_classify(a),
        Command::Simmat(a) => commands::simmat(a),
        Command::Zscore(a) => commands::zscore(a),
        Command::Bench(a) => commands::bench(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
