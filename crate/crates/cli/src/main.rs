//! `streakfix`: synthetic data generation, training, inference and evaluation
//! for sparse-view CT streak artifact reduction.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::Profile;
use std::path::PathBuf;
use std::process::ExitCode;
use streakfix::training::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "streakfix",
    version,
    about = "Sparse-view CT streak artifact reduction with adversarial networks",
    after_help = "Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 numerical failure.\n\
                  Settings are resolved as: built-in profile defaults < --config file < STREAKFIX_SEED < flags."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate paired sparse-view / dense-view reconstructions of random phantoms.
    GenData(GenDataArgs),
    /// Train one variant over cross-validation folds.
    Train(TrainArgs),
    /// Apply a trained generator to slices.
    Infer(InferArgs),
    /// Score x_s and trained generators on a held-out fold; write the report.
    Eval(EvalArgs),
    /// Write the built-in surrogate feature-extractor weights.
    Weights(WeightsArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with [data], [train] and [extractor] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from.
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    profile: Profile,
    /// Random seed (overrides the config file and STREAKFIX_SEED) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of phantoms [default: 27].
    #[arg(long)]
    phantoms: Option<usize>,
    /// Slices per phantom [default: 4; desk: 2].
    #[arg(long)]
    slices: Option<usize>,
    /// Slice side length in pixels, a multiple of 16 [default: 384; desk: 128].
    #[arg(long)]
    size: Option<usize>,
    /// Projection views of the sparse reconstruction x_s [default: 67].
    #[arg(long)]
    sparse_views: Option<usize>,
    /// Projection views of the dense reconstruction x_d [default: 200].
    #[arg(long)]
    dense_views: Option<usize>,
    /// Ellipses per phantom [default: 8].
    #[arg(long)]
    ellipses: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; each fold goes to `fold<k>/`.
    #[arg(long)]
    out: PathBuf,
    /// Model variant [default: ours-focus-fpn].
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Train only this fold (0-based) instead of all folds.
    #[arg(long)]
    fold: Option<usize>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    folds: Option<usize>,
    /// Training epochs; 0 writes the initialization checkpoint only [default: 50; desk: 5].
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0001].
    #[arg(long)]
    lr: Option<f64>,
    /// Adam beta1 [default: 0.5].
    #[arg(long)]
    beta1: Option<f64>,
    /// Adversarial loss weight lambda_a [default: 1].
    #[arg(long)]
    lambda_a: Option<f64>,
    /// MSE loss weight lambda_m [default: 100].
    #[arg(long)]
    lambda_m: Option<f64>,
    /// Perceptual loss weight lambda_p [default: 10].
    #[arg(long)]
    lambda_p: Option<f64>,
    /// Training patch side length, a multiple of 16 [default: 256; desk: 64].
    #[arg(long)]
    patch_size: Option<usize>,
    /// Patch pairs cropped per fold [default: 200].
    #[arg(long)]
    patches: Option<usize>,
    /// Serial data loading for bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
    /// Feature-extractor weight file [default: built-in surrogate].
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    /// Expected SHA-256 of --vgg-weights [default: checksum of the surrogate].
    #[arg(long)]
    vgg_sha256: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Generator checkpoint (any variant).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; every sparse slice is corrected.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    data: Option<PathBuf>,
    /// Individual image files (repeatable).
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write 16-bit PNG previews.
    #[arg(long)]
    png: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Held-out fold (0-based) [default: 0].
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Cross-validation folds, as used in training [default: 5].
    #[arg(long)]
    folds: Option<usize>,
    /// Model as NAME=CHECKPOINT (repeatable).
    #[arg(long, value_parser = parse_model)]
    model: Vec<(String, PathBuf)>,
    /// Training root holding `<variant>/fold<k>/generator.svck` for the five variants.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// ROI window as X,Y,WIDTH,HEIGHT [default: bone region of the first held-out slice].
    #[arg(long, value_parser = parse_roi)]
    roi: Option<streakfix::image::Window>,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: streakfix::Error| e.to_string())
}

fn parse_model(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=CHECKPOINT, got `{s}`"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=CHECKPOINT, got `{s}`"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_roi(s: &str) -> Result<streakfix::image::Window, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected X,Y,WIDTH,HEIGHT as non-negative integers, got `{s}`"))?;
    match v[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok(streakfix::image::Window::new(x, y, w, h)),
        _ => Err(format!("expected X,Y,WIDTH,HEIGHT with positive size, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Weights(a) => commands::weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
