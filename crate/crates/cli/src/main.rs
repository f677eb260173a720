//! Command-line front end for the masked conditional diffusion toolkit:
//! phantom corpus generation, denoiser and guidance-classifier training,
//! guided image-to-image translation, downstream evaluation, and a
//! single-seed end-to-end pipeline.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use macdm::Error;

use commands::{
    eval_classify::EvalClassifyArgs, eval_segment::EvalSegmentArgs, fid::FidArgs,
    phantom_gen::PhantomGenArgs, repro_all::ReproAllArgs, train_diffusion::TrainDiffusionArgs,
    train_guidance::TrainGuidanceArgs, translate::TranslateArgs,
};

#[derive(Parser)]
#[command(
    name = "macdm",
    version,
    about = "Masked conditional diffusion for synthetic bone-lesion phantoms",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural phantom dataset (images + masks + manifest).
    PhantomGen(PhantomGenArgs),
    /// Train the mask-conditioned denoising diffusion model.
    TrainDiffusion(TrainDiffusionArgs),
    /// Train the noise-aware guidance classifier.
    TrainGuidanceClassifier(TrainGuidanceArgs),
    /// Translate source phantoms into synthetic records of the target class.
    Translate(TranslateArgs),
    /// Score downstream classification with and without augmentation.
    EvalClassify(EvalClassifyArgs),
    /// Score lesion segmentation across augmentation conditions.
    EvalSegment(EvalSegmentArgs),
    /// Fréchet distance between two datasets' feature distributions.
    Fid(FidArgs),
    /// Run the whole pipeline end to end under one root seed.
    ReproAll(ReproAllArgs),
}

/// Stable process exit codes by failure class: 2 for configuration and
/// shape errors, 3 for data and checkpoint problems, 4 for numeric
/// failures, 5 for I/O and serialization.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Schedule(_)
        | Error::TimestepOutOfRange { .. }
        | Error::ShapeMismatch { .. } => 2,
        Error::Dataset(_) | Error::Checkpoint(_) | Error::UndefinedMetric(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) | Error::Serde(_) | Error::Image(_) => 5,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PhantomGen(args) => commands::phantom_gen::run(args),
        Command::TrainDiffusion(args) => commands::train_diffusion::run(args),
        Command::TrainGuidanceClassifier(args) => commands::train_guidance::run(args),
        Command::Translate(args) => commands::translate::run(args),
        Command::EvalClassify(args) => commands::eval_classify::run(args),
        Command::EvalSegment(args) => commands::eval_segment::run(args),
        Command::Fid(args) => commands::fid::run(args),
        Command::ReproAll(args) => commands::repro_all::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
