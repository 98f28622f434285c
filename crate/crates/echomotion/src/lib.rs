//! Animate a static source frame with the motion of a driving clip.
//!
//! The pipeline detects weakly-supervised keypoints with local affine
//! transforms, builds a dense backward deformation field with an occlusion
//! map, renders the frame with a content/texture dual-decoder generator, and
//! sharpens the result adversarially. Everything runs on the CPU in `f64`
//! on top of a small built-in reverse-mode autodiff tape, so training and
//! evaluation are deterministic given a seed.
//!
//! Start with the `examples/` directory: each major capability (synthetic
//! data, training, reconstruction, animation, evaluation, checkpoint
//! inspection, gradient checking) has a runnable example. The `echomotion`
//! binary exposes the same operations as subcommands.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod training;
pub mod keypoints;
pub mod motion;
pub mod nn;
pub mod tensor;
pub mod tps;

pub use error::{Error, Result};

/// Entry point used by the `echomotion` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    // Wired up once the CLI module lands.
    eprintln!("echomotion: CLI not built yet");
    1
}
