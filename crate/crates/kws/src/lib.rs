//! A self-contained streaming keyword-spotting engine.
//!
//! The pipeline: a log-mel front-end turns 16 kHz PCM into 40-dimensional
//! frames every 10 ms ([`frontend`]); a stateful rank-1 SVDF network consumes
//! context-stacked frames at a configurable stride and emits a keyword
//! likelihood per inference ([`nnet`], [`topology`]); training is frame-level
//! cross-entropy over force-aligned labels with deterministic seeded SGD, in
//! either the end-to-end or the encoder+decoder recipe ([`labeling`],
//! [`training`]); scores become suppressed detection events ([`scoring`]);
//! and an evaluation harness sweeps thresholds into ROC curves and
//! FR-at-FA/h operating points over a seeded synthetic dataset
//! ([`evaluation`]).
//!
//! A convolutional baseline with smoothed-posterior decoding is included for
//! comparison, sharing the front-end, the training loop, and the harness.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example model_accounting
//! cargo run --release --example extract_features -- out.wav
//! cargo run --release --example synthesize_dataset
//! cargo run --release --example train_end_to_end
//! cargo run --release --example train_encoder_decoder
//! cargo run --release --example stream_detection
//! cargo run --release --example evaluate_roc
//! ```
//!
//! or the `kws` binary, which exposes the same pipeline as subcommands
//! (`features`, `synth`, `train`, `stream`, `eval`, `count`).

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod labeling;
pub mod nnet;
pub mod scoring;
pub mod topology;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
