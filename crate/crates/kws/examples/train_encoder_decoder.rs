//! Two-stage (encoder+decoder) training: stage 1 trains an acoustic encoder
//! on subword targets through an intermediate softmax; stage 2 composes it
//! with a decoder, freezes the encoder, and trains the decoder on binary
//! keyword targets.
//!
//!     cargo run --release --example train_encoder_decoder

use kws::evaluation::synth::{self, SynthConfig};
use kws::frontend::{ContextConfig, MelConfig};
use kws::labeling::{KeywordSpec, LabelMode};
use kws::topology::{LayerSpec, ModelConfig};
use kws::training::{train_two_stage, TrainConfig};

fn main() {
    let spec = KeywordSpec::ok_google();
    let synth_cfg = SynthConfig { seed: 17, ..SynthConfig::default() };
    let mel = MelConfig::default();

    let base = ModelConfig {
        name: "enc_dec_demo".into(),
        context: ContextConfig { left: 1, right: 1, stride: 2 },
        feature_dim: 40,
        layers: vec![
            LayerSpec::Svdf { nodes: 16, memory: 8 },
            LayerSpec::Bottleneck { size: 12 },
            LayerSpec::Svdf { nodes: 16, memory: 8 },
            LayerSpec::Svdf { nodes: 24, memory: 24 },
            LayerSpec::Softmax { classes: 2 },
        ],
        encoder_boundary: 3,
        biases: true,
    };

    println!("synthesizing training data...");
    let utterances: Vec<_> = (0..16)
        .map(|i| synth::synth_positive(&spec, &synth_cfg, i))
        .chain((0..16).map(|i| synth::synth_negative(&spec, &synth_cfg, i)))
        .collect();
    let encoder_data = synth::labeled_sequences(
        &utterances,
        &mel,
        &base.context,
        LabelMode::Subword { spec: &spec },
    )
    .expect("subword labels");
    let decoder_data = synth::labeled_sequences(
        &utterances,
        &mel,
        &base.context,
        LabelMode::Keyword { spec: &spec, extra_positives: 10 },
    )
    .expect("binary labels");

    let encoder_cfg = TrainConfig { epochs: 30, seed: 3, ..TrainConfig::default() };
    let decoder_cfg = TrainConfig { epochs: 30, seed: 4, ..TrainConfig::default() };
    println!("stage 1: encoder on {} subword classes...", spec.num_classes);
    let outcome = train_two_stage(
        &base,
        spec.num_classes,
        &encoder_data,
        &decoder_data,
        &encoder_cfg,
        &decoder_cfg,
    )
    .expect("two-stage training");

    println!("  encoder final subword CE: {:.4}", outcome.encoder_report.final_loss);
    println!("stage 2: decoder on frozen encoder outputs...");
    println!("  decoder final keyword CE: {:.4}", outcome.decoder_report.final_loss);

    let model = outcome.model;
    println!(
        "composed model: {} layers ({} encoder incl. intermediate softmax), {} params",
        model.config().layers.len(),
        model.config().encoder_boundary,
        model.param_count()
    );
    println!(
        "frozen flags: {:?}",
        model.frozen().iter().map(|&f| u8::from(f)).collect::<Vec<_>>()
    );
}
