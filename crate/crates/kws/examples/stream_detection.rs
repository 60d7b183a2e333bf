//! Streaming detection: train a small end-to-end model, then feed held-out
//! audio chunk by chunk through a detector and watch the score spike at the
//! keyword's final component.
//!
//!     cargo run --release --example stream_detection

use kws::evaluation::synth::{self, SynthConfig};
use kws::frontend::{ContextConfig, MelConfig};
use kws::labeling::{KeywordSpec, LabelMode};
use kws::scoring::{Detector, ScoreMethod};
use kws::topology::{LayerSpec, Model, ModelConfig};
use kws::training::{train, TrainConfig};

fn main() {
    let spec = KeywordSpec::ok_google();
    let train_synth = SynthConfig { seed: 23, ..SynthConfig::default() };
    let mel = MelConfig::default();

    let model_config = ModelConfig {
        name: "stream_demo".into(),
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

    println!("training a small detector...");
    let utterances: Vec<_> = (0..24)
        .map(|i| synth::synth_positive(&spec, &train_synth, i))
        .chain((0..24).map(|i| synth::synth_negative(&spec, &train_synth, i)))
        .collect();
    let data = synth::labeled_sequences(
        &utterances,
        &mel,
        &model_config.context,
        LabelMode::Keyword { spec: &spec, extra_positives: 10 },
    )
    .expect("labels");
    let mut model = Model::new(model_config, 2).expect("model");
    let cfg = TrainConfig { epochs: 40, seed: 2, ..TrainConfig::default() };
    let report = train(&mut model, &data, &cfg).expect("training");
    println!("final per-frame CE: {:.4}\n", report.final_loss);

    // Held-out utterances from a different seed.
    let held_out = SynthConfig { seed: 900, ..SynthConfig::default() };
    let positive = synth::synth_positive(&spec, &held_out, 0);
    let negative = synth::synth_negative(&spec, &held_out, 0);
    let keyword_end = positive.keyword_end_ms.unwrap();

    let mut detector =
        Detector::new(&model, mel, ScoreMethod::PositiveClass, 0.9, 1000).expect("detector");

    println!("streaming the keyword utterance (keyword ends at {keyword_end} ms):");
    let mut all_events = Vec::new();
    // 160-sample chunks: 10 ms of audio per push, as a microphone would.
    for chunk in positive.samples.chunks(160) {
        let (points, events) = detector.push(chunk).expect("detect");
        for p in points {
            if p.timestamp_ms % 200 == 0 || p.score > 0.5 {
                let bar = "#".repeat((p.score * 40.0) as usize);
                println!("  {:>5} ms  {:.3} {bar}", p.timestamp_ms, p.score);
            }
        }
        all_events.extend(events);
    }
    for e in &all_events {
        println!(
            "  EVENT at {} ms (score {:.3}, {} ms after keyword end)",
            e.trigger_timestamp_ms,
            e.peak_score,
            e.trigger_timestamp_ms as i64 - keyword_end as i64
        );
    }
    assert!(!all_events.is_empty(), "expected a detection on the keyword utterance");

    detector.reset();
    println!("\nstreaming a negative utterance:");
    let (points, events) = detector.push(&negative.samples).expect("detect");
    let peak = points.iter().map(|p| p.score).fold(0.0f32, f32::max);
    println!("  {} score points, peak score {:.3}, {} events", points.len(), peak, events.len());
}
