//! The evaluation harness end to end: train a small model, score a held-out
//! synthetic suite, sweep thresholds into an ROC curve, and pick the
//! operating point at a target false-accept rate.
//!
//!     cargo run --release --example evaluate_roc

use kws::evaluation::synth::{self, SynthConfig};
use kws::evaluation::{
    default_thresholds, fr_at_fa, latency_at_threshold, roc_curve, score_eval_set, EvalSet,
    HitWindow,
};
use kws::frontend::{ContextConfig, MelConfig};
use kws::labeling::{KeywordSpec, LabelMode};
use kws::scoring::ScoreMethod;
use kws::topology::{LayerSpec, Model, ModelConfig};
use kws::training::{train, TrainConfig};

fn main() {
    let spec = KeywordSpec::ok_google();
    let mel = MelConfig::default();
    let model_config = ModelConfig {
        name: "roc_demo".into(),
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

    println!("training...");
    let train_synth = SynthConfig { seed: 31, ..SynthConfig::default() };
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
    let mut model = Model::new(model_config, 3).expect("model");
    let report = train(&mut model, &data, &TrainConfig { epochs: 40, seed: 3, ..TrainConfig::default() })
        .expect("training");
    println!("final per-frame CE: {:.4}", report.final_loss);

    // Held-out suite: 40 positives, ~12 min of negatives.
    let eval_synth = SynthConfig { seed: 5000, negative_ms: (8000, 16_000), ..SynthConfig::default() };
    let set = EvalSet::synthetic(&spec, &eval_synth, 40, 60);
    println!(
        "scoring {} utterances ({:.2} h negative audio)...",
        set.utterances.len(),
        set.negative_hours()
    );
    let scores = score_eval_set(&model, &mel, &ScoreMethod::PositiveClass, &set, None).expect("scoring");

    let thresholds = default_thresholds();
    let window = HitWindow::default();
    let curve = roc_curve(&scores, &thresholds, 1000, window).expect("roc");
    println!("\nROC (selected points):");
    println!("{:>10} {:>12} {:>8}", "threshold", "FA/h", "FR");
    for p in curve.iter().step_by(200) {
        println!("{:>10.3} {:>12.2} {:>8.3}", p.threshold, p.fa_per_hour, p.fr_rate);
    }

    // The small demo suite cannot resolve 0.1 FA/h, so target 10 FA/h.
    let target = 10.0;
    match fr_at_fa(&scores, target, &thresholds, 1000, window, false) {
        Ok(op) => {
            println!(
                "\noperating point at <= {target} FA/h: threshold {:.3}, FR {:.1}%, FA {:.2}/h",
                op.threshold,
                op.fr_rate * 100.0,
                op.fa_per_hour
            );
            let latency = latency_at_threshold(&scores, op.threshold, 1000, window);
            println!(
                "latency: {}/{} hits inside [-100 ms, +750 ms], median first crossing {} ms",
                latency.in_window_hits,
                latency.hits,
                latency.median_latency_ms().unwrap_or(0)
            );
        }
        Err(e) => println!("\nno operating point: {e}"),
    }
}
