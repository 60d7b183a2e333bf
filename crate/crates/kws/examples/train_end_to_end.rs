//! One-stage (end-to-end) training: a small SVDF stack learns the binary
//! keyword score directly from synthetic utterances, then gets saved and
//! reloaded bit-exactly.
//!
//!     cargo run --release --example train_end_to_end

use kws::evaluation::synth::{self, SynthConfig};
use kws::frontend::{ContextConfig, MelConfig};
use kws::labeling::{KeywordSpec, LabelMode};
use kws::topology::{LayerSpec, Model, ModelConfig};
use kws::training::{train, TrainConfig};

fn small_e2e_config() -> ModelConfig {
    ModelConfig {
        name: "e2e_demo".into(),
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
    }
}

fn main() {
    let spec = KeywordSpec::ok_google();
    let synth_cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
    let mel = MelConfig::default();
    let model_config = small_e2e_config();

    println!("synthesizing 16 positives and 16 negatives...");
    let utterances: Vec<_> = (0..16)
        .map(|i| synth::synth_positive(&spec, &synth_cfg, i))
        .chain((0..16).map(|i| synth::synth_negative(&spec, &synth_cfg, i)))
        .collect();
    let data = synth::labeled_sequences(
        &utterances,
        &mel,
        &model_config.context,
        LabelMode::Keyword { spec: &spec, extra_positives: 10 },
    )
    .expect("labeling");

    let mut model = Model::new(model_config, 1).expect("model");
    let cfg = TrainConfig { epochs: 40, seed: 1, ..TrainConfig::default() };
    println!("training {} params for {} epochs...", model.param_count(), cfg.epochs);
    let report = train(&mut model, &data, &cfg).expect("training");

    for (epoch, loss) in report.epoch_loss.iter().enumerate().step_by(8) {
        println!("  epoch {epoch:>3}: per-frame CE {loss:.4}");
    }
    println!("final per-frame CE: {:.4}", report.final_loss);

    let path = std::env::temp_dir().join("kws_e2e_demo.kws");
    model.save(&path).expect("save");
    let reloaded = Model::load(&path).expect("load");
    assert_eq!(reloaded.checksum(), model.checksum());
    println!("saved + reloaded bit-exactly: {}", path.display());
    println!("parameter checksum: {}", &report.param_checksum[..16]);
}
