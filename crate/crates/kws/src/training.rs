//! Frame-level cross-entropy training with deterministic seeded SGD: the
//! 1-stage (end-to-end) recipe with an encoder adaptation rate, and the
//! 2-stage (encoder+decoder) recipe with a frozen pretrained encoder.

use std::path::PathBuf;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabeledSequence;
use crate::nnet::Gradients;
use crate::topology::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Train the whole network end-to-end on binary keyword labels.
    OneStage,
    /// Train a subword encoder first, then a decoder on its (frozen) outputs.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub recipe: Recipe,
    /// Multiplier on encoder gradients in the one-stage recipe; 0 reproduces
    /// the encoder+decoder recipe exactly, 1 adapts the encoder fully.
    pub adaptation_rate: f32,
    /// Optional pretrained model whose encoder section (and input
    /// normalization) seeds this run.
    pub encoder_init: Option<PathBuf>,
    pub freeze_encoder: bool,
    /// Global-norm gradient clip; protects long SVDF unrolls.
    pub clip_norm: Option<f32>,
    /// Learn a per-dimension input normalization from the training data
    /// (skipped when an encoder init supplies one).
    pub normalize_input: bool,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            recipe: Recipe::OneStage,
            adaptation_rate: 1.0,
            encoder_init: None,
            freeze_encoder: false,
            clip_norm: Some(5.0),
            normalize_input: true,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.adaptation_rate) {
            return Err(Error::Config("adaptation_rate must be in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Mean per-frame cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    pub final_loss: f64,
    pub param_checksum: String,
    pub wall_seconds: f64,
}

/// Cross-entropy of a predicted distribution against the true class,
/// floored at -ln(1e-12).
pub fn ce_loss(output: &[f32], class: usize) -> Result<f32> {
    if class >= output.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} outputs",
            output.len()
        )));
    }
    Ok(-f64::from(output[class]).max(1e-12).ln() as f32)
}

/// Momentum state for plain SGD.
pub struct SgdOptimizer {
    velocity: Gradients,
}

impl SgdOptimizer {
    pub fn new(model: &Model) -> Self {
        SgdOptimizer { velocity: model.zero_gradients() }
    }

    /// One parameter update: scale encoder gradients by the adaptation rate
    /// (one-stage recipe), drop frozen gradients, clip by global norm, blend
    /// momentum, and step. Frozen parameters are never written.
    pub fn step(&mut self, model: &mut Model, grads: &mut Gradients, cfg: &TrainConfig) -> Result<()> {
        if cfg.recipe == Recipe::OneStage && cfg.adaptation_rate != 1.0 {
            for li in 0..grads.layers.len() {
                if model.is_encoder_layer(li) {
                    grads.scale_layer(li, cfg.adaptation_rate);
                }
            }
        }
        for li in 0..grads.layers.len() {
            if model.frozen()[li] {
                grads.zero_layer(li);
            }
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                message: "non-finite gradient".into(),
                report: None,
            });
        }
        if let Some(clip) = cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > f64::from(clip) {
                grads.scale((f64::from(clip) / norm) as f32);
            }
        }

        let frozen = model.frozen().to_vec();
        let velocity = &mut self.velocity;
        model.visit_blocks_mut(|li, bi, block| {
            if frozen[li] {
                return;
            }
            let v = &mut velocity.layers[li][bi];
            let g = &grads.layers[li][bi];
            for ((w, v), g) in block.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + *g;
                *w -= cfg.learning_rate * *v;
            }
        });
        Ok(())
    }
}

/// Per-dimension mean and inverse standard deviation of the stacked inputs.
pub fn compute_input_norm(data: &[LabeledSequence]) -> Option<(Vec<f32>, Vec<f32>)> {
    let dim = data.iter().find_map(|s| s.inputs.first()).map(|x| x.values.len())?;
    let mut count = 0u64;
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for seq in data {
        for x in &seq.inputs {
            count += 1;
            for (i, &v) in x.values.iter().enumerate() {
                mean[i] += f64::from(v);
                sq[i] += f64::from(v) * f64::from(v);
            }
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    let mut scale = Vec::with_capacity(dim);
    for i in 0..dim {
        mean[i] /= n;
        let var = (sq[i] / n - mean[i] * mean[i]).max(0.0);
        scale.push((1.0 / var.sqrt().max(1e-3)) as f32);
    }
    Some((mean.iter().map(|&m| m as f32).collect(), scale))
}

/// Train a model in place with frame-level cross-entropy.
///
/// Every sequence starts from zero SVDF state and is unrolled in full; the
/// realized order is the seeded shuffle and nothing else, so a fixed seed
/// reproduces the parameters bit for bit.
pub fn train(model: &mut Model, data: &[LabeledSequence], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let usable: Vec<&LabeledSequence> = data.iter().filter(|s| !s.inputs.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(
            "no sequence is long enough for one inference".into(),
        ));
    }
    for seq in &usable {
        if seq.inputs[0].values.len() != model.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "sequence input dim {} != model input dim {}",
                seq.inputs[0].values.len(),
                model.input_dim()
            )));
        }
        if seq.inputs.len() != seq.labels.len() {
            return Err(Error::InvalidArgument("inputs and labels differ in length".into()));
        }
    }

    if let Some(path) = &cfg.encoder_init {
        let source = Model::load(path)?;
        let boundary = model.config().encoder_boundary;
        model.copy_layer_params_from(&source, boundary)?;
        let (mean, scale) = source.input_norm();
        model.set_input_norm(mean.to_vec(), scale.to_vec())?;
    } else if cfg.normalize_input {
        if let Some((mean, scale)) = compute_input_norm(data) {
            model.set_input_norm(mean, scale)?;
        }
    }
    if cfg.freeze_encoder {
        model.set_encoder_frozen(true);
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = SgdOptimizer::new(model);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut frame_sum = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_gradients();
            let mut batch_frames = 0u64;
            for &si in chunk {
                let seq = usable[si];
                let inputs: Vec<Vec<f32>> = seq.inputs.iter().map(|x| x.values.clone()).collect();
                let trace = model.forward_seq(&inputs)?;
                let (seq_grads, seq_loss) = model.backward_seq(&trace, &seq.labels)?;
                grads.add_assign(&seq_grads);
                loss_sum += seq_loss;
                batch_frames += seq.labels.len() as u64;
            }
            frame_sum += batch_frames;
            grads.scale(1.0 / batch_frames as f32);
            optimizer.step(model, &mut grads, cfg).map_err(|e| match e {
                Error::Diverged { message, .. } => Error::Diverged {
                    message: format!("epoch {epoch}: {message}"),
                    report: Some(Box::new(report(&epoch_loss, model, start))),
                },
                other => other,
            })?;
        }
        let mean_loss = loss_sum / frame_sum as f64;
        epoch_loss.push(mean_loss);
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                message: format!("epoch {epoch}: non-finite loss {mean_loss}"),
                report: Some(Box::new(report(&epoch_loss, model, start))),
            });
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_deref()) {
            if every > 0 && (epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                model.save(&dir.join(format!("checkpoint_{:04}.kws", epoch + 1)))?;
            }
        }
    }

    Ok(report(&epoch_loss, model, start))
}

fn report(epoch_loss: &[f64], model: &Model, start: Instant) -> TrainReport {
    TrainReport {
        epoch_loss: epoch_loss.to_vec(),
        final_loss: epoch_loss.last().copied().unwrap_or(f64::NAN),
        param_checksum: model.checksum(),
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

pub struct TwoStageOutcome {
    pub model: Model,
    pub encoder_report: TrainReport,
    pub decoder_report: TrainReport,
}

/// The encoder+decoder recipe: pretrain the encoder (through an intermediate
/// softmax) on subword targets, then compose it with the decoder, freeze the
/// encoder section, and train the decoder on binary keyword targets.
///
/// The returned model keeps the intermediate softmax.
pub fn train_two_stage(
    base_config: &ModelConfig,
    encoder_classes: usize,
    encoder_data: &[LabeledSequence],
    decoder_data: &[LabeledSequence],
    encoder_cfg: &TrainConfig,
    decoder_cfg: &TrainConfig,
) -> Result<TwoStageOutcome> {
    let composed_config = base_config.with_intermediate_softmax(encoder_classes);
    let encoder_config = composed_config.encoder_config()?;

    let expect_dim = composed_config.input_dim();
    for (name, data) in [("encoder", encoder_data), ("decoder", decoder_data)] {
        let dim = data.iter().find_map(|s| s.inputs.first()).map(|x| x.values.len());
        if let Some(dim) = dim {
            if dim != expect_dim {
                return Err(Error::Config(format!(
                    "{name} dataset input dim {dim} != model input dim {expect_dim}"
                )));
            }
        }
    }

    let mut encoder = Model::new(encoder_config, encoder_cfg.seed)?;
    let encoder_report = train(&mut encoder, encoder_data, encoder_cfg)?;

    let mut composed = Model::new(composed_config.clone(), decoder_cfg.seed)?;
    composed.copy_layer_params_from(&encoder, composed_config.encoder_boundary)?;
    let (mean, scale) = encoder.input_norm();
    composed.set_input_norm(mean.to_vec(), scale.to_vec())?;

    let stage2_cfg = TrainConfig {
        recipe: Recipe::TwoStage,
        freeze_encoder: true,
        normalize_input: false,
        encoder_init: None,
        ..decoder_cfg.clone()
    };
    let decoder_report = train(&mut composed, decoder_data, &stage2_cfg)?;

    Ok(TwoStageOutcome { model: composed, encoder_report, decoder_report })
}
