//! Declarative model topologies, construction with seeded initialization,
//! parameter/MAC accounting, and the model file format.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::{ContextConfig, FEATURE_DIM};
use crate::nnet::{
    self, Activation, Conv1dLayer, DenseLayer, Gradients, Layer, ParamRole, SvdfLayer, SvdfState,
    Trace,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Svdf { nodes: usize, memory: usize },
    /// Linear projection (identity activation) used to cut parameters.
    Bottleneck { size: usize },
    Dense { size: usize, activation: Activation },
    Conv { filters: usize, kernel: [usize; 2], stride: [usize; 2] },
    /// Dense projection to `classes` followed by softmax normalization.
    Softmax { classes: usize },
}

/// A linear stack of layers plus the input-context geometry it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub context: ContextConfig,
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Index separating encoder layers (below) from decoder layers.
    pub encoder_boundary: usize,
    /// Whether layers carry additive biases.
    pub biases: bool,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim * self.context.frames_per_input()
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layer list is empty".into()));
        }
        if self.encoder_boundary > self.layers.len() {
            return Err(Error::Config(format!(
                "encoder_boundary {} outside layer list of {}",
                self.encoder_boundary,
                self.layers.len()
            )));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax { .. })) {
            return Err(Error::Config("the final layer must be a softmax".into()));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if matches!(spec, LayerSpec::Conv { .. }) && i != 0 {
                return Err(Error::Config(
                    "conv layers interpret the raw context grid and must come first".into(),
                ));
            }
            if matches!(spec, LayerSpec::Softmax { .. })
                && i != self.layers.len() - 1
                && i + 1 != self.encoder_boundary
            {
                return Err(Error::Config(format!(
                    "softmax at layer {i} is neither final nor the designated intermediate"
                )));
            }
        }
        Ok(())
    }

    /// True when the encoder section ends in its own softmax (the
    /// encoder+decoder composition).
    pub fn has_intermediate_softmax(&self) -> bool {
        self.encoder_boundary >= 1
            && self.encoder_boundary < self.layers.len()
            && matches!(self.layers[self.encoder_boundary - 1], LayerSpec::Softmax { .. })
    }

    /// Insert an intermediate softmax of `classes` at the encoder boundary.
    /// A no-op when one is already present or when there is no decoder
    /// section to separate from.
    pub fn with_intermediate_softmax(&self, classes: usize) -> ModelConfig {
        let mut config = self.clone();
        if config.has_intermediate_softmax() || config.encoder_boundary >= config.layers.len() {
            return config;
        }
        config.layers.insert(config.encoder_boundary, LayerSpec::Softmax { classes });
        config.encoder_boundary += 1;
        config.name = format!("{}_enc_dec", self.name);
        config
    }

    /// The encoder as a standalone trainable model; requires the intermediate
    /// softmax so the sub-model has an output head.
    pub fn encoder_config(&self) -> Result<ModelConfig> {
        if !self.has_intermediate_softmax() {
            return Err(Error::Config(
                "encoder_config requires an intermediate softmax".into(),
            ));
        }
        let config = ModelConfig {
            name: format!("{}_encoder", self.name),
            context: self.context,
            feature_dim: self.feature_dim,
            layers: self.layers[..self.encoder_boundary].to_vec(),
            encoder_boundary: self.encoder_boundary,
            biases: self.biases,
        };
        config.validate()?;
        Ok(config)
    }
}

/// The published configurations: three end-to-end SVDF stacks (named by
/// approximate parameter count) and the convolutional baseline.
pub fn builtin_config(name: &str) -> Result<ModelConfig> {
    match name {
        "E2E_700K" => Ok(e2e_config(name, 1280, 64)),
        "E2E_318K" => Ok(e2e_config(name, 576, 64)),
        "E2E_40K" => Ok(e2e_config(name, 96, 32)),
        "Baseline_1850K" => Ok(baseline_config()),
        _ => Err(Error::InvalidArgument(format!(
            "unknown config '{name}'; builtins: {}",
            BUILTIN_CONFIG_NAMES.join(", ")
        ))),
    }
}

pub const BUILTIN_CONFIG_NAMES: [&str; 4] =
    ["E2E_700K", "E2E_318K", "E2E_40K", "Baseline_1850K"];

/// Four SVDF layers (memory 8) with bottlenecks between them, then three
/// memory-32 SVDF layers and a binary softmax. One frame of context on each
/// side, inference every second frame.
fn e2e_config(name: &str, first_nodes: usize, bottleneck: usize) -> ModelConfig {
    let mut layers = Vec::new();
    for i in 0..4 {
        layers.push(LayerSpec::Svdf { nodes: first_nodes, memory: 8 });
        if i < 3 {
            layers.push(LayerSpec::Bottleneck { size: bottleneck });
        }
    }
    let encoder_boundary = layers.len();
    for _ in 0..3 {
        layers.push(LayerSpec::Svdf { nodes: 32, memory: 32 });
    }
    layers.push(LayerSpec::Softmax { classes: 2 });
    ModelConfig {
        name: name.to_string(),
        context: ContextConfig { left: 1, right: 1, stride: 2 },
        feature_dim: FEATURE_DIM,
        layers,
        encoder_boundary,
        biases: true,
    }
}

/// Convolutional baseline: one 92-filter 8x8/8x8 convolution over a 41x40
/// context grid, three relu dense layers of 512, and a 9-class subword softmax.
fn baseline_config() -> ModelConfig {
    let layers = vec![
        LayerSpec::Conv { filters: 92, kernel: [8, 8], stride: [8, 8] },
        LayerSpec::Dense { size: 512, activation: Activation::Relu },
        LayerSpec::Dense { size: 512, activation: Activation::Relu },
        LayerSpec::Dense { size: 512, activation: Activation::Relu },
        LayerSpec::Softmax { classes: 9 },
    ];
    let encoder_boundary = layers.len();
    ModelConfig {
        name: "Baseline_1850K".to_string(),
        context: ContextConfig { left: 30, right: 10, stride: 3 },
        feature_dim: FEATURE_DIM,
        layers,
        encoder_boundary,
        biases: true,
    }
}

/// Exact trainable-parameter count of a configuration.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let bias = |n: usize| if config.biases { n as u64 } else { 0 };
    let mut dim = config.input_dim();
    let mut grid = (config.context.frames_per_input(), config.feature_dim);
    let mut total = 0u64;
    for spec in &config.layers {
        match *spec {
            LayerSpec::Svdf { nodes, memory } => {
                total += (nodes * dim + nodes * memory) as u64 + bias(nodes);
                dim = nodes;
            }
            LayerSpec::Bottleneck { size } | LayerSpec::Dense { size, .. } => {
                total += (size * dim) as u64 + bias(size);
                dim = size;
            }
            LayerSpec::Softmax { classes } => {
                total += (classes * dim) as u64 + bias(classes);
                dim = classes;
            }
            LayerSpec::Conv { filters, kernel, stride } => {
                total += (filters * kernel[0] * kernel[1]) as u64 + bias(filters);
                let out_grid = ((grid.0 - kernel[0]) / stride[0] + 1, (grid.1 - kernel[1]) / stride[1] + 1);
                dim = out_grid.0 * out_grid.1 * filters;
                grid = out_grid;
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacConvention {
    /// Multiply-accumulates of one full forward pass.
    PerInference,
    /// Per-inference cost amortized over the 10 ms front-end frame rate,
    /// i.e. divided by the inference stride.
    Per10MsFrame,
}

/// Multiply-accumulate count under the given convention. Biases add no
/// multiplies, so a bias-free dense layer has MACs == params.
pub fn count_macs(config: &ModelConfig, convention: MacConvention) -> Result<u64> {
    config.validate()?;
    let mut dim = config.input_dim();
    let mut grid = (config.context.frames_per_input(), config.feature_dim);
    let mut total = 0u64;
    for spec in &config.layers {
        match *spec {
            LayerSpec::Svdf { nodes, memory } => {
                total += (nodes * dim + nodes * memory) as u64;
                dim = nodes;
            }
            LayerSpec::Bottleneck { size } | LayerSpec::Dense { size, .. } => {
                total += (size * dim) as u64;
                dim = size;
            }
            LayerSpec::Softmax { classes } => {
                total += (classes * dim) as u64;
                dim = classes;
            }
            LayerSpec::Conv { filters, kernel, stride } => {
                let out_grid = ((grid.0 - kernel[0]) / stride[0] + 1, (grid.1 - kernel[1]) / stride[1] + 1);
                total += (out_grid.0 * out_grid.1 * filters * kernel[0] * kernel[1]) as u64;
                dim = out_grid.0 * out_grid.1 * filters;
                grid = out_grid;
            }
        }
    }
    Ok(match convention {
        MacConvention::PerInference => total,
        MacConvention::Per10MsFrame => total / config.context.stride as u64,
    })
}

/// Left-context consumption: how far back (in inference steps and stream
/// milliseconds) the stacked SVDF memories reach, plus the stacked frame
/// context itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Sum of (memory - 1) over SVDF layers, in inference steps.
    pub svdf_steps: usize,
    /// The step reach in stream milliseconds: steps * stride * 10 ms.
    pub svdf_ms: u64,
    /// Left context frames consumed by input stacking.
    pub left_context_frames: usize,
}

pub fn receptive_field(config: &ModelConfig) -> ReceptiveField {
    let svdf_steps: usize = config
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Svdf { memory, .. } => memory - 1,
            _ => 0,
        })
        .sum();
    ReceptiveField {
        svdf_steps,
        svdf_ms: (svdf_steps * config.context.stride * 10) as u64,
        left_context_frames: config.context.left,
    }
}

/// A constructed network: config, layers with owned weights, per-layer frozen
/// flags, and the input normalization learned from training data.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    frozen: Vec<bool>,
    input_mean: Vec<f32>,
    input_scale: Vec<f32>,
}

impl Model {
    /// Build a model with seeded initialization: feature/dense/conv weights
    /// uniform in +-sqrt(6 / (fan_in + fan_out)), time filters uniform in
    /// +-sqrt(3 / memory), biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut layers = build_layers(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut layers {
            let (fan_in, fan_out) = (layer.input_dim(), layer.output_dim());
            let glorot = (6.0 / (fan_in + fan_out) as f32).sqrt();
            for (role, block) in layer.blocks_mut() {
                match role {
                    ParamRole::Bias => {}
                    ParamRole::TimeFilter => {
                        let memory = block.len() / fan_out;
                        let bound = (3.0 / memory as f32).sqrt();
                        for v in block {
                            *v = rng.random_range(-bound..bound);
                        }
                    }
                    _ => {
                        for v in block {
                            *v = rng.random_range(-glorot..glorot);
                        }
                    }
                }
            }
        }
        let input_dim = config.input_dim();
        let frozen = vec![false; layers.len()];
        Ok(Model {
            config,
            layers,
            frozen,
            input_mean: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn output_classes(&self) -> usize {
        self.layers.last().map(Layer::output_dim).unwrap_or(0)
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    /// Freeze or thaw the encoder section (layers below the boundary).
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        let boundary = self.config.encoder_boundary.min(self.layers.len());
        for f in &mut self.frozen[..boundary] {
            *f = frozen;
        }
    }

    pub fn is_encoder_layer(&self, layer_index: usize) -> bool {
        layer_index < self.config.encoder_boundary
    }

    /// First layer index that participates in training.
    pub fn first_trainable_layer(&self) -> usize {
        self.frozen.iter().position(|f| !f).unwrap_or(self.layers.len())
    }

    /// Fixed affine input normalization `(x - mean) * scale` applied before
    /// the first layer.
    pub fn set_input_norm(&mut self, mean: Vec<f32>, scale: Vec<f32>) -> Result<()> {
        if mean.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(Error::Config("input norm dimension mismatch".into()));
        }
        self.input_mean = mean;
        self.input_scale = scale;
        Ok(())
    }

    pub fn input_norm(&self) -> (&[f32], &[f32]) {
        (&self.input_mean, &self.input_scale)
    }

    pub fn normalize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((&v, &m), &s)| (v - m) * s)
            .collect()
    }

    pub fn new_states(&self) -> Vec<Option<SvdfState>> {
        nnet::new_states(&self.layers)
    }

    /// One streaming inference; SVDF states carry across calls.
    pub fn forward_stream(&self, states: &mut [Option<SvdfState>], x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input dim {} != model input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        nnet::forward_stream(&self.layers, states, &self.normalize(x))
    }

    /// Whole-sequence forward from zero state, caching activations for
    /// backward.
    pub fn forward_seq(&self, inputs: &[Vec<f32>]) -> Result<Trace> {
        let normalized: Vec<Vec<f32>> = inputs.iter().map(|x| self.normalize(x)).collect();
        nnet::forward_seq(&self.layers, &normalized)
    }

    /// Cross-entropy backward over the unrolled sequence. Gradients and loss
    /// are summed over frames; frozen layers receive zero gradients.
    pub fn backward_seq(&self, trace: &Trace, labels: &[usize]) -> Result<(Gradients, f64)> {
        let start = self.first_trainable_layer();
        let (mut grads, loss) = nnet::backward_seq(&self.layers, trace, labels, start)?;
        for (li, frozen) in self.frozen.iter().enumerate() {
            if *frozen {
                grads.zero_layer(li);
            }
        }
        Ok((grads, loss))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(&self.layers)
    }

    /// Apply `update` to every parameter block; used by the optimizer.
    pub fn visit_blocks_mut(
        &mut self,
        mut update: impl FnMut(usize, usize, &mut [f32]),
    ) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (bi, (_, block)) in layer.blocks_mut().into_iter().enumerate() {
                update(li, bi, block);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter access in stable block order (for oracles and tests).
    pub fn get_param(&self, index: usize) -> f32 {
        let mut i = index;
        for layer in &self.layers {
            for (_, block) in layer.blocks() {
                if i < block.len() {
                    return block[i];
                }
                i -= block.len();
            }
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_param(&mut self, index: usize, value: f32) {
        let mut i = index;
        for layer in &mut self.layers {
            for (_, block) in layer.blocks_mut() {
                if i < block.len() {
                    block[i] = value;
                    return;
                }
                i -= block.len();
            }
        }
        panic!("parameter index {index} out of range");
    }

    /// SHA-256 over the little-endian parameter bytes in block order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for (_, block) in layer.blocks() {
                for v in block {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Checksum of the encoder section only.
    pub fn encoder_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let boundary = self.config.encoder_boundary.min(self.layers.len());
        for layer in &self.layers[..boundary] {
            for (_, block) in layer.blocks() {
                for v in block {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Copy parameters for layers `[0, count)` from another model; shapes must
    /// match exactly (used to install a pretrained encoder).
    pub fn copy_layer_params_from(&mut self, other: &Model, count: usize) -> Result<()> {
        if count > self.layers.len() || count > other.layers.len() {
            return Err(Error::Config("layer copy range out of bounds".into()));
        }
        for li in 0..count {
            let src: Vec<Vec<f32>> = other.layers[li]
                .blocks()
                .into_iter()
                .map(|(_, b)| b.to_vec())
                .collect();
            let mut dst = self.layers[li].blocks_mut();
            if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.len() != d.1.len()) {
                return Err(Error::Config(format!(
                    "layer {li} shape mismatch between source and destination"
                )));
            }
            for (s, (_, d)) in src.iter().zip(dst.iter_mut()) {
                d.copy_from_slice(s);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            config: self.config.clone(),
            frozen: self.frozen.clone(),
        };
        let header_text =
            toml::to_string(&header).map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FILE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header_text.as_bytes());
        let norm_count = (self.input_mean.len() + self.input_scale.len()) as u64;
        bytes.extend_from_slice(&norm_count.to_le_bytes());
        for v in self.input_mean.iter().chain(&self.input_scale) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for layer in &self.layers {
            for (_, block) in layer.blocks() {
                for v in block {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let magic = reader.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic; not a model file".into() });
        }
        let version = u32::from_le_bytes(reader.take(4)?.try_into().unwrap());
        if version != FILE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(reader.take(4)?.try_into().unwrap()) as usize;
        let header_offset = reader.pos as u64;
        let header_bytes = reader.take(header_len)?;
        let header_text = std::str::from_utf8(header_bytes).map_err(|e| Error::Format {
            offset: header_offset,
            message: format!("header is not utf-8: {e}"),
        })?;
        let header: FileHeader = toml::from_str(header_text).map_err(|e| Error::Format {
            offset: header_offset,
            message: format!("header parse: {e}"),
        })?;
        header.config.validate().map_err(|e| Error::Format {
            offset: header_offset,
            message: format!("invalid config: {e}"),
        })?;

        let norm_count = u64::from_le_bytes(reader.take(8)?.try_into().unwrap()) as usize;
        let input_dim = header.config.input_dim();
        if norm_count != 2 * input_dim {
            return Err(Error::Format {
                offset: reader.pos as u64,
                message: format!("norm block has {norm_count} values, expected {}", 2 * input_dim),
            });
        }
        let mut norm = Vec::with_capacity(norm_count);
        for _ in 0..norm_count {
            norm.push(f32::from_le_bytes(reader.take(4)?.try_into().unwrap()));
        }
        let (input_mean, input_scale) = {
            let scale = norm.split_off(input_dim);
            (norm, scale)
        };

        let param_count = u64::from_le_bytes(reader.take(8)?.try_into().unwrap()) as usize;
        let mut layers = build_layers(&header.config)?;
        let expected: usize = layers.iter().map(Layer::param_count).sum();
        if param_count != expected {
            return Err(Error::Format {
                offset: reader.pos as u64,
                message: format!("file declares {param_count} params, config needs {expected}"),
            });
        }
        for layer in &mut layers {
            for (_, block) in layer.blocks_mut() {
                for v in block {
                    *v = f32::from_le_bytes(reader.take(4)?.try_into().unwrap());
                }
            }
        }

        let checksum_offset = reader.pos as u64;
        let stored = reader.take(32)?.to_vec();
        let computed = Sha256::digest(&bytes[..checksum_offset as usize]);
        if stored != computed.as_slice() {
            return Err(Error::Format {
                offset: checksum_offset,
                message: "checksum mismatch; file is corrupt".into(),
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::Format {
                offset: reader.pos as u64,
                message: "trailing bytes after checksum".into(),
            });
        }

        if header.frozen.len() != layers.len() {
            return Err(Error::Format {
                offset: header_offset,
                message: "frozen flag count does not match layer count".into(),
            });
        }
        for layer in &layers {
            layer.validate().map_err(|e| Error::Format {
                offset: checksum_offset,
                message: format!("invalid weights: {e}"),
            })?;
        }
        Ok(Model {
            config: header.config,
            layers,
            frozen: header.frozen,
            input_mean,
            input_scale,
        })
    }
}

const MAGIC: &[u8; 8] = b"kwsmodel";
const FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    frozen: Vec<bool>,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated: wanted {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Resolve layer specs into zero-weight runtime layers, propagating dims.
fn build_layers(config: &ModelConfig) -> Result<Vec<Layer>> {
    config.validate()?;
    let mut dim = config.input_dim();
    let mut grid = (config.context.frames_per_input(), config.feature_dim);
    let mut layers = Vec::with_capacity(config.layers.len());
    for spec in &config.layers {
        let layer = match *spec {
            LayerSpec::Svdf { nodes, memory } => {
                let l = SvdfLayer::zeros(nodes, memory, dim, Activation::Relu, config.biases);
                dim = nodes;
                Layer::Svdf(l)
            }
            LayerSpec::Bottleneck { size } => {
                let l = DenseLayer::zeros(size, dim, Activation::Identity, config.biases);
                dim = size;
                Layer::Dense(l)
            }
            LayerSpec::Dense { size, activation } => {
                let l = DenseLayer::zeros(size, dim, activation, config.biases);
                dim = size;
                Layer::Dense(l)
            }
            LayerSpec::Softmax { classes } => {
                let l = DenseLayer::zeros(classes, dim, Activation::Softmax, config.biases);
                dim = classes;
                Layer::Dense(l)
            }
            LayerSpec::Conv { filters, kernel, stride } => {
                let l = Conv1dLayer::zeros(
                    filters,
                    (kernel[0], kernel[1]),
                    (stride[0], stride[1]),
                    grid,
                    Activation::Relu,
                    config.biases,
                );
                l.validate()?;
                grid = l.output_grid();
                dim = l.output_dim();
                Layer::Conv(l)
            }
        };
        layers.push(layer);
    }
    Ok(layers)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_geometries() {
        let c = builtin_config("E2E_40K").unwrap();
        assert!(matches!(c.layers[0], LayerSpec::Svdf { nodes: 96, memory: 8 }));
        assert!(matches!(c.layers[1], LayerSpec::Bottleneck { size: 32 }));
        assert_eq!(c.context, ContextConfig { left: 1, right: 1, stride: 2 });
        assert_eq!(c.input_dim(), 120);

        let b = builtin_config("Baseline_1850K").unwrap();
        assert!(matches!(b.layers.last(), Some(LayerSpec::Softmax { classes: 9 })));
        assert_eq!(b.context, ContextConfig { left: 30, right: 10, stride: 3 });
        assert_eq!(b.input_dim(), 1640);

        // The 318K model differs from 700K only in the first-stack width.
        let big = builtin_config("E2E_700K").unwrap();
        let mid = builtin_config("E2E_318K").unwrap();
        assert_eq!(big.layers[7..], mid.layers[7..]);
        assert!(matches!(mid.layers[0], LayerSpec::Svdf { nodes: 576, memory: 8 }));
        assert!(matches!(big.layers[0], LayerSpec::Svdf { nodes: 1280, memory: 8 }));

        assert!(matches!(builtin_config("nope"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn parameter_counts_match_published_sizes() {
        let baseline = count_params(&builtin_config("Baseline_1850K").unwrap()).unwrap();
        assert!((1_600_000..=1_900_000).contains(&baseline), "baseline params {baseline}");

        for (name, nominal) in [("E2E_700K", 700_000u64), ("E2E_318K", 318_000), ("E2E_40K", 40_000)] {
            let params = count_params(&builtin_config(name).unwrap()).unwrap();
            let lo = nominal * 8 / 10;
            let hi = nominal * 12 / 10;
            assert!((lo..=hi).contains(&params), "{name}: {params} not within 20% of {nominal}");
        }
    }

    #[test]
    fn tiny_dense_param_count() {
        // Single dense 2 -> 3 with bias: 9 params.
        let config = ModelConfig {
            name: "tiny".into(),
            context: ContextConfig { left: 0, right: 0, stride: 1 },
            feature_dim: 2,
            layers: vec![LayerSpec::Softmax { classes: 3 }],
            encoder_boundary: 0,
            biases: true,
        };
        assert_eq!(count_params(&config).unwrap(), 9);
        // Without bias, MACs == params for dense layers.
        let no_bias = ModelConfig { biases: false, ..config };
        assert_eq!(count_params(&no_bias).unwrap(), 6);
        assert_eq!(count_macs(&no_bias, MacConvention::PerInference).unwrap(), 6);
    }

    #[test]
    fn mac_counts_match_published_figures() {
        let baseline = builtin_config("Baseline_1850K").unwrap();
        let macs = count_macs(&baseline, MacConvention::PerInference).unwrap();
        assert!(
        	(macs as f64 - 1_800_000.0).abs() / 1_800_000.0 < 0.2,
        	"baseline per-inference MACs {macs} not within 20% of 1.8M"
        );

        for (name, nominal) in [("E2E_700K", 350_000u64), ("E2E_318K", 159_000), ("E2E_40K", 20_000)] {
            let config = builtin_config(name).unwrap();
            let per_inf = count_macs(&config, MacConvention::PerInference).unwrap();
            let per_frame = count_macs(&config, MacConvention::Per10MsFrame).unwrap();
            let close = |v: u64| (v as f64 - nominal as f64).abs() / nominal as f64 <= 0.2;
            assert!(
                close(per_inf) || close(per_frame),
                "{name}: neither {per_inf} (per inference) nor {per_frame} (per 10ms) within 20% of {nominal}"
            );
        }
    }

    #[test]
    fn receptive_field_arithmetic() {
        let uniform = ModelConfig {
            name: "uniform".into(),
            context: ContextConfig { left: 0, right: 0, stride: 1 },
            feature_dim: 4,
            layers: vec![
                LayerSpec::Svdf { nodes: 4, memory: 4 },
                LayerSpec::Svdf { nodes: 4, memory: 4 },
                LayerSpec::Svdf { nodes: 4, memory: 4 },
                LayerSpec::Softmax { classes: 2 },
            ],
            encoder_boundary: 3,
            biases: true,
        };
        assert_eq!(receptive_field(&uniform).svdf_steps, 9);

        let e2e = builtin_config("E2E_700K").unwrap();
        let field = receptive_field(&e2e);
        assert_eq!(field.svdf_steps, 4 * 7 + 3 * 31);
        assert_eq!(field.svdf_ms, 2420);
        assert_eq!(field.left_context_frames, 1);

        let single = ModelConfig {
            layers: vec![LayerSpec::Svdf { nodes: 2, memory: 1 }, LayerSpec::Softmax { classes: 2 }],
            encoder_boundary: 1,
            ..uniform
        };
        assert_eq!(receptive_field(&single).svdf_steps, 0);
    }

    #[test]
    fn receptive_field_is_additive_over_concatenation() {
        let mut config = builtin_config("E2E_40K").unwrap();
        let base = receptive_field(&config).svdf_steps;
        config.layers.insert(0, LayerSpec::Svdf { nodes: 3, memory: 5 });
        config.encoder_boundary += 1;
        assert_eq!(receptive_field(&config).svdf_steps, base + 4);
    }

    fn arbitrary_config() -> impl Strategy<Value = ModelConfig> {
        (
            1usize..4,   // left
            0usize..3,   // right
            1usize..4,   // stride
            proptest::collection::vec((1usize..10, 1usize..6), 0..4),
            1usize..5,   // classes
            proptest::bool::ANY,
        )
            .prop_map(|(left, right, stride, svdfs, classes, biases)| {
                let mut layers: Vec<LayerSpec> = svdfs
                    .into_iter()
                    .map(|(nodes, memory)| LayerSpec::Svdf { nodes, memory })
                    .collect();
                layers.push(LayerSpec::Softmax { classes });
                let encoder_boundary = layers.len() - 1;
                ModelConfig {
                    name: "random".into(),
                    context: ContextConfig { left, right, stride },
                    feature_dim: 5,
                    layers,
                    encoder_boundary,
                    biases,
                }
            })
    }

    proptest! {
        #[test]
        fn count_params_matches_constructed_store(config in arbitrary_config()) {
            let model = Model::new(config.clone(), 1).unwrap();
            prop_assert_eq!(count_params(&config).unwrap(), model.param_count() as u64);
        }
    }

    #[test]
    fn count_params_matches_store_for_builtins() {
        for name in BUILTIN_CONFIG_NAMES {
            let config = builtin_config(name).unwrap();
            let model = Model::new(config.clone(), 0).unwrap();
            assert_eq!(count_params(&config).unwrap(), model.param_count() as u64, "{name}");
            let enc_dec = config.with_intermediate_softmax(9);
            let model = Model::new(enc_dec.clone(), 0).unwrap();
            assert_eq!(count_params(&enc_dec).unwrap(), model.param_count() as u64, "{name}+softmax");
        }
    }

    #[test]
    fn forward_shapes_and_softmax_normalization() {
        let config = builtin_config("E2E_40K").unwrap();
        let model = Model::new(config, 42).unwrap();
        let mut states = model.new_states();
        let x: Vec<f32> = (0..120).map(|i| (i as f32 * 0.37).sin()).collect();
        let y = model.forward_stream(&mut states, &x).unwrap();
        assert_eq!(y.len(), 2);
        assert!(y.iter().all(|v| v.is_finite()));
        let sum: f32 = y.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn intermediate_softmax_roundtrip() {
        let config = builtin_config("E2E_40K").unwrap();
        assert!(!config.has_intermediate_softmax());
        let enc_dec = config.with_intermediate_softmax(9);
        assert!(enc_dec.has_intermediate_softmax());
        assert_eq!(enc_dec.encoder_boundary, config.encoder_boundary + 1);
        let encoder = enc_dec.encoder_config().unwrap();
        assert_eq!(encoder.layers.len(), enc_dec.encoder_boundary);
        assert!(matches!(encoder.layers.last(), Some(LayerSpec::Softmax { classes: 9 })));
        // Idempotent.
        assert_eq!(enc_dec.with_intermediate_softmax(9), enc_dec);
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.kws");
        let config = builtin_config("E2E_40K").unwrap();
        let mut model = Model::new(config, 9).unwrap();
        model.set_encoder_frozen(true);
        let mean: Vec<f32> = (0..120).map(|i| i as f32 * 0.1).collect();
        let scale: Vec<f32> = (0..120).map(|i| 1.0 + i as f32 * 0.01).collect();
        model.set_input_norm(mean, scale).unwrap();
        model.save(&path).unwrap();

        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.checksum(), model.checksum());
        assert_eq!(loaded.frozen(), model.frozen(), "frozen flags survive the round trip");
        assert_eq!(loaded.input_norm(), model.input_norm());
        assert_eq!(loaded.config(), model.config());

        let path2 = dir.path().join("model2.kws");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.kws");
        let model = Model::new(builtin_config("E2E_40K").unwrap(), 9).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncated file.
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Format { .. })
        ));

        // Flipped parameter byte breaks the checksum.
        let mut corrupt = bytes.clone();
        let mid = bytes.len() / 2;
        corrupt[mid] ^= 0xff;
        assert!(matches!(Model::from_bytes(&corrupt), Err(Error::Format { .. })));

        // Unsupported version.
        let mut versioned = bytes.clone();
        versioned[8] = 99;
        assert!(matches!(
            Model::from_bytes(&versioned),
            Err(Error::UnsupportedVersion(99))
        ));

        // Bad magic.
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Model::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn config_validation_catches_misplaced_layers() {
        let mut config = builtin_config("E2E_40K").unwrap();
        config.layers.insert(3, LayerSpec::Conv { filters: 4, kernel: [2, 2], stride: [2, 2] });
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = builtin_config("E2E_40K").unwrap();
        config.layers.insert(2, LayerSpec::Softmax { classes: 4 });
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = builtin_config("E2E_40K").unwrap();
        config.layers.pop();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
