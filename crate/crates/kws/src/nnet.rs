//! Neural-network core: dense layers, linear bottlenecks, softmax, a valid
//! (unpadded) strided 2-D convolution, and the stateful rank-1 SVDF layer with
//! a streaming forward pass and a full sequence-unrolled backward pass.
//!
//! All parameters and activations are f32; reductions accumulate in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

/// Rank-1 SVDF layer: per-node feature filter (beta, `nodes x input_dim`) and
/// time filter (alpha, `nodes x memory`) over the last `memory` feature-filter
/// outputs.
#[derive(Debug, Clone)]
pub struct SvdfLayer {
    pub nodes: usize,
    pub memory: usize,
    pub input_dim: usize,
    /// `nodes x input_dim`, row-major.
    pub beta: Vec<f32>,
    /// `nodes x memory`, row-major; index 0 weights the oldest entry.
    pub alpha: Vec<f32>,
    /// Per-node bias, empty when biases are disabled.
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl SvdfLayer {
    pub fn zeros(nodes: usize, memory: usize, input_dim: usize, activation: Activation, bias: bool) -> Self {
        SvdfLayer {
            nodes,
            memory,
            input_dim,
            beta: vec![0.0; nodes * input_dim],
            alpha: vec![0.0; nodes * memory],
            bias: if bias { vec![0.0; nodes] } else { Vec::new() },
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.memory == 0 || self.input_dim == 0 {
            return Err(Error::Config("svdf dimensions must be >= 1".into()));
        }
        if self.beta.len() != self.nodes * self.input_dim
            || self.alpha.len() != self.nodes * self.memory
            || !(self.bias.is_empty() || self.bias.len() == self.nodes)
        {
            return Err(Error::Config("svdf weight shapes do not match dimensions".into()));
        }
        if self.activation == Activation::Softmax {
            return Err(Error::Config("svdf layers support identity or relu only".into()));
        }
        if !all_finite(&self.beta) || !all_finite(&self.alpha) || !all_finite(&self.bias) {
            return Err(Error::Config("svdf weights must be finite".into()));
        }
        Ok(())
    }

    pub fn new_state(&self) -> SvdfState {
        SvdfState {
            buffer: vec![0.0; self.nodes * self.memory],
            cursor: 0,
            fill_count: 0,
        }
    }

    /// One streaming inference: push `beta . x` per node into the ring buffer
    /// (evicting the oldest entry), then apply the time filter.
    pub fn forward_stream(&self, state: &mut SvdfState, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "svdf input dim {} != {}",
                x.len(),
                self.input_dim
            )));
        }
        if state.buffer.len() != self.nodes * self.memory {
            return Err(Error::InvalidArgument("state does not belong to this layer".into()));
        }
        let t = self.memory;
        for m in 0..self.nodes {
            let feat = dot(&self.beta[m * self.input_dim..(m + 1) * self.input_dim], x);
            state.buffer[m * t + state.cursor] = feat as f32;
        }
        state.cursor = (state.cursor + 1) % t;
        state.fill_count += 1;

        let out = (0..self.nodes)
            .map(|m| {
                let row = &state.buffer[m * t..(m + 1) * t];
                let alpha = &self.alpha[m * t..(m + 1) * t];
                let mut acc = 0.0f64;
                // After the cursor advance, the oldest entry sits at `cursor`.
                for (i, a) in alpha.iter().enumerate() {
                    acc += f64::from(*a) * f64::from(row[(state.cursor + i) % t]);
                }
                if let Some(b) = self.bias.get(m) {
                    acc += f64::from(*b);
                }
                apply_scalar(self.activation, acc as f32)
            })
            .collect();
        Ok(out)
    }

    /// Windowed evaluation over a whole input sequence; positions before the
    /// sequence start contribute zero, matching the zero-initialized memory.
    /// This is the reference the streaming path is checked against.
    pub fn forward_batch(&self, inputs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        for x in inputs {
            if x.len() != self.input_dim {
                return Err(Error::InvalidArgument(format!(
                    "svdf input dim {} != {}",
                    x.len(),
                    self.input_dim
                )));
            }
        }
        let feats = self.feature_outputs(inputs);
        Ok((0..inputs.len())
            .map(|t| self.outputs_from_features(&feats, t))
            .collect())
    }

    /// `beta . x` for every node and step.
    fn feature_outputs(&self, inputs: &[Vec<f32>]) -> Vec<Vec<f32>> {
        inputs
            .iter()
            .map(|x| {
                (0..self.nodes)
                    .map(|m| dot(&self.beta[m * self.input_dim..(m + 1) * self.input_dim], x) as f32)
                    .collect()
            })
            .collect()
    }

    fn outputs_from_features(&self, feats: &[Vec<f32>], t: usize) -> Vec<f32> {
        (0..self.nodes)
            .map(|m| {
                let alpha = &self.alpha[m * self.memory..(m + 1) * self.memory];
                let mut acc = 0.0f64;
                for (i, a) in alpha.iter().enumerate() {
                    let tau = t as isize - (self.memory as isize - 1) + i as isize;
                    if tau >= 0 {
                        acc += f64::from(*a) * f64::from(feats[tau as usize][m]);
                    }
                }
                if let Some(b) = self.bias.get(m) {
                    acc += f64::from(*b);
                }
                apply_scalar(self.activation, acc as f32)
            })
            .collect()
    }
}

/// Ring-buffer memory of one SVDF layer's past feature-filter outputs.
#[derive(Debug, Clone)]
pub struct SvdfState {
    buffer: Vec<f32>,
    cursor: usize,
    /// Inferences since the last reset.
    pub fill_count: u64,
}

impl SvdfState {
    pub fn reset(&mut self) {
        self.buffer.fill(0.0);
        self.cursor = 0;
        self.fill_count = 0;
    }

    /// Buffer contents for one node, oldest first.
    pub fn node_window(&self, node: usize, memory: usize) -> Vec<f32> {
        (0..memory)
            .map(|i| self.buffer[node * memory + (self.cursor + i) % memory])
            .collect()
    }
}

/// Fully-connected layer; covers linear bottlenecks (identity activation) and
/// softmax output heads.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub output_dim: usize,
    pub input_dim: usize,
    /// `output_dim x input_dim`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(output_dim: usize, input_dim: usize, activation: Activation, bias: bool) -> Self {
        DenseLayer {
            output_dim,
            input_dim,
            weights: vec![0.0; output_dim * input_dim],
            bias: if bias { vec![0.0; output_dim] } else { Vec::new() },
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("dense dimensions must be >= 1".into()));
        }
        if self.weights.len() != self.output_dim * self.input_dim
            || !(self.bias.is_empty() || self.bias.len() == self.output_dim)
        {
            return Err(Error::Config("dense weight shapes do not match dimensions".into()));
        }
        if !all_finite(&self.weights) || !all_finite(&self.bias) {
            return Err(Error::Config("dense weights must be finite".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "dense input dim {} != {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut z: Vec<f32> = (0..self.output_dim)
            .map(|o| {
                let mut acc = dot(&self.weights[o * self.input_dim..(o + 1) * self.input_dim], x);
                if let Some(b) = self.bias.get(o) {
                    acc += f64::from(*b);
                }
                acc as f32
            })
            .collect();
        match self.activation {
            Activation::Identity => {}
            Activation::Relu => {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            Activation::Softmax => softmax_in_place(&mut z),
        }
        Ok(z)
    }
}

/// Valid (unpadded) 2-D convolution over a `time x freq` grid with a stride in
/// both axes; trailing partial patches are dropped.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// The `(time, freq)` grid shape each input vector is interpreted as.
    pub input_grid: (usize, usize),
    /// `filters x (kh * kw)`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Conv1dLayer {
    pub fn zeros(
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        input_grid: (usize, usize),
        activation: Activation,
        bias: bool,
    ) -> Self {
        Conv1dLayer {
            filters,
            kernel,
            stride,
            input_grid,
            weights: vec![0.0; filters * kernel.0 * kernel.1],
            bias: if bias { vec![0.0; filters] } else { Vec::new() },
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("conv dimensions must be >= 1".into()));
        }
        if self.input_grid.0 < self.kernel.0 || self.input_grid.1 < self.kernel.1 {
            return Err(Error::InvalidArgument(format!(
                "conv input grid {}x{} smaller than kernel {}x{}",
                self.input_grid.0, self.input_grid.1, self.kernel.0, self.kernel.1
            )));
        }
        if self.weights.len() != self.filters * self.kernel.0 * self.kernel.1
            || !(self.bias.is_empty() || self.bias.len() == self.filters)
        {
            return Err(Error::Config("conv weight shapes do not match dimensions".into()));
        }
        if !all_finite(&self.weights) || !all_finite(&self.bias) {
            return Err(Error::Config("conv weights must be finite".into()));
        }
        Ok(())
    }

    pub fn output_grid(&self) -> (usize, usize) {
        (
            (self.input_grid.0 - self.kernel.0) / self.stride.0 + 1,
            (self.input_grid.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    pub fn output_dim(&self) -> usize {
        let (oh, ow) = self.output_grid();
        oh * ow * self.filters
    }

    /// Output layout: `[(ot * out_w + of) * filters + k]`.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let (ih, iw) = self.input_grid;
        if x.len() != ih * iw {
            return Err(Error::InvalidArgument(format!(
                "conv input len {} != grid {}x{}",
                x.len(),
                ih,
                iw
            )));
        }
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (oh, ow) = self.output_grid();
        let mut out = Vec::with_capacity(oh * ow * self.filters);
        for ot in 0..oh {
            for of in 0..ow {
                for k in 0..self.filters {
                    let w = &self.weights[k * kh * kw..(k + 1) * kh * kw];
                    let mut acc = 0.0f64;
                    for dt in 0..kh {
                        let row = (ot * sh + dt) * iw + of * sw;
                        for df in 0..kw {
                            acc += f64::from(w[dt * kw + df]) * f64::from(x[row + df]);
                        }
                    }
                    if let Some(b) = self.bias.get(k) {
                        acc += f64::from(*b);
                    }
                    out.push(apply_scalar(self.activation, acc as f32));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Svdf(SvdfLayer),
    Dense(DenseLayer),
    Conv(Conv1dLayer),
}

/// Which part of a layer a parameter block holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    FeatureFilter,
    TimeFilter,
    Weights,
    Bias,
}

impl Layer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Layer::Svdf(l) => l.validate(),
            Layer::Dense(l) => l.validate(),
            Layer::Conv(l) => l.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Svdf(l) => l.input_dim,
            Layer::Dense(l) => l.input_dim,
            Layer::Conv(l) => l.input_grid.0 * l.input_grid.1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Svdf(l) => l.nodes,
            Layer::Dense(l) => l.output_dim,
            Layer::Conv(l) => l.output_dim(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Svdf(l) => l.activation,
            Layer::Dense(l) => l.activation,
            Layer::Conv(l) => l.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Parameter blocks in a fixed role order; the basis for the flat store,
    /// gradients, serialization, and checksums.
    pub fn blocks(&self) -> Vec<(ParamRole, &[f32])> {
        match self {
            Layer::Svdf(l) => {
                let mut v = vec![
                    (ParamRole::FeatureFilter, l.beta.as_slice()),
                    (ParamRole::TimeFilter, l.alpha.as_slice()),
                ];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_slice()));
                }
                v
            }
            Layer::Dense(l) => {
                let mut v = vec![(ParamRole::Weights, l.weights.as_slice())];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_slice()));
                }
                v
            }
            Layer::Conv(l) => {
                let mut v = vec![(ParamRole::Weights, l.weights.as_slice())];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_slice()));
                }
                v
            }
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(ParamRole, &mut [f32])> {
        match self {
            Layer::Svdf(l) => {
                let mut v = vec![
                    (ParamRole::FeatureFilter, l.beta.as_mut_slice()),
                    (ParamRole::TimeFilter, l.alpha.as_mut_slice()),
                ];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_mut_slice()));
                }
                v
            }
            Layer::Dense(l) => {
                let mut v = vec![(ParamRole::Weights, l.weights.as_mut_slice())];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_mut_slice()));
                }
                v
            }
            Layer::Conv(l) => {
                let mut v = vec![(ParamRole::Weights, l.weights.as_mut_slice())];
                if !l.bias.is_empty() {
                    v.push((ParamRole::Bias, l.bias.as_mut_slice()));
                }
                v
            }
        }
    }
}

/// Per-layer SVDF states for streaming inference (`None` for stateless layers).
pub fn new_states(layers: &[Layer]) -> Vec<Option<SvdfState>> {
    layers
        .iter()
        .map(|l| match l {
            Layer::Svdf(s) => Some(s.new_state()),
            _ => None,
        })
        .collect()
}

pub fn reset_states(states: &mut [Option<SvdfState>]) {
    for s in states.iter_mut().flatten() {
        s.reset();
    }
}

/// One streaming inference through the whole stack, mutating SVDF states.
pub fn forward_stream(layers: &[Layer], states: &mut [Option<SvdfState>], x: &[f32]) -> Result<Vec<f32>> {
    if states.len() != layers.len() {
        return Err(Error::InvalidArgument("state set does not match layer stack".into()));
    }
    let mut h = x.to_vec();
    for (layer, state) in layers.iter().zip(states.iter_mut()) {
        h = match (layer, state) {
            (Layer::Svdf(l), Some(s)) => l.forward_stream(s, &h)?,
            (Layer::Dense(l), _) => l.forward(&h)?,
            (Layer::Conv(l), _) => l.forward(&h)?,
            (Layer::Svdf(_), None) => {
                return Err(Error::InvalidArgument("missing state for svdf layer".into()))
            }
        };
    }
    Ok(h)
}

/// Everything the backward pass needs, cached during a sequence forward.
pub struct Trace {
    /// `activations[0]` is the input sequence; `activations[l + 1]` the output
    /// sequence of layer `l`.
    pub activations: Vec<Vec<Vec<f32>>>,
    /// Per SVDF layer, the feature-filter outputs `s[t][m]`.
    svdf_feature_seqs: Vec<Option<Vec<Vec<f32>>>>,
}

impl Trace {
    pub fn outputs(&self) -> &[Vec<f32>] {
        self.activations.last().expect("trace has at least the inputs")
    }
}

/// Sequence forward pass from zero-initialized state, caching activations.
pub fn forward_seq(layers: &[Layer], inputs: &[Vec<f32>]) -> Result<Trace> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(inputs.to_vec());
    let mut svdf_feature_seqs = Vec::with_capacity(layers.len());
    for layer in layers {
        let current = activations.last().unwrap();
        let (out, feats) = match layer {
            Layer::Svdf(l) => {
                for x in current {
                    if x.len() != l.input_dim {
                        return Err(Error::InvalidArgument(format!(
                            "svdf input dim {} != {}",
                            x.len(),
                            l.input_dim
                        )));
                    }
                }
                let feats = l.feature_outputs(current);
                let out = (0..current.len())
                    .map(|t| l.outputs_from_features(&feats, t))
                    .collect();
                (out, Some(feats))
            }
            Layer::Dense(l) => (
                current.iter().map(|x| l.forward(x)).collect::<Result<Vec<_>>>()?,
                None,
            ),
            Layer::Conv(l) => (
                current.iter().map(|x| l.forward(x)).collect::<Result<Vec<_>>>()?,
                None,
            ),
        };
        activations.push(out);
        svdf_feature_seqs.push(feats);
    }
    Ok(Trace { activations, svdf_feature_seqs })
}

/// Gradient store mirroring the block structure of a layer stack.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `[layer][block][element]`, block order matching `Layer::blocks()`.
    pub layers: Vec<Vec<Vec<f32>>>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Layer]) -> Self {
        Gradients {
            layers: layers
                .iter()
                .map(|l| l.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += *v;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for layer in &mut self.layers {
            for block in layer {
                for v in block {
                    *v *= s;
                }
            }
        }
    }

    pub fn scale_layer(&mut self, layer: usize, s: f32) {
        for block in &mut self.layers[layer] {
            for v in block {
                *v *= s;
            }
        }
    }

    pub fn zero_layer(&mut self, layer: usize) {
        for block in &mut self.layers[layer] {
            block.fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for layer in &self.layers {
            for block in layer {
                for v in block {
                    acc += f64::from(*v) * f64::from(*v);
                }
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.iter().all(|b| b.iter().all(|v| v.is_finite())))
    }
}

/// Cross-entropy backward through the whole unrolled sequence.
///
/// Returns gradients and loss **summed** over frames (callers normalize).
/// Layers below `start_layer` receive neither gradients nor deltas; pass 0 to
/// train everything.
pub fn backward_seq(
    layers: &[Layer],
    trace: &Trace,
    labels: &[usize],
    start_layer: usize,
) -> Result<(Gradients, f64)> {
    let steps = trace.activations[0].len();
    if labels.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "label count {} != sequence length {}",
            labels.len(),
            steps
        )));
    }
    if trace.activations.len() != layers.len() + 1 {
        return Err(Error::Precondition("forward trace does not match layer stack".into()));
    }
    let last = match layers.last() {
        Some(Layer::Dense(l)) if l.activation == Activation::Softmax => l,
        _ => {
            return Err(Error::Config(
                "backward requires a final dense softmax layer".into(),
            ))
        }
    };

    let outputs = trace.outputs();
    let mut loss = 0.0f64;
    for (y, &c) in outputs.iter().zip(labels) {
        if c >= last.output_dim {
            return Err(Error::InvalidArgument(format!(
                "label {c} out of range for {} classes",
                last.output_dim
            )));
        }
        loss -= f64::from(y[c]).max(1e-12).ln();
    }

    let mut grads = Gradients::zeros_like(layers);

    // Gradient of the summed CE at the final softmax input: y - onehot(c).
    let mut delta: Vec<Vec<f64>> = outputs
        .iter()
        .zip(labels)
        .map(|(y, &c)| {
            y.iter()
                .enumerate()
                .map(|(i, &v)| f64::from(v) - if i == c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    for li in (start_layer..layers.len()).rev() {
        let inputs = &trace.activations[li];
        let outputs = &trace.activations[li + 1];
        let is_last = li == layers.len() - 1;
        // `delta` holds dLoss/dPreactivation for the last layer (already
        // composed with the softmax+CE shortcut) and dLoss/dOutput otherwise.
        if !is_last {
            activation_backward(layers[li].activation(), outputs, &mut delta);
        }
        let want_input_delta = li > start_layer;
        let input_delta = match &layers[li] {
            Layer::Dense(l) => {
                dense_backward(l, inputs, &delta, &mut grads.layers[li], want_input_delta)
            }
            Layer::Conv(l) => {
                conv_backward(l, inputs, &delta, &mut grads.layers[li], want_input_delta)
            }
            Layer::Svdf(l) => {
                let feats = trace.svdf_feature_seqs[li]
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("missing svdf feature cache".into()))?;
                svdf_backward(l, inputs, feats, &delta, &mut grads.layers[li], want_input_delta)
            }
        };
        if want_input_delta {
            delta = input_delta;
        }
    }

    Ok((grads, loss))
}

/// Convert dLoss/dOutput into dLoss/dPreactivation in place.
fn activation_backward(activation: Activation, outputs: &[Vec<f32>], delta: &mut [Vec<f64>]) {
    match activation {
        Activation::Identity => {}
        Activation::Relu => {
            for (d, y) in delta.iter_mut().zip(outputs) {
                for (dv, &yv) in d.iter_mut().zip(y) {
                    if yv <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
        }
        Activation::Softmax => {
            // Full Jacobian: dz_i = y_i * (d_i - sum_j d_j * y_j).
            for (d, y) in delta.iter_mut().zip(outputs) {
                let dot: f64 = d.iter().zip(y).map(|(dv, &yv)| dv * f64::from(yv)).sum();
                for (dv, &yv) in d.iter_mut().zip(y) {
                    *dv = f64::from(yv) * (*dv - dot);
                }
            }
        }
    }
}

fn dense_backward(
    layer: &DenseLayer,
    inputs: &[Vec<f32>],
    delta: &[Vec<f64>],
    grads: &mut [Vec<f32>],
    want_input_delta: bool,
) -> Vec<Vec<f64>> {
    let mut gw = vec![0.0f64; layer.weights.len()];
    let mut gb = vec![0.0f64; layer.bias.len()];
    let mut input_delta = if want_input_delta {
        vec![vec![0.0f64; layer.input_dim]; inputs.len()]
    } else {
        Vec::new()
    };
    for (t, (x, d)) in inputs.iter().zip(delta).enumerate() {
        for o in 0..layer.output_dim {
            let dz = d[o];
            if dz == 0.0 {
                continue;
            }
            let row = o * layer.input_dim;
            for (i, &xv) in x.iter().enumerate() {
                gw[row + i] += dz * f64::from(xv);
            }
            if !gb.is_empty() {
                gb[o] += dz;
            }
            if want_input_delta {
                let dx = &mut input_delta[t];
                for (i, w) in layer.weights[row..row + layer.input_dim].iter().enumerate() {
                    dx[i] += dz * f64::from(*w);
                }
            }
        }
    }
    store_block(&mut grads[0], &gw);
    if !gb.is_empty() {
        store_block(&mut grads[1], &gb);
    }
    input_delta
}

fn conv_backward(
    layer: &Conv1dLayer,
    inputs: &[Vec<f32>],
    delta: &[Vec<f64>],
    grads: &mut [Vec<f32>],
    want_input_delta: bool,
) -> Vec<Vec<f64>> {
    let (ih, iw) = layer.input_grid;
    let (kh, kw) = layer.kernel;
    let (sh, sw) = layer.stride;
    let (oh, ow) = layer.output_grid();
    let mut gw = vec![0.0f64; layer.weights.len()];
    let mut gb = vec![0.0f64; layer.bias.len()];
    let mut input_delta = if want_input_delta {
        vec![vec![0.0f64; ih * iw]; inputs.len()]
    } else {
        Vec::new()
    };
    for (t, (x, d)) in inputs.iter().zip(delta).enumerate() {
        for ot in 0..oh {
            for of in 0..ow {
                for k in 0..layer.filters {
                    let dz = d[(ot * ow + of) * layer.filters + k];
                    if dz == 0.0 {
                        continue;
                    }
                    let wrow = k * kh * kw;
                    for dt in 0..kh {
                        let xrow = (ot * sh + dt) * iw + of * sw;
                        for df in 0..kw {
                            gw[wrow + dt * kw + df] += dz * f64::from(x[xrow + df]);
                            if want_input_delta {
                                input_delta[t][xrow + df] +=
                                    dz * f64::from(layer.weights[wrow + dt * kw + df]);
                            }
                        }
                    }
                    if !gb.is_empty() {
                        gb[k] += dz;
                    }
                }
            }
        }
    }
    store_block(&mut grads[0], &gw);
    if !gb.is_empty() {
        store_block(&mut grads[1], &gb);
    }
    input_delta
}

/// Backward through the SVDF's time and feature filters across the unrolled
/// sequence: deltas at step `t` reach feature outputs (and hence inputs) as
/// far back as `t - (memory - 1)`.
fn svdf_backward(
    layer: &SvdfLayer,
    inputs: &[Vec<f32>],
    feats: &[Vec<f32>],
    delta: &[Vec<f64>],
    grads: &mut [Vec<f32>],
    want_input_delta: bool,
) -> Vec<Vec<f64>> {
    let steps = inputs.len();
    let t_mem = layer.memory;
    let mut g_beta = vec![0.0f64; layer.beta.len()];
    let mut g_alpha = vec![0.0f64; layer.alpha.len()];
    let mut g_bias = vec![0.0f64; layer.bias.len()];
    // dLoss/dFeatureOutput per step and node.
    let mut d_feat = vec![vec![0.0f64; layer.nodes]; steps];

    for (t, d) in delta.iter().enumerate() {
        for m in 0..layer.nodes {
            let dz = d[m];
            if dz == 0.0 {
                continue;
            }
            let arow = m * t_mem;
            for i in 0..t_mem {
                let tau = t as isize - (t_mem as isize - 1) + i as isize;
                if tau >= 0 {
                    let tau = tau as usize;
                    g_alpha[arow + i] += dz * f64::from(feats[tau][m]);
                    d_feat[tau][m] += dz * f64::from(layer.alpha[arow + i]);
                }
            }
            if !g_bias.is_empty() {
                g_bias[m] += dz;
            }
        }
    }

    let mut input_delta = if want_input_delta {
        vec![vec![0.0f64; layer.input_dim]; steps]
    } else {
        Vec::new()
    };
    for (tau, df) in d_feat.iter().enumerate() {
        for m in 0..layer.nodes {
            let ds = df[m];
            if ds == 0.0 {
                continue;
            }
            let brow = m * layer.input_dim;
            let x = &inputs[tau];
            for (j, &xv) in x.iter().enumerate() {
                g_beta[brow + j] += ds * f64::from(xv);
            }
            if want_input_delta {
                let dx = &mut input_delta[tau];
                for (j, b) in layer.beta[brow..brow + layer.input_dim].iter().enumerate() {
                    dx[j] += ds * f64::from(*b);
                }
            }
        }
    }

    store_block(&mut grads[0], &g_beta);
    store_block(&mut grads[1], &g_alpha);
    if !g_bias.is_empty() {
        store_block(&mut grads[2], &g_bias);
    }
    input_delta
}

fn store_block(dst: &mut [f32], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s as f32;
    }
}

fn apply_scalar(activation: Activation, v: f32) -> f32 {
    match activation {
        Activation::Identity => v,
        Activation::Relu => v.max(0.0),
        Activation::Softmax => unreachable!("softmax is a vector activation"),
    }
}

pub(crate) fn softmax_in_place(z: &mut [f32]) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    for v in z.iter_mut() {
        *v = (f64::from(*v) / sum) as f32;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Slow all-f64 re-evaluation of a layer stack, independent of the f32
/// production path. This is the oracle behind the finite-difference gradient
/// checks: differencing the f32 forward would drown small gradients in
/// rounding noise.
pub mod reference {
    use super::{Activation, Layer};

    fn apply(activation: Activation, z: &mut [f64]) {
        match activation {
            Activation::Identity => {}
            Activation::Relu => {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::Softmax => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in z.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }

    /// Sequence forward pass in f64, zero-initialized SVDF history.
    pub fn forward_seq(layers: &[Layer], inputs: &[Vec<f32>]) -> Vec<Vec<f64>> {
        let mut h: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| x.iter().map(|&v| f64::from(v)).collect())
            .collect();
        for layer in layers {
            h = match layer {
                Layer::Svdf(l) => {
                    let feats: Vec<Vec<f64>> = h
                        .iter()
                        .map(|x| {
                            (0..l.nodes)
                                .map(|m| {
                                    l.beta[m * l.input_dim..(m + 1) * l.input_dim]
                                        .iter()
                                        .zip(x)
                                        .map(|(&b, &v)| f64::from(b) * v)
                                        .sum()
                                })
                                .collect()
                        })
                        .collect();
                    (0..h.len())
                        .map(|t| {
                            let mut z: Vec<f64> = (0..l.nodes)
                                .map(|m| {
                                    let mut acc = 0.0;
                                    for i in 0..l.memory {
                                        let tau =
                                            t as isize - (l.memory as isize - 1) + i as isize;
                                        if tau >= 0 {
                                            acc += f64::from(l.alpha[m * l.memory + i])
                                                * feats[tau as usize][m];
                                        }
                                    }
                                    if let Some(&b) = l.bias.get(m) {
                                        acc += f64::from(b);
                                    }
                                    acc
                                })
                                .collect();
                            apply(l.activation, &mut z);
                            z
                        })
                        .collect()
                }
                Layer::Dense(l) => h
                    .iter()
                    .map(|x| {
                        let mut z: Vec<f64> = (0..l.output_dim)
                            .map(|o| {
                                let mut acc: f64 = l.weights
                                    [o * l.input_dim..(o + 1) * l.input_dim]
                                    .iter()
                                    .zip(x)
                                    .map(|(&w, &v)| f64::from(w) * v)
                                    .sum();
                                if let Some(&b) = l.bias.get(o) {
                                    acc += f64::from(b);
                                }
                                acc
                            })
                            .collect();
                        apply(l.activation, &mut z);
                        z
                    })
                    .collect(),
                Layer::Conv(l) => h
                    .iter()
                    .map(|x| {
                        let (ih, iw) = l.input_grid;
                        debug_assert_eq!(x.len(), ih * iw);
                        let (kh, kw) = l.kernel;
                        let (sh, sw) = l.stride;
                        let (oh, ow) = l.output_grid();
                        let mut z = Vec::with_capacity(oh * ow * l.filters);
                        for ot in 0..oh {
                            for of in 0..ow {
                                for k in 0..l.filters {
                                    let mut acc = 0.0f64;
                                    for dt in 0..kh {
                                        let row = (ot * sh + dt) * iw + of * sw;
                                        for df in 0..kw {
                                            acc += f64::from(l.weights[k * kh * kw + dt * kw + df])
                                                * x[row + df];
                                        }
                                    }
                                    if let Some(&b) = l.bias.get(k) {
                                        acc += f64::from(b);
                                    }
                                    z.push(acc);
                                }
                            }
                        }
                        apply(l.activation, &mut z);
                        z
                    })
                    .collect(),
            };
        }
        h
    }

    /// Summed cross-entropy of the reference forward, matching the
    /// production loss definition (probability floored at 1e-12).
    pub fn ce_loss_sum(layers: &[Layer], inputs: &[Vec<f32>], labels: &[usize]) -> f64 {
        forward_seq(layers, inputs)
            .iter()
            .zip(labels)
            .map(|(y, &c)| -y[c].max(1e-12).ln())
            .sum()
    }
}
