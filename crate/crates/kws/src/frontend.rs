//! Log-mel front-end: 30 ms Hann windows over 16 kHz PCM, 10 ms hop, 40
//! triangular mel filters, natural-log energies, plus context stacking with a
//! configurable inference stride.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 40;

/// Front-end configuration. The values below form the bit-exactness contract
/// for feature extraction; anything else is rejected rather than resampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub fft_size: usize,
    pub num_filters: usize,
    pub fmin_hz: f32,
    pub fmax_hz: f32,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            window_ms: 30,
            hop_ms: 10,
            fft_size: 512,
            num_filters: FEATURE_DIM,
            fmin_hz: 125.0,
            fmax_hz: 7500.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != 16_000 {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} not supported; the front-end is fixed at 16 kHz mono",
                self.sample_rate
            )));
        }
        if self.num_filters == 0 || self.fft_size < self.window_len() {
            return Err(Error::InvalidArgument(
                "fft_size must cover the analysis window".into(),
            ));
        }
        if !(0.0 < self.fmin_hz && self.fmin_hz < self.fmax_hz)
            || self.fmax_hz > self.sample_rate as f32 / 2.0
        {
            return Err(Error::InvalidArgument(
                "mel band edges must satisfy 0 < fmin < fmax <= Nyquist".into(),
            ));
        }
        Ok(())
    }
}

/// One 40-dimensional log-mel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    /// Natural-log mel filter-bank energies.
    pub values: Vec<f32>,
    /// Milliseconds of the frame's window start within the stream.
    pub timestamp_ms: u64,
}

/// Context stacking parameters: `left`/`right` frames around the center and
/// the stride (in frames) between successive network inferences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub left: usize,
    pub right: usize,
    pub stride: usize,
}

impl ContextConfig {
    pub fn new(left: usize, right: usize, stride: usize) -> Result<Self> {
        let ctx = ContextConfig { left, right, stride };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("context stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn frames_per_input(&self) -> usize {
        self.left + 1 + self.right
    }
}

/// A context-stacked network input: `frames_per_input` frames concatenated
/// oldest-first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput {
    pub values: Vec<f32>,
    pub center_timestamp_ms: u64,
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filter stored sparsely as (first bin, weights).
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f32>,
}

fn build_filterbank(config: &MelConfig) -> Vec<MelFilter> {
    let num_bins = config.fft_size / 2 + 1;
    let bin_hz = config.sample_rate as f32 / config.fft_size as f32;
    let mel_lo = hz_to_mel(config.fmin_hz);
    let mel_hi = hz_to_mel(config.fmax_hz);
    let num_edges = config.num_filters + 2;
    let edges_hz: Vec<f32> = (0..num_edges)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (num_edges - 1) as f32))
        .collect();

    (0..config.num_filters)
        .map(|m| {
            let (lower, center, upper) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let mut first_bin = num_bins;
            let mut weights = Vec::new();
            for k in 0..num_bins {
                let f = k as f32 * bin_hz;
                let rising = (f - lower) / (center - lower);
                let falling = (upper - f) / (upper - center);
                let w = rising.min(falling).max(0.0);
                if w > 0.0 {
                    if first_bin == num_bins {
                        first_bin = k;
                    }
                    weights.push(w);
                } else if first_bin != num_bins {
                    break;
                }
            }
            if first_bin == num_bins {
                // Filter narrower than one bin; anchor it at its center frequency.
                first_bin = ((center / bin_hz).round() as usize).min(num_bins - 1);
                weights.push(1.0);
            }
            MelFilter { first_bin, weights }
        })
        .collect()
}

fn hann_window(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

/// Converts one analysis window of PCM into a log-mel frame. Owns the FFT
/// plan, the Hann window, and the filterbank; immutable after construction.
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f32>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f32>>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let window = hann_window(config.window_len());
        let filters = build_filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(MelExtractor { config, window, filters, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Compute the 40 log-mel energies of one window of samples.
    pub fn compute(&self, pcm_window: &[f32], timestamp_ms: u64) -> Result<FeatureFrame> {
        let want = self.config.window_len();
        if pcm_window.len() != want {
            return Err(Error::InvalidArgument(format!(
                "window length {} != expected {} samples",
                pcm_window.len(),
                want
            )));
        }
        if let Some(bad) = pcm_window.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample {bad} in window"
            )));
        }

        let mut buf: Vec<Complex<f32>> = vec![Complex::default(); self.config.fft_size];
        for (i, (&s, &w)) in pcm_window.iter().zip(&self.window).enumerate() {
            buf[i].re = s * w;
        }
        self.fft.process(&mut buf);

        let num_bins = self.config.fft_size / 2 + 1;
        let power: Vec<f32> = buf[..num_bins].iter().map(|c| c.norm_sqr()).collect();

        let values = self
            .filters
            .iter()
            .map(|f| {
                let mut energy = 0.0f64;
                for (w, p) in f.weights.iter().zip(&power[f.first_bin..]) {
                    energy += f64::from(*w) * f64::from(*p);
                }
                (energy.max(f64::from(self.config.log_floor))).ln() as f32
            })
            .collect();

        Ok(FeatureFrame { values, timestamp_ms })
    }
}

/// Convert a full PCM window into a frame with a default extractor.
///
/// Prefer [`MelExtractor`] (plan reuse) when converting many windows.
pub fn compute_log_mel(pcm_window: &[f32], config: &MelConfig) -> Result<FeatureFrame> {
    MelExtractor::new(config.clone())?.compute(pcm_window, 0)
}

/// Incremental framer: feed PCM in chunks of any size, get back the frames
/// whose windows are complete. Chunk boundaries never change the output.
pub struct Framer {
    extractor: MelExtractor,
    buf: Vec<f32>,
    consumed: usize,
    frame_index: u64,
}

impl Framer {
    pub fn new(config: MelConfig) -> Result<Self> {
        Ok(Framer {
            extractor: MelExtractor::new(config)?,
            buf: Vec::new(),
            consumed: 0,
            frame_index: 0,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.extractor.config
    }

    /// Append samples and drain every newly completed frame.
    pub fn push(&mut self, samples: &[f32]) -> Result<Vec<FeatureFrame>> {
        self.buf.extend_from_slice(samples);
        let window = self.extractor.config.window_len();
        let hop = self.extractor.config.hop_len();
        let mut out = Vec::new();
        while self.buf.len() - self.consumed >= window {
            let ts = self.frame_index * u64::from(self.extractor.config.hop_ms);
            let frame = self
                .extractor
                .compute(&self.buf[self.consumed..self.consumed + window], ts)?;
            out.push(frame);
            self.consumed += hop;
            self.frame_index += 1;
        }
        if self.consumed > 4 * window {
            self.buf.drain(..self.consumed);
            self.consumed = 0;
        }
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.buf.clear();
        self.consumed = 0;
        self.frame_index = 0;
    }
}

/// One-shot framing of a complete PCM buffer. Streams shorter than one
/// window yield an empty sequence.
pub fn stream_frames(pcm: &[f32], config: &MelConfig) -> Result<Vec<FeatureFrame>> {
    let mut framer = Framer::new(config.clone())?;
    framer.push(pcm)
}

/// The frame indices at which network inferences happen: `left`, `left+stride`,
/// `left+2*stride`, ... for as long as the full context window fits.
pub fn inference_centers(
    frame_count: usize,
    ctx: &ContextConfig,
) -> impl Iterator<Item = usize> + '_ {
    let span = ctx.left + ctx.right;
    let num = if frame_count > span {
        (frame_count - span).div_ceil(ctx.stride)
    } else {
        0
    };
    (0..num).map(move |k| ctx.left + k * ctx.stride)
}

/// Stack context windows around each inference center.
pub fn window_context(frames: &[FeatureFrame], ctx: &ContextConfig) -> Result<Vec<StackedInput>> {
    ctx.validate()?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let dim = frames[0].values.len();
    let n = frames.len();
    let out = inference_centers(n, ctx)
        .map(|t| {
            let mut values = Vec::with_capacity(dim * ctx.frames_per_input());
            for i in t as isize - ctx.left as isize..=(t + ctx.right) as isize {
                // Replicate edge frames if an index ever falls outside the
                // sequence; unreachable under the center schedule above.
                let idx = i.clamp(0, n as isize - 1) as usize;
                values.extend_from_slice(&frames[idx].values);
            }
            StackedInput {
                values,
                center_timestamp_ms: frames[t].timestamp_ms,
            }
        })
        .collect();
    Ok(out)
}

/// Write frames as raw little-endian f32 records, 40 values per record.
pub fn write_frames_f32le<W: Write>(frames: &[FeatureFrame], mut w: W) -> std::io::Result<()> {
    for frame in frames {
        for v in &frame.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Write frames as CSV: `timestamp_ms,e0,...,e39`.
pub fn write_frames_csv<W: Write>(frames: &[FeatureFrame], mut w: W) -> std::io::Result<()> {
    for frame in frames {
        write!(w, "{}", frame.timestamp_ms)?;
        for v in &frame.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
