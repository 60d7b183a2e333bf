//! Seeded synthetic dataset generator: keyword utterances are component-wise
//! tone chords (one stable spectral pattern per component, 80-200 ms each)
//! embedded in noise, with exact alignments; negatives are noise and
//! non-keyword component orderings. Everything is deterministic per seed.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{save_manifest, AlignedUtterance, KeywordSpec, Segment, SILENCE_LABEL};
use crate::wav::write_wav;

pub const SAMPLE_RATE: u32 = 16_000;
const HOP_MS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Gaussian background noise sigma.
    pub noise_level: f32,
    pub tone_amplitude: f32,
    /// Component duration range in ms (snapped to 10 ms hops).
    pub component_ms: (u64, u64),
    /// Leading/trailing pad range in ms.
    pub pad_ms: (u64, u64),
    /// Negative utterance duration range in ms.
    pub negative_ms: (u64, u64),
    /// Fraction of negatives that carry distractor component bursts instead
    /// of bare noise.
    pub distractor_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            noise_level: 0.05,
            tone_amplitude: 0.2,
            component_ms: (80, 200),
            pad_ms: (200, 600),
            negative_ms: (2000, 6000),
            distractor_fraction: 0.7,
        }
    }
}

/// Each subword class gets a fixed two-tone chord; silence renders as bare
/// background. The table spans the mel band with well-separated fundamentals.
pub fn component_tones(class_id: usize) -> Vec<f32> {
    if class_id == 0 {
        return Vec::new();
    }
    let fundamental = 220.0 * 1.42f32.powi(class_id as i32 - 1);
    vec![fundamental, fundamental * 2.31]
}

#[derive(Debug, Clone)]
struct PlannedSegment {
    label: String,
    start_ms: u64,
    end_ms: u64,
}

#[derive(Debug, Clone)]
pub struct UtterancePlan {
    pub total_ms: u64,
    /// End of the final keyword component, for hit-window bookkeeping.
    pub keyword_end_ms: Option<u64>,
    segments: Vec<PlannedSegment>,
}

impl UtterancePlan {
    pub fn duration_ms(&self) -> u64 {
        self.total_ms
    }
}

fn snap(ms: u64) -> u64 {
    (ms / HOP_MS) * HOP_MS
}

fn rng_for(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 over (seed, kind, index) so every utterance is independent.
    let mut x = seed ^ kind.wrapping_mul(0x9e3779b97f4a7c15) ^ (index as u64).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

fn draw_ms(rng: &mut ChaCha8Rng, range: (u64, u64)) -> u64 {
    snap(rng.random_range(range.0..=range.1)).max(HOP_MS)
}

fn draw_positive_plan(rng: &mut ChaCha8Rng, spec: &KeywordSpec, cfg: &SynthConfig) -> UtterancePlan {
    let lead = draw_ms(rng, cfg.pad_ms);
    let mut segments = Vec::with_capacity(spec.components.len());
    let mut cursor = lead;
    for label in &spec.components {
        let dur = draw_ms(rng, cfg.component_ms);
        segments.push(PlannedSegment {
            label: label.clone(),
            start_ms: cursor,
            end_ms: cursor + dur,
        });
        cursor += dur;
    }
    let keyword_end_ms = Some(cursor);
    let trail = draw_ms(rng, cfg.pad_ms);
    UtterancePlan { total_ms: cursor + trail, keyword_end_ms, segments }
}

fn draw_negative_plan(rng: &mut ChaCha8Rng, spec: &KeywordSpec, cfg: &SynthConfig) -> UtterancePlan {
    let target = draw_ms(rng, cfg.negative_ms);
    // Silence components render as bare background, so a negative whose
    // audible component sequence matches the keyword's audible sequence is an
    // acoustic keyword replica regardless of where silences or burst gaps
    // fall. Redraw until no such replica exists anywhere in the utterance.
    let audible_keyword: Vec<&String> = spec
        .components
        .iter()
        .filter(|c| c.as_str() != SILENCE_LABEL)
        .collect();
    loop {
        let mut segments = Vec::new();
        if rng.random_bool(cfg.distractor_fraction) {
            let mut cursor = draw_ms(rng, cfg.pad_ms);
            while cursor + 1000 < target {
                let burst_len = rng.random_range(3..=9usize);
                for _ in 0..burst_len {
                    if cursor + 1000 >= target {
                        break;
                    }
                    let label =
                        spec.components[rng.random_range(0..spec.components.len())].clone();
                    let dur = draw_ms(rng, cfg.component_ms);
                    segments.push(PlannedSegment { label, start_ms: cursor, end_ms: cursor + dur });
                    cursor += dur;
                }
                cursor += draw_ms(rng, (300, 1200));
            }
        }
        let audible: Vec<&String> = segments
            .iter()
            .map(|s| &s.label)
            .filter(|l| l.as_str() != SILENCE_LABEL)
            .collect();
        if !contains_sequence(&audible, &audible_keyword) {
            return UtterancePlan { total_ms: target, keyword_end_ms: None, segments };
        }
    }
}

fn contains_sequence<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

fn render(rng: &mut ChaCha8Rng, plan: &UtterancePlan, spec: &KeywordSpec, cfg: &SynthConfig) -> Vec<f32> {
    let total_samples = (plan.total_ms * u64::from(SAMPLE_RATE) / 1000) as usize;
    let normal = StandardNormal;
    let mut samples: Vec<f32> = (0..total_samples)
        .map(|_| {
            let n: f32 = normal.sample(rng);
            n * cfg.noise_level
        })
        .collect();

    let fade = (SAMPLE_RATE / 200) as usize; // 5 ms ramps against clicks
    for seg in &plan.segments {
        if seg.label == SILENCE_LABEL {
            continue;
        }
        let tones = component_tones(spec.class_id(&seg.label));
        if tones.is_empty() {
            continue;
        }
        let start = (seg.start_ms * u64::from(SAMPLE_RATE) / 1000) as usize;
        let end = ((seg.end_ms * u64::from(SAMPLE_RATE) / 1000) as usize).min(total_samples);
        let amp = cfg.tone_amplitude * rng.random_range(0.85..1.15);
        let phases: Vec<f32> = tones
            .iter()
            .map(|_| rng.random_range(0.0..std::f32::consts::TAU))
            .collect();
        for (offset, sample) in samples[start..end].iter_mut().enumerate() {
            let ramp_in = ((offset + 1) as f32 / fade as f32).min(1.0);
            let ramp_out = ((end - start - offset) as f32 / fade as f32).min(1.0);
            let envelope = amp * ramp_in.min(ramp_out);
            let t = offset as f32 / SAMPLE_RATE as f32;
            let mut v = 0.0f32;
            for (&freq, &phase) in tones.iter().zip(&phases) {
                v += (std::f32::consts::TAU * freq * t + phase).sin();
            }
            *sample += envelope * v / tones.len() as f32;
        }
    }
    samples
}

fn alignment_from_plan(id: String, is_keyword: bool, plan: &UtterancePlan) -> AlignedUtterance {
    // 30 ms windows on a 10 ms hop: the last two hops have no full window.
    let frame_count = (plan.total_ms / HOP_MS).saturating_sub(2) as usize;
    let segments = plan
        .segments
        .iter()
        .map(|s| Segment {
            label: s.label.clone(),
            start_frame: (s.start_ms / HOP_MS) as usize,
            end_frame: ((s.end_ms / HOP_MS) as usize).min(frame_count),
        })
        .filter(|s| s.end_frame > s.start_frame)
        .collect();
    AlignedUtterance {
        id,
        audio_path: None,
        feature_path: None,
        frame_count,
        is_keyword,
        segments,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub samples: Vec<f32>,
    pub alignment: AlignedUtterance,
    pub keyword_end_ms: Option<u64>,
}

const KIND_POSITIVE: u64 = 1;
const KIND_NEGATIVE: u64 = 2;

/// Plan (durations and alignment) of the index-th positive, without
/// rendering audio.
pub fn positive_plan(spec: &KeywordSpec, cfg: &SynthConfig, index: usize) -> UtterancePlan {
    draw_positive_plan(&mut rng_for(cfg.seed, KIND_POSITIVE, index), spec, cfg)
}

pub fn negative_plan(spec: &KeywordSpec, cfg: &SynthConfig, index: usize) -> UtterancePlan {
    draw_negative_plan(&mut rng_for(cfg.seed, KIND_NEGATIVE, index), spec, cfg)
}

/// Deterministically synthesize the index-th positive utterance.
pub fn synth_positive(spec: &KeywordSpec, cfg: &SynthConfig, index: usize) -> SyntheticUtterance {
    let mut rng = rng_for(cfg.seed, KIND_POSITIVE, index);
    let plan = draw_positive_plan(&mut rng, spec, cfg);
    let samples = render(&mut rng, &plan, spec, cfg);
    SyntheticUtterance {
        samples,
        alignment: alignment_from_plan(format!("pos{index:05}"), true, &plan),
        keyword_end_ms: plan.keyword_end_ms,
    }
}

pub fn synth_negative(spec: &KeywordSpec, cfg: &SynthConfig, index: usize) -> SyntheticUtterance {
    let mut rng = rng_for(cfg.seed, KIND_NEGATIVE, index);
    let plan = draw_negative_plan(&mut rng, spec, cfg);
    let samples = render(&mut rng, &plan, spec, cfg);
    SyntheticUtterance {
        samples,
        alignment: alignment_from_plan(format!("neg{index:05}"), false, &plan),
        keyword_end_ms: None,
    }
}

/// Turn in-memory synthetic utterances into labeled training sequences.
pub fn labeled_sequences(
    utterances: &[SyntheticUtterance],
    mel: &crate::frontend::MelConfig,
    ctx: &crate::frontend::ContextConfig,
    mode: crate::labeling::LabelMode,
) -> Result<Vec<crate::labeling::LabeledSequence>> {
    utterances
        .iter()
        .map(|utt| {
            let frames = crate::frontend::stream_frames(&utt.samples, mel)?;
            crate::labeling::labeled_sequence(&frames, &utt.alignment, ctx, mode)
        })
        .collect()
}

pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub positives: usize,
    pub negatives: usize,
    pub negative_ms: u64,
}

/// Write `n_pos` positives and `n_neg` negatives as WAV files plus a JSONL
/// manifest under `dir`. Byte-identical for a fixed config.
pub fn generate_dataset(
    dir: &Path,
    spec: &KeywordSpec,
    cfg: &SynthConfig,
    n_pos: usize,
    n_neg: usize,
) -> Result<GeneratedDataset> {
    if n_pos == 0 && n_neg == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one utterance".into()));
    }
    spec.validate()?;
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut manifest = Vec::with_capacity(n_pos + n_neg);
    let mut negative_ms = 0u64;
    for index in 0..n_pos {
        let utt = synth_positive(spec, cfg, index);
        let rel = PathBuf::from("audio").join(format!("{}.wav", utt.alignment.id));
        write_wav(&dir.join(&rel), &utt.samples, SAMPLE_RATE)?;
        let mut alignment = utt.alignment;
        alignment.audio_path = Some(rel);
        manifest.push(alignment);
    }
    for index in 0..n_neg {
        let utt = synth_negative(spec, cfg, index);
        negative_ms += (utt.samples.len() as u64) * 1000 / u64::from(SAMPLE_RATE);
        let rel = PathBuf::from("audio").join(format!("{}.wav", utt.alignment.id));
        write_wav(&dir.join(&rel), &utt.samples, SAMPLE_RATE)?;
        let mut alignment = utt.alignment;
        alignment.audio_path = Some(rel);
        manifest.push(alignment);
    }

    let manifest_path = dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &manifest)?;
    Ok(GeneratedDataset {
        manifest_path,
        positives: n_pos,
        negatives: n_neg,
        negative_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{stream_frames, MelConfig};

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = KeywordSpec::ok_google();
        let cfg = SynthConfig::default();
        let a = synth_positive(&spec, &cfg, 3);
        let b = synth_positive(&spec, &cfg, 3);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.alignment, b.alignment);
        let c = synth_positive(&spec, &cfg, 4);
        assert_ne!(a.samples, c.samples, "different indices must differ");
    }

    #[test]
    fn generated_manifests_are_deterministic() {
        let spec = KeywordSpec::ok_google();
        let cfg = SynthConfig::default();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_dataset(dir_a.path(), &spec, &cfg, 3, 2).unwrap();
        let b = generate_dataset(dir_b.path(), &spec, &cfg, 3, 2).unwrap();
        assert_eq!(
            std::fs::read(&a.manifest_path).unwrap(),
            std::fs::read(&b.manifest_path).unwrap()
        );
        let wav_a = std::fs::read(dir_a.path().join("audio/pos00000.wav")).unwrap();
        let wav_b = std::fs::read(dir_b.path().join("audio/pos00000.wav")).unwrap();
        assert_eq!(wav_a, wav_b);
        assert!(a.negative_ms > 0);
    }

    #[test]
    fn alignments_stay_within_bounds_and_order() {
        let spec = KeywordSpec::ok_google();
        let cfg = SynthConfig::default();
        for index in 0..20 {
            let pos = synth_positive(&spec, &cfg, index);
            pos.alignment.validate().unwrap();
            assert!(pos.alignment.is_keyword);
            assert_eq!(pos.alignment.segments.len(), spec.components.len());
            let labels: Vec<&str> =
                pos.alignment.segments.iter().map(|s| s.label.as_str()).collect();
            let expected: Vec<&str> = spec.components.iter().map(String::as_str).collect();
            assert_eq!(labels, expected, "components appear in keyword order");

            let neg = synth_negative(&spec, &cfg, index);
            neg.alignment.validate().unwrap();
            assert!(!neg.alignment.is_keyword);
            // No acoustic keyword replica: the audible (non-silence) label
            // sequence never contains the keyword's audible sequence.
            let neg_audible: Vec<&String> = neg
                .alignment
                .segments
                .iter()
                .map(|s| &s.label)
                .filter(|l| l.as_str() != SILENCE_LABEL)
                .collect();
            let keyword_audible: Vec<&String> = spec
                .components
                .iter()
                .filter(|c| c.as_str() != SILENCE_LABEL)
                .collect();
            assert!(
                !contains_sequence(&neg_audible, &keyword_audible),
                "negative {index} is an acoustic keyword replica"
            );
        }
    }

    #[test]
    fn plans_match_full_synthesis() {
        let spec = KeywordSpec::ok_google();
        let cfg = SynthConfig::default();
        for index in [0usize, 5, 11] {
            let plan = positive_plan(&spec, &cfg, index);
            let full = synth_positive(&spec, &cfg, index);
            assert_eq!(plan.keyword_end_ms, full.keyword_end_ms);
            assert_eq!(
                (plan.total_ms * u64::from(SAMPLE_RATE) / 1000) as usize,
                full.samples.len()
            );
            let plan = negative_plan(&spec, &cfg, index);
            let full = synth_negative(&spec, &cfg, index);
            assert_eq!(
                (plan.total_ms * u64::from(SAMPLE_RATE) / 1000) as usize,
                full.samples.len()
            );
        }
    }

    #[test]
    fn component_patterns_show_up_in_the_spectrogram() {
        let spec = KeywordSpec::ok_google();
        let cfg = SynthConfig { noise_level: 0.02, ..SynthConfig::default() };
        let utt = synth_positive(&spec, &cfg, 0);
        let mel = MelConfig::default();
        let frames = stream_frames(&utt.samples, &mel).unwrap();
        assert_eq!(frames.len(), utt.alignment.frame_count);

        // For each non-silent component, the mel bin nearest its fundamental
        // must carry more energy inside the segment than in the leading pad.
        let bin_of = |freq: f32| -> usize {
            let to_mel = |hz: f32| 2595.0 * (1.0 + hz / 700.0).log10();
            let lo = to_mel(mel.fmin_hz);
            let hi = to_mel(mel.fmax_hz);
            let m = to_mel(freq);
            let idx = ((m - lo) / (hi - lo) * (mel.num_filters + 1) as f32).round() as isize - 1;
            idx.clamp(0, mel.num_filters as isize - 1) as usize
        };
        let lead_end = utt.alignment.segments[0].start_frame;
        for seg in &utt.alignment.segments {
            if seg.label == SILENCE_LABEL {
                continue;
            }
            let tones = component_tones(spec.class_id(&seg.label));
            let Some(&fundamental) = tones.first() else { continue };
            let bin = bin_of(fundamental);
            let in_seg: f32 = (seg.start_frame..seg.end_frame)
                .map(|t| frames[t].values[bin])
                .sum::<f32>()
                / (seg.end_frame - seg.start_frame) as f32;
            let in_pad: f32 = (0..lead_end).map(|t| frames[t].values[bin]).sum::<f32>()
                / lead_end.max(1) as f32;
            assert!(
                in_seg > in_pad + 1.0,
                "component '{}' energy {in_seg} not above pad {in_pad} in bin {bin}",
                seg.label
            );
        }
    }
}
