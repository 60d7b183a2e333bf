//! Frame-level training targets from force-aligned utterances: binary keyword
//! labels for end-to-end training and subword class ids for encoder
//! pretraining, plus alignment of per-frame labels to strided inference times.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{inference_centers, window_context, ContextConfig, FeatureFrame, StackedInput};

/// One force-aligned component span. `end_frame` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// An utterance with its alignment, as carried by the JSONL dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedUtterance {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    /// Number of front-end frames; 0 when unknown (filled from audio).
    #[serde(default)]
    pub frame_count: usize,
    pub is_keyword: bool,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl AlignedUtterance {
    /// Segments must be ordered, non-overlapping, non-empty, and inside the
    /// frame count (when known).
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0usize;
        for seg in &self.segments {
            if seg.end_frame <= seg.start_frame {
                return Err(Error::Data(format!(
                    "{}: segment '{}' is empty or inverted ({}..{})",
                    self.id, seg.label, seg.start_frame, seg.end_frame
                )));
            }
            if seg.start_frame < prev_end {
                return Err(Error::Data(format!(
                    "{}: segment '{}' overlaps or reorders at frame {}",
                    self.id, seg.label, seg.start_frame
                )));
            }
            if self.frame_count > 0 && seg.end_frame > self.frame_count {
                return Err(Error::Data(format!(
                    "{}: segment '{}' ends at {} beyond frame count {}",
                    self.id, seg.label, seg.end_frame, self.frame_count
                )));
            }
            prev_end = seg.end_frame;
        }
        Ok(())
    }
}

/// The keyword's ordered component inventory and the class ids used for
/// encoder (subword) targets. Class 0 is background/filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub components: Vec<String>,
    pub class_map: BTreeMap<String, usize>,
    pub num_classes: usize,
}

pub const SILENCE_LABEL: &str = "<silence>";

impl KeywordSpec {
    /// The stock wake-phrase inventory: nine components whose subword targets
    /// share 9 classes with background, and with "h" sharing a class with "k"
    /// so one detector covers both phrase-initial consonants.
    pub fn ok_google() -> KeywordSpec {
        let components = ["ou", "k", "eI", SILENCE_LABEL, "g", "u", "g", "@", "l"]
            .map(String::from)
            .to_vec();
        let mut class_map = BTreeMap::new();
        for (label, id) in [
            ("ou", 1usize),
            ("k", 2),
            ("h", 2),
            ("eI", 3),
            (SILENCE_LABEL, 4),
            ("g", 5),
            ("u", 6),
            ("@", 7),
            ("l", 8),
        ] {
            class_map.insert(label.to_string(), id);
        }
        KeywordSpec { components, class_map, num_classes: 9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("keyword component list is empty".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("keyword spec needs at least the background class".into()));
        }
        for (label, &id) in &self.class_map {
            if id >= self.num_classes {
                return Err(Error::Config(format!(
                    "class id {id} for '{label}' outside {} classes",
                    self.num_classes
                )));
            }
        }
        for c in &self.components {
            if !self.class_map.contains_key(c) {
                return Err(Error::Config(format!("component '{c}' missing from class map")));
            }
        }
        Ok(())
    }

    pub fn last_component(&self) -> &str {
        self.components.last().expect("validated non-empty")
    }

    /// Subword class id for a component label; unknown labels are background.
    pub fn class_id(&self, label: &str) -> usize {
        self.class_map.get(label).copied().unwrap_or(0)
    }

    /// The component class ids in keyword order (the baseline scorer's
    /// in-order assignment sequence).
    pub fn class_sequence(&self) -> Vec<usize> {
        self.components.iter().map(|c| self.class_id(c)).collect()
    }

    pub fn load(path: &Path) -> Result<KeywordSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: KeywordSpec =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Binary frame labels: 1 for the positive window anchored at the final
/// keyword component, 0 everywhere else (including earlier components).
///
/// The positive window is `[seg_start, seg_start + max(extra_positives,
/// seg_len))`, clipped to the sequence end; `extra_positives` widens short
/// final components to balance the classes.
pub fn generate_e2e_labels(
    utt: &AlignedUtterance,
    spec: &KeywordSpec,
    extra_positives: usize,
) -> Result<Vec<usize>> {
    utt.validate()?;
    let n = utt.frame_count;
    let mut labels = vec![0usize; n];
    if !utt.is_keyword {
        return Ok(labels);
    }
    let last = spec.last_component();
    let seg = utt
        .segments
        .iter()
        .rev()
        .find(|s| s.label == last)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: keyword utterance has no '{last}' segment to anchor positive labels",
                utt.id
            ))
        })?;
    let seg_len = seg.end_frame - seg.start_frame;
    let end = (seg.start_frame + seg_len.max(extra_positives)).min(n);
    for l in &mut labels[seg.start_frame..end] {
        *l = 1;
    }
    Ok(labels)
}

/// Per-frame subword class ids; frames outside any segment are background 0.
pub fn generate_encoder_labels(utt: &AlignedUtterance, spec: &KeywordSpec) -> Result<Vec<usize>> {
    utt.validate()?;
    let mut labels = vec![0usize; utt.frame_count];
    for seg in &utt.segments {
        let id = spec.class_id(&seg.label);
        for l in &mut labels[seg.start_frame..seg.end_frame.min(utt.frame_count)] {
            *l = id;
        }
    }
    Ok(labels)
}

/// Sample per-frame labels at the strided inference centers so that label
/// count equals inference count for any context geometry.
pub fn align_labels_to_stride(labels: &[usize], ctx: &ContextConfig) -> Vec<usize> {
    inference_centers(labels.len(), ctx).map(|t| labels[t]).collect()
}

/// Inputs and labels for one training sequence, one entry per inference.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub inputs: Vec<StackedInput>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum LabelMode<'a> {
    /// Binary end-to-end targets.
    Keyword { spec: &'a KeywordSpec, extra_positives: usize },
    /// Subword targets for encoder pretraining (and the baseline).
    Subword { spec: &'a KeywordSpec },
}

/// Pair extracted frames with an alignment to produce one training sequence.
pub fn labeled_sequence(
    frames: &[FeatureFrame],
    utt: &AlignedUtterance,
    ctx: &ContextConfig,
    mode: LabelMode,
) -> Result<LabeledSequence> {
    if utt.frame_count > 0 && utt.frame_count != frames.len() {
        return Err(Error::Data(format!(
            "{}: manifest declares {} frames but audio produced {}",
            utt.id,
            utt.frame_count,
            frames.len()
        )));
    }
    let mut utt = utt.clone();
    utt.frame_count = frames.len();

    let frame_labels = match mode {
        LabelMode::Keyword { spec, extra_positives } => {
            generate_e2e_labels(&utt, spec, extra_positives)?
        }
        LabelMode::Subword { spec } => generate_encoder_labels(&utt, spec)?,
    };
    let inputs = window_context(frames, ctx)?;
    let labels = align_labels_to_stride(&frame_labels, ctx);
    debug_assert_eq!(inputs.len(), labels.len());
    Ok(LabeledSequence { inputs, labels })
}

/// Load a manifest and turn every utterance's audio into a labeled training
/// sequence under the given context geometry.
pub fn sequences_from_manifest(
    manifest: &Path,
    mel: &crate::frontend::MelConfig,
    ctx: &ContextConfig,
    mode: LabelMode,
) -> Result<Vec<LabeledSequence>> {
    let utterances = load_manifest(manifest)?;
    utterances
        .iter()
        .map(|utt| {
            let rel = utt.audio_path.as_ref().ok_or_else(|| {
                Error::Data(format!("{}: training needs audio_path", utt.id))
            })?;
            let path = resolve_manifest_path(manifest, rel);
            let (samples, rate) = crate::wav::read_wav(&path)?;
            if rate != mel.sample_rate {
                return Err(Error::Data(format!(
                    "{}: sample rate {rate} != {}",
                    path.display(),
                    mel.sample_rate
                )));
            }
            let frames = crate::frontend::stream_frames(&samples, mel)?;
            labeled_sequence(&frames, utt, ctx, mode)
        })
        .collect()
}

/// Read a JSON-lines dataset manifest; blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<AlignedUtterance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut utterances = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: AlignedUtterance = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        utt.validate()?;
        utterances.push(utt);
    }
    Ok(utterances)
}

pub fn save_manifest(path: &Path, utterances: &[AlignedUtterance]) -> Result<()> {
    let mut out = Vec::new();
    for utt in utterances {
        serde_json::to_writer(&mut out, utt)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Resolve a manifest-relative path against the manifest's directory.
pub fn resolve_manifest_path(manifest: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, frames: usize, is_keyword: bool, segments: &[(&str, usize, usize)]) -> AlignedUtterance {
        AlignedUtterance {
            id: id.into(),
            audio_path: None,
            feature_path: None,
            frame_count: frames,
            is_keyword,
            segments: segments
                .iter()
                .map(|&(label, start_frame, end_frame)| Segment {
                    label: label.into(),
                    start_frame,
                    end_frame,
                })
                .collect(),
        }
    }

    #[test]
    fn non_keyword_labels_are_all_zero() {
        let spec = KeywordSpec::ok_google();
        let u = utt("n", 10, false, &[("g", 2, 5), ("l", 6, 8)]);
        let labels = generate_e2e_labels(&u, &spec, 5).unwrap();
        assert_eq!(labels, vec![0; 10]);
    }

    #[test]
    fn final_component_frames_get_positive_labels() {
        let spec = KeywordSpec::ok_google();
        // "l" covering frames 6..=7 of a 10-frame utterance.
        let u = utt("p", 10, true, &[("ou", 0, 2), ("k", 2, 4), ("l", 6, 8)]);
        let labels = generate_e2e_labels(&u, &spec, 0).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn extra_positives_widen_short_segments() {
        let spec = KeywordSpec::ok_google();
        let u = utt("p", 10, true, &[("l", 6, 8)]);
        // Window is [6, 6 + max(3, 2)) = frames 6, 7, 8.
        let labels = generate_e2e_labels(&u, &spec, 3).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 0]);
        // Clipped at the sequence end.
        let labels = generate_e2e_labels(&u, &spec, 100).unwrap();
        assert_eq!(&labels[6..], &[1, 1, 1, 1]);
        assert_eq!(labels[..6], [0; 6]);
    }

    #[test]
    fn missing_final_component_is_a_data_error() {
        let spec = KeywordSpec::ok_google();
        let u = utt("p", 10, true, &[("ou", 0, 2)]);
        assert!(matches!(
            generate_e2e_labels(&u, &spec, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn earlier_keyword_components_stay_negative() {
        let spec = KeywordSpec::ok_google();
        let segs: Vec<(&str, usize, usize)> = vec![
            ("ou", 0, 2), ("k", 2, 3), ("eI", 3, 4), ("<silence>", 4, 5),
            ("g", 5, 6), ("u", 6, 7), ("g", 7, 8), ("@", 8, 9), ("l", 9, 11),
        ];
        let u = utt("p", 12, true, &segs);
        let labels = generate_e2e_labels(&u, &spec, 0).unwrap();
        assert_eq!(labels[..9], [0; 9], "no positive may precede the final component");
        assert_eq!(labels[9..11], [1, 1]);
    }

    #[test]
    fn encoder_labels_follow_class_map() {
        let spec = KeywordSpec::ok_google();
        let u = utt("p", 8, true, &[("ou", 0, 2), ("k", 2, 4), ("l", 5, 7)]);
        let labels = generate_encoder_labels(&u, &spec).unwrap();
        assert_eq!(labels, vec![1, 1, 2, 2, 0, 8, 8, 0]);
        // "h" shares the class of "k".
        assert_eq!(spec.class_id("h"), spec.class_id("k"));
        // Silence is its own class; unknown labels are background.
        assert_eq!(spec.class_id(SILENCE_LABEL), 4);
        assert_eq!(spec.class_id("zz"), 0);
    }

    #[test]
    fn all_silence_utterance_gets_silence_class() {
        let spec = KeywordSpec::ok_google();
        let u = utt("s", 5, false, &[(SILENCE_LABEL, 0, 5)]);
        let labels = generate_encoder_labels(&u, &spec).unwrap();
        assert_eq!(labels, vec![4; 5]);
        let bare = utt("b", 5, false, &[]);
        assert_eq!(generate_encoder_labels(&bare, &spec).unwrap(), vec![0; 5]);
    }

    #[test]
    fn stride_alignment_examples() {
        let ctx1 = ContextConfig { left: 0, right: 0, stride: 1 };
        assert_eq!(align_labels_to_stride(&[0, 1, 0, 1], &ctx1), vec![0, 1, 0, 1]);

        // Phase starts at the left context.
        let ctx2 = ContextConfig { left: 0, right: 0, stride: 2 };
        assert_eq!(align_labels_to_stride(&[0, 1, 0, 1], &ctx2), vec![0, 0]);
        let ctx2b = ContextConfig { left: 1, right: 0, stride: 2 };
        assert_eq!(align_labels_to_stride(&[0, 1, 0, 1], &ctx2b), vec![1, 1]);

        // Baseline geometry: 41 frames admit exactly one inference at t=30.
        let ctx3 = ContextConfig { left: 30, right: 10, stride: 3 };
        let labels: Vec<usize> = (0..41).map(|t| usize::from(t == 30)).collect();
        assert_eq!(align_labels_to_stride(&labels, &ctx3), vec![1]);
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let u = utt("x", 10, false, &[("a", 0, 5), ("b", 3, 7)]);
        assert!(matches!(u.validate(), Err(Error::Data(_))));
        let u = utt("x", 10, false, &[("a", 2, 2)]);
        assert!(matches!(u.validate(), Err(Error::Data(_))));
        let u = utt("x", 4, false, &[("a", 2, 6)]);
        assert!(matches!(u.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let utts = vec![
            utt("a", 10, true, &[("l", 6, 8)]),
            utt("b", 12, false, &[("g", 0, 4)]),
        ];
        save_manifest(&path, &utts).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, utts);
    }

    #[test]
    fn manifest_rejects_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"id\": \"a\"\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Data(_))));
    }

    proptest! {
        /// No positive label may precede the final keyword component's onset,
        /// and labeling is pure (idempotent).
        #[test]
        fn positives_never_precede_final_component(
            onset in 0usize..30,
            seg_len in 1usize..10,
            extra in 0usize..20,
            tail in 0usize..10,
        ) {
            let spec = KeywordSpec::ok_google();
            let n = onset + seg_len + tail;
            let u = utt("p", n, true, &[("l", onset, onset + seg_len)]);
            let labels = generate_e2e_labels(&u, &spec, extra).unwrap();
            prop_assert!(labels[..onset].iter().all(|&l| l == 0));
            prop_assert_eq!(labels.len(), n);
            let expected_end = (onset + seg_len.max(extra)).min(n);
            prop_assert!(labels[onset..expected_end].iter().all(|&l| l == 1));
            prop_assert!(labels[expected_end..].iter().all(|&l| l == 0));
            prop_assert_eq!(generate_e2e_labels(&u, &spec, extra).unwrap(), labels);
        }

        /// Strided labels pair one-to-one with stacked inputs for any geometry.
        #[test]
        fn label_count_equals_inference_count(
            n in 0usize..120,
            left in 0usize..35,
            right in 0usize..12,
            stride in 1usize..4,
        ) {
            let ctx = ContextConfig { left, right, stride };
            let frames: Vec<FeatureFrame> = (0..n)
                .map(|t| FeatureFrame { values: vec![0.0; 40], timestamp_ms: t as u64 * 10 })
                .collect();
            let labels: Vec<usize> = (0..n).map(|t| t % 2).collect();
            let stacked = window_context(&frames, &ctx).unwrap();
            let aligned = align_labels_to_stride(&labels, &ctx);
            prop_assert_eq!(stacked.len(), aligned.len());
        }
    }
}
