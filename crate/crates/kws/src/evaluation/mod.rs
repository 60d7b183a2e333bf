//! Detection evaluation: parallel scoring of an utterance set into cached
//! score streams, ROC construction over a threshold sweep, FR-at-fixed-FA/h
//! operating points, and hit latency relative to keyword end.

pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelConfig;
use crate::labeling::{load_manifest, resolve_manifest_path, KeywordSpec};
use crate::scoring::{events_from_scores, score_stream, ScoreMethod, ScorePoint};
use crate::topology::Model;
use crate::wav::read_wav;
use synth::{negative_plan, positive_plan, synth_negative, synth_positive, SynthConfig};

/// One evaluation utterance, materialized lazily so 10-hour negative suites
/// never sit in memory at once.
#[derive(Debug, Clone)]
pub struct EvalUtterance {
    pub id: String,
    pub is_keyword: bool,
    /// End of the final keyword component on the stream timeline.
    pub keyword_end_ms: Option<u64>,
    source: AudioSource,
}

#[derive(Debug, Clone)]
enum AudioSource {
    WavFile(PathBuf),
    SyntheticPositive { spec: KeywordSpec, cfg: SynthConfig, index: usize },
    SyntheticNegative { spec: KeywordSpec, cfg: SynthConfig, index: usize },
}

impl EvalUtterance {
    pub fn load_samples(&self) -> Result<Vec<f32>> {
        match &self.source {
            AudioSource::WavFile(path) => {
                let (samples, rate) = read_wav(path)?;
                if rate != synth::SAMPLE_RATE {
                    return Err(Error::Data(format!(
                        "{}: sample rate {rate} != 16000",
                        path.display()
                    )));
                }
                Ok(samples)
            }
            AudioSource::SyntheticPositive { spec, cfg, index } => {
                Ok(synth_positive(spec, cfg, *index).samples)
            }
            AudioSource::SyntheticNegative { spec, cfg, index } => {
                Ok(synth_negative(spec, cfg, *index).samples)
            }
        }
    }
}

/// An in-memory evaluation suite description.
pub struct EvalSet {
    pub utterances: Vec<EvalUtterance>,
    pub negative_ms: u64,
}

impl EvalSet {
    pub fn negative_hours(&self) -> f64 {
        self.negative_ms as f64 / 3_600_000.0
    }

    /// Build a synthetic suite without rendering audio; utterances
    /// materialize inside the scoring workers.
    pub fn synthetic(spec: &KeywordSpec, cfg: &SynthConfig, n_pos: usize, n_neg: usize) -> EvalSet {
        let mut utterances = Vec::with_capacity(n_pos + n_neg);
        for index in 0..n_pos {
            let plan = positive_plan(spec, cfg, index);
            utterances.push(EvalUtterance {
                id: format!("pos{index:05}"),
                is_keyword: true,
                keyword_end_ms: plan.keyword_end_ms,
                source: AudioSource::SyntheticPositive {
                    spec: spec.clone(),
                    cfg: cfg.clone(),
                    index,
                },
            });
        }
        let mut negative_ms = 0u64;
        for index in 0..n_neg {
            let plan = negative_plan(spec, cfg, index);
            negative_ms += plan.duration_ms();
            utterances.push(EvalUtterance {
                id: format!("neg{index:05}"),
                is_keyword: false,
                keyword_end_ms: None,
                source: AudioSource::SyntheticNegative {
                    spec: spec.clone(),
                    cfg: cfg.clone(),
                    index,
                },
            });
        }
        EvalSet { utterances, negative_ms }
    }

    /// Build a suite from a JSONL manifest; keyword ends come from the final
    /// keyword component's aligned segment.
    pub fn from_manifest(manifest: &Path, spec: &KeywordSpec) -> Result<EvalSet> {
        let entries = load_manifest(manifest)?;
        let mut utterances = Vec::with_capacity(entries.len());
        let mut negative_ms = 0u64;
        for utt in entries {
            let rel = utt.audio_path.as_ref().ok_or_else(|| {
                Error::Data(format!("{}: evaluation needs audio_path", utt.id))
            })?;
            let path = resolve_manifest_path(manifest, rel);
            let keyword_end_ms = if utt.is_keyword {
                let last = spec.last_component();
                let seg = utt
                    .segments
                    .iter()
                    .rev()
                    .find(|s| s.label == last)
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "{}: keyword utterance lacks a '{last}' segment",
                            utt.id
                        ))
                    })?;
                Some(seg.end_frame as u64 * 10)
            } else {
                negative_ms += utt.frame_count as u64 * 10 + 20;
                None
            };
            utterances.push(EvalUtterance {
                id: utt.id,
                is_keyword: utt.is_keyword,
                keyword_end_ms,
                source: AudioSource::WavFile(path),
            });
        }
        Ok(EvalSet { utterances, negative_ms })
    }
}

/// Cached score stream of one utterance; recomputing ROC from these equals
/// live evaluation by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub id: String,
    pub is_keyword: bool,
    pub keyword_end_ms: Option<u64>,
    pub duration_ms: u64,
    pub scores: Vec<ScorePoint>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalScores {
    pub utterances: Vec<UtteranceScores>,
}

impl EvalScores {
    pub fn negative_hours(&self) -> f64 {
        let ms: u64 = self
            .utterances
            .iter()
            .filter(|u| !u.is_keyword)
            .map(|u| u.duration_ms)
            .sum();
        ms as f64 / 3_600_000.0
    }

    pub fn positives(&self) -> usize {
        self.utterances.iter().filter(|u| u.is_keyword).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Data(format!("score cache: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalScores> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Run the detector over every utterance (in parallel when `jobs != 1`) and
/// cache the score streams. Workers own their detector; results keep the
/// input order regardless of scheduling.
pub fn score_eval_set(
    model: &Model,
    mel: &MelConfig,
    method: &ScoreMethod,
    set: &EvalSet,
    jobs: Option<usize>,
) -> Result<EvalScores> {
    let score_one = |utt: &EvalUtterance| -> Result<UtteranceScores> {
        let samples = utt.load_samples()?;
        let duration_ms = samples.len() as u64 * 1000 / u64::from(synth::SAMPLE_RATE);
        let scores = score_stream(model, &samples, mel.clone(), method.clone())?;
        Ok(UtteranceScores {
            id: utt.id.clone(),
            is_keyword: utt.is_keyword,
            keyword_end_ms: utt.keyword_end_ms,
            duration_ms,
            scores,
        })
    };

    let utterances = match jobs {
        Some(1) => set
            .utterances
            .iter()
            .map(score_one)
            .collect::<Result<Vec<_>>>()?,
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| {
                set.utterances
                    .par_iter()
                    .map(score_one)
                    .collect::<Result<Vec<_>>>()
            })?
        }
        None => set
            .utterances
            .par_iter()
            .map(score_one)
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(EvalScores { utterances })
}

/// The window around keyword end in which an event counts as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitWindow {
    pub before_ms: u64,
    pub after_ms: u64,
}

impl Default for HitWindow {
    fn default() -> Self {
        HitWindow { before_ms: 100, after_ms: 750 }
    }
}

impl HitWindow {
    pub fn contains(&self, keyword_end_ms: u64, event_ms: u64) -> bool {
        let lo = keyword_end_ms.saturating_sub(self.before_ms);
        let hi = keyword_end_ms + self.after_ms;
        (lo..=hi).contains(&event_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f32,
    pub fa_per_hour: f64,
    /// Fraction of keyword utterances with no event inside the hit window.
    pub fr_rate: f64,
}

/// 1001 thresholds evenly spaced strictly inside (0, 1).
pub fn default_thresholds() -> Vec<f32> {
    (1..=1001).map(|i| i as f32 / 1002.0).collect()
}

fn misses_and_false_accepts(
    scores: &EvalScores,
    threshold: f32,
    suppression_ms: u64,
    hit_window: HitWindow,
) -> (usize, usize) {
    let mut misses = 0usize;
    let mut false_accepts = 0usize;
    for utt in &scores.utterances {
        if utt.is_keyword {
            // A positive counts as detected when any score inside the hit
            // window crosses the threshold. Event suppression is deliberately
            // not consulted here: an unrelated early trigger suppressing the
            // in-window crossing would make FR non-monotone in the threshold.
            let end = utt.keyword_end_ms.unwrap_or(utt.duration_ms);
            let hit = utt
                .scores
                .iter()
                .any(|p| p.score >= threshold && hit_window.contains(end, p.timestamp_ms));
            if !hit {
                misses += 1;
            }
        } else {
            false_accepts +=
                events_from_scores(&utt.scores, threshold, suppression_ms).len();
        }
    }
    (misses, false_accepts)
}

/// Sweep thresholds over cached score streams. FR counts only keyword
/// utterances; FA/h counts only events on negatives over the negative hours.
pub fn roc_curve(
    scores: &EvalScores,
    thresholds: &[f32],
    suppression_ms: u64,
    hit_window: HitWindow,
) -> Result<Vec<RocPoint>> {
    let positives = scores.positives();
    if positives == 0 {
        return Err(Error::InvalidArgument("ROC needs at least one positive utterance".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold sweep is empty".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    let negative_hours = scores.negative_hours();
    if negative_hours <= 0.0 {
        return Err(Error::InvalidArgument(
            "ROC needs negative audio with positive duration".into(),
        ));
    }
    Ok(thresholds
        .par_iter()
        .map(|&threshold| {
            let (misses, false_accepts) =
                misses_and_false_accepts(scores, threshold, suppression_ms, hit_window);
            RocPoint {
                threshold,
                fa_per_hour: false_accepts as f64 / negative_hours,
                fr_rate: misses as f64 / positives as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f32,
    pub fr_rate: f64,
    pub fa_per_hour: f64,
}

/// Smallest threshold whose FA/h is at or below the target; the negative set
/// must be long enough to resolve the target (expected count >= 1) unless
/// `allow_short_negatives` overrides.
pub fn fr_at_fa(
    scores: &EvalScores,
    target_fa_per_hour: f64,
    thresholds: &[f32],
    suppression_ms: u64,
    hit_window: HitWindow,
    allow_short_negatives: bool,
) -> Result<OperatingPoint> {
    if target_fa_per_hour <= 0.0 {
        return Err(Error::InvalidArgument("target FA/h must be positive".into()));
    }
    let hours = scores.negative_hours();
    if hours * target_fa_per_hour < 1.0 && !allow_short_negatives {
        return Err(Error::Precondition(format!(
            "{hours:.2} negative hours cannot resolve {target_fa_per_hour} FA/h \
             (need >= {:.1} h); pass the short-negatives override to proceed",
            1.0 / target_fa_per_hour
        )));
    }
    let curve = roc_curve(scores, thresholds, suppression_ms, hit_window)?;
    curve
        .iter()
        .find(|p| p.fa_per_hour <= target_fa_per_hour)
        .map(|p| OperatingPoint {
            threshold: p.threshold,
            fr_rate: p.fr_rate,
            fa_per_hour: p.fa_per_hour,
        })
        .ok_or_else(|| {
            Error::NoOperatingPoint(format!(
                "false-accept rate stays above {target_fa_per_hour}/h across the sweep"
            ))
        })
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub positives: usize,
    /// Positives with at least one threshold crossing anywhere.
    pub hits: usize,
    /// Positives with a crossing inside the hit window.
    pub in_window_hits: usize,
    /// Positives whose very first crossing lies inside the hit window.
    pub first_event_in_window: usize,
    /// First-crossing time minus keyword end, per hit (ms; negative = early).
    pub latencies_ms: Vec<i64>,
}

impl LatencyReport {
    /// Fraction of detected positives whose detection lands in the window.
    pub fn in_window_fraction(&self) -> f64 {
        if self.hits == 0 {
            0.0
        } else {
            self.in_window_hits as f64 / self.hits as f64
        }
    }

    pub fn median_latency_ms(&self) -> Option<i64> {
        if self.latencies_ms.is_empty() {
            return None;
        }
        let mut sorted = self.latencies_ms.clone();
        sorted.sort_unstable();
        Some(sorted[sorted.len() / 2])
    }
}

/// Where detection crossings land relative to keyword end at one threshold.
///
/// Labels put positives from the final keyword component's onset, so a sharp
/// model legitimately first crosses up to one component before keyword end;
/// `latencies_ms` records exactly that, while `in_window_hits` checks that
/// the detection covers the hit window around keyword end.
pub fn latency_at_threshold(
    scores: &EvalScores,
    threshold: f32,
    suppression_ms: u64,
    hit_window: HitWindow,
) -> LatencyReport {
    let mut report = LatencyReport {
        positives: 0,
        hits: 0,
        in_window_hits: 0,
        first_event_in_window: 0,
        latencies_ms: Vec::new(),
    };
    for utt in scores.utterances.iter().filter(|u| u.is_keyword) {
        report.positives += 1;
        let end = utt.keyword_end_ms.unwrap_or(utt.duration_ms);
        let events = events_from_scores(&utt.scores, threshold, suppression_ms);
        let Some(first) = events.first() else { continue };
        report.hits += 1;
        report
            .latencies_ms
            .push(first.trigger_timestamp_ms as i64 - end as i64);
        if hit_window.contains(end, first.trigger_timestamp_ms) {
            report.first_event_in_window += 1;
        }
        if utt
            .scores
            .iter()
            .any(|p| p.score >= threshold && hit_window.contains(end, p.timestamp_ms))
        {
            report.in_window_hits += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn stream(id: &str, is_keyword: bool, end: Option<u64>, duration: u64, scores: &[(u64, f32)]) -> UtteranceScores {
        UtteranceScores {
            id: id.into(),
            is_keyword,
            keyword_end_ms: end,
            duration_ms: duration,
            scores: scores
                .iter()
                .map(|&(timestamp_ms, score)| ScorePoint { timestamp_ms, score })
                .collect(),
        }
    }

    fn perfect_scores() -> EvalScores {
        let mut utterances = Vec::new();
        for i in 0..5 {
            let end = 1000u64;
            utterances.push(stream(
                &format!("p{i}"),
                true,
                Some(end),
                2000,
                &[(900, 0.0), (1000, 1.0), (1100, 0.0)],
            ));
        }
        for i in 0..5 {
            utterances.push(stream(
                &format!("n{i}"),
                false,
                None,
                7_200_000, // 2 h each, 10 h total
                &[(1000, 0.0), (2000, 0.0)],
            ));
        }
        EvalScores { utterances }
    }

    #[test]
    fn perfect_separator_has_zero_fr_and_fa() {
        let scores = perfect_scores();
        let curve = roc_curve(&scores, &[0.1, 0.5, 0.9], 1000, HitWindow::default()).unwrap();
        for point in curve {
            assert_eq!(point.fr_rate, 0.0, "threshold {}", point.threshold);
            assert_eq!(point.fa_per_hour, 0.0);
        }
        let op = fr_at_fa(&scores, 0.1, &default_thresholds(), 1000, HitWindow::default(), false)
            .unwrap();
        assert_eq!(op.fr_rate, 0.0);
        assert_eq!(op.fa_per_hour, 0.0);
    }

    #[test]
    fn never_firing_detector_is_all_misses_no_false_accepts() {
        let mut scores = perfect_scores();
        for utt in &mut scores.utterances {
            for p in &mut utt.scores {
                p.score = 0.0;
            }
        }
        let curve = roc_curve(&scores, &[0.5], 1000, HitWindow::default()).unwrap();
        assert_eq!(curve[0].fr_rate, 1.0);
        assert_eq!(curve[0].fa_per_hour, 0.0);
    }

    #[test]
    fn roc_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut utterances = Vec::new();
        for i in 0..30 {
            let pts: Vec<(u64, f32)> =
                (0..60).map(|t| (t * 20, rng.random_range(0.0..1.0))).collect();
            utterances.push(stream(&format!("p{i}"), true, Some(600), 1200, &pts));
        }
        for i in 0..10 {
            let pts: Vec<(u64, f32)> =
                (0..600).map(|t| (t * 20, rng.random_range(0.0..1.0))).collect();
            utterances.push(stream(&format!("n{i}"), false, None, 12_000, &pts));
        }
        let scores = EvalScores { utterances };
        let curve =
            roc_curve(&scores, &default_thresholds(), 1000, HitWindow::default()).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].fr_rate >= pair[0].fr_rate, "FR must not drop as threshold rises");
            assert!(pair[1].fa_per_hour <= pair[0].fa_per_hour, "FA must not rise");
        }
    }

    #[test]
    fn random_scores_match_analytic_miss_rate() {
        // Monte-Carlo oracle: i.i.d. uniform scores, suppression off, the hit
        // window covering every point. P(miss at threshold t) = t^n.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let n_points = 8usize;
        let mut utterances: Vec<UtteranceScores> = (0..4000)
            .map(|i| {
                let pts: Vec<(u64, f32)> = (0..n_points)
                    .map(|t| (t as u64 * 20, rng.random_range(0.0..1.0)))
                    .collect();
                stream(&format!("p{i}"), true, Some(80), 200, &pts)
            })
            .collect();
        utterances.push(stream("neg", false, None, 3_600_000, &[(0, 0.0)]));
        let scores = EvalScores { utterances };
        let window = HitWindow { before_ms: 100, after_ms: 100 };
        for threshold in [0.3f32, 0.6, 0.9] {
            let curve = roc_curve(&scores, &[threshold], 0, window).unwrap();
            let expected = f64::from(threshold).powi(n_points as i32);
            let got = curve[0].fr_rate;
            assert!(
                (got - expected).abs() < 0.035,
                "threshold {threshold}: empirical FR {got}, analytic {expected}"
            );
        }
    }

    #[test]
    fn positives_never_contribute_false_accepts() {
        // A positive firing constantly adds no FA; a negative firing once does.
        let utterances = vec![
            stream("p0", true, Some(100), 1000, &[(100, 0.99), (1200, 0.99), (2400, 0.99)]),
            stream("n0", false, None, 3_600_000, &[(5000, 0.99)]),
        ];
        let scores = EvalScores { utterances };
        let curve = roc_curve(&scores, &[0.5], 1000, HitWindow::default()).unwrap();
        assert_eq!(curve[0].fa_per_hour, 1.0);
        assert_eq!(curve[0].fr_rate, 0.0);
    }

    #[test]
    fn early_event_outside_window_is_a_miss() {
        let utterances = vec![
            stream("p0", true, Some(2000), 3000, &[(500, 0.99), (2000, 0.1)]),
            stream("n0", false, None, 3_600_000, &[(0, 0.0)]),
        ];
        let scores = EvalScores { utterances };
        let curve = roc_curve(&scores, &[0.5], 1000, HitWindow::default()).unwrap();
        assert_eq!(curve[0].fr_rate, 1.0, "event at 500 ms is outside [1900, 2750]");
    }

    #[test]
    fn fr_at_fa_demands_enough_negative_audio() {
        let scores = perfect_scores(); // 10 h of negatives
        assert!(fr_at_fa(&scores, 0.1, &default_thresholds(), 1000, HitWindow::default(), false).is_ok());
        // 0.05 FA/h would need 20 h.
        let err = fr_at_fa(&scores, 0.05, &default_thresholds(), 1000, HitWindow::default(), false);
        assert!(matches!(err, Err(Error::Precondition(_))));
        assert!(fr_at_fa(&scores, 0.05, &default_thresholds(), 1000, HitWindow::default(), true).is_ok());
    }

    #[test]
    fn unreachable_target_is_no_operating_point() {
        // The negative fires at score 1.0 - epsilon, above every threshold,
        // over 2 h of negative audio (enough to resolve 0.5 FA/h).
        let utterances = vec![
            stream("p0", true, Some(100), 1000, &[(100, 0.999)]),
            stream(
                "n0",
                false,
                None,
                7_200_000,
                &[(1000, 0.9999), (500_000, 0.9999), (2_000_000, 0.9999), (4_000_000, 0.9999)],
            ),
        ];
        let scores = EvalScores { utterances };
        let err = fr_at_fa(&scores, 0.5, &default_thresholds(), 1000, HitWindow::default(), false);
        assert!(matches!(err, Err(Error::NoOperatingPoint(_))));
    }

    #[test]
    fn latency_report_counts_window_membership() {
        let utterances = vec![
            stream("hit", true, Some(1000), 3000, &[(1100, 0.99)]),
            stream("late", true, Some(1000), 3000, &[(2500, 0.99)]),
            stream("early_then_hit", true, Some(1000), 3000, &[(500, 0.99), (1000, 0.99)]),
            stream("miss", true, Some(1000), 3000, &[(1100, 0.1)]),
        ];
        let scores = EvalScores { utterances };
        let report = latency_at_threshold(&scores, 0.5, 1000, HitWindow::default());
        assert_eq!(report.positives, 4);
        assert_eq!(report.hits, 3);
        // "late" crosses only outside the window; "early_then_hit" first
        // crosses early but covers the window.
        assert_eq!(report.in_window_hits, 2);
        assert_eq!(report.first_event_in_window, 1);
        assert_eq!(report.latencies_ms, vec![100, 1500, -500]);
        assert_eq!(report.median_latency_ms(), Some(100));
        assert!((report.in_window_fraction() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_cache_round_trips_and_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.json");
        let scores = perfect_scores();
        scores.save(&path).unwrap();
        let loaded = EvalScores::load(&path).unwrap();
        let a = roc_curve(&scores, &default_thresholds(), 1000, HitWindow::default()).unwrap();
        let b = roc_curve(&loaded, &default_thresholds(), 1000, HitWindow::default()).unwrap();
        assert_eq!(a, b, "cached evaluation must equal the original");
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let scores = EvalScores {
            utterances: vec![stream("n0", false, None, 3_600_000, &[(0, 0.0)])],
        };
        assert!(matches!(
            roc_curve(&scores, &[0.5], 1000, HitWindow::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
