//! Keyword likelihood scoring and threshold detection: the end-to-end model's
//! positive-class probability, the baseline's smoothed-posterior sliding
//! window score, and a streaming detector that turns PCM into score points
//! and suppressed threshold-crossing events.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::frontend::{FeatureFrame, Framer, MelConfig};
use crate::nnet::SvdfState;
use crate::topology::Model;

/// One score sample on the stream timeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScorePoint {
    pub timestamp_ms: u64,
    pub score: f32,
}

/// A threshold crossing, after suppression.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DetectionEvent {
    pub trigger_timestamp_ms: u64,
    pub peak_score: f32,
    pub threshold: f32,
}

/// Keyword likelihood of a binary softmax output: the positive-class
/// probability (class 1).
pub fn e2e_score(output: &[f32]) -> f32 {
    assert_eq!(output.len(), 2, "e2e scoring expects a binary distribution");
    output[1]
}

/// Sliding-window posterior smoother: each pushed frame's smoothed posterior
/// is the mean of the raw posteriors over the up-to-`window` most recent
/// frames, and the last `window` smoothed vectors are retained for scoring.
#[derive(Debug, Clone)]
pub struct PosteriorSmoother {
    classes: usize,
    window: usize,
    raw: VecDeque<Vec<f32>>,
    sums: Vec<f64>,
    smoothed: VecDeque<Vec<f64>>,
}

impl PosteriorSmoother {
    pub fn new(classes: usize, window: usize) -> Self {
        PosteriorSmoother {
            classes,
            window: window.max(1),
            raw: VecDeque::new(),
            sums: vec![0.0; classes],
            smoothed: VecDeque::new(),
        }
    }

    pub fn push(&mut self, posteriors: &[f32]) -> Result<()> {
        if posteriors.len() != self.classes {
            return Err(Error::InvalidArgument(format!(
                "posterior vector has {} classes, smoother expects {}",
                posteriors.len(),
                self.classes
            )));
        }
        self.raw.push_back(posteriors.to_vec());
        for (s, &p) in self.sums.iter_mut().zip(posteriors) {
            *s += f64::from(p);
        }
        if self.raw.len() > self.window {
            let old = self.raw.pop_front().unwrap();
            for (s, p) in self.sums.iter_mut().zip(old) {
                *s -= f64::from(p);
            }
        }
        let n = self.raw.len() as f64;
        self.smoothed
            .push_back(self.sums.iter().map(|s| s / n).collect());
        if self.smoothed.len() > self.window {
            self.smoothed.pop_front();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.raw.clear();
        self.sums.fill(0.0);
        self.smoothed.clear();
    }

    /// Smoothed posterior history, oldest first, at most `window` frames.
    pub fn smoothed_window(&self) -> &VecDeque<Vec<f64>> {
        &self.smoothed
    }
}

/// Largest product of smoothed posteriors over in-order time assignments
/// `t_1 <= ... <= t_K` within the window, taken to the 1/K power so scores
/// stay threshold-comparable across keyword lengths (a monotone transform,
/// so ROC ordering is unaffected).
pub fn smoothed_keyword_score(smoother: &PosteriorSmoother, class_sequence: &[usize]) -> f64 {
    score_window(smoother.smoothed_window().iter(), class_sequence)
}

fn score_window<'a>(
    window: impl Iterator<Item = &'a Vec<f64>>,
    class_sequence: &[usize],
) -> f64 {
    let k = class_sequence.len();
    assert!(k > 0, "keyword class sequence must be non-empty");
    // best[j] = largest product assigning the first j components so far.
    let mut best = vec![0.0f64; k + 1];
    best[0] = 1.0;
    let mut saw_frame = false;
    for frame in window {
        saw_frame = true;
        for j in 1..=k {
            let candidate = best[j - 1] * frame[class_sequence[j - 1]];
            if candidate > best[j] {
                best[j] = candidate;
            }
        }
    }
    if !saw_frame {
        return 0.0;
    }
    best[k].powf(1.0 / k as f64)
}

/// Reference recomputation of the smoothed-posterior score from the full raw
/// posterior history: smooth each frame over its trailing window from
/// scratch, keep the last `window` frames, and run the same assignment
/// search. The incremental path must match this at every step.
pub fn batch_smoothed_score(
    raw_posteriors: &[Vec<f32>],
    class_sequence: &[usize],
    window: usize,
) -> f64 {
    let window = window.max(1);
    let n = raw_posteriors.len();
    if n == 0 {
        return 0.0;
    }
    let classes = raw_posteriors[0].len();
    let smoothed: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let start = t + 1 - window.min(t + 1);
            let span = &raw_posteriors[start..=t];
            (0..classes)
                .map(|c| {
                    span.iter().map(|p| f64::from(p[c])).sum::<f64>() / span.len() as f64
                })
                .collect()
        })
        .collect();
    let start = n - window.min(n);
    score_window(smoothed[start..].iter(), class_sequence)
}

/// Replay threshold detection over a finished score stream: an event fires at
/// the first point at or above the threshold, then further events are
/// suppressed for `suppression_ms`.
pub fn events_from_scores(
    scores: &[ScorePoint],
    threshold: f32,
    suppression_ms: u64,
) -> Vec<DetectionEvent> {
    let mut events = Vec::new();
    let mut suppressed_until: Option<u64> = None;
    for point in scores {
        if let Some(until) = suppressed_until {
            if point.timestamp_ms < until {
                continue;
            }
        }
        if point.score >= threshold {
            events.push(DetectionEvent {
                trigger_timestamp_ms: point.timestamp_ms,
                peak_score: point.score,
                threshold,
            });
            suppressed_until = Some(point.timestamp_ms.saturating_add(suppression_ms));
        }
    }
    events
}

/// How a model's outputs become a keyword likelihood.
#[derive(Debug, Clone)]
pub enum ScoreMethod {
    /// Binary softmax: the positive-class probability.
    PositiveClass,
    /// Subword softmax: smoothed posteriors scored over the keyword's class
    /// sequence within a sliding window.
    SmoothedPosterior {
        class_sequence: Vec<usize>,
        window: usize,
    },
}

impl ScoreMethod {
    /// Default smoothing window (frames) for the subword scorer.
    pub const DEFAULT_WINDOW: usize = 100;

    fn validate(&self, classes: usize) -> Result<()> {
        match self {
            ScoreMethod::PositiveClass => {
                if classes != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "positive-class scoring needs a binary softmax, model has {classes} classes"
                    )));
                }
            }
            ScoreMethod::SmoothedPosterior { class_sequence, window } => {
                if class_sequence.is_empty() || *window == 0 {
                    return Err(Error::InvalidArgument(
                        "smoothed scoring needs a class sequence and window".into(),
                    ));
                }
                if let Some(&bad) = class_sequence.iter().find(|&&c| c >= classes) {
                    return Err(Error::InvalidArgument(format!(
                        "class {bad} outside the model's {classes} classes"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Streaming detector: PCM in, score points and suppressed detection events
/// out. Owns the front-end state, the model's SVDF states, and the smoother;
/// share one immutable model across many detectors.
pub struct Detector<'m> {
    model: &'m Model,
    framer: Framer,
    frames: VecDeque<FeatureFrame>,
    /// Global frame index of `frames[0]`.
    frames_base: usize,
    next_center: usize,
    states: Vec<Option<SvdfState>>,
    smoother: Option<PosteriorSmoother>,
    method: ScoreMethod,
    threshold: f32,
    suppression_ms: u64,
    suppressed_until: Option<u64>,
}

impl<'m> Detector<'m> {
    pub fn new(
        model: &'m Model,
        mel: MelConfig,
        method: ScoreMethod,
        threshold: f32,
        suppression_ms: u64,
    ) -> Result<Detector<'m>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {threshold} must lie strictly inside (0, 1)"
            )));
        }
        method.validate(model.output_classes())?;
        let smoother = match &method {
            ScoreMethod::PositiveClass => None,
            ScoreMethod::SmoothedPosterior { window, .. } => {
                Some(PosteriorSmoother::new(model.output_classes(), *window))
            }
        };
        let next_center = model.config().context.left;
        Ok(Detector {
            model,
            framer: Framer::new(mel)?,
            frames: VecDeque::new(),
            frames_base: 0,
            next_center,
            states: model.new_states(),
            smoother,
            method,
            threshold,
            suppression_ms,
            suppressed_until: None,
        })
    }

    /// Feed PCM; returns the score points and events completed by it.
    pub fn push(&mut self, pcm: &[f32]) -> Result<(Vec<ScorePoint>, Vec<DetectionEvent>)> {
        let new_frames = self.framer.push(pcm)?;
        self.frames.extend(new_frames);

        let ctx = self.model.config().context;
        let dim = self.model.config().feature_dim;
        let mut points = Vec::new();
        let mut events = Vec::new();
        while self.next_center + ctx.right < self.frames_base + self.frames.len() {
            let center_local = self.next_center - self.frames_base;
            let mut values = Vec::with_capacity(dim * ctx.frames_per_input());
            for i in center_local - ctx.left..=center_local + ctx.right {
                values.extend_from_slice(&self.frames[i].values);
            }
            let timestamp_ms = self.frames[center_local].timestamp_ms;

            let output = self.model.forward_stream(&mut self.states, &values)?;
            let score = match (&self.method, &mut self.smoother) {
                (ScoreMethod::PositiveClass, _) => e2e_score(&output),
                (ScoreMethod::SmoothedPosterior { class_sequence, .. }, Some(smoother)) => {
                    smoother.push(&output)?;
                    smoothed_keyword_score(smoother, class_sequence) as f32
                }
                _ => unreachable!("smoother presence matches method"),
            };
            let point = ScorePoint { timestamp_ms, score };
            points.push(point);

            let suppressed = self
                .suppressed_until
                .is_some_and(|until| timestamp_ms < until);
            if !suppressed && score >= self.threshold {
                events.push(DetectionEvent {
                    trigger_timestamp_ms: timestamp_ms,
                    peak_score: score,
                    threshold: self.threshold,
                });
                self.suppressed_until = Some(timestamp_ms.saturating_add(self.suppression_ms));
            }

            self.next_center += ctx.stride;
            // Frames older than the next window's left edge are done.
            let keep_from = self.next_center.saturating_sub(ctx.left);
            while self.frames_base < keep_from && !self.frames.is_empty() {
                self.frames.pop_front();
                self.frames_base += 1;
            }
        }
        Ok((points, events))
    }

    /// Clear all stream state for a new utterance.
    pub fn reset(&mut self) {
        self.framer.reset();
        self.frames.clear();
        self.frames_base = 0;
        self.next_center = self.model.config().context.left;
        crate::nnet::reset_states(&mut self.states);
        if let Some(s) = &mut self.smoother {
            s.reset();
        }
        self.suppressed_until = None;
    }
}

/// Score a complete PCM buffer without event extraction (for evaluation
/// sweeps that replay thresholds over cached streams).
pub fn score_stream(
    model: &Model,
    pcm: &[f32],
    mel: MelConfig,
    method: ScoreMethod,
) -> Result<Vec<ScorePoint>> {
    let mut detector = Detector::new(model, mel, method, 0.5, u64::MAX)?;
    let (points, _) = detector.push(pcm)?;
    Ok(points)
}

/// One-shot detection over a complete PCM buffer.
pub fn detect_stream(
    model: &Model,
    pcm: &[f32],
    mel: MelConfig,
    method: ScoreMethod,
    threshold: f32,
    suppression_ms: u64,
) -> Result<(Vec<ScorePoint>, Vec<DetectionEvent>)> {
    let mut detector = Detector::new(model, mel, method, threshold, suppression_ms)?;
    detector.push(pcm)
}
