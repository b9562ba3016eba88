//! Duration-weighted framewise chord evaluation.
//!
//! Six of the seven comparisons follow the semitone-bitmap encoding used by
//! the standard MIR evaluation toolkit: a chord becomes its root plus a
//! 12-bit mask of intervals above the root (tensions above the octave
//! dropped, bass note added). `N` has no root and an empty mask; `X` in the
//! reference is excluded everywhere. MIREX compares absolute pitch-class
//! sets and counts a frame correct when at least three are shared.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harte::{pitch_class_set, ChordLabel, PcSet, Quality};
use crate::parallel::{self, Execution};
use crate::timeline::{co_partition, Timeline};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no (reference, estimate) pairs to evaluate")]
    EmptyCorpus,
}

/// Metrics in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mirex,
    Root,
    Majmin,
    Thirds,
    Triads,
    Sevenths,
    Tetrads,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Mirex,
        Metric::Root,
        Metric::Majmin,
        Metric::Thirds,
        Metric::Triads,
        Metric::Sevenths,
        Metric::Tetrads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mirex => "MIREX",
            Metric::Root => "Root",
            Metric::Majmin => "Majmin",
            Metric::Thirds => "Thirds",
            Metric::Triads => "Triads",
            Metric::Sevenths => "Sevenths",
            Metric::Tetrads => "Tetrads",
        }
    }

    fn index(self) -> usize {
        Metric::ALL.iter().position(|&m| m == self).unwrap()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Correct,
    Incorrect,
    Excluded,
}

impl Outcome {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Correct
        } else {
            Outcome::Incorrect
        }
    }
}

/// Evaluation-side chord encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Encoded {
    /// -1 for `N` and `X`.
    root: i8,
    /// Intervals above the root; `None` for `X`.
    bits: Option<u16>,
}

const LOW_OCTAVE_MASK: u16 = 0x00ff; // semitones 0..=7
const MINOR_THIRD: u16 = 1 << 3;

fn encode(label: &ChordLabel) -> Encoded {
    match label {
        ChordLabel::NoChord => Encoded { root: -1, bits: Some(0) },
        ChordLabel::Unknown => Encoded { root: -1, bits: None },
        ChordLabel::Chord(c) => {
            let bits = c.quality.core_intervals().bits() | 1 << c.bass_interval;
            Encoded {
                root: c.root.value() as i8,
                bits: Some(bits),
            }
        }
    }
}

fn bits_of(q: Quality) -> u16 {
    q.core_intervals().bits()
}

fn masked_eq(a: Option<u16>, b: Option<u16>, mask: u16) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x & mask == y & mask,
        _ => false,
    }
}

/// Per-frame comparison of a reference label against an estimate.
pub fn compare(metric: Metric, reference: &ChordLabel, estimate: &ChordLabel) -> Outcome {
    if matches!(reference, ChordLabel::Unknown) {
        return Outcome::Excluded;
    }
    let r = encode(reference);
    let e = encode(estimate);
    let same_root = r.root == e.root;
    match metric {
        Metric::Root => Outcome::from_bool(same_root),
        Metric::Thirds => Outcome::from_bool(same_root && masked_eq(r.bits, e.bits, MINOR_THIRD)),
        Metric::Triads => Outcome::from_bool(same_root && masked_eq(r.bits, e.bits, LOW_OCTAVE_MASK)),
        Metric::Tetrads => Outcome::from_bool(same_root && r.bits == e.bits),
        Metric::Majmin => {
            let low = r.bits.unwrap_or(0) & LOW_OCTAVE_MASK;
            let in_gamut = low == bits_of(Quality::Maj)
                || low == bits_of(Quality::Min)
                || (r.root < 0 && r.bits == Some(0));
            if !in_gamut {
                return Outcome::Excluded;
            }
            Outcome::from_bool(same_root && masked_eq(r.bits, e.bits, LOW_OCTAVE_MASK))
        }
        Metric::Sevenths => {
            let bits = r.bits.unwrap_or(u16::MAX);
            let in_gamut = bits == 0
                || [Quality::Maj, Quality::Min, Quality::Maj7, Quality::Dom7, Quality::Min7]
                    .iter()
                    .any(|&q| bits_of(q) == bits);
            if !in_gamut {
                return Outcome::Excluded;
            }
            Outcome::from_bool(same_root && r.bits == e.bits)
        }
        Metric::Mirex => {
            let ref_set = pitch_class_set(reference);
            if (1..3).contains(&ref_set.len()) {
                return Outcome::Excluded;
            }
            if r.root < 0 && e.root < 0 {
                return Outcome::Correct;
            }
            Outcome::from_bool(ref_set.intersection(pitch_class_set(estimate)).len() >= 3)
        }
    }
}

/// Shared-pitch-class count used by the MIREX rule.
pub fn shared_pitch_classes(a: &ChordLabel, b: &ChordLabel) -> PcSet {
    pitch_class_set(a).intersection(pitch_class_set(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTally {
    /// Seconds judged correct.
    pub correct: f64,
    /// Seconds not excluded.
    pub evaluated: f64,
}

impl MetricTally {
    pub fn score(&self) -> Option<f64> {
        (self.evaluated > 0.0).then(|| (self.correct / self.evaluated).clamp(0.0, 1.0))
    }
}

/// Scores for all seven metrics, kept as durations so songs can be pooled.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalScores {
    tallies: [MetricTally; 7],
}

impl EvalScores {
    pub fn tally(&self, metric: Metric) -> MetricTally {
        self.tallies[metric.index()]
    }

    /// Fraction in [0, 1]; `None` when every frame was excluded.
    pub fn score(&self, metric: Metric) -> Option<f64> {
        self.tally(metric).score()
    }

    pub fn evaluated_duration(&self, metric: Metric) -> f64 {
        self.tally(metric).evaluated
    }

    fn add_segment(&mut self, duration: f64, reference: &ChordLabel, estimate: &ChordLabel) {
        for metric in Metric::ALL {
            let tally = &mut self.tallies[metric.index()];
            match compare(metric, reference, estimate) {
                Outcome::Correct => {
                    tally.correct += duration;
                    tally.evaluated += duration;
                }
                Outcome::Incorrect => tally.evaluated += duration,
                Outcome::Excluded => {}
            }
        }
    }

    pub fn merge(&mut self, other: &EvalScores) {
        for (a, b) in self.tallies.iter_mut().zip(other.tallies.iter()) {
            a.correct += b.correct;
            a.evaluated += b.evaluated;
        }
    }
}

/// Clips the estimate to the reference span and pads uncovered reference
/// time with `N`.
pub fn align_estimate(reference: &Timeline<ChordLabel>, estimate: &Timeline<ChordLabel>) -> Timeline<ChordLabel> {
    let (start, end) = reference.span();
    estimate.conform(start, end, Some(ChordLabel::NoChord))
}

pub fn evaluate_pair(reference: &Timeline<ChordLabel>, estimate: &Timeline<ChordLabel>) -> EvalScores {
    let aligned = align_estimate(reference, estimate);
    let mut scores = EvalScores::default();
    for piece in co_partition(reference, &aligned).expect("aligned spans match") {
        scores.add_segment(piece.duration(), piece.a, piece.b);
    }
    scores
}

/// Pools songs by total correct over total evaluated duration.
pub fn evaluate_corpus<R, E>(pairs: &[(R, E)], execution: Execution) -> Result<EvalScores, EvalError>
where
    R: Borrow<Timeline<ChordLabel>> + Sync,
    E: Borrow<Timeline<ChordLabel>> + Sync,
{
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_song = parallel::map(pairs, execution, |(r, e)| evaluate_pair(r.borrow(), e.borrow()));
    Ok(per_song.iter().fold(EvalScores::default(), |mut acc, s| {
        acc.merge(s);
        acc
    }))
}
