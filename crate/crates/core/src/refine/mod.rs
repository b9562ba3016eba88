//! The five-stage refinement pipeline.
//!
//! Stages run in a fixed order: candidate selection across separated stems,
//! bass-driven correction, key-driven correction against the runner-up
//! candidate, two-step anomaly detection and repair, and beat-grid
//! alignment. Stages 1 to 4 delegate their judgment calls to a
//! [`Reasoner`]; the orchestration here enforces the stage contracts
//! (span preservation, vocabulary, every change traced) whatever the
//! backend returns.

mod config;
pub mod llm;
pub mod rulebook;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    AnomalySection, Backend, BassSection, ConfigError, LlmSection, PipelineSection, RefinementConfig,
    SelectionSection, StageSet,
};

use crate::beat_align::{build_grid, snap_timeline, SnapReport};
use crate::gateway::{ChatClient, Role, Transport};
use crate::harte::{in_vocabulary, ChordLabel, PitchClass};
use crate::theory::{Key, KeyTimeline};
use crate::timeline::{co_partition, Segment, Timeline, TimelineError};

pub type ChordTimeline = Timeline<ChordLabel>;
/// Bass-stem pitch classes; `None` where the stem is silent.
pub type BassTimeline = Timeline<Option<PitchClass>>;
pub type BeatTimeline = Timeline<u32>;

/// Chord timelines of one song may disagree on their span by at most this
/// much before loading fails.
pub const MAX_SPAN_DISAGREEMENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Mss,
    BassCorrection,
    KeyCorrection,
    AnomalyDetection,
    BeatAlignment,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::Mss,
        StageId::BassCorrection,
        StageId::KeyCorrection,
        StageId::AnomalyDetection,
        StageId::BeatAlignment,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<StageId> {
        StageId::ALL.get((n as usize).checked_sub(1)?).copied()
    }

    /// Row name used in reports.
    pub fn title(self) -> &'static str {
        match self {
            StageId::Mss => "MSS",
            StageId::BassCorrection => "Bass Correction",
            StageId::KeyCorrection => "Key Correction",
            StageId::AnomalyDetection => "Anomaly Detection",
            StageId::BeatAlignment => "Beat Alignment",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} ({})", self.number(), self.title())
    }
}

/// Which separated mix a chord estimate was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    FullMix,
    NoDrums,
    NoDrumsVocals,
}

impl Track {
    /// Tie-break priority order.
    pub const ALL: [Track; 3] = [Track::FullMix, Track::NoDrums, Track::NoDrumsVocals];

    pub fn name(self) -> &'static str {
        match self {
            Track::FullMix => "full_mix",
            Track::NoDrums => "no_drums",
            Track::NoDrumsVocals => "no_drums_vocals",
        }
    }

    pub fn from_name(name: &str) -> Option<Track> {
        Track::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("song {song}: missing {track} chord track")]
    MissingTrack { song: String, track: &'static str },
    #[error("span mismatch: {0}")]
    SpanMismatch(#[from] TimelineError),
    #[error("anomaly report does not match the timeline: {0}")]
    ReportMismatch(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: StageId,
        #[source]
        source: Box<RefineError>,
    },
}

impl RefineError {
    fn at(self, stage: StageId) -> RefineError {
        match self {
            e @ RefineError::Stage { .. } => e,
            e => RefineError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

/// Every input the pipeline consumes for one song.
#[derive(Debug, Clone)]
pub struct SongBundle {
    pub id: String,
    pub acr_full: Option<ChordTimeline>,
    pub acr_nodrums: Option<ChordTimeline>,
    pub acr_nodrumsvocals: Option<ChordTimeline>,
    pub bass: Option<BassTimeline>,
    pub keys: Option<KeyTimeline>,
    pub beats: Option<BeatTimeline>,
    /// Ground truth, used only for evaluation.
    pub reference: Option<ChordTimeline>,
}

impl SongBundle {
    pub fn new(id: impl Into<String>) -> Self {
        SongBundle {
            id: id.into(),
            acr_full: None,
            acr_nodrums: None,
            acr_nodrumsvocals: None,
            bass: None,
            keys: None,
            beats: None,
            reference: None,
        }
    }

    pub fn candidate(&self, track: Track) -> Option<&ChordTimeline> {
        match track {
            Track::FullMix => self.acr_full.as_ref(),
            Track::NoDrums => self.acr_nodrums.as_ref(),
            Track::NoDrumsVocals => self.acr_nodrumsvocals.as_ref(),
        }
    }

    /// Brings all chord candidates, bass and keys onto one span (that of the
    /// first present candidate, full mix preferred). Chord and bass gaps are
    /// padded with no-chord, keys are stretched.
    pub fn aligned(mut self) -> Result<Self, RefineError> {
        let Some(anchor) = Track::ALL.iter().find_map(|&t| self.candidate(t)) else {
            return Ok(self);
        };
        let (start, end) = anchor.span();
        for track in Track::ALL {
            if let Some(t) = self.candidate(track) {
                if (t.start() - start).abs() > MAX_SPAN_DISAGREEMENT || (t.end() - end).abs() > MAX_SPAN_DISAGREEMENT {
                    return Err(RefineError::SpanMismatch(anchor.span_mismatch(t)));
                }
            }
        }
        let conform = |t: &mut Option<ChordTimeline>| {
            if let Some(x) = t.as_mut() {
                *x = x.conform(start, end, Some(ChordLabel::NoChord));
            }
        };
        conform(&mut self.acr_full);
        conform(&mut self.acr_nodrums);
        conform(&mut self.acr_nodrumsvocals);
        if let Some(b) = self.bass.as_mut() {
            *b = b.conform(start, end, Some(None));
        }
        if let Some(k) = self.keys.as_mut() {
            *k = k.conform(start, end, None);
        }
        Ok(self)
    }
}

/// One step of a reasoner's work, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Rule {
        rule: String,
        start: f64,
        end: f64,
        detail: String,
    },
    Message {
        role: Role,
        content: String,
    },
    Note {
        text: String,
    },
}

impl TranscriptEntry {
    pub fn note(text: impl Into<String>) -> Self {
        TranscriptEntry::Note { text: text.into() }
    }

    pub fn rule(rule: &str, start: f64, end: f64, detail: impl Into<String>) -> Self {
        TranscriptEntry::Rule {
            rule: rule.to_string(),
            start,
            end,
            detail: detail.into(),
        }
    }
}

/// A reason attached to a time range of a proposed timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeNote {
    pub start: f64,
    pub end: f64,
    pub reason: String,
}

/// A stage's proposed output.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub timeline: ChordTimeline,
    pub notes: Vec<ChangeNote>,
    pub transcript: Vec<TranscriptEntry>,
    /// Set when the reasoner decided the stage should not apply.
    pub skip_reason: Option<String>,
}

impl Proposal {
    pub fn unchanged(timeline: &ChordTimeline, reason: impl Into<String>, transcript: Vec<TranscriptEntry>) -> Self {
        Proposal {
            timeline: timeline.clone(),
            notes: Vec::new(),
            transcript,
            skip_reason: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub primary: Track,
    pub secondary: Track,
    /// Per-candidate score, lower is better (rulebook only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<(Track, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyCategory {
    /// A chord neither diatonic nor a recognised borrowing.
    OutOfKey,
    /// A short no-chord gap between identical chords.
    SuspiciousN,
    Other,
}

impl AnomalyCategory {
    pub fn token(self) -> &'static str {
        match self {
            AnomalyCategory::OutOfKey => "OUT_OF_KEY",
            AnomalyCategory::SuspiciousN => "SUSPICIOUS_N",
            AnomalyCategory::Other => "OTHER",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        [AnomalyCategory::OutOfKey, AnomalyCategory::SuspiciousN, AnomalyCategory::Other]
            .into_iter()
            .find(|c| c.token() == token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub start: f64,
    pub end: f64,
    pub label: ChordLabel,
    pub category: AnomalyCategory,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub entries: Vec<Anomaly>,
}

impl AnomalyReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every entry must name an existing interval of `timeline` with the same
    /// label.
    pub fn check_against(&self, timeline: &ChordTimeline) -> Result<(), RefineError> {
        for a in &self.entries {
            let hit = timeline.segments().iter().any(|s| {
                (s.start - a.start).abs() <= 1e-6 && (s.end - a.end).abs() <= 1e-6 && s.label == a.label
            });
            if !hit {
                return Err(RefineError::ReportMismatch(format!(
                    "no interval {:.3}-{:.3} labeled {} in the current timeline",
                    a.start, a.end, a.label
                )));
            }
        }
        Ok(())
    }
}

/// A reasoner failed to produce a usable answer; the stage falls back to
/// its input.
#[derive(Debug, Clone)]
pub struct ReasonerFailure {
    pub message: String,
    pub transcript: Vec<TranscriptEntry>,
}

/// The judgment calls of stages 1 to 4.
pub trait Reasoner: Send + Sync {
    fn name(&self) -> &'static str;

    fn select(
        &self,
        candidates: &[(Track, &ChordTimeline)],
        keys: Option<&KeyTimeline>,
    ) -> Result<(Selection, Vec<TranscriptEntry>), ReasonerFailure>;

    fn bass_correct(
        &self,
        current: &ChordTimeline,
        bass: &BassTimeline,
        keys: &KeyTimeline,
    ) -> Result<Proposal, ReasonerFailure>;

    fn key_correct(
        &self,
        current: &ChordTimeline,
        secondary: &ChordTimeline,
        keys: &KeyTimeline,
    ) -> Result<Proposal, ReasonerFailure>;

    fn detect_anomalies(
        &self,
        current: &ChordTimeline,
        keys: &KeyTimeline,
    ) -> Result<(AnomalyReport, Vec<TranscriptEntry>), ReasonerFailure>;

    fn apply_anomalies(
        &self,
        current: &ChordTimeline,
        report: &AnomalyReport,
        keys: &KeyTimeline,
    ) -> Result<Proposal, ReasonerFailure>;
}

/// A changed stretch of time between a stage's input and output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub start: f64,
    pub end: f64,
    pub old: ChordLabel,
    pub new: ChordLabel,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: StageId,
    pub title: String,
    /// SHA-256 of the stage's serialized inputs.
    pub input_digest: String,
    pub output: ChordTimeline,
    pub diffs: Vec<DiffEntry>,
    pub transcript: Vec<TranscriptEntry>,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomalies: Option<AnomalyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snap: Option<SnapReport>,
}

impl StageTrace {
    fn new(stage: StageId, digest: String, output: ChordTimeline) -> Self {
        StageTrace {
            stage,
            title: stage.title().to_string(),
            input_digest: digest,
            output,
            diffs: Vec::new(),
            transcript: Vec::new(),
            skipped: false,
            skip_reason: None,
            failure: None,
            selection: None,
            anomalies: None,
            snap: None,
        }
    }

    fn skipped(stage: StageId, digest: String, output: ChordTimeline, reason: impl Into<String>) -> Self {
        let mut t = StageTrace::new(stage, digest, output);
        t.skipped = true;
        t.skip_reason = Some(reason.into());
        t
    }
}

// Digest of the lab serialization of each input, in order.
fn digest(parts: &[String]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

fn lab<L: fmt::Display>(t: &Timeline<L>) -> String {
    t.to_lab()
}

fn bass_lab(t: &BassTimeline) -> String {
    crate::timeline::write_lab(t, |b| b.map_or_else(|| "N".to_string(), |p| p.to_string()))
}

/// Labels changed between `input` and `output`, with the reason of the
/// overlapping note when there is one.
pub fn diff_timelines(input: &ChordTimeline, output: &ChordTimeline, notes: &[ChangeNote]) -> Result<Vec<DiffEntry>, TimelineError> {
    let mut diffs: Vec<DiffEntry> = Vec::new();
    for piece in co_partition(input, output)? {
        if piece.a == piece.b {
            continue;
        }
        if let Some(last) = diffs.last_mut() {
            if last.end == piece.start && last.old == *piece.a && last.new == *piece.b {
                last.end = piece.end;
                continue;
            }
        }
        let reason = notes
            .iter()
            .find(|n| n.start < piece.end && n.end > piece.start)
            .map(|n| n.reason.clone())
            .unwrap_or_else(|| "changed by reasoner".to_string());
        diffs.push(DiffEntry {
            start: piece.start,
            end: piece.end,
            old: *piece.a,
            new: *piece.b,
            reason,
        });
    }
    Ok(diffs)
}

/// Enforces the contract on a stage output: exact input span, vocabulary
/// labels only, adjacent duplicates merged.
fn settle(input: &ChordTimeline, proposed: &ChordTimeline) -> Result<ChordTimeline, String> {
    const SPAN_SLACK: f64 = 0.01;
    if (proposed.start() - input.start()).abs() > SPAN_SLACK || (proposed.end() - input.end()).abs() > SPAN_SLACK {
        return Err(format!(
            "output span {:.3}-{:.3} does not match input span {:.3}-{:.3}",
            proposed.start(),
            proposed.end(),
            input.start(),
            input.end()
        ));
    }
    if let Some(bad) = proposed.segments().iter().find(|s| !in_vocabulary(&s.label)) {
        return Err(format!("label {} is outside the chord vocabulary", bad.label));
    }
    Ok(proposed.conform(input.start(), input.end(), None).normalize())
}

fn finish_stage(stage: StageId, digest: String, input: &ChordTimeline, result: Result<Proposal, ReasonerFailure>) -> (ChordTimeline, StageTrace) {
    match result {
        Err(failure) => {
            log::warn!("{stage}: reasoner failed, keeping input: {}", failure.message);
            let mut trace = StageTrace::skipped(stage, digest, input.clone(), "reasoner failure");
            trace.failure = Some(failure.message);
            trace.transcript = failure.transcript;
            (input.clone(), trace)
        }
        Ok(proposal) => {
            if let Some(reason) = proposal.skip_reason {
                let mut trace = StageTrace::skipped(stage, digest, input.clone(), reason);
                trace.transcript = proposal.transcript;
                return (input.clone(), trace);
            }
            let output = match settle(input, &proposal.timeline) {
                Ok(t) => t,
                Err(problem) => {
                    let mut trace = StageTrace::skipped(stage, digest, input.clone(), "invalid reasoner output");
                    trace.failure = Some(problem);
                    trace.transcript = proposal.transcript;
                    return (input.clone(), trace);
                }
            };
            let diffs = diff_timelines(input, &output, &proposal.notes).expect("settled output keeps the input span");
            let mut trace = StageTrace::new(stage, digest, output.clone());
            trace.diffs = diffs;
            trace.transcript = proposal.transcript;
            (output, trace)
        }
    }
}

/// Stage 1: pick the primary and runner-up chord estimates among the three
/// stems. Outputs are verbatim copies of the chosen inputs.
pub fn stage1_select(
    bundle: &SongBundle,
    reasoner: &dyn Reasoner,
) -> Result<(ChordTimeline, ChordTimeline, StageTrace), RefineError> {
    let mut candidates = Vec::with_capacity(3);
    for track in Track::ALL {
        let t = bundle.candidate(track).ok_or_else(|| RefineError::MissingTrack {
            song: bundle.id.clone(),
            track: track.name(),
        })?;
        candidates.push((track, t));
    }
    let dig = digest(&candidates.iter().map(|(_, t)| lab(t)).collect::<Vec<_>>());

    let (selection, transcript, failure) = match reasoner.select(&candidates, bundle.keys.as_ref()) {
        Ok((s, tr)) if s.primary != s.secondary => (s, tr, None),
        Ok((_, tr)) => (fallback_selection(), tr, Some("primary and secondary must differ".to_string())),
        Err(f) => (fallback_selection(), f.transcript, Some(f.message)),
    };
    let primary = bundle.candidate(selection.primary).expect("checked above").clone();
    let secondary = bundle.candidate(selection.secondary).expect("checked above").clone();
    let mut trace = StageTrace::new(StageId::Mss, dig, primary.clone());
    trace.transcript = transcript;
    if let Some(message) = failure {
        log::warn!("stage 1: selection failed, using priority order: {message}");
        trace.skipped = true;
        trace.skip_reason = Some("reasoner failure".into());
        trace.failure = Some(message);
    }
    trace.selection = Some(selection);
    Ok((primary, secondary, trace))
}

fn fallback_selection() -> Selection {
    Selection {
        primary: Track::FullMix,
        secondary: Track::NoDrums,
        scores: Vec::new(),
    }
}

/// Stage 2: bass-stem driven root and inversion correction.
pub fn stage2_bass_correct(
    current: &ChordTimeline,
    bundle: &SongBundle,
    reasoner: &dyn Reasoner,
) -> Result<(ChordTimeline, StageTrace), RefineError> {
    let (Some(bass), Some(keys)) = (bundle.bass.as_ref(), bundle.keys.as_ref()) else {
        let dig = digest(&[lab(current)]);
        return Ok((
            current.clone(),
            StageTrace::skipped(StageId::BassCorrection, dig, current.clone(), "bass or key track missing"),
        ));
    };
    check_span(current, bass)?;
    check_span(current, keys)?;
    let dig = digest(&[lab(current), bass_lab(bass), lab(keys)]);
    let result = reasoner.bass_correct(current, bass, keys);
    Ok(finish_stage(StageId::BassCorrection, dig, current, result))
}

/// Stage 3: conservative key-driven correction using the runner-up estimate.
pub fn stage3_key_correct(
    current: &ChordTimeline,
    secondary: &ChordTimeline,
    keys: Option<&KeyTimeline>,
    reasoner: &dyn Reasoner,
) -> Result<(ChordTimeline, StageTrace), RefineError> {
    let Some(keys) = keys else {
        let dig = digest(&[lab(current), lab(secondary)]);
        return Ok((
            current.clone(),
            StageTrace::skipped(StageId::KeyCorrection, dig, current.clone(), "key track missing"),
        ));
    };
    check_span(current, secondary)?;
    check_span(current, keys)?;
    let dig = digest(&[lab(current), lab(secondary), lab(keys)]);
    let result = reasoner.key_correct(current, secondary, keys);
    let (output, mut trace) = finish_stage(StageId::KeyCorrection, dig, current, result);
    // Only time where current and runner-up disagree may change.
    let restricted = restrict_changes(current, &output, |t| {
        co_partition(current, secondary)
            .map(|ps| ps.iter().any(|p| p.a != p.b && p.start <= t && t < p.end))
            .unwrap_or(false)
    });
    if restricted != output {
        trace.transcript.push(TranscriptEntry::note(
            "reverted changes where current and runner-up agreed",
        ));
        trace.diffs = diff_timelines(current, &restricted, &[]).expect("same span");
        trace.output = restricted.clone();
    }
    Ok((restricted, trace))
}

/// Stage 4, first step: list suspicious intervals.
pub fn stage4_detect_anomalies(
    current: &ChordTimeline,
    keys: &KeyTimeline,
    reasoner: &dyn Reasoner,
) -> Result<(AnomalyReport, Vec<TranscriptEntry>), ReasonerFailure> {
    let (report, transcript) = reasoner.detect_anomalies(current, keys)?;
    report.check_against(current).map_err(|e| ReasonerFailure {
        message: e.to_string(),
        transcript: transcript.clone(),
    })?;
    Ok((report, transcript))
}

/// Stage 4, second step: repair the listed intervals. Changes outside them
/// are discarded.
pub fn stage4_apply(
    current: &ChordTimeline,
    report: &AnomalyReport,
    keys: &KeyTimeline,
    reasoner: &dyn Reasoner,
) -> Result<(ChordTimeline, StageTrace), RefineError> {
    report.check_against(current)?;
    check_span(current, keys)?;
    let dig = digest(&[lab(current), lab(keys), serde_json::to_string(report).expect("report serializes")]);
    if report.is_empty() {
        let mut trace = StageTrace::new(StageId::AnomalyDetection, dig, current.clone());
        trace.anomalies = Some(report.clone());
        return Ok((current.clone(), trace));
    }
    let result = reasoner.apply_anomalies(current, report, keys);
    let (output, mut trace) = finish_stage(StageId::AnomalyDetection, dig, current, result);
    let restricted = restrict_changes(current, &output, |t| {
        report.entries.iter().any(|a| a.start <= t && t < a.end)
    });
    if restricted != output {
        trace.transcript.push(TranscriptEntry::note("reverted changes outside reported intervals"));
        trace.diffs = diff_timelines(current, &restricted, &[]).expect("same span");
        trace.output = restricted.clone();
    }
    trace.anomalies = Some(report.clone());
    Ok((restricted, trace))
}

fn run_stage4(current: &ChordTimeline, keys: Option<&KeyTimeline>, reasoner: &dyn Reasoner) -> Result<(ChordTimeline, StageTrace), RefineError> {
    let Some(keys) = keys else {
        let dig = digest(&[lab(current)]);
        return Ok((
            current.clone(),
            StageTrace::skipped(StageId::AnomalyDetection, dig, current.clone(), "key track missing"),
        ));
    };
    check_span(current, keys)?;
    match stage4_detect_anomalies(current, keys, reasoner) {
        Ok((report, detect_transcript)) => {
            let (out, mut trace) = stage4_apply(current, &report, keys, reasoner)?;
            let mut transcript = detect_transcript;
            transcript.append(&mut trace.transcript);
            trace.transcript = transcript;
            Ok((out, trace))
        }
        Err(failure) => {
            let dig = digest(&[lab(current), lab(keys)]);
            let mut trace = StageTrace::skipped(StageId::AnomalyDetection, dig, current.clone(), "reasoner failure");
            trace.failure = Some(failure.message);
            trace.transcript = failure.transcript;
            Ok((current.clone(), trace))
        }
    }
}

/// Stage 5: snap chord boundaries to the sixteenth grid.
pub fn stage5_beat_align(current: &ChordTimeline, beats: Option<&BeatTimeline>, config: &RefinementConfig) -> (ChordTimeline, StageTrace) {
    let Some(beats) = beats else {
        let dig = digest(&[lab(current)]);
        return (
            current.clone(),
            StageTrace::skipped(StageId::BeatAlignment, dig, current.clone(), "beat track missing"),
        );
    };
    let dig = digest(&[lab(current), lab(beats)]);
    let grid = match build_grid(beats) {
        Ok(g) => g,
        Err(e) => {
            let mut trace = StageTrace::skipped(StageId::BeatAlignment, dig, current.clone(), "unusable beat track");
            trace.failure = Some(e.to_string());
            return (current.clone(), trace);
        }
    };
    let (out, report) = snap_timeline(current, &grid, &config.beat_align);
    let mut trace = StageTrace::new(StageId::BeatAlignment, dig, out.clone());
    if report.skipped {
        trace.skipped = true;
        trace.skip_reason = Some(format!(
            "{} of {} in-grid boundaries exceed the {:.3}s threshold",
            report.over_threshold,
            report.boundaries - report.outside_grid,
            config.beat_align.threshold
        ));
    }
    trace.diffs = diff_timelines(current, &out, &[ChangeNote {
        start: out.start(),
        end: out.end(),
        reason: "boundary snapped to sixteenth grid".into(),
    }])
    .expect("snapping keeps the span");
    trace.snap = Some(report);
    (out, trace)
}

fn check_span<L>(current: &ChordTimeline, other: &Timeline<L>) -> Result<(), RefineError> {
    if current.same_span(other) {
        Ok(())
    } else {
        Err(RefineError::SpanMismatch(current.span_mismatch(other)))
    }
}

/// Keeps `output` labels only at times where `allowed` holds; elsewhere the
/// input label is restored.
fn restrict_changes<F: Fn(f64) -> bool>(input: &ChordTimeline, output: &ChordTimeline, allowed: F) -> ChordTimeline {
    let pieces = co_partition(input, output).expect("outputs keep the input span");
    let segments: Vec<Segment<ChordLabel>> = pieces
        .iter()
        .map(|p| {
            let label = if p.a == p.b || allowed(0.5 * (p.start + p.end)) { *p.b } else { *p.a };
            Segment::new(p.start, p.end, label)
        })
        .collect();
    Timeline::new(segments).expect("pieces are contiguous").normalize()
}

/// Everything one pipeline run produced for a song.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub song_id: String,
    /// Index 0 is the full-mix estimate as given; index k is the output of
    /// stage k.
    pub snapshots: Vec<ChordTimeline>,
    pub traces: Vec<StageTrace>,
}

impl PipelineRun {
    pub fn final_timeline(&self) -> &ChordTimeline {
        self.snapshots.last().expect("pipeline always produces snapshots")
    }

    pub fn trace_json(&self, backend: &str) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            song_id: &'a str,
            backend: &'a str,
            stages: &'a [StageTrace],
        }
        serde_json::to_string_pretty(&Doc {
            song_id: &self.song_id,
            backend,
            stages: &self.traces,
        })
        .expect("traces serialize")
    }
}

/// Runs stages 1 to 5 in order over one song.
pub fn run_pipeline(bundle: &SongBundle, config: &RefinementConfig, reasoner: &dyn Reasoner) -> Result<PipelineRun, RefineError> {
    let enabled = |s: StageId| config.pipeline.stages.contains(s);
    let baseline = bundle.acr_full.clone().ok_or_else(|| RefineError::MissingTrack {
        song: bundle.id.clone(),
        track: Track::FullMix.name(),
    })?;
    let mut snapshots = vec![baseline.clone()];
    let mut traces = Vec::with_capacity(5);

    let (mut current, secondary) = if enabled(StageId::Mss) {
        let (p, s, trace) = stage1_select(bundle, reasoner).map_err(|e| e.at(StageId::Mss))?;
        traces.push(trace);
        (p, s)
    } else {
        let secondary = bundle.acr_nodrums.clone().unwrap_or_else(|| baseline.clone());
        let dig = digest(&[lab(&baseline)]);
        traces.push(StageTrace::skipped(StageId::Mss, dig, baseline.clone(), "disabled"));
        (baseline.clone(), secondary)
    };
    snapshots.push(current.clone());

    for stage in [StageId::BassCorrection, StageId::KeyCorrection, StageId::AnomalyDetection, StageId::BeatAlignment] {
        let started = std::time::Instant::now();
        let (next, trace) = if !enabled(stage) {
            let dig = digest(&[lab(&current)]);
            (current.clone(), StageTrace::skipped(stage, dig, current.clone(), "disabled"))
        } else {
            match stage {
                StageId::BassCorrection => stage2_bass_correct(&current, bundle, reasoner).map_err(|e| e.at(stage))?,
                StageId::KeyCorrection => {
                    stage3_key_correct(&current, &secondary, bundle.keys.as_ref(), reasoner).map_err(|e| e.at(stage))?
                }
                StageId::AnomalyDetection => run_stage4(&current, bundle.keys.as_ref(), reasoner).map_err(|e| e.at(stage))?,
                StageId::BeatAlignment => stage5_beat_align(&current, bundle.beats.as_ref(), config),
                StageId::Mss => unreachable!(),
            }
        };
        log::debug!(
            "song={} {} skipped={} changes={} elapsed_ms={}",
            bundle.id,
            stage,
            trace.skipped,
            trace.diffs.len(),
            started.elapsed().as_millis()
        );
        current = next;
        snapshots.push(current.clone());
        traces.push(trace);
    }

    Ok(PipelineRun {
        song_id: bundle.id.clone(),
        snapshots,
        traces,
    })
}

/// Builds the reasoner selected by `config`. The rulebook never touches
/// `transport`.
pub fn build_reasoner(config: &RefinementConfig, transport: Arc<dyn Transport>) -> Result<Arc<dyn Reasoner>, ConfigError> {
    match config.pipeline.backend {
        Backend::Rulebook => Ok(Arc::new(rulebook::Rulebook::new(config.clone()))),
        Backend::Llm => {
            let client = ChatClient::from_env(config.llm.gateway.clone(), transport);
            let prompts = llm::Prompts::load(config.llm.prompt_dir.as_deref())
                .map_err(|e| ConfigError::Invalid(format!("prompt templates: {e}")))?;
            Ok(Arc::new(llm::LlmReasoner::new(client, prompts, config.llm.retry_count)))
        }
    }
}

/// Duration-weighted majority label, ignoring `None`; ties go to the label
/// seen first.
pub(crate) fn majority<L: Copy + PartialEq>(pieces: impl IntoIterator<Item = (f64, Option<L>)>) -> Option<L> {
    let mut totals: Vec<(L, f64)> = Vec::new();
    for (d, label) in pieces {
        let Some(label) = label else { continue };
        match totals.iter_mut().find(|(l, _)| *l == label) {
            Some((_, t)) => *t += d,
            None => totals.push((label, d)),
        }
    }
    let mut best: Option<(L, f64)> = None;
    for (l, t) in totals {
        if best.is_none_or(|(_, bt)| t > bt) {
            best = Some((l, t));
        }
    }
    best.map(|(l, _)| l)
}

/// The key in force over most of `[start, end)`.
pub(crate) fn key_over(keys: &KeyTimeline, start: f64, end: f64) -> Option<Key> {
    let clipped = keys.clip(start, end)?;
    majority(clipped.segments().iter().map(|s| (s.duration(), Some(s.label))))
}
