//! Deterministic stand-in for the model's judgment at every stage.

use crate::harte::{is_vocabulary_shape, ChordLabel, PcSet};
use crate::theory::{diatonic_chord, diatonic_triads, is_diatonic, is_key_plausible, key_membership, scale_pitch_classes, Key, KeyTimeline};
use crate::timeline::{co_partition, label_proportion, Segment, Timeline};

use super::{
    key_over, majority, Anomaly, AnomalyCategory, AnomalyReport, BassTimeline, ChangeNote, ChordTimeline, Proposal,
    Reasoner, ReasonerFailure, RefinementConfig, Selection, Track, TranscriptEntry,
};

#[derive(Debug, Clone)]
pub struct Rulebook {
    config: RefinementConfig,
}

impl Rulebook {
    pub fn new(config: RefinementConfig) -> Self {
        Rulebook { config }
    }

    /// Lower is better: no-chord share plus weighted share of flicker time.
    pub fn candidate_score(&self, timeline: &ChordTimeline) -> f64 {
        let no_chord = label_proportion(timeline, ChordLabel::is_no_chord);
        let short = self.config.selection.flicker_max_duration;
        let flicker: f64 = timeline
            .segments()
            .iter()
            .filter(|s| s.duration() < short)
            .map(Segment::duration)
            .sum::<f64>()
            / timeline.duration();
        no_chord + self.config.selection.flicker_weight * flicker
    }

    /// Whether the bass stem is trustworthy enough to drive corrections.
    pub fn bass_reliable(&self, bass: &BassTimeline, keys: &KeyTimeline) -> Result<(), String> {
        let silent = label_proportion(bass, Option::is_none);
        if silent > self.config.bass.max_no_chord_fraction {
            return Err(format!(
                "bass is silent for {:.1}% of the song (limit {:.1}%)",
                silent * 100.0,
                self.config.bass.max_no_chord_fraction * 100.0
            ));
        }
        let mut voiced = 0.0;
        let mut in_key = 0.0;
        for o in co_partition(bass, keys).map_err(|e| e.to_string())? {
            if let Some(pc) = o.a {
                voiced += o.duration();
                if scale_pitch_classes(*o.b).contains(*pc) {
                    in_key += o.duration();
                }
            }
        }
        let fraction = if voiced > 0.0 { in_key / voiced } else { 0.0 };
        if fraction < self.config.bass.min_in_key_fraction {
            return Err(format!(
                "only {:.1}% of bass notes are in key (need {:.1}%)",
                fraction * 100.0,
                self.config.bass.min_in_key_fraction * 100.0
            ));
        }
        Ok(())
    }
}

/// Which of the four bass rules applies to a chord given its bass note.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BassRule {
    /// Bass is the root.
    RootInBass,
    /// Bass is another chord tone: invert.
    Inversion,
    /// Bass is a scale note outside the chord: re-root on it.
    Reroot,
    /// Bass is outside the key.
    OutOfScale,
}

impl BassRule {
    pub fn tag(self) -> &'static str {
        match self {
            BassRule::RootInBass => "bass(a)",
            BassRule::Inversion => "bass(b)",
            BassRule::Reroot => "bass(c)",
            BassRule::OutOfScale => "bass(d)",
        }
    }
}

/// Applies the bass rules to one chord; `None` for labels without a root.
pub fn apply_bass_rule(label: &ChordLabel, bass: crate::harte::PitchClass, key: Key) -> Option<(BassRule, ChordLabel)> {
    let chord = label.as_chord()?;
    if chord.pitch_classes().contains(bass) {
        if bass == chord.root {
            return Some((BassRule::RootInBass, *label));
        }
        let interval = chord.root.interval_to(bass);
        let out = if is_vocabulary_shape(chord.quality, interval) {
            ChordLabel::Chord(chord.with_bass_interval(interval))
        } else {
            *label
        };
        return Some((BassRule::Inversion, out));
    }
    match diatonic_chord(key, bass) {
        Ok(c) => Some((BassRule::Reroot, c)),
        Err(_) => Some((BassRule::OutOfScale, *label)),
    }
}

/// The diatonic triad of `key` sharing the most pitch classes with `label`,
/// if it shares at least two. Ties prefer the same root, then the lowest
/// root.
pub fn closest_diatonic_triad(label: &ChordLabel, key: Key) -> Option<ChordLabel> {
    let chord = label.as_chord()?;
    let pcs = chord.pitch_classes();
    let overlap = |set: PcSet| set.intersection(pcs).len();
    diatonic_triads(key)
        .into_iter()
        .filter(|t| overlap(t.pitch_classes()) >= 2)
        .min_by_key(|t| (std::cmp::Reverse(overlap(t.pitch_classes())), t.root != chord.root, t.root.value()))
        .map(ChordLabel::Chord)
}

impl Reasoner for Rulebook {
    fn name(&self) -> &'static str {
        "rulebook"
    }

    fn select(
        &self,
        candidates: &[(Track, &ChordTimeline)],
        _keys: Option<&KeyTimeline>,
    ) -> Result<(Selection, Vec<TranscriptEntry>), ReasonerFailure> {
        let mut scored: Vec<(usize, Track, f64)> = candidates
            .iter()
            .map(|&(track, t)| {
                let priority = Track::ALL.iter().position(|&x| x == track).unwrap_or(usize::MAX);
                (priority, track, self.candidate_score(t))
            })
            .collect();
        scored.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        if scored.len() < 2 {
            return Err(ReasonerFailure {
                message: "need at least two candidates".into(),
                transcript: Vec::new(),
            });
        }
        let transcript = scored
            .iter()
            .map(|&(_, track, score)| TranscriptEntry::note(format!("{}: score {score:.4}", track.name())))
            .collect();
        Ok((
            Selection {
                primary: scored[0].1,
                secondary: scored[1].1,
                scores: candidates
                    .iter()
                    .map(|&(track, _)| (track, scored.iter().find(|s| s.1 == track).expect("scored").2))
                    .collect(),
            },
            transcript,
        ))
    }

    fn bass_correct(&self, current: &ChordTimeline, bass: &BassTimeline, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        if let Err(reason) = self.bass_reliable(bass, keys) {
            return Ok(Proposal::unchanged(
                current,
                "bass stem unreliable",
                vec![TranscriptEntry::rule("bass-gate", current.start(), current.end(), reason)],
            ));
        }
        let mut transcript = Vec::new();
        let mut notes = Vec::new();
        let mut segments = Vec::with_capacity(current.len());
        for s in current.segments() {
            let mut label = s.label;
            let b = bass
                .clip(s.start, s.end)
                .and_then(|clip| majority(clip.segments().iter().map(|x| (x.duration(), x.label))));
            if let (Some(b), Some(key)) = (b, key_over(keys, s.start, s.end)) {
                if let Some((rule, out)) = apply_bass_rule(&s.label, b, key) {
                    let detail = format!("{} with bass {b} in {key} -> {out}", s.label);
                    transcript.push(TranscriptEntry::rule(rule.tag(), s.start, s.end, detail.clone()));
                    if out != s.label {
                        notes.push(ChangeNote {
                            start: s.start,
                            end: s.end,
                            reason: format!("{}: {detail}", rule.tag()),
                        });
                    }
                    label = out;
                }
            }
            segments.push(Segment::new(s.start, s.end, label));
        }
        Ok(Proposal {
            timeline: Timeline::new(segments).expect("same boundaries as input"),
            notes,
            transcript,
            skip_reason: None,
        })
    }

    fn key_correct(&self, current: &ChordTimeline, secondary: &ChordTimeline, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        let pieces = co_partition(current, secondary).map_err(|e| ReasonerFailure {
            message: e.to_string(),
            transcript: Vec::new(),
        })?;
        let mut transcript = Vec::new();
        let mut notes = Vec::new();
        let mut segments = Vec::with_capacity(pieces.len());
        for p in pieces {
            let mut label = *p.a;
            if p.a != p.b && p.a.as_chord().is_some() && p.b.as_chord().is_some() {
                if let Some(key) = key_over(keys, p.start, p.end) {
                    if !is_key_plausible(p.a, key) && is_diatonic(p.b, key) {
                        let detail = format!("{} is implausible in {key}; runner-up {} is diatonic", p.a, p.b);
                        transcript.push(TranscriptEntry::rule("key", p.start, p.end, detail.clone()));
                        notes.push(ChangeNote {
                            start: p.start,
                            end: p.end,
                            reason: detail,
                        });
                        label = *p.b;
                    }
                }
            }
            segments.push(Segment::new(p.start, p.end, label));
        }
        Ok(Proposal {
            timeline: Timeline::new(segments).expect("co-partition is contiguous"),
            notes,
            transcript,
            skip_reason: None,
        })
    }

    fn detect_anomalies(&self, current: &ChordTimeline, keys: &KeyTimeline) -> Result<(AnomalyReport, Vec<TranscriptEntry>), ReasonerFailure> {
        let segs = current.segments();
        let mut entries = Vec::new();
        for (i, s) in segs.iter().enumerate() {
            if s.label.is_no_chord() {
                let flanked = i > 0
                    && i + 1 < segs.len()
                    && segs[i - 1].label == segs[i + 1].label
                    && segs[i - 1].label.as_chord().is_some();
                if flanked && s.duration() < self.config.anomaly.max_fill_duration {
                    entries.push(Anomaly {
                        start: s.start,
                        end: s.end,
                        label: s.label,
                        category: AnomalyCategory::SuspiciousN,
                        reason: format!("{:.2}s gap between two {} chords", s.duration(), segs[i - 1].label),
                    });
                }
            } else if s.label.as_chord().is_some() {
                if let Some(key) = key_over(keys, s.start, s.end) {
                    if !is_key_plausible(&s.label, key) {
                        let outside: Vec<String> = s
                            .label
                            .as_chord()
                            .expect("checked")
                            .pitch_classes()
                            .iter()
                            .filter(|pc| !key_membership(key).contains(*pc))
                            .map(|pc| pc.to_string())
                            .collect();
                        entries.push(Anomaly {
                            start: s.start,
                            end: s.end,
                            label: s.label,
                            category: AnomalyCategory::OutOfKey,
                            reason: format!("{} is outside {key} ({}) and is no known borrowing", s.label, outside.join(",")),
                        });
                    }
                }
            }
        }
        let transcript = entries
            .iter()
            .map(|a| TranscriptEntry::rule(a.category.token(), a.start, a.end, a.reason.clone()))
            .collect();
        Ok((AnomalyReport { entries }, transcript))
    }

    fn apply_anomalies(&self, current: &ChordTimeline, report: &AnomalyReport, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        let segs = current.segments();
        let mut labels: Vec<ChordLabel> = segs.iter().map(|s| s.label).collect();
        let mut transcript = Vec::new();
        let mut notes = Vec::new();
        for a in &report.entries {
            let Some(i) = segs.iter().position(|s| (s.start - a.start).abs() <= 1e-6 && (s.end - a.end).abs() <= 1e-6) else {
                continue;
            };
            let replacement = match a.category {
                AnomalyCategory::SuspiciousN => (i > 0 && i + 1 < segs.len() && segs[i - 1].label == segs[i + 1].label)
                    .then(|| segs[i - 1].label),
                AnomalyCategory::OutOfKey => key_over(keys, a.start, a.end).and_then(|k| closest_diatonic_triad(&a.label, k)),
                AnomalyCategory::Other => None,
            };
            match replacement {
                Some(new) if new != segs[i].label => {
                    let detail = format!("{} -> {new}", segs[i].label);
                    transcript.push(TranscriptEntry::rule(a.category.token(), a.start, a.end, detail.clone()));
                    notes.push(ChangeNote {
                        start: a.start,
                        end: a.end,
                        reason: format!("{}: {}; {detail}", a.category.token(), a.reason),
                    });
                    labels[i] = new;
                }
                _ => transcript.push(TranscriptEntry::rule(a.category.token(), a.start, a.end, "left unchanged")),
            }
        }
        let segments = segs
            .iter()
            .zip(labels)
            .map(|(s, l)| Segment::new(s.start, s.end, l))
            .collect();
        Ok(Proposal {
            timeline: Timeline::new(segments).expect("same boundaries as input"),
            notes,
            transcript,
            skip_reason: None,
        })
    }
}
