//! Chat-model backend: one validated exchange per stage per song.

use std::io;
use std::path::Path;

use crate::gateway::{ChatClient, ChatMessage, GatewayError};
use crate::harte::{in_vocabulary, parse_chord};
use crate::theory::KeyTimeline;
use crate::timeline::{parse_lab, write_lab, GapPolicy};

use super::{
    bass_lab, Anomaly, AnomalyCategory, AnomalyReport, BassTimeline, ChordTimeline, Proposal, Reasoner,
    ReasonerFailure, Selection, Track, TranscriptEntry,
};

/// Allowed slack between the reply's span and the input span, in seconds.
pub const SPAN_SLACK: f64 = 0.01;

/// Prompt templates; `{{name}}` placeholders are filled per request.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompts {
    pub system: String,
    pub select: String,
    pub bass: String,
    pub key: String,
    pub detect: String,
    pub apply: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            system: include_str!("../../prompts/system.txt").to_string(),
            select: include_str!("../../prompts/select.txt").to_string(),
            bass: include_str!("../../prompts/bass.txt").to_string(),
            key: include_str!("../../prompts/key.txt").to_string(),
            detect: include_str!("../../prompts/detect.txt").to_string(),
            apply: include_str!("../../prompts/apply.txt").to_string(),
        }
    }
}

impl Prompts {
    /// Built-in templates, each replaced by `<dir>/<name>.txt` when present.
    pub fn load(dir: Option<&Path>) -> io::Result<Self> {
        let mut prompts = Prompts::default();
        let Some(dir) = dir else { return Ok(prompts) };
        for (name, slot) in [
            ("system", &mut prompts.system),
            ("select", &mut prompts.select),
            ("bass", &mut prompts.bass),
            ("key", &mut prompts.key),
            ("detect", &mut prompts.detect),
            ("apply", &mut prompts.apply),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        Ok(prompts)
    }
}

pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

// Models like to wrap answers in code fences.
fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a reply as a complete chord timeline over `[start, end]`.
pub fn parse_timeline_reply(reply: &str, start: f64, end: f64) -> Result<ChordTimeline, String> {
    let body = strip_fences(reply);
    let timeline = parse_lab(body, parse_chord, GapPolicy::Reject).map_err(|e| format!("not a valid lab timeline: {e}"))?;
    if (timeline.start() - start).abs() > SPAN_SLACK || (timeline.end() - end).abs() > SPAN_SLACK {
        return Err(format!(
            "the timeline must cover {start:.3} to {end:.3} seconds, but covers {:.3} to {:.3}",
            timeline.start(),
            timeline.end()
        ));
    }
    if let Some(bad) = timeline.segments().iter().find(|s| !in_vocabulary(&s.label)) {
        return Err(format!("label {} at {:.3}s is not an allowed chord", bad.label, bad.start));
    }
    Ok(timeline.conform(start, end, None))
}

pub fn parse_selection_reply(reply: &str) -> Result<Selection, String> {
    let mut primary = None;
    let mut secondary = None;
    for line in strip_fences(reply).lines() {
        let Some((field, value)) = line.split_once(':') else { continue };
        let slot = match field.trim().to_ascii_uppercase().as_str() {
            "PRIMARY" => &mut primary,
            "SECONDARY" => &mut secondary,
            _ => continue,
        };
        let value = value.trim().trim_matches(|c: char| c == '*' || c == '`');
        *slot = Some(Track::from_name(value).ok_or_else(|| format!("unknown candidate {value:?}"))?);
    }
    match (primary, secondary) {
        (Some(p), Some(s)) if p != s => Ok(Selection {
            primary: p,
            secondary: s,
            scores: Vec::new(),
        }),
        (Some(_), Some(_)) => Err("PRIMARY and SECONDARY must name different candidates".into()),
        _ => Err("expected a PRIMARY line and a SECONDARY line".into()),
    }
}

/// Parses `ANOMALY <start> <end> <label> <category> <reason>` lines or `NONE`.
/// Each entry must match an interval of `current`.
pub fn parse_anomaly_reply(reply: &str, current: &ChordTimeline) -> Result<AnomalyReport, String> {
    let body = strip_fences(reply);
    if body.eq_ignore_ascii_case("none") {
        return Ok(AnomalyReport::default());
    }
    let mut entries = Vec::new();
    for (n, line) in body.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(6, char::is_whitespace).collect();
        if fields.len() < 5 || fields[0] != "ANOMALY" {
            return Err(format!("line {n} is not an ANOMALY line: {line:?}"));
        }
        let time = |s: &str| s.parse::<f64>().map_err(|_| format!("line {n}: bad time {s:?}"));
        let (start, end) = (time(fields[1])?, time(fields[2])?);
        let label = parse_chord(fields[3]).map_err(|e| format!("line {n}: {e}"))?;
        let category = AnomalyCategory::from_token(fields[4]).ok_or_else(|| format!("line {n}: unknown category {:?}", fields[4]))?;
        let segment = current
            .segments()
            .iter()
            .find(|s| (s.start - start).abs() <= SPAN_SLACK && (s.end - end).abs() <= SPAN_SLACK && s.label == label)
            .ok_or_else(|| format!("line {n}: no segment {start:.3}-{end:.3} labeled {label} in the timeline"))?;
        entries.push(Anomaly {
            start: segment.start,
            end: segment.end,
            label,
            category,
            reason: fields.get(5).map_or("", |r| r.trim()).to_string(),
        });
    }
    Ok(AnomalyReport { entries })
}

fn report_text(report: &AnomalyReport) -> String {
    report
        .entries
        .iter()
        .map(|a| format!("ANOMALY {:.6} {:.6} {} {} {}\n", a.start, a.end, a.label, a.category.token(), a.reason))
        .collect()
}

fn keys_lab(keys: Option<&KeyTimeline>) -> String {
    keys.map_or_else(|| "(unknown)\n".to_string(), |k| write_lab(k, |key| key.to_string()))
}

fn to_transcript(messages: &[ChatMessage]) -> Vec<TranscriptEntry> {
    messages
        .iter()
        .map(|m| TranscriptEntry::Message {
            role: m.role,
            content: m.content.clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LlmReasoner {
    client: ChatClient,
    prompts: Prompts,
    retries: u32,
}

impl LlmReasoner {
    pub fn new(client: ChatClient, prompts: Prompts, retries: u32) -> Self {
        LlmReasoner { client, prompts, retries }
    }

    fn ask<T>(&self, user: String, validate: impl Fn(&str) -> Result<T, String>) -> Result<(T, Vec<TranscriptEntry>), ReasonerFailure> {
        let messages = vec![ChatMessage::system(self.prompts.system.clone()), ChatMessage::user(user)];
        let request = self.client.request(messages.clone());
        match self.client.complete_with_validation(&request, validate, self.retries) {
            Ok(v) => Ok((v.value, to_transcript(&v.transcript))),
            Err(error) => {
                let mut transcript = to_transcript(&messages);
                if let GatewayError::ValidationExhausted { attempts } = &error {
                    for a in attempts {
                        transcript.push(TranscriptEntry::Message {
                            role: crate::gateway::Role::Assistant,
                            content: a.response.clone(),
                        });
                        transcript.push(TranscriptEntry::note(format!("rejected: {}", a.error)));
                    }
                }
                Err(ReasonerFailure {
                    message: error.to_string(),
                    transcript,
                })
            }
        }
    }

    fn revise(&self, current: &ChordTimeline, user: String) -> Result<Proposal, ReasonerFailure> {
        let (start, end) = current.span();
        let (timeline, transcript) = self.ask(user, |reply| parse_timeline_reply(reply, start, end))?;
        Ok(Proposal {
            timeline,
            notes: Vec::new(),
            transcript,
            skip_reason: None,
        })
    }
}

impl Reasoner for LlmReasoner {
    fn name(&self) -> &'static str {
        "llm"
    }

    fn select(
        &self,
        candidates: &[(Track, &ChordTimeline)],
        keys: Option<&KeyTimeline>,
    ) -> Result<(Selection, Vec<TranscriptEntry>), ReasonerFailure> {
        let labs: Vec<(Track, String)> = candidates.iter().map(|(t, tl)| (*t, tl.to_lab())).collect();
        let keys = keys_lab(keys);
        let mut values: Vec<(&str, &str)> = labs.iter().map(|(t, lab)| (t.name(), lab.as_str())).collect();
        values.push(("keys", &keys));
        let present: Vec<Track> = candidates.iter().map(|(t, _)| *t).collect();
        self.ask(render(&self.prompts.select, &values), |reply| {
            let s = parse_selection_reply(reply)?;
            if present.contains(&s.primary) && present.contains(&s.secondary) {
                Ok(s)
            } else {
                Err("both choices must be among the given candidates".into())
            }
        })
    }

    fn bass_correct(&self, current: &ChordTimeline, bass: &BassTimeline, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        let (start, end) = current.span();
        let user = render(
            &self.prompts.bass,
            &[("chords", &current.to_lab()), ("bass", &bass_lab(bass)), ("keys", &keys_lab(Some(keys)))],
        );
        let (answer, transcript) = self.ask(user, |reply| {
            if strip_fences(reply).eq_ignore_ascii_case("BASS_UNRELIABLE") {
                Ok(None)
            } else {
                parse_timeline_reply(reply, start, end).map(Some)
            }
        })?;
        Ok(match answer {
            None => Proposal::unchanged(current, "bass stem unreliable", transcript),
            Some(timeline) => Proposal {
                timeline,
                notes: Vec::new(),
                transcript,
                skip_reason: None,
            },
        })
    }

    fn key_correct(&self, current: &ChordTimeline, secondary: &ChordTimeline, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        let user = render(
            &self.prompts.key,
            &[("chords", &current.to_lab()), ("secondary", &secondary.to_lab()), ("keys", &keys_lab(Some(keys)))],
        );
        self.revise(current, user)
    }

    fn detect_anomalies(&self, current: &ChordTimeline, keys: &KeyTimeline) -> Result<(AnomalyReport, Vec<TranscriptEntry>), ReasonerFailure> {
        let user = render(&self.prompts.detect, &[("chords", &current.to_lab()), ("keys", &keys_lab(Some(keys)))]);
        self.ask(user, |reply| parse_anomaly_reply(reply, current))
    }

    fn apply_anomalies(&self, current: &ChordTimeline, report: &AnomalyReport, keys: &KeyTimeline) -> Result<Proposal, ReasonerFailure> {
        let user = render(
            &self.prompts.apply,
            &[("chords", &current.to_lab()), ("keys", &keys_lab(Some(keys))), ("anomalies", &report_text(report))],
        );
        self.revise(current, user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harte::ChordLabel;
    use crate::timeline::{Segment, Timeline};

    fn current() -> ChordTimeline {
        Timeline::new(vec![
            Segment::new(0.0, 2.0, "C:maj".parse::<ChordLabel>().unwrap()),
            Segment::new(2.0, 4.0, "F#:maj".parse().unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn templates_have_their_placeholders() {
        let p = Prompts::default();
        for (t, names) in [
            (&p.select, &["keys", "full_mix", "no_drums", "no_drums_vocals"][..]),
            (&p.bass, &["chords", "bass", "keys"]),
            (&p.key, &["chords", "secondary", "keys"]),
            (&p.detect, &["chords", "keys"]),
            (&p.apply, &["chords", "keys", "anomalies"]),
        ] {
            for n in names {
                assert!(t.contains(&format!("{{{{{n}}}}}")), "missing {n}");
            }
        }
        assert_eq!(render("a {{x}} b {{x}}", &[("x", "1")]), "a 1 b 1");
    }

    #[test]
    fn timeline_replies() {
        let ok = "```\n0.0 2.0 C:maj\n2.0 4.005 F:maj\n```";
        let t = parse_timeline_reply(ok, 0.0, 4.0).unwrap();
        assert_eq!(t.end(), 4.0);
        assert!(parse_timeline_reply("0.0 2.0 C:maj\n2.0 3.5 F:maj\n", 0.0, 4.0).unwrap_err().contains("cover"));
        assert!(parse_timeline_reply("0.0 2.0 C:maj\n2.0 4.0 C:7/3\n", 0.0, 4.0).unwrap_err().contains("not an allowed"));
        assert!(parse_timeline_reply("0.0 1.0 C:maj\n2.0 4.0 F:maj\n", 0.0, 4.0).is_err());
        assert!(parse_timeline_reply("I think it is fine.", 0.0, 4.0).is_err());
    }

    #[test]
    fn selection_replies() {
        let s = parse_selection_reply("PRIMARY: no_drums\nSECONDARY: **full_mix**\n").unwrap();
        assert_eq!((s.primary, s.secondary), (Track::NoDrums, Track::FullMix));
        assert!(parse_selection_reply("PRIMARY: no_drums\nSECONDARY: no_drums").is_err());
        assert!(parse_selection_reply("PRIMARY: drums").is_err());
    }

    #[test]
    fn anomaly_replies() {
        let cur = current();
        assert!(parse_anomaly_reply("NONE", &cur).unwrap().is_empty());
        let r = parse_anomaly_reply("ANOMALY 2.000 4.000 F#:maj OUT_OF_KEY not in C major", &cur).unwrap();
        assert_eq!(r.entries[0].category, AnomalyCategory::OutOfKey);
        assert_eq!(r.entries[0].reason, "not in C major");
        assert!(parse_anomaly_reply("ANOMALY 1.0 4.0 F#:maj OUT_OF_KEY x", &cur).is_err());
        assert!(parse_anomaly_reply("ANOMALY 2.0 4.0 F#:maj WEIRD x", &cur).is_err());
    }
}
