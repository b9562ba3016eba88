//! Song manifests and loading of the per-song lab files.
//!
//! A manifest is JSON:
//!
//! ```json
//! {
//!   "dataset": "demo",
//!   "songs": [
//!     {"id": "s01", "acr_full": "s01/full.lab", "acr_nodrums": "s01/nodrums.lab",
//!      "acr_nodrumsvocals": "s01/nodrumsvocals.lab", "bass": "s01/bass.lab",
//!      "keys": "s01/keys.lab", "beats": "s01/beats.lab", "reference": "s01/ref.lab"}
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beat_align::parse_beat_position;
use crate::harte::{bass_pitch_class, parse_chord, ChordLabel, PitchClass};
use crate::refine::{BassTimeline, BeatTimeline, ChordTimeline, RefineError, SongBundle};
use crate::theory::{parse_key, KeyTimeline};
use crate::timeline::{parse_lab, GapPolicy, LabError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Lab {
        path: PathBuf,
        #[source]
        source: LabError,
    },
    #[error("song {id}: {source}")]
    Song {
        id: String,
        #[source]
        source: RefineError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEntry {
    pub id: String,
    pub acr_full: PathBuf,
    pub acr_nodrums: PathBuf,
    pub acr_nodrumsvocals: PathBuf,
    pub bass: PathBuf,
    pub keys: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beats: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub songs: Vec<SongEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = read(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        for song in &manifest.songs {
            if song.id.trim().is_empty() || !seen.insert(song.id.as_str()) {
                return Err(CorpusError::Manifest {
                    path: path.to_path_buf(),
                    reason: format!("song ids must be unique and non-empty (offending id {:?})", song.id),
                });
            }
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Loads every input of `entry` and aligns their spans.
    pub fn load_song(&self, entry: &SongEntry) -> Result<SongBundle, CorpusError> {
        let chords = |p: &Path| load_with(&self.resolve(p), parse_chord_lab);
        let mut bundle = SongBundle::new(entry.id.clone());
        bundle.acr_full = Some(chords(&entry.acr_full)?);
        bundle.acr_nodrums = Some(chords(&entry.acr_nodrums)?);
        bundle.acr_nodrumsvocals = Some(chords(&entry.acr_nodrumsvocals)?);
        bundle.bass = Some(load_with(&self.resolve(&entry.bass), parse_bass_lab)?);
        bundle.keys = Some(load_with(&self.resolve(&entry.keys), parse_key_lab)?);
        if let Some(p) = &entry.beats {
            bundle.beats = Some(load_with(&self.resolve(p), parse_beat_lab)?);
        }
        if let Some(p) = &entry.reference {
            bundle.reference = Some(chords(p)?);
        }
        bundle.aligned().map_err(|source| CorpusError::Song {
            id: entry.id.clone(),
            source,
        })
    }

    /// Checks every file of every song; returns one line per problem
    /// (`<song>: <file>: line <n>: ...`), empty when clean.
    pub fn diagnose(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.songs.is_empty() {
            problems.push("manifest lists no songs".to_string());
        }
        for entry in &self.songs {
            let chords = |p: &Path| check(&self.resolve(p), parse_chord_lab);
            let mut files = vec![
                chords(&entry.acr_full),
                chords(&entry.acr_nodrums),
                chords(&entry.acr_nodrumsvocals),
                check(&self.resolve(&entry.bass), parse_bass_lab),
                check(&self.resolve(&entry.keys), parse_key_lab),
            ];
            if let Some(p) = &entry.beats {
                files.push(check(&self.resolve(p), parse_beat_lab));
            }
            if let Some(p) = &entry.reference {
                files.push(chords(p));
            }
            let errors: Vec<String> = files.into_iter().flatten().collect();
            if errors.is_empty() {
                if let Err(e) = self.load_song(entry) {
                    problems.push(format!("{}: {e}", entry.id));
                }
            }
            problems.extend(errors.into_iter().map(|e| format!("{}: {e}", entry.id)));
        }
        problems
    }
}

fn check<T>(path: &Path, parse: fn(&str) -> Result<T, LabError>) -> Option<String> {
    load_with(path, parse).err().map(|e| e.to_string())
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_with<T>(path: &Path, parse: fn(&str) -> Result<T, LabError>) -> Result<T, CorpusError> {
    parse(&read(path)?).map_err(|source| CorpusError::Lab {
        path: path.to_path_buf(),
        source,
    })
}

/// Chord lab; gaps become `N`.
pub fn parse_chord_lab(text: &str) -> Result<ChordTimeline, LabError> {
    parse_lab(text, parse_chord, GapPolicy::Fill(ChordLabel::NoChord))
}

/// Bass lab: a pitch-class name, `N`, or a chord label whose bass note is
/// taken.
pub fn parse_bass_lab(text: &str) -> Result<BassTimeline, LabError> {
    parse_lab(text, parse_bass_label, GapPolicy::Fill(None))
}

pub fn parse_bass_label(text: &str) -> Result<Option<PitchClass>, String> {
    if let Some(pc) = PitchClass::parse(text) {
        return Ok(Some(pc));
    }
    match parse_chord(text).map_err(|e| e.to_string())? {
        ChordLabel::Unknown => Ok(None),
        label => Ok(bass_pitch_class(&label)),
    }
}

/// Key lab (`C:maj`, `A:min`, ...); gaps extend the previous key.
pub fn parse_key_lab(text: &str) -> Result<KeyTimeline, LabError> {
    parse_lab(text, parse_key, GapPolicy::ExtendPrevious)
}

/// Beat lab: one row per beat, labeled with its position in the bar.
pub fn parse_beat_lab(text: &str) -> Result<BeatTimeline, LabError> {
    parse_lab(text, parse_beat_position, GapPolicy::ExtendPrevious)
}
