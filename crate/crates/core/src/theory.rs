//! Local keys and the harmonic predicates the refinement stages rely on.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::harte::{Chord, ChordLabel, PcSet, PitchClass, Quality};
use crate::timeline::{co_partition, Timeline, TimelineError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TheoryError {
    #[error("{root} is not a degree of {key}")]
    NotInScale { key: Key, root: PitchClass },
    #[error("malformed key label {0:?}")]
    MalformedKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    pub fn parallel(self) -> Mode {
        match self {
            Mode::Major => Mode::Minor,
            Mode::Minor => Mode::Major,
        }
    }

    fn steps(self) -> [u8; 7] {
        match self {
            Mode::Major => [0, 2, 4, 5, 7, 9, 11],
            Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub tonic: PitchClass,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: PitchClass, mode: Mode) -> Self {
        Key { tonic, mode }
    }

    pub fn major(tonic: u8) -> Self {
        Key::new(PitchClass::new(tonic), Mode::Major)
    }

    pub fn minor(tonic: u8) -> Self {
        Key::new(PitchClass::new(tonic), Mode::Minor)
    }

    pub fn parallel(self) -> Key {
        Key::new(self.tonic, self.mode.parallel())
    }

    pub fn transpose(self, semitones: i32) -> Key {
        Key::new(self.tonic.transpose(semitones), self.mode)
    }

    /// Scale degrees in ascending order from the tonic.
    pub fn degrees(self) -> [PitchClass; 7] {
        self.mode.steps().map(|s| self.tonic.transpose(s as i32))
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "maj",
            Mode::Minor => "min",
        };
        write!(f, "{}:{}", self.tonic, mode)
    }
}

/// Accepts `C:maj`, `A:min`, and the spelled-out `C major` / `A minor`.
pub fn parse_key(text: &str) -> Result<Key, TheoryError> {
    let bad = || TheoryError::MalformedKey(text.to_string());
    let text = text.trim();
    let (root, mode) = text
        .split_once(':')
        .or_else(|| text.split_once(' '))
        .ok_or_else(bad)?;
    let tonic = PitchClass::parse(root.trim()).ok_or_else(bad)?;
    let mode = match mode.trim() {
        "maj" | "major" => Mode::Major,
        "min" | "minor" => Mode::Minor,
        _ => return Err(bad()),
    };
    Ok(Key::new(tonic, mode))
}

impl FromStr for Key {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_key(s)
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_key(&text).map_err(serde::de::Error::custom)
    }
}

pub type KeyTimeline = Timeline<Key>;

/// The seven-note scale (natural minor for minor keys).
pub fn scale_pitch_classes(key: Key) -> PcSet {
    key.degrees().into_iter().collect()
}

/// Pitch classes accepted as "in key": the scale, plus the leading tone in
/// minor so harmonic-minor V and vii° are not flagged.
pub fn key_membership(key: Key) -> PcSet {
    let mut set = scale_pitch_classes(key);
    if key.mode == Mode::Minor {
        set.insert(key.tonic.transpose(11));
    }
    set
}

/// Triad stacked in scale thirds on `root`.
pub fn diatonic_chord(key: Key, root: PitchClass) -> Result<ChordLabel, TheoryError> {
    let degrees = key.degrees();
    let idx = degrees
        .iter()
        .position(|&d| d == root)
        .ok_or(TheoryError::NotInScale { key, root })?;
    let third = root.interval_to(degrees[(idx + 2) % 7]);
    let fifth = root.interval_to(degrees[(idx + 4) % 7]);
    let quality = match (third, fifth) {
        (4, 7) => Quality::Maj,
        (3, 7) => Quality::Min,
        (3, 6) => Quality::Dim,
        (4, 8) => Quality::Aug,
        _ => unreachable!("diatonic thirds are major or minor"),
    };
    Ok(ChordLabel::chord(root, quality))
}

/// The seven diatonic triads of `key`, tonic first.
pub fn diatonic_triads(key: Key) -> Vec<Chord> {
    key.degrees()
        .into_iter()
        .filter_map(|r| diatonic_chord(key, r).ok()?.as_chord())
        .collect()
}

/// Every sounding pitch class lies in the key. `N` and `X` are vacuously
/// diatonic.
pub fn is_diatonic(label: &ChordLabel, key: Key) -> bool {
    match label.as_chord() {
        Some(c) => c.pitch_classes().is_subset(key_membership(key)),
        None => true,
    }
}

/// Secondary dominants (major triad and dominant seventh a fifth above each
/// non-tonic degree whose triad is major or minor) and the triads of the
/// parallel mode, minus anything already diatonic. All in root position.
pub fn harmonic_exceptions(key: Key) -> BTreeSet<ChordLabel> {
    let mut out = BTreeSet::new();
    for target in diatonic_triads(key).into_iter().skip(1) {
        if !matches!(target.quality, Quality::Maj | Quality::Min) {
            continue;
        }
        let root = target.root.transpose(7);
        out.insert(ChordLabel::chord(root, Quality::Maj));
        out.insert(ChordLabel::chord(root, Quality::Dom7));
    }
    for borrowed in diatonic_triads(key.parallel()) {
        out.insert(ChordLabel::Chord(borrowed));
    }
    out.retain(|c| !is_diatonic(c, key));
    out
}

/// Membership in [`harmonic_exceptions`], ignoring inversion.
pub fn is_harmonic_exception(label: &ChordLabel, key: Key) -> bool {
    match label.as_chord() {
        Some(c) => harmonic_exceptions(key).contains(&ChordLabel::Chord(c.root_position())),
        None => false,
    }
}

/// Diatonic, or a recognised borrowing / secondary dominant.
pub fn is_key_plausible(label: &ChordLabel, key: Key) -> bool {
    is_diatonic(label, key) || is_harmonic_exception(label, key)
}

/// Duration-weighted fraction of chord time that is plausible in the
/// concurrent key. `N`/`X` time is ignored; all-`N` input scores 1.
pub fn key_consistency_score(chords: &Timeline<ChordLabel>, keys: &KeyTimeline) -> Result<f64, TimelineError> {
    let mut total = 0.0;
    let mut good = 0.0;
    for o in co_partition(chords, keys)? {
        if o.a.as_chord().is_none() {
            continue;
        }
        total += o.duration();
        if is_key_plausible(o.a, *o.b) {
            good += o.duration();
        }
    }
    Ok(if total > 0.0 { good / total } else { 1.0 })
}
