//! Harte shorthand chord labels.
//!
//! Grammar accepted by [`parse_chord`]:
//!
//! ```text
//! N | X | ROOT[:QUALITY][/DEGREE]
//! ROOT    = A..G followed by any number of '#' or 'b'
//! DEGREE  = any number of 'b' or '#' followed by 1..13
//! ```
//!
//! A bare root means a major triad. Canonical printing always spells the
//! quality and prefers flats for black-key roots.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarteError {
    #[error("malformed chord label {label:?}: {reason} ({fragment:?})")]
    MalformedLabel {
        label: String,
        fragment: String,
        reason: &'static str,
    },
}

fn malformed(label: &str, fragment: &str, reason: &'static str) -> HarteError {
    HarteError::MalformedLabel {
        label: label.to_string(),
        fragment: fragment.to_string(),
        reason,
    }
}

/// A pitch class, 0..=11 with C = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PitchClass(u8);

const FLAT_NAMES: [&str; 12] = [
    "C", "Db", "D", "Eb", "E", "F", "Gb", "G", "Ab", "A", "Bb", "B",
];

impl PitchClass {
    pub const fn new(value: u8) -> Self {
        PitchClass(value % 12)
    }

    pub fn from_semitones(value: i32) -> Self {
        PitchClass(value.rem_euclid(12) as u8)
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub fn transpose(self, semitones: i32) -> Self {
        Self::from_semitones(self.0 as i32 + semitones)
    }

    /// Interval in semitones from `self` up to `other`, in 0..12.
    pub fn interval_to(self, other: PitchClass) -> u8 {
        (other.0 + 12 - self.0) % 12
    }

    pub fn name(self) -> &'static str {
        FLAT_NAMES[self.0 as usize]
    }

    /// Parses a note name such as `A`, `C#`, `Db` or `Cb`.
    pub fn parse(text: &str) -> Option<Self> {
        let mut chars = text.chars();
        let letter = chars.next()?;
        let base: i32 = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return None,
        };
        let mut offset = 0i32;
        for c in chars {
            match c {
                '#' => offset += 1,
                'b' => offset -= 1,
                _ => return None,
            }
        }
        Some(Self::from_semitones(base + offset))
    }
}

impl fmt::Display for PitchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PitchClass {
    type Err = HarteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PitchClass::parse(s.trim()).ok_or_else(|| malformed(s, s, "unknown note name"))
    }
}

/// A set of pitch classes (or of semitone intervals) as a 12-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PcSet(u16);

impl PcSet {
    pub const EMPTY: PcSet = PcSet(0);

    pub const fn from_bits(bits: u16) -> Self {
        PcSet(bits & 0x0fff)
    }

    pub const fn bits(self) -> u16 {
        self.0
    }

    pub fn from_values<I: IntoIterator<Item = u8>>(values: I) -> Self {
        values
            .into_iter()
            .fold(PcSet(0), |acc, v| PcSet(acc.0 | 1 << (v % 12)))
    }

    pub fn contains(self, pc: PitchClass) -> bool {
        self.0 & (1 << pc.value()) != 0
    }

    pub fn contains_value(self, value: u8) -> bool {
        self.0 & (1 << (value % 12)) != 0
    }

    pub fn insert(&mut self, pc: PitchClass) {
        self.0 |= 1 << pc.value();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: PcSet) -> PcSet {
        PcSet(self.0 & other.0)
    }

    pub fn union(self, other: PcSet) -> PcSet {
        PcSet(self.0 | other.0)
    }

    pub fn is_subset(self, other: PcSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Rotates every member up by `semitones`.
    pub fn transpose(self, semitones: i32) -> PcSet {
        let s = semitones.rem_euclid(12) as u32;
        let wide = (self.0 as u32) << s;
        PcSet(((wide | (wide >> 12)) & 0x0fff) as u16)
    }

    pub fn iter(self) -> impl Iterator<Item = PitchClass> {
        (0u8..12)
            .filter(move |v| self.0 & (1 << v) != 0)
            .map(PitchClass::new)
    }
}

impl FromIterator<PitchClass> for PcSet {
    fn from_iter<T: IntoIterator<Item = PitchClass>>(iter: T) -> Self {
        PcSet::from_values(iter.into_iter().map(PitchClass::value))
    }
}

/// Chord qualities understood by the parser.
///
/// The first seventeen make up the recognizer vocabulary; the rest occur in
/// hand annotations and are accepted so references can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quality {
    Maj,
    Min,
    Aug,
    Dim,
    Maj7,
    Dom7,
    Min7,
    Dim7,
    Hdim7,
    Maj9,
    Dom9,
    Min9,
    Dom11,
    Dom13,
    Sus4,
    Sus2,
    Sus4b7,
    Maj6,
    Min6,
    MinMaj7,
    Power,
    Unison,
}

impl Quality {
    pub const ALL: [Quality; 22] = [
        Quality::Maj,
        Quality::Min,
        Quality::Aug,
        Quality::Dim,
        Quality::Maj7,
        Quality::Dom7,
        Quality::Min7,
        Quality::Dim7,
        Quality::Hdim7,
        Quality::Maj9,
        Quality::Dom9,
        Quality::Min9,
        Quality::Dom11,
        Quality::Dom13,
        Quality::Sus4,
        Quality::Sus2,
        Quality::Sus4b7,
        Quality::Maj6,
        Quality::Min6,
        Quality::MinMaj7,
        Quality::Power,
        Quality::Unison,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Aug => "aug",
            Quality::Dim => "dim",
            Quality::Maj7 => "maj7",
            Quality::Dom7 => "7",
            Quality::Min7 => "min7",
            Quality::Dim7 => "dim7",
            Quality::Hdim7 => "hdim7",
            Quality::Maj9 => "maj9",
            Quality::Dom9 => "9",
            Quality::Min9 => "min9",
            Quality::Dom11 => "11",
            Quality::Dom13 => "13",
            Quality::Sus4 => "sus4",
            Quality::Sus2 => "sus2",
            Quality::Sus4b7 => "sus4(b7)",
            Quality::Maj6 => "maj6",
            Quality::Min6 => "min6",
            Quality::MinMaj7 => "minmaj7",
            Quality::Power => "5",
            Quality::Unison => "1",
        }
    }

    pub fn from_token(token: &str) -> Option<Quality> {
        Quality::ALL.iter().copied().find(|q| q.token() == token)
    }

    /// Semitone offsets from the root, extensions folded into the octave.
    pub fn intervals(self) -> PcSet {
        let values: &[u8] = match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Aug => &[0, 4, 8],
            Quality::Dim => &[0, 3, 6],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Dim7 => &[0, 3, 6, 9],
            Quality::Hdim7 => &[0, 3, 6, 10],
            Quality::Maj9 => &[0, 2, 4, 7, 11],
            Quality::Dom9 => &[0, 2, 4, 7, 10],
            Quality::Min9 => &[0, 2, 3, 7, 10],
            Quality::Dom11 => &[0, 2, 4, 5, 7, 10],
            Quality::Dom13 => &[0, 2, 4, 5, 7, 9, 10],
            Quality::Sus4 => &[0, 5, 7],
            Quality::Sus2 => &[0, 2, 7],
            Quality::Sus4b7 => &[0, 5, 7, 10],
            Quality::Maj6 => &[0, 4, 7, 9],
            Quality::Min6 => &[0, 3, 7, 9],
            Quality::MinMaj7 => &[0, 3, 7, 11],
            Quality::Power => &[0, 7],
            Quality::Unison => &[0],
        };
        PcSet::from_values(values.iter().copied())
    }

    /// Intervals with tensions above the octave removed (9ths, 11ths, 13ths),
    /// the encoding standard chord evaluation compares on.
    pub fn core_intervals(self) -> PcSet {
        match self {
            Quality::Maj9 => Quality::Maj7.intervals(),
            Quality::Dom9 | Quality::Dom11 | Quality::Dom13 => Quality::Dom7.intervals(),
            Quality::Min9 => Quality::Min7.intervals(),
            other => other.intervals(),
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// A sounding chord: root, quality and bass expressed as an interval above
/// the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chord {
    pub root: PitchClass,
    pub quality: Quality,
    pub bass_interval: u8,
}

impl Chord {
    pub fn new(root: PitchClass, quality: Quality) -> Self {
        Chord {
            root,
            quality,
            bass_interval: 0,
        }
    }

    pub fn with_bass_interval(self, bass_interval: u8) -> Self {
        Chord {
            bass_interval: bass_interval % 12,
            ..self
        }
    }

    pub fn bass(self) -> PitchClass {
        self.root.transpose(self.bass_interval as i32)
    }

    /// Chord tones plus the bass note.
    pub fn pitch_classes(self) -> PcSet {
        let mut set = self.quality.intervals().transpose(self.root.value() as i32);
        set.insert(self.bass());
        set
    }

    pub fn transpose(self, semitones: i32) -> Self {
        Chord {
            root: self.root.transpose(semitones),
            ..self
        }
    }

    /// Same chord in root position.
    pub fn root_position(self) -> Self {
        Chord {
            bass_interval: 0,
            ..self
        }
    }
}

/// A parsed chord label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChordLabel {
    /// `N`: no harmonic content.
    NoChord,
    /// `X`: an annotated but unidentifiable chord. Never produced by the
    /// pipeline; evaluation ignores reference time carrying it.
    Unknown,
    Chord(Chord),
}

impl ChordLabel {
    pub fn chord(root: PitchClass, quality: Quality) -> Self {
        ChordLabel::Chord(Chord::new(root, quality))
    }

    pub fn is_no_chord(&self) -> bool {
        matches!(self, ChordLabel::NoChord)
    }

    pub fn as_chord(&self) -> Option<Chord> {
        match self {
            ChordLabel::Chord(c) => Some(*c),
            _ => None,
        }
    }

    pub fn root(&self) -> Option<PitchClass> {
        self.as_chord().map(|c| c.root)
    }

    pub fn transpose(self, semitones: i32) -> Self {
        match self {
            ChordLabel::Chord(c) => ChordLabel::Chord(c.transpose(semitones)),
            other => other,
        }
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_chord(self))
    }
}

impl FromStr for ChordLabel {
    type Err = HarteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_chord(s)
    }
}

impl Serialize for ChordLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_chord(self))
    }
}

impl<'de> Deserialize<'de> for ChordLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_chord(&text).map_err(serde::de::Error::custom)
    }
}

/// Resolves a scale degree such as `3`, `b7` or `#11` to semitones above the
/// root.
pub fn degree_to_interval(degree: &str) -> Option<u8> {
    let digits_at = degree.find(|c: char| c.is_ascii_digit())?;
    let (accidentals, number) = degree.split_at(digits_at);
    let mut offset = 0i32;
    for c in accidentals.chars() {
        match c {
            'b' => offset -= 1,
            '#' => offset += 1,
            _ => return None,
        }
    }
    if !number.chars().all(|c| c.is_ascii_digit()) || number.len() > 2 {
        return None;
    }
    let n: usize = number.parse().ok()?;
    if !(1..=13).contains(&n) {
        return None;
    }
    const MAJOR_STEPS: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
    let semis = MAJOR_STEPS[(n - 1) % 7] + offset;
    Some(semis.rem_euclid(12) as u8)
}

/// Canonical degree spelling for a bass interval; `None` for the root.
pub fn interval_to_degree(interval: u8) -> Option<&'static str> {
    const NAMES: [&str; 12] = [
        "", "b2", "2", "b3", "3", "4", "b5", "5", "#5", "6", "b7", "7",
    ];
    match interval % 12 {
        0 => None,
        i => Some(NAMES[i as usize]),
    }
}

pub fn parse_chord(text: &str) -> Result<ChordLabel, HarteError> {
    if text.is_empty() {
        return Err(malformed(text, text, "empty label"));
    }
    if !text.is_ascii() {
        return Err(malformed(text, text, "non-ASCII label"));
    }
    match text {
        "N" => return Ok(ChordLabel::NoChord),
        "X" => return Ok(ChordLabel::Unknown),
        _ => {}
    }

    let (head, degree) = match text.split_once('/') {
        Some((h, d)) => (h, Some(d)),
        None => (text, None),
    };
    let (root_text, quality_text) = match head.split_once(':') {
        Some((r, q)) => (r, Some(q)),
        None => (head, None),
    };

    let root =
        PitchClass::parse(root_text).ok_or_else(|| malformed(text, root_text, "unknown root"))?;
    let quality = match quality_text {
        None => Quality::Maj,
        Some(q) => {
            Quality::from_token(q).ok_or_else(|| malformed(text, q, "unknown quality"))?
        }
    };
    let bass_interval = match degree {
        None => 0,
        Some(d) => degree_to_interval(d).ok_or_else(|| malformed(text, d, "unknown degree"))?,
    };

    Ok(ChordLabel::Chord(Chord {
        root,
        quality,
        bass_interval,
    }))
}

pub fn format_chord(label: &ChordLabel) -> String {
    match label {
        ChordLabel::NoChord => "N".to_string(),
        ChordLabel::Unknown => "X".to_string(),
        ChordLabel::Chord(c) => match interval_to_degree(c.bass_interval) {
            None => format!("{}:{}", c.root, c.quality),
            Some(degree) => format!("{}:{}/{}", c.root, c.quality, degree),
        },
    }
}

/// Sounding pitch classes; empty for `N` and `X`.
pub fn pitch_class_set(label: &ChordLabel) -> PcSet {
    label.as_chord().map(Chord::pitch_classes).unwrap_or_default()
}

pub fn bass_pitch_class(label: &ChordLabel) -> Option<PitchClass> {
    label.as_chord().map(Chord::bass)
}

/// The (quality, bass interval) pairs the baseline recognizer can emit.
pub const VOCABULARY_SHAPES: [(Quality, u8); 25] = [
    (Quality::Maj, 0),
    (Quality::Min, 0),
    (Quality::Aug, 0),
    (Quality::Dim, 0),
    (Quality::Maj, 4),
    (Quality::Maj, 7),
    (Quality::Min, 3),
    (Quality::Min, 7),
    (Quality::Maj7, 0),
    (Quality::Dom7, 0),
    (Quality::Min7, 0),
    (Quality::Dim7, 0),
    (Quality::Hdim7, 0),
    (Quality::Maj9, 0),
    (Quality::Dom9, 0),
    (Quality::Min9, 0),
    (Quality::Dom11, 0),
    (Quality::Dom13, 0),
    (Quality::Sus4, 0),
    (Quality::Sus2, 0),
    (Quality::Sus4b7, 0),
    (Quality::Maj, 2),
    (Quality::Maj, 10),
    (Quality::Min, 2),
    (Quality::Min, 10),
];

pub fn is_vocabulary_shape(quality: Quality, bass_interval: u8) -> bool {
    VOCABULARY_SHAPES.contains(&(quality, bass_interval % 12))
}

pub fn in_vocabulary(label: &ChordLabel) -> bool {
    match label {
        ChordLabel::NoChord => true,
        ChordLabel::Unknown => false,
        ChordLabel::Chord(c) => is_vocabulary_shape(c.quality, c.bass_interval),
    }
}

/// All 301 labels: every vocabulary shape on every root, then `N`.
pub fn enumerate_vocabulary() -> Vec<ChordLabel> {
    let mut labels: Vec<ChordLabel> = (0u8..12)
        .flat_map(|root| {
            VOCABULARY_SHAPES.iter().map(move |&(quality, bass)| {
                ChordLabel::Chord(Chord {
                    root: PitchClass::new(root),
                    quality,
                    bass_interval: bass,
                })
            })
        })
        .collect();
    labels.push(ChordLabel::NoChord);
    labels
}
