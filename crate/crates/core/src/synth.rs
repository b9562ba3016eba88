//! Seeded synthetic corpus: diatonic ground truth plus three corrupted
//! "recognizer outputs" with known, stage-specific error types.
//!
//! Each song gets a key (sometimes modulating once), a beat track and a
//! chord progression whose changes fall on beats. Every simulated stem
//! output then receives, at independent locations:
//!
//! * bass-driven errors: a diatonic chord that does not contain the true
//!   root, while the bass stem still plays that root;
//! * out-of-key substitutions: a non-diatonic chord that contains the true
//!   root and whose closest diatonic triad is the true chord;
//! * spurious short `N` gaps inside otherwise correct chords;
//! * boundary jitter.
//!
//! The full mix additionally gets wrong diatonic chords and flicker, the
//! drums-and-vocals-removed output more `N`.

use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, SongEntry};
use crate::harte::{enumerate_vocabulary, ChordLabel, PitchClass, Quality};
use crate::metrics::{compare, Metric, Outcome};
use crate::refine::rulebook::closest_diatonic_triad;
use crate::refine::{BassTimeline, BeatTimeline, ChordTimeline, SongBundle};
use crate::theory::{diatonic_chord, diatonic_triads, is_key_plausible, Key, KeyTimeline, Mode};
use crate::timeline::{write_lab, Segment, Timeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub songs: usize,
    pub seed: u64,
    /// Approximate song length in seconds.
    pub min_duration: f64,
    pub max_duration: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// Fractions of song duration.
    pub out_of_key_fraction: f64,
    pub bass_error_fraction: f64,
    pub no_drums_n_fraction: f64,
    pub no_drums_vocals_n_fraction: f64,
    pub full_mix_n_fraction: f64,
    /// Extra wrong chords on the full mix only.
    pub full_mix_extra_error_fraction: f64,
    /// Share of full-mix segments that get a short spurious chord.
    pub full_mix_flicker_fraction: f64,
    /// Largest boundary displacement, seconds.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            songs: 24,
            seed: 2024,
            min_duration: 45.0,
            max_duration: 75.0,
            min_bpm: 90.0,
            max_bpm: 130.0,
            out_of_key_fraction: 0.10,
            bass_error_fraction: 0.10,
            no_drums_n_fraction: 0.05,
            no_drums_vocals_n_fraction: 0.08,
            full_mix_n_fraction: 0.07,
            full_mix_extra_error_fraction: 0.02,
            full_mix_flicker_fraction: 0.15,
            jitter: 0.08,
        }
    }
}

/// Seventh chord stacked in scale thirds on `root`.
pub fn diatonic_seventh(key: Key, root: PitchClass) -> Option<ChordLabel> {
    let degrees = key.degrees();
    let idx = degrees.iter().position(|&d| d == root)?;
    let iv = |step: usize| root.interval_to(degrees[(idx + step) % 7]);
    let quality = match (iv(2), iv(4), iv(6)) {
        (4, 7, 11) => Quality::Maj7,
        (4, 7, 10) => Quality::Dom7,
        (3, 7, 10) => Quality::Min7,
        (3, 6, 10) => Quality::Hdim7,
        _ => return None,
    };
    Some(ChordLabel::chord(root, quality))
}

/// Non-diatonic chords that keep `truth`'s root, are wrong under MIREX, and
/// whose closest diatonic triad is right again.
pub fn out_of_key_substitutes(truth: &ChordLabel, key: Key) -> Vec<ChordLabel> {
    let Some(root) = truth.root() else { return Vec::new() };
    enumerate_vocabulary()
        .into_iter()
        .filter(|c| {
            let Some(chord) = c.as_chord() else { return false };
            chord.bass_interval == 0
                && chord.pitch_classes().contains(root)
                && !is_key_plausible(c, key)
                && compare(Metric::Mirex, truth, c) == Outcome::Incorrect
                && closest_diatonic_triad(c, key).is_some_and(|r| compare(Metric::Mirex, truth, &r) == Outcome::Correct)
        })
        .collect()
}

/// Diatonic triads without `truth`'s root among their tones.
pub fn bass_error_substitutes(truth: &ChordLabel, key: Key) -> Vec<ChordLabel> {
    let Some(root) = truth.root() else { return Vec::new() };
    diatonic_triads(key)
        .into_iter()
        .filter(|c| !c.pitch_classes().contains(root))
        .map(ChordLabel::Chord)
        .collect()
}

struct Truth {
    reference: ChordTimeline,
    keys: KeyTimeline,
    beats: BeatTimeline,
    bass: BassTimeline,
}

fn key_at(keys: &KeyTimeline, t: f64) -> Key {
    *keys.label_at(t).unwrap_or(&keys.segments()[0].label)
}

fn ground_truth(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Truth {
    let period = 60.0 / rng.gen_range(config.min_bpm..config.max_bpm);
    let offset = rng.gen_range(0.5..1.5);
    let target = rng.gen_range(config.min_duration..config.max_duration);
    let n_beats = (((target - offset) / period / 4.0).round() as usize).max(8) * 4;
    let beat_time = |i: usize| offset + i as f64 * period;
    let end = beat_time(n_beats);

    let beats = Timeline::new(
        (0..n_beats)
            .map(|i| Segment::new(beat_time(i), beat_time(i + 1), (i % 4) as u32 + 1))
            .collect(),
    )
    .expect("beats increase");

    let mode = if rng.gen_bool(0.35) { Mode::Minor } else { Mode::Major };
    let first_key = Key::new(PitchClass::new(rng.gen_range(0..12)), mode);
    let modulation = rng.gen_bool(0.3).then(|| (n_beats / 8) * 4);

    let mut chords = vec![Segment::new(0.0, offset, ChordLabel::NoChord)];
    let mut key_segments: Vec<Segment<Key>> = Vec::new();
    let mut beat = 0usize;
    let mut previous: Option<usize> = None;
    while beat < n_beats {
        let key = match modulation {
            Some(m) if beat >= m => first_key.transpose(7),
            _ => first_key,
        };
        let len = if rng.gen_bool(0.6) { 4 } else { 2 };
        let len = len.min(n_beats - beat);
        let len = match modulation {
            Some(m) if beat < m => len.min(m - beat),
            _ => len,
        };
        // Diminished triads are rare in practice.
        let weights: [u32; 7] = if mode == Mode::Major { [5, 3, 2, 4, 5, 4, 1] } else { [5, 1, 4, 4, 3, 4, 4] };
        let degree = loop {
            let d = *(0..7).collect::<Vec<usize>>().choose_weighted(rng, |&d| weights[d]).expect("weights");
            if Some(d) != previous {
                break d;
            }
        };
        previous = Some(degree);
        let root = key.degrees()[degree];
        let label = if rng.gen_bool(0.25) {
            diatonic_seventh(key, root).expect("scale roots have sevenths")
        } else {
            diatonic_chord(key, root).expect("root is in scale")
        };
        chords.push(Segment::new(beat_time(beat), beat_time(beat + len), label));
        match key_segments.last_mut() {
            Some(last) if last.label == key => last.end = beat_time(beat + len),
            _ => key_segments.push(Segment::new(beat_time(beat), beat_time(beat + len), key)),
        }
        beat += len;
    }
    key_segments[0].start = 0.0;
    let reference = Timeline::new(chords).expect("contiguous");
    let keys = Timeline::new(key_segments).expect("contiguous");

    // Bass plays the root, sometimes moving to another chord tone late in
    // the chord.
    let mut bass = Vec::new();
    for s in reference.segments() {
        match s.label.as_chord() {
            None => bass.push(Segment::new(s.start, s.end, None)),
            Some(c) => {
                let others: Vec<PitchClass> = c.pitch_classes().iter().filter(|&p| p != c.root).collect();
                if rng.gen_bool(0.3) && !others.is_empty() {
                    let cut = s.end - s.duration() * rng.gen_range(0.1..0.2);
                    bass.push(Segment::new(s.start, cut, Some(c.root)));
                    bass.push(Segment::new(cut, s.end, Some(*others.choose(rng).expect("non-empty"))));
                } else {
                    bass.push(Segment::new(s.start, s.end, Some(c.root)));
                }
            }
        }
    }
    let bass = Timeline::new(bass).expect("contiguous").normalize();
    debug_assert!((reference.end() - end).abs() < 1e-9);
    Truth { reference, keys, beats, bass }
}

#[derive(Clone, Copy)]
struct TrackPlan {
    out_of_key: f64,
    bass_errors: f64,
    wrong: f64,
    no_chord: f64,
    flicker: f64,
}

fn corrupt(truth: &Truth, plan: TrackPlan, jitter: f64, rng: &mut ChaCha8Rng) -> ChordTimeline {
    let segs = truth.reference.segments();
    let total = truth.reference.duration();
    let mut labels: Vec<ChordLabel> = segs.iter().map(|s| s.label).collect();
    let mut clean: Vec<bool> = segs.iter().map(|s| s.label.as_chord().is_some()).collect();

    let mut order: Vec<usize> = (0..segs.len()).filter(|&i| clean[i]).collect();
    order.shuffle(rng);
    let mut budgets = [plan.bass_errors * total, plan.out_of_key * total, plan.wrong * total];
    for i in order {
        let Some(kind) = budgets.iter().position(|&b| b > 0.0) else { break };
        let truth_label = segs[i].label;
        let key = key_at(&truth.keys, segs[i].midpoint());
        let options = match kind {
            0 => bass_error_substitutes(&truth_label, key),
            1 => out_of_key_substitutes(&truth_label, key),
            _ => diatonic_triads(key)
                .into_iter()
                .map(ChordLabel::Chord)
                .filter(|c| compare(Metric::Mirex, &truth_label, c) == Outcome::Incorrect)
                .collect(),
        };
        if let Some(&pick) = options.choose(rng) {
            labels[i] = pick;
            clean[i] = false;
            budgets[kind] -= segs[i].duration();
        }
    }

    let mut bounds: Vec<f64> = Vec::with_capacity(segs.len() + 1);
    bounds.push(segs[0].start);
    for s in &segs[..segs.len() - 1] {
        bounds.push(s.end + rng.gen_range(-jitter..=jitter));
    }
    bounds.push(segs[segs.len() - 1].end);

    // At most one insertion per clean segment, kept clear of its edges.
    let mut inserts: Vec<Option<(f64, f64, ChordLabel)>> = vec![None; segs.len()];
    let mut candidates: Vec<usize> = (0..segs.len()).filter(|&i| clean[i]).collect();
    candidates.shuffle(rng);
    let mut candidates = candidates.into_iter();
    let mut n_budget = plan.no_chord * total;
    while n_budget > 0.05 {
        let Some(i) = candidates.next() else { break };
        let (lo, hi) = (bounds[i] + 0.4, bounds[i + 1] - 0.4);
        let len = rng.gen_range(0.3..0.9f64).min(n_budget.max(0.3));
        if hi - lo < len {
            continue;
        }
        let start = rng.gen_range(lo..=hi - len);
        inserts[i] = Some((start, start + len, ChordLabel::NoChord));
        n_budget -= len;
    }
    let mut flicker_count = (plan.flicker * segs.len() as f64).round() as usize;
    for i in candidates {
        if flicker_count == 0 {
            break;
        }
        let (lo, hi) = (bounds[i] + 0.3, bounds[i + 1] - 0.3);
        let len = rng.gen_range(0.1..0.25);
        if hi - lo < len {
            continue;
        }
        let key = key_at(&truth.keys, segs[i].midpoint());
        let other = diatonic_triads(key)
            .into_iter()
            .map(ChordLabel::Chord)
            .filter(|c| c.root() != labels[i].root())
            .collect::<Vec<_>>();
        let start = rng.gen_range(lo..=hi - len);
        inserts[i] = Some((start, start + len, *other.choose(rng).expect("seven triads")));
        flicker_count -= 1;
    }

    let mut out = Vec::with_capacity(segs.len() * 2);
    for i in 0..segs.len() {
        let (s, e, l) = (bounds[i], bounds[i + 1], labels[i]);
        match inserts[i] {
            Some((a, b, x)) => {
                out.push(Segment::new(s, a, l));
                out.push(Segment::new(a, b, x));
                out.push(Segment::new(b, e, l));
            }
            None => out.push(Segment::new(s, e, l)),
        }
    }
    Timeline::new(out).expect("jitter is smaller than any segment").normalize()
}

/// One generated song with all of its inputs and the reference.
pub fn generate_song(config: &SynthConfig, index: usize) -> SongBundle {
    let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = ground_truth(&mut rng, config);
    let base = TrackPlan {
        out_of_key: config.out_of_key_fraction,
        bass_errors: config.bass_error_fraction,
        wrong: 0.0,
        no_chord: config.no_drums_n_fraction,
        flicker: 0.0,
    };
    let track_rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream + 1);
        r
    };
    let no_drums = corrupt(&truth, base, config.jitter, &mut track_rng(0));
    let no_drums_vocals = corrupt(
        &truth,
        TrackPlan {
            no_chord: config.no_drums_vocals_n_fraction,
            ..base
        },
        config.jitter,
        &mut track_rng(1),
    );
    let full = corrupt(
        &truth,
        TrackPlan {
            wrong: config.full_mix_extra_error_fraction,
            no_chord: config.full_mix_n_fraction,
            flicker: config.full_mix_flicker_fraction,
            ..base
        },
        config.jitter,
        &mut track_rng(2),
    );

    let mut bundle = SongBundle::new(format!("synth{index:03}"));
    bundle.acr_full = Some(full);
    bundle.acr_nodrums = Some(no_drums);
    bundle.acr_nodrumsvocals = Some(no_drums_vocals);
    bundle.bass = Some(truth.bass);
    bundle.keys = Some(truth.keys);
    bundle.beats = Some(truth.beats);
    bundle.reference = Some(truth.reference);
    bundle
}

pub fn generate_corpus(config: &SynthConfig) -> Vec<SongBundle> {
    (0..config.songs).map(|i| generate_song(config, i)).collect()
}

/// Writes every song's lab files under `dir/<id>/` and a `manifest.json`;
/// returns the manifest path.
pub fn write_corpus(dir: &Path, dataset: &str, songs: &[SongBundle]) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(songs.len());
    for song in songs {
        let song_dir = dir.join(&song.id);
        std::fs::create_dir_all(&song_dir)?;
        let rel = |name: &str| PathBuf::from(&song.id).join(format!("{name}.lab"));
        let write = |name: &str, text: String| std::fs::write(song_dir.join(format!("{name}.lab")), text);
        let missing = || io::Error::new(io::ErrorKind::InvalidInput, format!("song {} is incomplete", song.id));
        write("acr_full", song.acr_full.as_ref().ok_or_else(missing)?.to_lab())?;
        write("acr_nodrums", song.acr_nodrums.as_ref().ok_or_else(missing)?.to_lab())?;
        write("acr_nodrumsvocals", song.acr_nodrumsvocals.as_ref().ok_or_else(missing)?.to_lab())?;
        let bass = song.bass.as_ref().ok_or_else(missing)?;
        write("bass", write_lab(bass, |b| b.map_or_else(|| "N".to_string(), |p| p.to_string())))?;
        write("keys", song.keys.as_ref().ok_or_else(missing)?.to_lab())?;
        if let Some(b) = &song.beats {
            write("beats", b.to_lab())?;
        }
        if let Some(r) = &song.reference {
            write("reference", r.to_lab())?;
        }
        entries.push(SongEntry {
            id: song.id.clone(),
            acr_full: rel("acr_full"),
            acr_nodrums: rel("acr_nodrums"),
            acr_nodrumsvocals: rel("acr_nodrumsvocals"),
            bass: rel("bass"),
            keys: rel("keys"),
            beats: song.beats.as_ref().map(|_| rel("beats")),
            reference: song.reference.as_ref().map(|_| rel("reference")),
        });
    }
    let manifest = Manifest {
        dataset: dataset.to_string(),
        songs: entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json())?;
    Ok(path)
}
