//! Snapping chord boundaries to a sixteenth-note grid built from tracked
//! beats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harte::ChordLabel;
use crate::timeline::{Segment, Timeline};

pub const DEFAULT_THRESHOLD: f64 = 0.125;
pub const DEFAULT_MAX_VIOLATION_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeatError {
    #[error("need at least two beats, got {0}")]
    TooFewBeats(usize),
    #[error("beat position {label} at {time}s is outside 1..=4")]
    BadPositionLabel { time: f64, label: u32 },
    #[error("beat times must strictly increase (at {0}s)")]
    NonIncreasing(f64),
}

/// Parses a beat-position field; range is checked by [`build_grid`].
pub fn parse_beat_position(text: &str) -> Result<u32, std::num::ParseIntError> {
    text.trim().parse()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatGrid {
    beats: Vec<(f64, u8)>,
    sixteenths: Vec<f64>,
}

impl BeatGrid {
    pub fn from_beats(beats: Vec<(f64, u32)>) -> Result<Self, BeatError> {
        if beats.len() < 2 {
            return Err(BeatError::TooFewBeats(beats.len()));
        }
        for &(time, label) in &beats {
            if !(1..=4).contains(&label) {
                return Err(BeatError::BadPositionLabel { time, label });
            }
        }
        for w in beats.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(BeatError::NonIncreasing(w[1].0));
            }
        }
        let mut sixteenths = Vec::with_capacity(beats.len() * 4);
        for w in beats.windows(2) {
            let (t0, t1) = (w[0].0, w[1].0);
            let step = (t1 - t0) / 4.0;
            sixteenths.extend((0..4).map(|k| t0 + k as f64 * step));
        }
        sixteenths.push(beats[beats.len() - 1].0);
        let beats = beats.into_iter().map(|(t, p)| (t, p as u8)).collect();
        Ok(BeatGrid { beats, sixteenths })
    }

    pub fn beats(&self) -> &[(f64, u8)] {
        &self.beats
    }

    pub fn sixteenths(&self) -> &[f64] {
        &self.sixteenths
    }

    pub fn first(&self) -> f64 {
        self.sixteenths[0]
    }

    pub fn last(&self) -> f64 {
        self.sixteenths[self.sixteenths.len() - 1]
    }

    /// Closest grid time to `t`, earlier one on ties; `None` outside the
    /// tracked region.
    pub fn nearest(&self, t: f64) -> Option<f64> {
        if t < self.first() || t > self.last() {
            return None;
        }
        let idx = self.sixteenths.partition_point(|&g| g < t);
        if idx == 0 {
            return Some(self.sixteenths[0]);
        }
        let after = self.sixteenths.get(idx).copied();
        let before = self.sixteenths[idx - 1];
        match after {
            Some(a) if a - t < t - before => Some(a),
            _ => Some(before),
        }
    }
}

/// Builds the grid from a beat timeline whose rows run from one beat to the
/// next, labeled with the metrical position of the first. The final row's
/// end is taken as the last beat.
pub fn build_grid(beats: &Timeline<u32>) -> Result<BeatGrid, BeatError> {
    let mut instants: Vec<(f64, u32)> = beats.segments().iter().map(|s| (s.start, s.label)).collect();
    for &(time, label) in &instants {
        if !(1..=4).contains(&label) {
            return Err(BeatError::BadPositionLabel { time, label });
        }
    }
    let last = instants[instants.len() - 1].1;
    instants.push((beats.end(), last % 4 + 1));
    BeatGrid::from_beats(instants)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapConfig {
    /// Largest displacement a single boundary may be moved by, in seconds.
    pub threshold: f64,
    /// Skip the whole stage when more than this fraction of in-grid
    /// boundaries would need a larger move.
    pub max_violation_fraction: f64,
}

impl Default for SnapConfig {
    fn default() -> Self {
        SnapConfig {
            threshold: DEFAULT_THRESHOLD,
            max_violation_fraction: DEFAULT_MAX_VIOLATION_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SnapReport {
    pub boundaries: usize,
    pub moved: usize,
    /// Boundaries left in place because the nearest grid time was too far.
    pub over_threshold: usize,
    /// Boundaries before the first or after the last beat.
    pub outside_grid: usize,
    pub max_displacement: f64,
    pub mean_displacement: f64,
    pub skipped: bool,
}

pub fn snap_timeline(
    chords: &Timeline<ChordLabel>,
    grid: &BeatGrid,
    config: &SnapConfig,
) -> (Timeline<ChordLabel>, SnapReport) {
    let mut report = SnapReport::default();
    if !(config.threshold > 0.0) {
        report.skipped = true;
        return (chords.clone(), report);
    }

    let (start, end) = chords.span();
    let mut moved_total = 0.0;
    let mut targets: Vec<f64> = Vec::with_capacity(chords.len().saturating_sub(1));
    for b in chords.interior_boundaries() {
        report.boundaries += 1;
        let target = match grid.nearest(b) {
            None => {
                report.outside_grid += 1;
                b
            }
            Some(g) => {
                let d = (g - b).abs();
                if d <= config.threshold {
                    if d > 0.0 {
                        report.moved += 1;
                        moved_total += d;
                        report.max_displacement = report.max_displacement.max(d);
                    }
                    g.clamp(start, end)
                } else {
                    report.over_threshold += 1;
                    b
                }
            }
        };
        targets.push(target);
    }
    if report.moved > 0 {
        report.mean_displacement = moved_total / report.moved as f64;
    }

    let considered = report.boundaries - report.outside_grid;
    if considered > 0 && report.over_threshold as f64 / considered as f64 > config.max_violation_fraction {
        report.skipped = true;
        return (chords.clone(), report);
    }
    if report.moved == 0 {
        return (chords.clone(), report);
    }

    let mut segments: Vec<Segment<ChordLabel>> = Vec::with_capacity(chords.len());
    let mut cursor = start;
    for (i, s) in chords.segments().iter().enumerate() {
        let seg_end = targets.get(i).copied().unwrap_or(end).max(cursor);
        if seg_end > cursor {
            segments.push(Segment::new(cursor, seg_end, s.label));
            cursor = seg_end;
        }
    }
    let snapped = Timeline::new(segments)
        .expect("snapped boundaries stay ordered inside the span")
        .normalize();
    (snapped, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harte::parse_chord;

    fn chords(rows: &[(f64, f64, &str)]) -> Timeline<ChordLabel> {
        Timeline::new(rows.iter().map(|&(s, e, l)| Segment::new(s, e, parse_chord(l).unwrap())).collect()).unwrap()
    }

    fn grid(times: &[f64]) -> BeatGrid {
        BeatGrid::from_beats(times.iter().enumerate().map(|(i, &t)| (t, (i % 4) as u32 + 1)).collect()).unwrap()
    }

    #[test]
    fn sixteenth_subdivision() {
        let g = grid(&[0.0, 0.5, 1.0]);
        assert_eq!(g.sixteenths(), &[0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]);
    }

    #[test]
    fn grid_errors() {
        assert_eq!(BeatGrid::from_beats(vec![(0.0, 1)]), Err(BeatError::TooFewBeats(1)));
        assert!(matches!(
            BeatGrid::from_beats(vec![(0.0, 1), (0.5, 5)]),
            Err(BeatError::BadPositionLabel { label: 5, .. })
        ));
        assert!(matches!(BeatGrid::from_beats(vec![(0.5, 1), (0.5, 2)]), Err(BeatError::NonIncreasing(_))));
    }

    #[test]
    fn grid_from_beat_timeline() {
        let t = Timeline::new(vec![Segment::new(0.0, 0.5, 1u32), Segment::new(0.5, 1.0, 2)]).unwrap();
        let g = build_grid(&t).unwrap();
        assert_eq!(g.beats(), &[(0.0, 1), (0.5, 2), (1.0, 3)]);
        assert_eq!(g.sixteenths().len(), 9);
        let bad = Timeline::new(vec![Segment::new(0.0, 0.5, 5u32)]).unwrap();
        assert!(matches!(build_grid(&bad), Err(BeatError::BadPositionLabel { label: 5, .. })));
    }

    #[test]
    fn snaps_to_nearest_sixteenth() {
        let g = grid(&[0.0, 0.5, 1.0]);
        let t = chords(&[(0.0, 0.2, "C:maj"), (0.2, 1.0, "G:maj")]);
        let (out, report) = snap_timeline(&t, &g, &SnapConfig::default());
        assert_eq!(out, chords(&[(0.0, 0.25, "C:maj"), (0.25, 1.0, "G:maj")]));
        assert_eq!(report.moved, 1);
        assert!((report.max_displacement - 0.05).abs() < 1e-12);
    }

    #[test]
    fn on_grid_boundary_is_untouched() {
        let g = grid(&[0.0, 0.5, 1.0]);
        let t = chords(&[(0.0, 0.375, "C:maj"), (0.375, 1.0, "G:maj")]);
        let (out, report) = snap_timeline(&t, &g, &SnapConfig::default());
        assert_eq!(out, t);
        assert_eq!(report.moved, 0);
        assert_eq!(report.max_displacement, 0.0);
    }

    #[test]
    fn threshold_blocks_large_moves() {
        let g = grid(&[0.0, 0.5, 1.0]);
        let t = chords(&[
            (0.0, 0.2, "C:maj"),
            (0.2, 0.5, "G:maj"),
            (0.5, 0.75, "F:maj"),
            (0.75, 1.0, "C:maj"),
        ]);
        let cfg = SnapConfig { threshold: 0.01, ..SnapConfig::default() };
        let (out, report) = snap_timeline(&t, &g, &cfg);
        assert_eq!(out, t);
        assert_eq!(report.over_threshold, 1);
        assert!(!report.skipped);
    }

    #[test]
    fn global_skip_when_most_boundaries_are_far() {
        let g = grid(&[0.0, 0.5, 1.0, 1.5]);
        let t = chords(&[(0.0, 0.19, "C:maj"), (0.19, 0.69, "G:maj"), (0.69, 1.5, "F:maj")]);
        let cfg = SnapConfig { threshold: 0.01, ..SnapConfig::default() };
        let (out, report) = snap_timeline(&t, &g, &cfg);
        assert!(report.skipped);
        assert_eq!(out, t);
    }

    #[test]
    fn ties_go_to_the_earlier_grid_time() {
        let g = grid(&[0.0, 0.5, 1.0]);
        assert_eq!(g.nearest(0.0625), Some(0.0));
        assert_eq!(g.nearest(1.5), None);
    }

    #[test]
    fn collapsed_segments_are_dropped() {
        let g = grid(&[0.0, 0.5, 1.0]);
        let t = chords(&[(0.0, 0.24, "C:maj"), (0.24, 0.26, "F:maj"), (0.26, 1.0, "C:maj")]);
        let (out, _) = snap_timeline(&t, &g, &SnapConfig::default());
        assert_eq!(out, chords(&[(0.0, 1.0, "C:maj")]));
    }

    #[test]
    fn boundaries_outside_the_beats_stay() {
        let g = grid(&[1.0, 1.5, 2.0]);
        let t = chords(&[(0.0, 0.55, "C:maj"), (0.55, 1.2, "G:maj"), (1.2, 3.0, "F:maj")]);
        let (out, report) = snap_timeline(&t, &g, &SnapConfig::default());
        assert_eq!(report.outside_grid, 1);
        assert_eq!(out, chords(&[(0.0, 0.55, "C:maj"), (0.55, 1.25, "G:maj"), (1.25, 3.0, "F:maj")]));
    }
}
