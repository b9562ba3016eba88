//! Contiguous labeled timelines and the three-column lab format.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boundaries closer than this are considered the same instant.
pub const TIME_TOLERANCE: f64 = 1e-3;

/// Allowed difference between the spans of two timelines that are meant to
/// cover the same region.
pub const SPAN_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimelineError {
    #[error("timeline has no intervals")]
    EmptyTimeline,
    #[error("interval {index} is invalid: start {start}, end {end}")]
    InvalidInterval { index: usize, start: f64, end: f64 },
    #[error("intervals {index} and {next} are not contiguous ({end} vs {start})", next = .index + 1)]
    NotContiguous { index: usize, end: f64, start: f64 },
    #[error("spans differ: ({a_start}, {a_end}) vs ({b_start}, {b_end})")]
    SpanMismatch {
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("line {line}: expected `<start> <end> <label>`")]
    MalformedLine { line: usize },
    #[error("line {line}: time goes backwards")]
    NonMonotonicTime { line: usize },
    #[error("line {line}: gap before this interval")]
    Gap { line: usize },
    #[error("line {line}: bad label: {cause}")]
    LabelParseError { line: usize, cause: String },
    #[error("no intervals found")]
    EmptyTimeline,
}

impl LabError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LabError::MalformedLine { line }
            | LabError::NonMonotonicTime { line }
            | LabError::Gap { line }
            | LabError::LabelParseError { line, .. } => Some(*line),
            LabError::EmptyTimeline => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment<L> {
    pub start: f64,
    pub end: f64,
    pub label: L,
}

impl<L> Segment<L> {
    pub fn new(start: f64, end: f64, label: L) -> Self {
        Segment { start, end, label }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Sorted, gap-free, non-overlapping labeled intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Timeline<L> {
    segments: Vec<Segment<L>>,
}

impl<'de, L: Deserialize<'de>> Deserialize<'de> for Timeline<L> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let segments = Vec::<Segment<L>>::deserialize(deserializer)?;
        Timeline::new(segments).map_err(serde::de::Error::custom)
    }
}

impl<L> Timeline<L> {
    pub fn new(segments: Vec<Segment<L>>) -> Result<Self, TimelineError> {
        if segments.is_empty() {
            return Err(TimelineError::EmptyTimeline);
        }
        for (index, s) in segments.iter().enumerate() {
            if !(s.start.is_finite() && s.end.is_finite()) || s.end <= s.start || s.start < 0.0 {
                return Err(TimelineError::InvalidInterval {
                    index,
                    start: s.start,
                    end: s.end,
                });
            }
        }
        for (index, pair) in segments.windows(2).enumerate() {
            if pair[0].end != pair[1].start {
                return Err(TimelineError::NotContiguous {
                    index,
                    end: pair[0].end,
                    start: pair[1].start,
                });
            }
        }
        Ok(Timeline { segments })
    }

    /// Builds a timeline from `n + 1` boundaries and `n` labels.
    pub fn from_boundaries(boundaries: &[f64], labels: Vec<L>) -> Result<Self, TimelineError> {
        if labels.is_empty() || boundaries.len() != labels.len() + 1 {
            return Err(TimelineError::EmptyTimeline);
        }
        let segments = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| Segment::new(boundaries[i], boundaries[i + 1], label))
            .collect();
        Timeline::new(segments)
    }

    pub fn single(start: f64, end: f64, label: L) -> Result<Self, TimelineError> {
        Timeline::new(vec![Segment::new(start, end, label)])
    }

    pub fn segments(&self) -> &[Segment<L>] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<Segment<L>> {
        self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.segments[0].start
    }

    pub fn end(&self) -> f64 {
        self.segments[self.segments.len() - 1].end
    }

    pub fn span(&self) -> (f64, f64) {
        (self.start(), self.end())
    }

    pub fn duration(&self) -> f64 {
        self.end() - self.start()
    }

    /// Interior boundaries (segment starts after the first).
    pub fn interior_boundaries(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().skip(1).map(|s| s.start)
    }

    /// Label in force at `time`; segments are half-open `[start, end)` except
    /// the last, which includes its end.
    pub fn label_at(&self, time: f64) -> Option<&L> {
        if time < self.start() || time > self.end() {
            return None;
        }
        let idx = self.segments.partition_point(|s| s.end <= time);
        let idx = idx.min(self.segments.len() - 1);
        Some(&self.segments[idx].label)
    }

    pub fn map_labels<M, F: FnMut(&L) -> M>(&self, mut f: F) -> Timeline<M> {
        Timeline {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::new(s.start, s.end, f(&s.label)))
                .collect(),
        }
    }

    pub fn same_span<M>(&self, other: &Timeline<M>) -> bool {
        (self.start() - other.start()).abs() <= SPAN_TOLERANCE
            && (self.end() - other.end()).abs() <= SPAN_TOLERANCE
    }

    pub fn span_mismatch<M>(&self, other: &Timeline<M>) -> TimelineError {
        TimelineError::SpanMismatch {
            a_start: self.start(),
            a_end: self.end(),
            b_start: other.start(),
            b_end: other.end(),
        }
    }
}

impl<L: Clone> Timeline<L> {
    /// Restricts the timeline to `[start, end]`; `None` if nothing remains.
    pub fn clip(&self, start: f64, end: f64) -> Option<Timeline<L>> {
        let segments: Vec<_> = self
            .segments
            .iter()
            .filter_map(|s| {
                let lo = s.start.max(start);
                let hi = s.end.min(end);
                (hi > lo).then(|| Segment::new(lo, hi, s.label.clone()))
            })
            .collect();
        Timeline::new(segments).ok()
    }

    /// Re-spans the timeline to exactly `[start, end]`. Uncovered time is
    /// filled with `pad` when given, otherwise the outermost intervals are
    /// stretched.
    pub fn conform(&self, start: f64, end: f64, pad: Option<L>) -> Timeline<L> {
        let mut segments = self.clip(start, end).map(Timeline::into_segments).unwrap_or_default();
        if segments.is_empty() {
            let label = pad.clone().unwrap_or_else(|| self.segments[0].label.clone());
            return Timeline {
                segments: vec![Segment::new(start, end, label)],
            };
        }
        let first = segments[0].start;
        if first > start {
            match &pad {
                Some(p) => segments.insert(0, Segment::new(start, first, p.clone())),
                None => segments[0].start = start,
            }
        }
        let last = segments[segments.len() - 1].end;
        if last < end {
            match &pad {
                Some(p) => segments.push(Segment::new(last, end, p.clone())),
                None => segments.last_mut().expect("non-empty").end = end,
            }
        }
        segments[0].start = start;
        segments.last_mut().expect("non-empty").end = end;
        Timeline { segments }
    }
}

impl<L: Clone + PartialEq> Timeline<L> {
    /// Merges adjacent intervals carrying equal labels.
    pub fn normalize(&self) -> Timeline<L> {
        let mut merged: Vec<Segment<L>> = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            match merged.last_mut() {
                Some(last) if last.label == s.label => last.end = s.end,
                _ => merged.push(s.clone()),
            }
        }
        Timeline { segments: merged }
    }
}

impl<L: fmt::Display> Timeline<L> {
    pub fn to_lab(&self) -> String {
        write_lab(self, |l| l.to_string())
    }
}

/// How `parse_lab` treats a gap wider than [`TIME_TOLERANCE`] between rows.
#[derive(Debug, Clone)]
pub enum GapPolicy<L> {
    /// Insert an interval with this label.
    Fill(L),
    /// Stretch the preceding interval over the gap.
    ExtendPrevious,
    Reject,
}

/// One piece of the common refinement of two timelines.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlap<'a, A, B> {
    pub start: f64,
    pub end: f64,
    pub a: &'a A,
    pub b: &'a B,
}

impl<A, B> Overlap<'_, A, B> {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Parses lab text: one `<start> <end> <label>` row per line, `#` comments
/// and blank lines ignored. Line numbers in errors are 1-based.
pub fn parse_lab<L, E, F>(text: &str, mut label_parser: F, gaps: GapPolicy<L>) -> Result<Timeline<L>, LabError>
where
    L: Clone,
    E: fmt::Display,
    F: FnMut(&str) -> Result<L, E>,
{
    struct Row<L> {
        line: usize,
        start: f64,
        end: f64,
        label: L,
    }

    let mut rows: Vec<Row<L>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (Some(s), Some(e)) = (fields.next(), fields.next()) else {
            return Err(LabError::MalformedLine { line });
        };
        let start: f64 = s.parse().map_err(|_| LabError::MalformedLine { line })?;
        let end: f64 = e.parse().map_err(|_| LabError::MalformedLine { line })?;
        let rest: Vec<&str> = fields.collect();
        if rest.is_empty() || !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(LabError::MalformedLine { line });
        }
        if end < start {
            return Err(LabError::NonMonotonicTime { line });
        }
        if end == start {
            continue;
        }
        let label = label_parser(&rest.join(" "))
            .map_err(|err| LabError::LabelParseError { line, cause: err.to_string() })?;
        rows.push(Row { line, start, end, label });
    }

    if rows.is_empty() {
        return Err(LabError::EmptyTimeline);
    }

    let mut segments: Vec<Segment<L>> = Vec::with_capacity(rows.len());
    for row in rows {
        if let Some(prev) = segments.last_mut() {
            let delta = row.start - prev.end;
            if row.start < prev.start || delta < -TIME_TOLERANCE {
                return Err(LabError::NonMonotonicTime { line: row.line });
            }
            if delta.abs() <= TIME_TOLERANCE {
                let mid = if delta == 0.0 { row.start } else { 0.5 * (row.start + prev.end) };
                prev.end = mid;
                segments.push(Segment::new(mid, row.end, row.label));
                continue;
            }
            match &gaps {
                GapPolicy::Fill(filler) => {
                    let gap_start = prev.end;
                    segments.push(Segment::new(gap_start, row.start, filler.clone()));
                }
                GapPolicy::ExtendPrevious => prev.end = row.start,
                GapPolicy::Reject => return Err(LabError::Gap { line: row.line }),
            }
        }
        segments.push(Segment::new(row.start, row.end, row.label));
    }

    // Midpoint snapping can swallow a sub-millisecond row entirely.
    let mut repaired: Vec<Segment<L>> = Vec::with_capacity(segments.len());
    for mut s in segments {
        if let Some(prev) = repaired.last() {
            s.start = prev.end;
        }
        if s.end > s.start {
            repaired.push(s);
        }
    }

    Timeline::new(repaired).map_err(|_| LabError::EmptyTimeline)
}

/// Prints one row per interval with six-decimal times.
pub fn write_lab<L, F: Fn(&L) -> String>(timeline: &Timeline<L>, label_printer: F) -> String {
    let mut out = String::with_capacity(timeline.len() * 32);
    for s in timeline.segments() {
        out.push_str(&format!("{:.6} {:.6} {}\n", s.start, s.end, label_printer(&s.label)));
    }
    out
}

/// The common refinement of two timelines over the same span.
pub fn co_partition<'a, A, B>(
    a: &'a Timeline<A>,
    b: &'a Timeline<B>,
) -> Result<Vec<Overlap<'a, A, B>>, TimelineError> {
    if !a.same_span(b) {
        return Err(a.span_mismatch(b));
    }
    let (start, end) = a.span();
    let mut cuts: Vec<f64> = a
        .interior_boundaries()
        .chain(b.interior_boundaries())
        .filter(|&t| t > start && t < end)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(start);
    edges.extend(cuts);
    edges.push(end);

    let sa = a.segments();
    let sb = b.segments();
    let (mut i, mut j) = (0usize, 0usize);
    let mut out = Vec::with_capacity(edges.len() - 1);
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        while i + 1 < sa.len() && sa[i].end <= lo {
            i += 1;
        }
        while j + 1 < sb.len() && sb[j].end <= lo {
            j += 1;
        }
        out.push(Overlap {
            start: lo,
            end: hi,
            a: &sa[i].label,
            b: &sb[j].label,
        });
    }
    Ok(out)
}

/// Duration-weighted fraction of the timeline whose label satisfies
/// `predicate`.
pub fn label_proportion<L, P: Fn(&L) -> bool>(timeline: &Timeline<L>, predicate: P) -> f64 {
    let hit: f64 = timeline
        .segments()
        .iter()
        .filter(|s| predicate(&s.label))
        .map(Segment::duration)
        .sum();
    (hit / timeline.duration()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ident(s: &str) -> Result<String, std::convert::Infallible> {
        Ok(s.to_string())
    }

    fn parse(text: &str) -> Result<Timeline<String>, LabError> {
        parse_lab(text, ident, GapPolicy::Fill("N".to_string()))
    }

    fn tl(rows: &[(f64, f64, &str)]) -> Timeline<String> {
        Timeline::new(rows.iter().map(|&(s, e, l)| Segment::new(s, e, l.to_string())).collect()).unwrap()
    }

    #[test]
    fn reads_contiguous_rows() {
        let t = parse("0.0 1.5 C:maj\n1.5 3.0 G:maj").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.span(), (0.0, 3.0));
    }

    #[test]
    fn fills_gaps() {
        let t = parse("0.0 1.0 C:maj\n2.0 3.0 G:maj").unwrap();
        assert_eq!(t, tl(&[(0.0, 1.0, "C:maj"), (1.0, 2.0, "N"), (2.0, 3.0, "G:maj")]));
    }

    #[test]
    fn extend_previous_and_reject() {
        let text = "0.0 1.0 C:maj\n2.0 3.0 G:maj";
        let t = parse_lab(text, ident, GapPolicy::ExtendPrevious).unwrap();
        assert_eq!(t, tl(&[(0.0, 2.0, "C:maj"), (2.0, 3.0, "G:maj")]));
        assert_eq!(parse_lab(text, ident, GapPolicy::Reject), Err(LabError::Gap { line: 2 }));
    }

    #[test]
    fn overlap_beyond_tolerance_is_rejected() {
        assert_eq!(parse("0.0 1.0 C:maj\n0.5 2.0 G:maj"), Err(LabError::NonMonotonicTime { line: 2 }));
    }

    #[test]
    fn micro_gaps_snap_to_midpoint() {
        let t = parse("0.0 1.0004 C:maj\n0.9996 2.0 G:maj").unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.segments()[0].end - 1.0).abs() < 1e-12);
        assert_eq!(t.segments()[0].end, t.segments()[1].start);
    }

    #[test]
    fn malformed_and_label_errors_report_lines() {
        assert_eq!(parse("0.0 1.0 C\n# note\n1.0 x G"), Err(LabError::MalformedLine { line: 3 }));
        assert_eq!(parse("0.0 1.0"), Err(LabError::MalformedLine { line: 1 }));
        assert_eq!(parse("\n# only comments\n"), Err(LabError::EmptyTimeline));
        let err = parse_lab("0 1 C:maj\n1 2 C:zzz", crate::harte::parse_chord, GapPolicy::Reject).unwrap_err();
        assert!(matches!(err, LabError::LabelParseError { line: 2, .. }));
    }

    #[test]
    fn writes_fixed_precision() {
        let t = tl(&[(0.0, 1.5, "C:maj")]);
        assert_eq!(t.to_lab(), "0.000000 1.500000 C:maj\n");
    }

    #[test]
    fn empty_timeline_rejected() {
        assert_eq!(Timeline::<String>::new(vec![]), Err(TimelineError::EmptyTimeline));
    }

    #[test]
    fn normalize_merges_neighbors() {
        let t = tl(&[(0.0, 1.0, "C:maj"), (1.0, 2.0, "C:maj")]);
        assert_eq!(t.normalize(), tl(&[(0.0, 2.0, "C:maj")]));
        let u = tl(&[(0.0, 1.0, "C:maj"), (1.0, 2.0, "G:maj")]);
        assert_eq!(u.normalize(), u);
    }

    #[test]
    fn co_partition_unions_boundaries() {
        let a = tl(&[(0.0, 2.0, "C")]);
        let b = tl(&[(0.0, 1.0, "C"), (1.0, 2.0, "G")]);
        let parts: Vec<_> = co_partition(&a, &b)
            .unwrap()
            .into_iter()
            .map(|o| (o.start, o.end, o.a.clone(), o.b.clone()))
            .collect();
        assert_eq!(
            parts,
            vec![(0.0, 1.0, "C".into(), "C".into()), (1.0, 2.0, "C".into(), "G".into())]
        );
        let c = tl(&[(0.0, 3.0, "C")]);
        assert!(matches!(co_partition(&a, &c), Err(TimelineError::SpanMismatch { .. })));
    }

    #[test]
    fn proportions() {
        let t = tl(&[(0.0, 1.0, "N"), (1.0, 4.0, "C:maj")]);
        assert!((label_proportion(&t, |l| l == "N") - 0.25).abs() < 1e-12);
        assert_eq!(label_proportion(&tl(&[(0.0, 2.0, "N")]), |l| l == "N"), 1.0);
        assert_eq!(label_proportion(&tl(&[(0.0, 2.0, "C")]), |l| l == "N"), 0.0);
    }

    #[test]
    fn label_lookup() {
        let t = tl(&[(0.0, 1.0, "A"), (1.0, 2.0, "B")]);
        assert_eq!(t.label_at(0.5).unwrap(), "A");
        assert_eq!(t.label_at(1.0).unwrap(), "B");
        assert_eq!(t.label_at(2.0).unwrap(), "B");
        assert!(t.label_at(2.5).is_none());
    }

    fn arb_timeline(span: f64) -> impl Strategy<Value = Timeline<u8>> {
        (proptest::collection::vec(0.001f64..1.0, 1..12), proptest::collection::vec(0u8..3, 12)).prop_map(
            move |(weights, labels)| {
                let total: f64 = weights.iter().sum();
                let mut bounds = vec![0.0];
                let mut acc = 0.0;
                for w in &weights[..weights.len() - 1] {
                    acc += w;
                    bounds.push(acc / total * span);
                }
                bounds.push(span);
                Timeline::from_boundaries(&bounds, labels[..weights.len()].to_vec()).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn co_partition_covers_span(a in arb_timeline(10.0), b in arb_timeline(10.0)) {
            let parts = co_partition(&a, &b).unwrap();
            let total: f64 = parts.iter().map(Overlap::duration).sum();
            prop_assert!((total - 10.0).abs() < 1e-9);
            let back = Timeline::new(parts.iter().map(|o| Segment::new(o.start, o.end, *o.a)).collect()).unwrap();
            prop_assert_eq!(back.normalize(), a.normalize());
            let back_b = Timeline::new(parts.iter().map(|o| Segment::new(o.start, o.end, *o.b)).collect()).unwrap();
            prop_assert_eq!(back_b.normalize(), b.normalize());
        }

        #[test]
        fn normalize_is_idempotent(a in arb_timeline(5.0)) {
            let once = a.normalize();
            prop_assert_eq!(once.normalize(), once.clone());
            let p = label_proportion(&a, |l| *l == 0);
            prop_assert!((label_proportion(&once, |l| *l == 0) - p).abs() < 1e-12);
        }

        #[test]
        fn lab_round_trip(a in arb_timeline(30.0)) {
            let text = write_lab(&a, |l| l.to_string());
            let back = parse_lab(&text, |s| s.parse::<u8>(), GapPolicy::Reject).unwrap();
            prop_assert_eq!(back.len(), a.len());
            for (x, y) in back.segments().iter().zip(a.segments()) {
                prop_assert!((x.start - y.start).abs() <= 1e-6);
                prop_assert!((x.end - y.end).abs() <= 1e-6);
                prop_assert_eq!(x.label, y.label);
            }
        }
    }
}
