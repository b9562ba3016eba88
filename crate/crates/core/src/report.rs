//! Per-stage corpus scores in the layout of a cumulative ablation table.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate_corpus, EvalError, Metric};
use crate::parallel::Execution;
use crate::refine::{ChordTimeline, PipelineRun, StageId};

pub const BASELINE_ROW: &str = "Baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// Percentages in [`Metric::ALL`] order; `None` when nothing was
    /// evaluated for that metric.
    pub scores: Vec<Option<f64>>,
}

impl ReportRow {
    pub fn score(&self, metric: Metric) -> Option<f64> {
        let idx = Metric::ALL.iter().position(|&m| m == metric)?;
        self.scores[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub dataset: String,
    pub songs: usize,
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Row names: the baseline, then one row per stage.
pub fn row_names() -> Vec<&'static str> {
    std::iter::once(BASELINE_ROW).chain(StageId::ALL.iter().map(|s| s.title())).collect()
}

/// Scores every snapshot index of `runs` against the references. Row `k`
/// is the corpus after stage `k`.
pub fn build_report<R: Borrow<ChordTimeline> + Sync>(
    dataset: &str,
    runs: &[(R, PipelineRun)],
    execution: Execution,
) -> Result<CorpusReport, EvalError> {
    let mut rows = Vec::new();
    for (k, name) in row_names().into_iter().enumerate() {
        let pairs: Vec<(&ChordTimeline, &ChordTimeline)> =
            runs.iter().map(|(reference, run)| (reference.borrow(), &run.snapshots[k])).collect();
        let scores = evaluate_corpus(&pairs, execution)?;
        rows.push(ReportRow {
            name: name.to_string(),
            scores: Metric::ALL.iter().map(|&m| scores.score(m).map(|s| s * 100.0)).collect(),
        });
    }
    Ok(CorpusReport {
        dataset: dataset.to_string(),
        songs: runs.len(),
        metrics: Metric::ALL.iter().map(|m| m.name().to_string()).collect(),
        rows,
    })
}

fn cell(score: Option<f64>) -> String {
    score.map_or_else(|| "-".to_string(), |s| format!("{s:.2}"))
}

impl CorpusReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("dataset,stage,{}\n", self.metrics.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.scores.iter().map(|&s| cell(s)).collect();
            out.push_str(&format!("{},{},{}\n", self.dataset, row.name, cells.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:width$}", "stage");
        for m in &self.metrics {
            out.push_str(&format!(" {m:>9}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:width$}", row.name));
            for &s in &row.scores {
                out.push_str(&format!(" {:>9}", cell(s)));
            }
            out.push('\n');
        }
        out
    }
}
