//! Section-level confusion metrics, F_β, IoU and threshold grid search.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{binarize_and_label, Heatmap, ThresholdPair};
use crate::slide_io::SectionLabel;

/// Section counts with Tumor as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: SectionLabel, predicted: SectionLabel) {
        match (truth, predicted) {
            (SectionLabel::Tumor, SectionLabel::Tumor) => self.tp += 1,
            (SectionLabel::Tumor, SectionLabel::Normal) => self.fn_ += 1,
            (SectionLabel::Normal, SectionLabel::Tumor) => self.fp += 1,
            (SectionLabel::Normal, SectionLabel::Normal) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (SectionLabel, SectionLabel)>) -> Self {
        let mut c = Self::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }
}

/// Ratios with a zero denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::validation("confusion", "no sections evaluated"));
    }
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: sensitivity,
    })
}

/// `(1+β²)·P·R / (β²·P + R)`, defined as 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / den
}

/// F_β of a confusion table; undefined precision or recall count as 0.
pub fn f_beta_counts(c: &ConfusionCounts, beta: f64) -> f64 {
    let p = ratio(c.tp, c.tp + c.fp).unwrap_or(0.0);
    let r = ratio(c.tp, c.tp + c.fn_).unwrap_or(0.0);
    f_beta(p, r, beta)
}

/// `|A∩B| / |A∪B|`, 1.0 when both masks are empty.
pub fn iou(pred: &[bool], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("iou: {} vs {} pixels", pred.len(), target.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(target) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Probability thresholds `0.05, 0.10, …, 0.95`.
pub fn default_pred_grid() -> Vec<f64> {
    (1..=19).map(|j| j as f64 / 20.0).collect()
}

/// Area thresholds `0, 1280, …, 12800` µm².
pub fn default_area_grid() -> Vec<f64> {
    (0..=10).map(|j| 1280.0 * j as f64).collect()
}

/// A validation section: its heatmap and true label.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub heatmap: Heatmap,
    pub truth: SectionLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pred_t: f64,
    pub area_t: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f_beta: f64,
}

impl ScoreRow {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }

    fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_).unwrap_or(0.0)
    }

    /// Grid order: higher F_β, then higher sensitivity, then lower area_t, then lower pred_t.
    fn better_than(&self, other: &ScoreRow) -> bool {
        let key = self
            .f_beta
            .total_cmp(&other.f_beta)
            .then(self.sensitivity().total_cmp(&other.sensitivity()))
            .then(other.area_t.total_cmp(&self.area_t))
            .then(other.pred_t.total_cmp(&self.pred_t));
        key == Ordering::Greater
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub best: ThresholdPair,
    pub best_row: ScoreRow,
    /// One row per `(pred_t, area_t)` in grid order (pred major).
    pub table: Vec<ScoreRow>,
}

/// Exhaustive F_β search over the grid. Each heatmap is binarized once per
/// `pred_t`; a section is Tumor at `area_t` iff its largest region reaches it.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn grid_search(cases: &[EvalCase], pred_grid: &[f64], area_grid: &[f64], beta: f64) -> Result<GridResult> {
    if pred_grid.is_empty() || area_grid.is_empty() {
        return Err(Error::validation("grid", "prediction and area grids must be non-empty"));
    }
    if !(beta > 0.0) {
        return Err(Error::validation("beta", format!("must be positive, got {beta}")));
    }
    for &p in pred_grid {
        ThresholdPair::new(p, 0.0)?;
    }
    for &a in area_grid {
        ThresholdPair::new(0.5, a)?;
    }
    let mut table = Vec::with_capacity(pred_grid.len() * area_grid.len());
    for &pred_t in pred_grid {
        let largest: Vec<Option<f64>> = cases
            .iter()
            .map(|c| {
                binarize_and_label(&c.heatmap, pred_t).regions.iter().map(|r| r.area_um2).max_by(|a, b| a.total_cmp(b))
            })
            .collect();
        for &area_t in area_grid {
            let counts = ConfusionCounts::from_pairs(cases.iter().zip(&largest).map(|(c, big)| {
                let tumor = big.is_some_and(|a| a >= area_t);
                (c.truth, if tumor { SectionLabel::Tumor } else { SectionLabel::Normal })
            }));
            table.push(ScoreRow {
                pred_t,
                area_t,
                tp: counts.tp,
                fp: counts.fp,
                tn: counts.tn,
                fn_: counts.fn_,
                f_beta: f_beta_counts(&counts, beta),
            });
        }
    }
    let mut best = table[0];
    for row in &table[1..] {
        if row.better_than(&best) {
            best = *row;
        }
    }
    Ok(GridResult { best: ThresholdPair { pred_t: best.pred_t, area_t: best.area_t }, best_row: best, table })
}

pub fn write_score_table(path: &Path, table: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    for row in table {
        w.serialize(row).map_err(|e| Error::corrupt(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
