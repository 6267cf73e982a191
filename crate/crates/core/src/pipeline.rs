//! Stage wiring shared by the CLI, the examples and the end-to-end tests.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{grid_search, ConfusionCounts, EvalCase, GridResult};
use crate::inference::{classify_heatmap, predict_heatmap, Heatmap, InferenceOptions, InferenceStats, PreparedSlide, ThresholdPair};
use crate::model::SegModel;
use crate::sampler::{extract_patches, TrainPatch};
use crate::slide_io::{SectionLabel, SectionRecord, SlideBundle};
use crate::trainer::{select_top_epochs, EpochReport};

/// All tissue patches of every slide, in slide order.
pub fn collect_patches(bundles: &[SlideBundle], size: usize, stride: usize, mag_divisor: usize) -> Result<Vec<TrainPatch>> {
    let mut out = Vec::new();
    for b in bundles {
        out.extend(extract_patches(b, size, stride, mag_divisor)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SectionHeatmap {
    pub slide_id: String,
    pub section: SectionRecord,
    pub heatmap: Heatmap,
}

/// Heatmaps for every section of every slide, plus the summed inference stats.
pub fn section_heatmaps(
    model: &SegModel<f32>,
    bundles: &[SlideBundle],
    mag_divisor: usize,
    opts: &InferenceOptions,
) -> Result<(Vec<SectionHeatmap>, InferenceStats)> {
    let mut out = Vec::new();
    let mut total = InferenceStats::default();
    for b in bundles {
        let slide = PreparedSlide::new(b, mag_divisor)?;
        for s in &b.sections {
            let (heatmap, stats) = predict_heatmap(model, &slide, s, opts)?;
            total.patches += stats.patches;
            total.macs += stats.macs;
            out.push(SectionHeatmap { slide_id: b.slide_id.clone(), section: s.clone(), heatmap });
        }
    }
    Ok((out, total))
}

/// Grid-search cases from sections with a known truth label.
pub fn eval_cases(maps: &[SectionHeatmap]) -> Vec<EvalCase> {
    maps.iter()
        .filter_map(|m| m.section.truth_label.map(|truth| EvalCase { heatmap: m.heatmap.clone(), truth }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SelectOptions {
    /// Number of best-IoU epochs to grid-search.
    pub top_n: usize,
    pub mag_divisor: usize,
    pub inference: InferenceOptions,
    pub pred_grid: Vec<f64>,
    pub area_grid: Vec<f64>,
    pub beta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Selection {
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub thresholds: ThresholdPair,
    pub grid: GridResult,
}

/// Grid-searches each of the `opts.top_n` best epochs on the validation slides and
/// keeps the checkpoint/threshold pair with the best F_β (ties: higher
/// sensitivity, then the earlier epoch).
pub fn select_model(reports: &[EpochReport], val: &[SlideBundle], opts: &SelectOptions) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for r in select_top_epochs(reports, opts.top_n) {
        let path = r.checkpoint.clone().ok_or_else(|| Error::Usage(format!("epoch {} has no checkpoint", r.epoch)))?;
        let model = SegModel::<f32>::load(&path)?;
        let (maps, _) = section_heatmaps(&model, val, opts.mag_divisor, &opts.inference)?;
        let grid = grid_search(&eval_cases(&maps), &opts.pred_grid, &opts.area_grid, opts.beta)?;
        let better = match &best {
            None => true,
            Some(b) => {
                let (x, y) = (&grid.best_row, &b.grid.best_row);
                let sens = |row: &crate::evaluation::ScoreRow| row.tp as f64 / (row.tp + row.fn_).max(1) as f64;
                x.f_beta > y.f_beta
                    || (x.f_beta == y.f_beta && sens(x) > sens(y))
                    || (x.f_beta == y.f_beta && sens(x) == sens(y) && r.epoch < b.epoch)
            }
        };
        if better {
            best = Some(Selection { checkpoint: path, epoch: r.epoch, thresholds: grid.best, grid });
        }
    }
    best.ok_or_else(|| Error::validation("reports", "no epochs to select from"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SectionPrediction {
    pub slide_id: String,
    pub section_id: String,
    pub truth: Option<SectionLabel>,
    pub predicted: SectionLabel,
}

pub fn classify_all(maps: &[SectionHeatmap], thresholds: ThresholdPair) -> Vec<SectionPrediction> {
    maps.iter()
        .map(|m| SectionPrediction {
            slide_id: m.slide_id.clone(),
            section_id: m.section.section_id.clone(),
            truth: m.section.truth_label,
            predicted: classify_heatmap(&m.heatmap, thresholds).label,
        })
        .collect()
}

pub fn confusion(preds: &[SectionPrediction]) -> ConfusionCounts {
    ConfusionCounts::from_pairs(preds.iter().filter_map(|p| p.truth.map(|t| (t, p.predicted))))
}

/// Directory holding a slide's heatmaps under an output root.
pub fn heatmap_dir(root: &Path, slide_id: &str) -> PathBuf {
    root.join(slide_id).join("heatmaps")
}
