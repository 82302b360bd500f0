//! Stratified average-precision evaluation for single-person scenes.
//!
//! Every scene holds exactly one ground truth and at most one scored
//! prediction, so matching is trivial: a prediction is a true positive when
//! its IoU with its own scene's box clears the threshold. A match needs
//! `IoU >= t`, except at `t = 0` where any positive overlap counts.
//!
//! Average precision is the area under the interpolated precision-recall
//! curve. Predictions sharing a score form a single operating point, so the
//! result does not depend on the order of tied predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::MeanStd;
use crate::annotation::{Distance, StratumKey};
use crate::geometry::{box_iou, BBox};

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

pub fn is_match(iou: f64, threshold: f64) -> bool {
    if threshold <= 0.0 {
        iou > 0.0
    } else {
        iou >= threshold
    }
}

/// One scene as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalItem {
    pub stratum: StratumKey,
    pub gt_box: BBox,
    /// Predicted box and confidence.
    pub prediction: Option<(BBox, f64)>,
}

impl EvalItem {
    pub fn iou(&self) -> f64 {
        self.prediction
            .map(|(b, _)| box_iou(&b, &self.gt_box))
            .unwrap_or(0.0)
    }

    pub fn center_error(&self) -> Option<f64> {
        self.prediction.map(|(b, _)| {
            let (px, py) = b.center();
            let (gx, gy) = self.gt_box.center();
            (px - gx).hypot(py - gy)
        })
    }
}

/// AP from `(score, is_true_positive)` pairs against `n_gt` ground truths.
pub fn average_precision(detections: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted: Vec<(f64, bool)> = detections.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    // (recall, precision) after each group of tied scores
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // precision envelope, right to left
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// AP of `items` at one IoU threshold, in percent.
pub fn ap_at(items: &[&EvalItem], threshold: f64) -> f64 {
    let detections: Vec<(f64, bool)> = items
        .iter()
        .filter_map(|it| {
            it.prediction
                .map(|(b, score)| (score, is_match(box_iou(&b, &it.gt_box), threshold)))
        })
        .collect();
    100.0 * average_precision(&detections, items.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub map50: f64,
    pub map5095: f64,
    pub map00: f64,
    pub center_err_px: f64,
    pub scenes: usize,
    /// AP for any extra thresholds requested, `(threshold, ap)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<(f64, f64)>,
}

impl StratumMetrics {
    pub fn of(items: &[&EvalItem], extra_thresholds: &[f64]) -> Self {
        let coco = coco_thresholds();
        let errs: Vec<f64> = items.iter().filter_map(|it| it.center_error()).collect();
        Self {
            map50: ap_at(items, 0.5),
            map5095: coco.iter().map(|&t| ap_at(items, t)).sum::<f64>() / coco.len() as f64,
            map00: ap_at(items, 0.0),
            center_err_px: MeanStd::of(&errs).map(|m| m.mean).unwrap_or(0.0),
            scenes: items.len(),
            extra: extra_thresholds
                .iter()
                .map(|&t| (t, ap_at(items, t)))
                .collect(),
        }
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Map50 => self.map50,
            Metric::Map5095 => self.map5095,
            Metric::Map00 => self.map00,
            Metric::CenterErr => self.center_err_px,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Map50,
    Map5095,
    Map00,
    CenterErr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Map50, Metric::Map5095, Metric::Map00, Metric::CenterErr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Map50 => "map50",
            Metric::Map5095 => "map5095",
            Metric::Map00 => "map00",
            Metric::CenterErr => "center_err_px",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub cells: BTreeMap<StratumKey, StratumMetrics>,
    pub by_distance: BTreeMap<Distance, StratumMetrics>,
    pub overall: StratumMetrics,
}

/// Per-stratum, per-distance and overall metrics. Strata without scenes are omitted.
pub fn stratified_report(items: &[EvalItem], extra_thresholds: &[f64]) -> StratifiedReport {
    let mut per_cell: BTreeMap<StratumKey, Vec<&EvalItem>> = BTreeMap::new();
    let mut per_distance: BTreeMap<Distance, Vec<&EvalItem>> = BTreeMap::new();
    for it in items {
        per_cell.entry(it.stratum).or_default().push(it);
        per_distance.entry(it.stratum.distance_m).or_default().push(it);
    }
    let all: Vec<&EvalItem> = items.iter().collect();
    StratifiedReport {
        cells: per_cell
            .into_iter()
            .map(|(k, v)| (k, StratumMetrics::of(&v, extra_thresholds)))
            .collect(),
        by_distance: per_distance
            .into_iter()
            .map(|(k, v)| (k, StratumMetrics::of(&v, extra_thresholds)))
            .collect(),
        overall: StratumMetrics::of(&all, extra_thresholds),
    }
}

impl StratifiedReport {
    /// Rows for `report.csv`.
    pub fn csv_rows(&self, seed: u64, mode: &str) -> String {
        let mut out = String::new();
        for (k, m) in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                k.distance_m.meters(),
                k.visibility_pct.pct(),
                m.map50,
                m.map5095,
                m.map00,
                m.center_err_px,
                seed,
                mode
            );
        }
        out
    }

    pub fn by_distance_rows(&self, seed: u64, mode: &str) -> String {
        let mut out = String::new();
        for (d, m) in &self.by_distance {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                d.meters(),
                m.map50,
                m.map5095,
                m.map00,
                m.center_err_px,
                seed,
                mode
            );
        }
        out
    }
}

pub const REPORT_CSV_HEADER: &str =
    "distance_m,visibility_pct,map50,map5095,map00,center_err_px,seed,mode\n";
pub const BY_DISTANCE_CSV_HEADER: &str = "distance_m,map50,map5095,map00,center_err_px,seed,mode\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("strata differ between the paired reports of seed index {0}")]
    MismatchedStrata(usize),
    #[error("need at least 2 seeds per mode and equal counts, got {baseline} and {psych}")]
    TooFewSeeds { baseline: usize, psych: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Paired `psych - baseline` differences across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunComparison {
    pub cells: BTreeMap<(StratumKey, Metric), Delta>,
    pub by_distance: BTreeMap<(Distance, Metric), Delta>,
}

fn delta(pairs: impl Iterator<Item = (f64, f64)>) -> Delta {
    let diffs: Vec<f64> = pairs.map(|(b, p)| p - b).collect();
    let m = MeanStd::of(&diffs).expect("at least two seeds");
    Delta {
        mean: m.mean,
        std: m.std,
        n: m.n,
    }
}

pub fn compare_runs(
    baseline: &[StratifiedReport],
    psych: &[StratifiedReport],
) -> Result<RunComparison, CompareError> {
    if baseline.len() < 2 || baseline.len() != psych.len() {
        return Err(CompareError::TooFewSeeds {
            baseline: baseline.len(),
            psych: psych.len(),
        });
    }
    for (i, (b, p)) in baseline.iter().zip(psych).enumerate() {
        let same_cells = b.cells.keys().eq(p.cells.keys()) && b.cells.keys().eq(baseline[0].cells.keys());
        let same_dist = b.by_distance.keys().eq(p.by_distance.keys());
        if !(same_cells && same_dist) {
            return Err(CompareError::MismatchedStrata(i));
        }
    }
    let mut cells = BTreeMap::new();
    for k in baseline[0].cells.keys() {
        for m in Metric::ALL {
            let pairs = baseline
                .iter()
                .zip(psych)
                .map(|(b, p)| (b.cells[k].metric(m), p.cells[k].metric(m)));
            cells.insert((*k, m), delta(pairs));
        }
    }
    let mut by_distance = BTreeMap::new();
    for d in baseline[0].by_distance.keys() {
        for m in Metric::ALL {
            let pairs = baseline
                .iter()
                .zip(psych)
                .map(|(b, p)| (b.by_distance[d].metric(m), p.by_distance[d].metric(m)));
            by_distance.insert((*d, m), delta(pairs));
        }
    }
    Ok(RunComparison { cells, by_distance })
}

impl RunComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance_m,visibility_pct,metric,mean_delta,std_delta,n\n");
        for ((d, m), v) in &self.by_distance {
            let _ = writeln!(out, "{},all,{},{},{},{}", d.meters(), m.name(), v.mean, v.std, v.n);
        }
        for ((k, m), v) in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                k.distance_m.meters(),
                k.visibility_pct.pct(),
                m.name(),
                v.mean,
                v.std,
                v.n
            );
        }
        out
    }
}
