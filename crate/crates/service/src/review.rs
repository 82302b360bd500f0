//! Submission review: control accuracy, response-time plausibility and how
//! much of each image the lens trail covered.

use psych_core::behavior::BehavioralRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewThresholds {
    pub min_controls: usize,
    pub rt_min_ms: u64,
    pub rt_max_ms: u64,
    pub min_coverage: f64,
    /// Cells per side of the coverage grid.
    pub grid: usize,
}

impl Default for ReviewThresholds {
    fn default() -> Self {
        Self {
            min_controls: 2,
            rt_min_ms: 300,
            rt_max_ms: 300_000,
            min_coverage: 0.15,
            grid: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtFlag {
    pub question_idx: usize,
    pub response_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResult {
    pub control_correct: usize,
    pub rt_flags: Vec<RtFlag>,
    pub trail_coverage_score: f64,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

/// Fraction of a `grid x grid` partition of the image touched by any lens
/// disk of the trail.
pub fn trail_coverage(record: &BehavioralRecord, grid: usize) -> f64 {
    let grid = grid.max(1);
    let cw = f64::from(record.image_width_px) / grid as f64;
    let ch = f64::from(record.image_height_px) / grid as f64;
    let mut touched = vec![false; grid * grid];
    for e in &record.events {
        let r = e.lens_radius_px;
        let col_lo = ((e.x - r) / cw).floor().max(0.0) as usize;
        let col_hi = (((e.x + r) / cw).floor().max(0.0) as usize).min(grid - 1);
        let row_lo = ((e.y - r) / ch).floor().max(0.0) as usize;
        let row_hi = (((e.y + r) / ch).floor().max(0.0) as usize).min(grid - 1);
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let (x0, y0) = (col as f64 * cw, row as f64 * ch);
                let dx = e.x.clamp(x0, x0 + cw) - e.x;
                let dy = e.y.clamp(y0, y0 + ch) - e.y;
                if dx * dx + dy * dy < r * r {
                    touched[row * grid + col] = true;
                }
            }
        }
    }
    touched.iter().filter(|t| **t).count() as f64 / (grid * grid) as f64
}

pub fn review_submission(records: &[BehavioralRecord], thresholds: &ReviewThresholds) -> ReviewResult {
    let control_correct = records.iter().filter(|r| r.is_control && r.is_hit()).count();
    let rt_flags: Vec<RtFlag> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !(thresholds.rt_min_ms..=thresholds.rt_max_ms).contains(&r.response_time_ms))
        .map(|(question_idx, r)| RtFlag {
            question_idx,
            response_time_ms: r.response_time_ms,
        })
        .collect();
    let trail_coverage_score = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| trail_coverage(r, thresholds.grid)).sum::<f64>() / records.len() as f64
    };

    let mut reasons = Vec::new();
    if control_correct < thresholds.min_controls {
        reasons.push(format!(
            "{control_correct} control questions correct, need {}",
            thresholds.min_controls
        ));
    }
    if !rt_flags.is_empty() {
        reasons.push(format!(
            "{} response times outside {}..={} ms",
            rt_flags.len(),
            thresholds.rt_min_ms,
            thresholds.rt_max_ms
        ));
    }
    if trail_coverage_score < thresholds.min_coverage {
        reasons.push(format!(
            "trail coverage {trail_coverage_score:.3} below {}",
            thresholds.min_coverage
        ));
    }
    ReviewResult {
        control_correct,
        rt_flags,
        trail_coverage_score,
        verdict: if reasons.is_empty() { Verdict::Accept } else { Verdict::Reject },
        reasons,
    }
}
