//! Analysis of the behavioral data: IoU histograms, human accuracy per
//! stratum, the sigma table that parameterises the human penalty, response
//! times, search heatmaps and scan-time projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Distance, StratumKey, Visibility};
use crate::behavior::BehavioralRecord;
use crate::geometry::CircleSelection;

pub const HISTOGRAM_BINS: usize = 10;

/// Smallest sigma handed to the penalty; `accuracy = 100` would otherwise give zero.
pub const DEFAULT_SIGMA_MIN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("grid cell size must be positive")]
    InvalidCell,
    #[error("trail has no events")]
    EmptyTrail,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("sigma table row {row}: {message}")]
    BadSigmaRow { row: usize, message: String },
}

/// Bin of an IoU in `(0, 1]` split into ten equal half-open ranges `(k/10, (k+1)/10]`.
pub fn iou_bin(iou: f64) -> Option<usize> {
    if !(iou > 0.0 && iou <= 1.0) {
        return None;
    }
    (0..HISTOGRAM_BINS).find(|&k| iou <= (k + 1) as f64 / HISTOGRAM_BINS as f64)
}

/// Per-stratum histograms of positive IoUs. Every stratum is present.
pub fn iou_histograms(records: &[BehavioralRecord]) -> BTreeMap<StratumKey, [usize; HISTOGRAM_BINS]> {
    let mut out: BTreeMap<_, _> = StratumKey::all().map(|k| (k, [0; HISTOGRAM_BINS])).collect();
    for r in records {
        if let Some(bin) = iou_bin(r.iou) {
            out.entry(r.stratum()).or_insert([0; HISTOGRAM_BINS])[bin] += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    /// `None` when the stratum has no samples.
    pub accuracy_pct: Option<f64>,
    pub hits: usize,
    pub samples: usize,
}

/// Human hit rate per stratum at one IoU threshold.
///
/// With a single confidence-1 selection per single-person image, average
/// precision reduces to this hit rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub iou_threshold: f64,
    pub cells: BTreeMap<StratumKey, AccuracyCell>,
}

impl AccuracyTable {
    pub fn get(&self, key: StratumKey) -> Option<f64> {
        self.cells.get(&key).and_then(|c| c.accuracy_pct)
    }
}

/// `100 * |iou > threshold| / |stratum|` for every stratum.
pub fn accuracy_table(records: &[BehavioralRecord], iou_threshold: f64) -> AccuracyTable {
    let mut counts: BTreeMap<StratumKey, (usize, usize)> =
        StratumKey::all().map(|k| (k, (0, 0))).collect();
    for r in records {
        let c = counts.entry(r.stratum()).or_default();
        c.1 += 1;
        if r.iou > iou_threshold {
            c.0 += 1;
        }
    }
    let cells = counts
        .into_iter()
        .map(|(k, (hits, samples))| {
            let accuracy_pct = (samples > 0).then(|| 100.0 * hits as f64 / samples as f64);
            (
                k,
                AccuracyCell {
                    accuracy_pct,
                    hits,
                    samples,
                },
            )
        })
        .collect();
    AccuracyTable {
        iou_threshold,
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaCell {
    pub sigma: f64,
    pub accuracy_pct: Option<f64>,
    pub imputed: bool,
}

/// Spread of the human penalty per stratum, `100 - accuracy` in pixels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SigmaTable {
    pub cells: BTreeMap<StratumKey, SigmaCell>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SigmaRow {
    distance_m: u32,
    visibility_pct: u32,
    accuracy_pct: Option<f64>,
    sigma: f64,
    imputed: bool,
}

impl SigmaTable {
    /// Same sigma in every stratum.
    pub fn uniform(sigma: f64) -> Self {
        Self {
            cells: StratumKey::all()
                .map(|k| {
                    (
                        k,
                        SigmaCell {
                            sigma,
                            accuracy_pct: None,
                            imputed: false,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, key: StratumKey) -> Option<f64> {
        self.cells.get(&key).map(|c| c.sigma)
    }

    pub fn set(&mut self, key: StratumKey, sigma: f64) {
        self.cells.insert(
            key,
            SigmaCell {
                sigma,
                accuracy_pct: None,
                imputed: false,
            },
        );
    }

    pub fn to_csv_string(&self) -> Result<String, AnalyticsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (k, c) in &self.cells {
            w.serialize(SigmaRow {
                distance_m: k.distance_m.meters(),
                visibility_pct: k.visibility_pct.pct(),
                accuracy_pct: c.accuracy_pct,
                sigma: c.sigma,
                imputed: c.imputed,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalyticsError> {
        let text = self.to_csv_string()?;
        std::fs::write(path, text).map_err(|e| AnalyticsError::Csv(e.into()))
    }

    pub fn read_csv(path: &Path) -> Result<Self, AnalyticsError> {
        let reader = csv::Reader::from_path(path)?;
        Self::from_csv_reader(reader)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, AnalyticsError> {
        Self::from_csv_reader(csv::Reader::from_reader(text.as_bytes()))
    }

    fn from_csv_reader<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<Self, AnalyticsError> {
        let mut cells = BTreeMap::new();
        for (idx, row) in reader.deserialize::<SigmaRow>().enumerate() {
            let row = row?;
            let bad = |message: String| AnalyticsError::BadSigmaRow {
                row: idx + 1,
                message,
            };
            let key = StratumKey::from_raw(row.distance_m, row.visibility_pct)
                .map_err(|e| bad(e.to_string()))?;
            if !(row.sigma.is_finite() && row.sigma > 0.0) {
                return Err(bad(format!("sigma must be positive, got {}", row.sigma)));
            }
            cells.insert(
                key,
                SigmaCell {
                    sigma: row.sigma,
                    accuracy_pct: row.accuracy_pct,
                    imputed: row.imputed,
                },
            );
        }
        Ok(Self { cells })
    }
}

/// Derives `sigma = max(sigma_min, 100 - accuracy)` for every stratum.
///
/// Strata without samples take the mean sigma of the measured strata at the
/// same distance (or of all measured strata when the whole distance is empty)
/// and are flagged as imputed.
pub fn sigma_table(acc: &AccuracyTable, sigma_min: f64) -> SigmaTable {
    let mut cells = BTreeMap::new();
    for key in StratumKey::all() {
        if let Some(a) = acc.get(key) {
            cells.insert(
                key,
                SigmaCell {
                    sigma: sigma_min.max(100.0 - a),
                    accuracy_pct: Some(a),
                    imputed: false,
                },
            );
        }
    }

    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    let global = mean(&mut cells.values().map(|c| c.sigma));
    let per_distance: BTreeMap<Distance, Option<f64>> = Distance::ALL
        .into_iter()
        .map(|d| {
            (
                d,
                mean(
                    &mut cells
                        .iter()
                        .filter(|(k, _)| k.distance_m == d)
                        .map(|(_, c)| c.sigma),
                ),
            )
        })
        .collect();

    for key in StratumKey::all() {
        cells.entry(key).or_insert_with(|| {
            let sigma = per_distance[&key.distance_m].or(global).unwrap_or(100.0);
            SigmaCell {
                sigma: sigma_min.max(sigma),
                accuracy_pct: None,
                imputed: true,
            }
        });
    }
    SigmaTable { cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single sample.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTimeStats {
    /// Per stratum over true positives; `None` where a stratum has no hit.
    pub true_positive: BTreeMap<StratumKey, Option<MeanStd>>,
    /// Pooled over all misses.
    pub false_positive: Option<MeanStd>,
}

pub fn response_time_stats(records: &[BehavioralRecord]) -> ResponseTimeStats {
    let mut tp: BTreeMap<StratumKey, Vec<f64>> = StratumKey::all().map(|k| (k, vec![])).collect();
    let mut fp = Vec::new();
    for r in records {
        let rt = r.response_time_ms as f64;
        if r.is_hit() {
            tp.entry(r.stratum()).or_default().push(rt);
        } else {
            fp.push(rt);
        }
    }
    ResponseTimeStats {
        true_positive: tp.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect(),
        false_positive: MeanStd::of(&fp),
    }
}

/// Dwell-time mass over a regular grid laid on the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub cell_px: u32,
    pub cols: usize,
    pub rows: usize,
    pub image_width_px: u32,
    pub image_height_px: u32,
    /// Row-major, `rows * cols` cells, in milliseconds.
    pub mass: Vec<f64>,
    pub total_dwell_ms: f64,
}

impl Heatmap {
    pub fn new(image_width_px: u32, image_height_px: u32, cell_px: u32) -> Result<Self, AnalyticsError> {
        if cell_px == 0 {
            return Err(AnalyticsError::InvalidCell);
        }
        let cols = image_width_px.div_ceil(cell_px) as usize;
        let rows = image_height_px.div_ceil(cell_px) as usize;
        Ok(Self {
            cell_px,
            cols,
            rows,
            image_width_px,
            image_height_px,
            mass: vec![0.0; cols * rows],
            total_dwell_ms: 0.0,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.cols + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Spreads `dwell_ms` over the part of the disk inside the image, in
    /// proportion to the disk area falling in each cell.
    pub fn deposit(&mut self, disk: &CircleSelection, dwell_ms: f64) {
        if dwell_ms <= 0.0 {
            return;
        }
        let (w, h) = (f64::from(self.image_width_px), f64::from(self.image_height_px));
        let inside = disk.intersection_area_rect(0.0, 0.0, w, h);
        if inside <= 0.0 {
            return;
        }
        self.total_dwell_ms += dwell_ms;
        let cell = f64::from(self.cell_px);
        let col_range = cell_span(disk.cx - disk.radius, disk.cx + disk.radius, cell, self.cols);
        let row_range = cell_span(disk.cy - disk.radius, disk.cy + disk.radius, cell, self.rows);
        for row in row_range {
            let y0 = row as f64 * cell;
            let y1 = (y0 + cell).min(h);
            for col in col_range.clone() {
                let x0 = col as f64 * cell;
                let x1 = (x0 + cell).min(w);
                let a = disk.intersection_area_rect(x0, y0, x1, y1);
                if a > 0.0 {
                    self.mass[row * self.cols + col] += dwell_ms * a / inside;
                }
            }
        }
    }

    /// Plain-text PGM (P2), scaled so the heaviest cell is 255.
    pub fn to_pgm(&self) -> String {
        let max = self.mass.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for row in self.mass.chunks(self.cols) {
            let line: Vec<String> = row
                .iter()
                .map(|m| {
                    let v = if max > 0.0 { (255.0 * m / max).round() } else { 0.0 };
                    (v as u32).to_string()
                })
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

fn cell_span(lo: f64, hi: f64, cell: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo / cell).floor().max(0.0) as usize;
    let last = ((hi / cell).floor().max(0.0) as usize + 1).min(n);
    first.min(n)..last
}

/// Dwell heatmap of one record's magnifier trail.
///
/// Each interval between consecutive events is charged to the lens disk of
/// the earlier event. A single-event trail puts the whole response time on its
/// lone disk.
pub fn search_heatmap(record: &BehavioralRecord, grid_cell_px: u32) -> Result<Heatmap, AnalyticsError> {
    let mut map = Heatmap::new(record.image_width_px, record.image_height_px, grid_cell_px)?;
    let disk = |e: &crate::behavior::TrailEvent| CircleSelection {
        cx: e.x,
        cy: e.y,
        radius: e.lens_radius_px,
    };
    match record.events.as_slice() {
        [] => return Err(AnalyticsError::EmptyTrail),
        [only] => map.deposit(&disk(only), record.response_time_ms as f64),
        events => {
            for pair in events.windows(2) {
                let dwell = pair[1].t_ms.saturating_sub(pair[0].t_ms) as f64;
                map.deposit(&disk(&pair[0]), dwell);
            }
        }
    }
    Ok(map)
}

/// Seconds needed to visually scan `area_m2` one frame at a time.
///
/// The frame footprint follows from the ground sample distance in mm/pixel;
/// the area is covered by `ceil(area / footprint)` frames.
pub fn scan_time_projection(
    gsd_mm_per_px: f64,
    image_w_px: u32,
    image_h_px: u32,
    per_image_rt_s: f64,
    area_m2: f64,
) -> f64 {
    let footprint = frame_footprint_m2(gsd_mm_per_px, image_w_px, image_h_px);
    (area_m2 / footprint).ceil() * per_image_rt_s
}

pub fn frame_footprint_m2(gsd_mm_per_px: f64, image_w_px: u32, image_h_px: u32) -> f64 {
    (f64::from(image_w_px) * gsd_mm_per_px / 1000.0) * (f64::from(image_h_px) * gsd_mm_per_px / 1000.0)
}

/// Rows of `histograms.csv`.
pub fn histograms_csv(h: &BTreeMap<StratumKey, [usize; HISTOGRAM_BINS]>) -> String {
    let mut out = String::from("distance_m,visibility_pct,bin_lo,bin_hi,count\n");
    for (k, bins) in h {
        for (i, c) in bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.1},{:.1},{}",
                k.distance_m.meters(),
                k.visibility_pct.pct(),
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0,
                c
            );
        }
    }
    out
}

pub fn accuracy_csv(t: &AccuracyTable) -> String {
    let mut out = String::from("distance_m,visibility_pct,iou_threshold,accuracy_pct,hits,samples\n");
    for (k, c) in &t.cells {
        let acc = c.accuracy_pct.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            k.distance_m.meters(),
            k.visibility_pct.pct(),
            t.iou_threshold,
            acc,
            c.hits,
            c.samples
        );
    }
    out
}

pub fn response_time_csv(s: &ResponseTimeStats) -> String {
    let mut out = String::from("kind,distance_m,visibility_pct,mean_ms,std_ms,n\n");
    for (k, c) in &s.true_positive {
        match c {
            Some(m) => {
                let _ = writeln!(
                    out,
                    "tp,{},{},{},{},{}",
                    k.distance_m.meters(),
                    k.visibility_pct.pct(),
                    m.mean,
                    m.std,
                    m.n
                );
            }
            None => {
                let _ = writeln!(out, "tp,{},{},,,0", k.distance_m.meters(), k.visibility_pct.pct());
            }
        }
    }
    match &s.false_positive {
        Some(m) => {
            let _ = writeln!(out, "fp,,,{},{},{}", m.mean, m.std, m.n);
        }
        None => out.push_str("fp,,,,,0\n"),
    }
    out
}

/// Convenience for tests and simulators: key from raw integers.
pub fn key(distance_m: u32, visibility_pct: u32) -> StratumKey {
    StratumKey::new(
        Distance::try_from(distance_m).expect("valid distance"),
        Visibility::new(visibility_pct).expect("valid visibility"),
    )
}
