//! Synthetic single-person scenes standing in for aerial frames.
//!
//! Each scene has one ground-truth box in a 1000 x 1000 frame and a feature
//! vector holding noisy observations of the box plus pure-noise distractor
//! dimensions. Noise grows with distance and with occlusion:
//! `std = base * (distance / 10) * (100 / visibility)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{self, SigmaTable};
use crate::annotation::{Distance, StratumKey};
use crate::behavior::{BehavioralRecord, TrailEvent};
use crate::geometry::{circle_box_iou, BBox, CircleSelection};

pub const FRAME_PX: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("need at least 10 scenes per stratum, got {0}")]
    TooFewScenes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Observation noise at 10 m and full visibility, in pixels.
    pub base_noise_px: f64,
    /// Person height at 10 m in pixels; scales with `10 / distance`.
    pub person_height_10m_px: f64,
    pub distractor_dims: usize,
    /// Scene groups play the role of actors for the 80/10/10 split.
    pub groups: usize,
    /// Fraction of training scenes that carry behavioral data.
    pub behavioral_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_noise_px: 0.3,
            person_height_10m_px: 200.0,
            distractor_dims: 4,
            groups: 100,
            behavioral_fraction: 0.12,
        }
    }
}

impl SynthConfig {
    pub fn noise_std(&self, stratum: StratumKey) -> f64 {
        self.base_noise_px * (f64::from(stratum.distance_m.meters()) / 10.0)
            * (100.0 / f64::from(stratum.visibility_pct.pct()))
    }

    pub fn feature_dims(&self) -> usize {
        4 + self.distractor_dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: u64,
    pub group: u32,
    pub stratum: StratumKey,
    pub gt_box: BBox,
    /// Frame-normalised observations: `[cx, cy, w, h, distractors...]`.
    pub feature_vec: Vec<f64>,
    pub has_behavioral_data: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

pub fn generate_dataset(n_per_stratum: usize, seed: u64) -> Result<DatasetSplit, SynthError> {
    generate_dataset_with(&SynthConfig::default(), n_per_stratum, seed)
}

/// Deterministic given `seed`. Groups are split 80/10/10 so no group appears
/// in two partitions.
pub fn generate_dataset_with(
    cfg: &SynthConfig,
    n_per_stratum: usize,
    seed: u64,
) -> Result<DatasetSplit, SynthError> {
    if n_per_stratum < 10 {
        return Err(SynthError::TooFewScenes(n_per_stratum));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = cfg.groups.max(10);
    let mut order: Vec<u32> = (0..groups as u32).collect();
    order.shuffle(&mut rng);
    let n_train = groups * 8 / 10;
    let n_val = groups / 10;
    let mut partition = vec![0u8; groups];
    for (rank, g) in order.iter().enumerate() {
        partition[*g as usize] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut scene_id = 0u64;
    for stratum in StratumKey::all() {
        let noise = Normal::new(0.0, cfg.noise_std(stratum)).expect("finite std");
        for i in 0..n_per_stratum {
            let group = (i % groups) as u32;
            let gt_box = sample_person_box(cfg, stratum.distance_m, &mut rng);
            let (cx, cy) = gt_box.center();
            let mut feature_vec = Vec::with_capacity(cfg.feature_dims());
            for truth in [cx, cy, gt_box.width, gt_box.height] {
                feature_vec.push((truth + noise.sample(&mut rng)) / FRAME_PX);
            }
            for _ in 0..cfg.distractor_dims {
                feature_vec.push(rng.random_range(0.0..1.0));
            }
            let flagged = rng.random_bool(cfg.behavioral_fraction.clamp(0.0, 1.0));
            let scene = SyntheticScene {
                scene_id,
                group,
                stratum,
                gt_box,
                feature_vec,
                has_behavioral_data: false,
            };
            scene_id += 1;
            match partition[group as usize] {
                0 => split.train.push(SyntheticScene {
                    has_behavioral_data: flagged,
                    ..scene
                }),
                1 => split.val.push(scene),
                _ => split.test.push(scene),
            }
        }
    }
    Ok(split)
}

fn sample_person_box(cfg: &SynthConfig, d: Distance, rng: &mut ChaCha8Rng) -> BBox {
    let scale = 10.0 / f64::from(d.meters());
    let h = cfg.person_height_10m_px * scale * rng.random_range(0.8..1.2);
    let w = h * rng.random_range(0.35..0.6);
    let mx = w / 2.0 + 5.0;
    let my = h / 2.0 + 5.0;
    let cx = rng.random_range(mx..FRAME_PX - mx);
    let cy = rng.random_range(my..FRAME_PX - my);
    BBox::from_center(cx, cy, w, h).expect("positive size")
}

/// Simulated observer used to produce behavioral data for the proxy task.
///
/// A worker's final lens lands at the person's center plus Gaussian error
/// with `std = base * (distance / 10) * (100 / visibility)`. With probability
/// `lapse_rate` the worker gives up and selects a uniformly random spot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverModel {
    pub base_error_px: f64,
    pub lens_radius_px: f64,
    pub workers: usize,
    pub lapse_rate: f64,
}

impl Default for ObserverModel {
    fn default() -> Self {
        Self {
            base_error_px: 0.6,
            lens_radius_px: 30.0,
            workers: 50,
            lapse_rate: 0.05,
        }
    }
}

pub fn simulate_behavior(
    cfg: &SynthConfig,
    observer: &ObserverModel,
    n_per_stratum: usize,
    seed: u64,
) -> Vec<BehavioralRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_stratum * 50);
    for stratum in StratumKey::all() {
        let err_std = observer.base_error_px
            * (f64::from(stratum.distance_m.meters()) / 10.0)
            * (100.0 / f64::from(stratum.visibility_pct.pct()));
        let err = Normal::new(0.0, err_std).expect("finite std");
        for i in 0..n_per_stratum {
            let gt = sample_person_box(cfg, stratum.distance_m, &mut rng);
            let (cx, cy) = gt.center();
            let (x, y) = if rng.random_bool(observer.lapse_rate.clamp(0.0, 1.0)) {
                (rng.random_range(0.0..FRAME_PX), rng.random_range(0.0..FRAME_PX))
            } else {
                (
                    (cx + err.sample(&mut rng)).clamp(0.0, FRAME_PX),
                    (cy + err.sample(&mut rng)).clamp(0.0, FRAME_PX),
                )
            };
            let start = TrailEvent {
                t_ms: 0,
                x: FRAME_PX / 2.0,
                y: FRAME_PX / 2.0,
                zoom_level: 1,
                lens_radius_px: observer.lens_radius_px,
            };
            let t_end = rng.random_range(2_000..20_000);
            let end = TrailEvent {
                t_ms: t_end,
                x,
                y,
                ..start
            };
            let sel = CircleSelection {
                cx: x,
                cy: y,
                radius: observer.lens_radius_px,
            };
            let worker = i % observer.workers.max(1);
            out.push(BehavioralRecord {
                session_id: format!("sim-{worker}"),
                worker_id: format!("w{worker}"),
                image_id: format!("sim-{}-{}-{i}", stratum.distance_m.meters(), stratum.visibility_pct.pct()),
                is_control: false,
                events: vec![start, end],
                final_selection: sel,
                response_time_ms: t_end + rng.random_range(0..500),
                iou: circle_box_iou(&sel, &gt),
                distance_m: stratum.distance_m,
                visibility_pct: stratum.visibility_pct,
                image_width_px: FRAME_PX as u32,
                image_height_px: FRAME_PX as u32,
            });
        }
    }
    out
}

/// Sigma table derived from simulated behavior through the regular analytics path.
pub fn simulated_sigma_table(
    cfg: &SynthConfig,
    observer: &ObserverModel,
    n_per_stratum: usize,
    seed: u64,
    sigma_min: f64,
) -> SigmaTable {
    let records = simulate_behavior(cfg, observer, n_per_stratum, seed);
    analytics::sigma_table(&analytics::accuracy_table(&records, 0.0), sigma_min)
}
