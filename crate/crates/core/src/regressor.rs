//! Box regressor for the synthetic scenes, its training loop and the
//! baseline-versus-human-loss harness.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::SigmaTable;
use crate::eval::{self, compare_runs, CompareError, EvalItem, RunComparison, StratifiedReport};
use crate::geometry::BBox;
use crate::loss::{human_loss_and_grad, LossConfig, LossError, LossSample, PsychLossParams};
use crate::synth::{self, DatasetSplit, ObserverModel, SynthConfig, SynthError, SyntheticScene, FRAME_PX};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error("feature length {got} does not match the model input {expected}")]
    FeatureMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Baseline,
    Psych,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::Psych => "psych",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, init_std).expect("finite std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Linear map (optionally through one tanh hidden layer) from features to
/// frame-normalised `(x_min, y_min, width, height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    /// Per-feature `(mean, std)` applied before the first layer.
    standardize: Vec<(f64, f64)>,
    hidden: Option<Dense>,
    output: Dense,
}

impl Regressor {
    pub fn new(inputs: usize, hidden_units: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let standardize = vec![(0.0, 1.0); inputs];
        match hidden_units {
            Some(h) => Self {
                standardize,
                hidden: Some(Dense::new(inputs, h, 1.0 / (inputs as f64).sqrt(), &mut rng)),
                output: Dense::new(h, 4, 0.01, &mut rng),
            },
            None => Self {
                standardize,
                hidden: None,
                output: Dense::new(inputs, 4, 0.01, &mut rng),
            },
        }
    }

    /// Fits the input standardisation to a training set.
    pub fn fit_standardization(&mut self, scenes: &[SyntheticScene]) {
        let n = scenes.len().max(1) as f64;
        for (i, slot) in self.standardize.iter_mut().enumerate() {
            let mean = scenes.iter().map(|s| s.feature_vec[i]).sum::<f64>() / n;
            let var = scenes.iter().map(|s| (s.feature_vec[i] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            *slot = (mean, if std > 1e-12 { std } else { 1.0 });
        }
    }

    fn standardized(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.standardize)
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inputs(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).inputs
    }

    pub fn param_count(&self) -> usize {
        self.output.param_count() + self.hidden.as_ref().map_or(0, Dense::param_count)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    /// Flat parameter vector (hidden weights, hidden bias, output weights, output bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    fn apply_update(&mut self, grad: &[f64], lr: f64) {
        let mut offset = 0;
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w -= lr * grad[offset];
                offset += 1;
            }
        }
    }

    /// Raw prediction in pixels. Width and height may be non-positive early in training.
    pub fn predict_params(&self, features: &[f64]) -> [f64; 4] {
        let x = self.standardized(features);
        let out = match &self.hidden {
            Some(h) => self.output.forward(&h.forward(&x).iter().map(|v| v.tanh()).collect::<Vec<_>>()),
            None => self.output.forward(&x),
        };
        std::array::from_fn(|i| out[i] * FRAME_PX)
    }

    /// Prediction as a valid box (sizes floored at 1e-3 px).
    pub fn predict(&self, features: &[f64]) -> BBox {
        let p = self.predict_params(features);
        BBox {
            x_min: p[0],
            y_min: p[1],
            width: p[2].max(1e-3),
            height: p[3].max(1e-3),
        }
    }

    /// Accumulates `d loss / d params` given `d loss / d output_px`.
    fn backprop(&self, features: &[f64], d_out_px: &[f64; 4], grad: &mut [f64]) {
        let features = &self.standardized(features)[..];
        let d_out: Vec<f64> = d_out_px.iter().map(|g| g * FRAME_PX).collect();
        match &self.hidden {
            None => accumulate_dense(&self.output, features, &d_out, grad, 0),
            Some(h) => {
                let pre = h.forward(features);
                let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let hidden_len = h.param_count();
                accumulate_dense(&self.output, &act, &d_out, grad, hidden_len);
                let d_act: Vec<f64> = (0..h.outputs)
                    .map(|j| {
                        let back: f64 = (0..4).map(|o| self.output.weights[o * h.outputs + j] * d_out[o]).sum();
                        back * (1.0 - act[j] * act[j])
                    })
                    .collect();
                accumulate_dense(h, features, &d_act, grad, 0);
            }
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn accumulate_dense(layer: &Dense, x: &[f64], d_out: &[f64], grad: &mut [f64], offset: usize) {
    let bias_offset = offset + layer.weights.len();
    for o in 0..layer.outputs {
        for i in 0..layer.inputs {
            grad[offset + o * layer.inputs + i] += d_out[o] * x[i];
        }
        grad[bias_offset + o] += d_out[o];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub hidden_units: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            clip_norm: 10.0,
            hidden_units: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub regressor: Regressor,
    /// Mean training loss before the first update, then after every epoch.
    pub loss_curve: Vec<f64>,
}

fn loss_sample(reg: &Regressor, scene: &SyntheticScene, mode: LossMode) -> LossSample {
    let p = reg.predict_params(&scene.feature_vec);
    LossSample {
        pred_box: BBox {
            x_min: p[0],
            y_min: p[1],
            width: p[2],
            height: p[3],
        },
        gt_box: scene.gt_box,
        stratum: scene.stratum,
        has_behavioral_data: mode == LossMode::Psych && scene.has_behavioral_data,
    }
}

fn mean_loss(reg: &Regressor, scenes: &[SyntheticScene], mode: LossMode, params: &PsychLossParams) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in scenes {
        total += human_loss_and_grad(&loss_sample(reg, s, mode), params)?.0;
    }
    Ok(total / scenes.len() as f64)
}

/// Mini-batch gradient descent with a fixed step and global-norm clipping.
///
/// Baseline mode trains on the plain default loss (`A = 0`, `B = 1`, no
/// penalty); psych mode uses `params` and applies the penalty to scenes
/// flagged as having behavioral data.
pub fn train(
    scenes: &[SyntheticScene],
    mode: LossMode,
    params: &PsychLossParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let inputs = scenes[0].feature_vec.len();
    if let Some(bad) = scenes.iter().find(|s| s.feature_vec.len() != inputs) {
        return Err(TrainError::FeatureMismatch {
            expected: inputs,
            got: bad.feature_vec.len(),
        });
    }
    let baseline;
    let params = match mode {
        LossMode::Baseline => {
            baseline = PsychLossParams::baseline(params.default_loss);
            &baseline
        }
        LossMode::Psych => params,
    };
    params.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = Regressor::new(inputs, cfg.hidden_units, seed);
    reg.fit_standardization(scenes);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut grad = vec![0.0; reg.param_count()];
    let mut loss_curve = vec![mean_loss(&reg, scenes, mode, params)?];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &idx in batch {
                let scene = &scenes[idx];
                let (loss, d_out) = human_loss_and_grad(&loss_sample(&reg, scene, mode), params)?;
                if !loss.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch });
                }
                reg.backprop(&scene.feature_vec, &d_out, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let shrink = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= shrink);
            }
            reg.apply_update(&grad, cfg.learning_rate);
        }
        let epoch_loss = mean_loss(&reg, scenes, mode, params)?;
        if !epoch_loss.is_finite() || !reg.is_finite() {
            return Err(TrainError::DivergedLoss { epoch });
        }
        loss_curve.push(epoch_loss);
    }
    Ok(TrainResult {
        regressor: reg,
        loss_curve,
    })
}

/// One confidence-1 prediction per scene, evaluated per stratum.
pub fn evaluate(reg: &Regressor, test_scenes: &[SyntheticScene], iou_thresholds: &[f64]) -> StratifiedReport {
    let items: Vec<EvalItem> = test_scenes
        .iter()
        .map(|s| EvalItem {
            stratum: s.stratum,
            gt_box: s.gt_box,
            prediction: Some((reg.predict(&s.feature_vec), 1.0)),
        })
        .collect();
    eval::stratified_report(&items, iou_thresholds)
}

/// Everything needed to reproduce a baseline-versus-psych comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub synth: SynthConfig,
    pub observer: ObserverModel,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub n_per_stratum: usize,
    pub behavior_per_stratum: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            observer: ObserverModel::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            n_per_stratum: 500,
            behavior_per_stratum: 100,
            data_seed: 7,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub mode: LossMode,
    pub result: TrainResult,
    pub report: StratifiedReport,
}

#[derive(Debug, Clone)]
pub struct HarnessOutput {
    pub dataset: DatasetSplit,
    pub sigma_table: SigmaTable,
    pub baseline: Vec<SeedRun>,
    pub psych: Vec<SeedRun>,
    pub comparison: Option<RunComparison>,
}

pub fn harness_params(cfg: &HarnessConfig) -> Result<PsychLossParams, TrainError> {
    let sigma = synth::simulated_sigma_table(
        &cfg.synth,
        &cfg.observer,
        cfg.behavior_per_stratum,
        cfg.data_seed.wrapping_add(1),
        cfg.loss.sigma_min,
    );
    Ok(cfg.loss.clone().into_params(sigma)?)
}

/// Trains both modes for every seed on one dataset and compares them.
pub fn run_harness(cfg: &HarnessConfig, modes: &[LossMode]) -> Result<HarnessOutput, TrainError> {
    let dataset = synth::generate_dataset_with(&cfg.synth, cfg.n_per_stratum, cfg.data_seed)?;
    let params = harness_params(cfg)?;
    let mut baseline = Vec::new();
    let mut psych = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in modes {
            let result = train(&dataset.train, mode, &params, &cfg.train, seed)?;
            let report = evaluate(&result.regressor, &dataset.test, &[]);
            let run = SeedRun {
                seed,
                mode,
                result,
                report,
            };
            match mode {
                LossMode::Baseline => baseline.push(run),
                LossMode::Psych => psych.push(run),
            }
        }
    }
    let comparison = if baseline.len() >= 2 && baseline.len() == psych.len() {
        let b: Vec<_> = baseline.iter().map(|r| r.report.clone()).collect();
        let p: Vec<_> = psych.iter().map(|r| r.report.clone()).collect();
        Some(compare_runs(&b, &p)?)
    } else {
        None
    };
    Ok(HarnessOutput {
        dataset,
        sigma_table: params.sigma_table,
        baseline,
        psych,
        comparison,
    })
}
