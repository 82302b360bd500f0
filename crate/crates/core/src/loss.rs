//! Human-guided box regression loss.
//!
//! The human penalty compares the predicted and ground-truth box centers
//! through an unnormalised Gaussian whose spread comes from how well people
//! located the person in the same (distance, visibility) stratum:
//!
//! ```text
//! f       = exp(-(dx^2 + dy^2) / (2 sigma(d, v)^2))
//! penalty = 1 - f
//! loss    = A * penalty + B * (1 - penalty) * default_loss
//! ```
//!
//! Offsets are measured in image pixels and sigma is read as pixels. Samples
//! that were not part of the behavioral study get `penalty = 0`, which leaves
//! `B * default_loss`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{SigmaTable, DEFAULT_SIGMA_MIN};
use crate::annotation::StratumKey;
use crate::geometry::BBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("no sigma for stratum {0}")]
    MissingSigmaCell(StratumKey),
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    L1,
    L2,
}

/// Elementwise regression loss over the four box parameters.
///
/// Errors are divided by the ground-truth diagonal before the elementwise
/// loss is applied, so `beta` is a fraction of the box size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultLossSpec {
    pub kind: LossKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for DefaultLossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::SmoothL1,
            beta: 1.0,
        }
    }
}

impl DefaultLossSpec {
    pub fn smooth_l1(beta: f64) -> Self {
        Self {
            kind: LossKind::SmoothL1,
            beta,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.kind == LossKind::SmoothL1 && !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LossError::InvalidParams(format!(
                "smooth_l1 beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Loss of a single normalised error.
    pub fn elementwise(&self, e: f64) -> f64 {
        match self.kind {
            LossKind::SmoothL1 => {
                let a = e.abs();
                if a < self.beta {
                    e * e / (2.0 * self.beta)
                } else {
                    a - self.beta / 2.0
                }
            }
            LossKind::L1 => e.abs(),
            LossKind::L2 => e * e,
        }
    }

    /// Derivative of [`Self::elementwise`]; L1 takes 0 at the kink.
    pub fn elementwise_grad(&self, e: f64) -> f64 {
        match self.kind {
            LossKind::SmoothL1 => {
                if e.abs() < self.beta {
                    e / self.beta
                } else {
                    e.signum()
                }
            }
            LossKind::L1 => {
                if e == 0.0 {
                    0.0
                } else {
                    e.signum()
                }
            }
            LossKind::L2 => 2.0 * e,
        }
    }
}

/// Bounded Gaussian of the center offset, in `(0, 1]`.
pub fn density(dx: f64, dy: f64, sigma: f64) -> Result<f64, LossError> {
    if !(sigma > 0.0) {
        return Err(LossError::NonPositiveSigma(sigma));
    }
    Ok((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp())
}

/// Mixing weights and penalty spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct PsychLossParams {
    pub a: f64,
    pub b: f64,
    pub sigma_table: SigmaTable,
    pub default_loss: DefaultLossSpec,
}

impl PsychLossParams {
    /// Weights used for every reported run: `A = 0.05`, `B = 0.95`.
    pub const PAPER_A: f64 = 0.05;
    pub const PAPER_B: f64 = 0.95;

    pub fn new(
        a: f64,
        b: f64,
        sigma_table: SigmaTable,
        default_loss: DefaultLossSpec,
    ) -> Result<Self, LossError> {
        let params = Self {
            a,
            b,
            sigma_table,
            default_loss,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_paper_weights(sigma_table: SigmaTable) -> Self {
        Self {
            a: Self::PAPER_A,
            b: Self::PAPER_B,
            sigma_table,
            default_loss: DefaultLossSpec::default(),
        }
    }

    /// Plain default loss: `A = 0`, `B = 1`.
    pub fn baseline(default_loss: DefaultLossSpec) -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            sigma_table: SigmaTable::default(),
            default_loss,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(LossError::InvalidParams(format!(
                "A and B must be non-negative, got A={} B={}",
                self.a, self.b
            )));
        }
        if self.a + self.b <= 0.0 {
            return Err(LossError::InvalidParams("A + B must be positive".into()));
        }
        self.default_loss.validate()
    }
}

/// JSON parameter file: `{"A": .., "B": .., "sigma_min": .., "default_loss": {"kind": .., "beta": ..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default)]
    pub default_loss: DefaultLossSpec,
}

fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            a: PsychLossParams::PAPER_A,
            b: PsychLossParams::PAPER_B,
            sigma_min: DEFAULT_SIGMA_MIN,
            default_loss: DefaultLossSpec::default(),
        }
    }
}

impl LossConfig {
    pub fn load(path: &Path) -> Result<Self, LossError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LossError::InvalidParams(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| LossError::InvalidParams(e.to_string()))?;
        if !(cfg.sigma_min > 0.0) {
            return Err(LossError::NonPositiveSigma(cfg.sigma_min));
        }
        Ok(cfg)
    }

    pub fn into_params(self, sigma_table: SigmaTable) -> Result<PsychLossParams, LossError> {
        let mut table = sigma_table;
        for cell in table.cells.values_mut() {
            cell.sigma = cell.sigma.max(self.sigma_min);
        }
        PsychLossParams::new(self.a, self.b, table, self.default_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub pred_box: BBox,
    pub gt_box: BBox,
    pub stratum: StratumKey,
    pub has_behavioral_data: bool,
}

impl LossSample {
    fn center_offset(&self) -> (f64, f64) {
        let (px, py) = self.pred_box.center();
        let (gx, gy) = self.gt_box.center();
        (px - gx, py - gy)
    }
}

fn lookup_sigma(sample: &LossSample, table: &SigmaTable) -> Result<f64, LossError> {
    let sigma = table
        .get(sample.stratum)
        .ok_or(LossError::MissingSigmaCell(sample.stratum))?;
    if !(sigma > 0.0) {
        return Err(LossError::NonPositiveSigma(sigma));
    }
    Ok(sigma)
}

/// `1 - density(offset, sigma(d, v))`, or 0 for samples without behavioral data.
pub fn human_penalty(sample: &LossSample, sigma_table: &SigmaTable) -> Result<f64, LossError> {
    if !sample.has_behavioral_data {
        return Ok(0.0);
    }
    let sigma = lookup_sigma(sample, sigma_table)?;
    let (dx, dy) = sample.center_offset();
    Ok(1.0 - density(dx, dy, sigma)?)
}

fn normalised_errors(pred: &BBox, gt: &BBox) -> ([f64; 4], f64) {
    let diag = gt.diagonal();
    let p = pred.params();
    let g = gt.params();
    (std::array::from_fn(|i| (p[i] - g[i]) / diag), diag)
}

/// Sum of the elementwise loss over `(x_min, y_min, width, height)`.
pub fn default_loss(pred_box: &BBox, gt_box: &BBox, spec: &DefaultLossSpec) -> f64 {
    let (errors, _) = normalised_errors(pred_box, gt_box);
    errors.iter().map(|&e| spec.elementwise(e)).sum()
}

/// Gradient of [`default_loss`] with respect to the predicted box parameters.
pub fn default_loss_grad(pred_box: &BBox, gt_box: &BBox, spec: &DefaultLossSpec) -> [f64; 4] {
    let (errors, diag) = normalised_errors(pred_box, gt_box);
    errors.map(|e| spec.elementwise_grad(e) / diag)
}

pub fn human_loss(sample: &LossSample, params: &PsychLossParams) -> Result<f64, LossError> {
    Ok(human_loss_and_grad(sample, params)?.0)
}

pub fn human_loss_grad(sample: &LossSample, params: &PsychLossParams) -> Result<[f64; 4], LossError> {
    Ok(human_loss_and_grad(sample, params)?.1)
}

/// Loss and its gradient over `(x_min, y_min, width, height)` of the prediction.
///
/// With `p` the penalty and `L` the default loss,
/// `d loss = (A - B L) dp + B (1 - p) dL`, where `dp/dcx = f dx / sigma^2`
/// and the center moves by 1 per unit of `x_min` and 1/2 per unit of `width`.
pub fn human_loss_and_grad(
    sample: &LossSample,
    params: &PsychLossParams,
) -> Result<(f64, [f64; 4]), LossError> {
    let spec = &params.default_loss;
    let l = default_loss(&sample.pred_box, &sample.gt_box, spec);
    let dl = default_loss_grad(&sample.pred_box, &sample.gt_box, spec);

    if !sample.has_behavioral_data {
        return Ok((params.b * l, dl.map(|g| params.b * g)));
    }

    let sigma = lookup_sigma(sample, &params.sigma_table)?;
    let (dx, dy) = sample.center_offset();
    let f = density(dx, dy, sigma)?;
    let p = 1.0 - f;
    let s2 = sigma * sigma;
    let dp_dcx = f * dx / s2;
    let dp_dcy = f * dy / s2;
    let dp = [dp_dcx, dp_dcy, 0.5 * dp_dcx, 0.5 * dp_dcy];

    let loss = params.a * p + params.b * (1.0 - p) * l;
    let mix = params.a - params.b * l;
    let keep = params.b * (1.0 - p);
    let grad = std::array::from_fn(|i| mix * dp[i] + keep * dl[i]);
    Ok((loss, grad))
}

/// Coefficients of the eighth-order central first-derivative stencil at offsets 1..=4.
const STENCIL: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];
const STENCIL_REACH: f64 = 4.0;

/// Relative error floor: components smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Step used for parameter `value`.
pub fn fd_step(value: f64) -> f64 {
    1e-4 * value.abs().max(1.0)
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn central_difference<F>(params: [f64; 4], loss: F) -> [f64; 4]
where
    F: Fn([f64; 4]) -> f64,
{
    std::array::from_fn(|i| {
        let h = fd_step(params[i]);
        let mut acc = 0.0;
        for (k, c) in STENCIL.iter().enumerate() {
            let step = (k + 1) as f64 * h;
            let mut plus = params;
            let mut minus = params;
            plus[i] += step;
            minus[i] -= step;
            acc += c * (loss(plus) - loss(minus));
        }
        acc / h
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckFailure {
    pub case: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub sigma_min_cases: usize,
    pub straddle_cases: usize,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Configuration of the random cases drawn by [`gradcheck_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub sigma_min: f64,
    pub tolerance: f64,
    /// When set, every case uses these weights and loss spec instead of random ones.
    pub fixed: Option<(f64, f64, DefaultLossSpec)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            tolerance: GRADCHECK_TOLERANCE,
            fixed: None,
        }
    }
}

struct Case {
    sample: LossSample,
    params: PsychLossParams,
    at_sigma_min: bool,
    straddles: bool,
}

fn draw_case(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Case {
    loop {
        if let Some(case) = try_draw_case(rng, cfg) {
            return case;
        }
    }
}

// `None` when a finite-difference stencil would cross a kink of the
// elementwise loss, where central differences do not estimate the derivative.
fn try_draw_case(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Option<Case> {
    let stratum = StratumKey::all()
        .nth(rng.random_range(0..50))
        .expect("50 strata");
    let at_sigma_min = rng.random_bool(0.15);
    let sigma = if at_sigma_min {
        cfg.sigma_min
    } else {
        rng.random_range(cfg.sigma_min..cfg.sigma_min.max(100.0) + 1.0)
    };
    let (a, b, spec) = match cfg.fixed {
        Some(fixed) => fixed,
        None => {
            let a = rng.random_range(0.0..1.0);
            let b = rng.random_range(0.05..1.0);
            let kind = match rng.random_range(0..10) {
                0..=5 => LossKind::SmoothL1,
                6 | 7 => LossKind::L1,
                _ => LossKind::L2,
            };
            let beta = rng.random_range(0.05..2.0);
            (a, b, DefaultLossSpec { kind, beta })
        }
    };

    let gw = rng.random_range(8.0..200.0);
    let gh = rng.random_range(8.0..300.0);
    let gcx = rng.random_range(150.0..850.0);
    let gcy = rng.random_range(150.0..850.0);
    let gt = BBox::from_center(gcx, gcy, gw, gh).ok()?;
    let diag = gt.diagonal();

    // Center offsets on the scale of sigma keep the Gaussian term active.
    let reach = sigma * rng.random_range(0.1..2.5);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pred = [
        gt.x_min + reach * angle.cos() + rng.random_range(-0.3..0.3) * gw,
        gt.y_min + reach * angle.sin() + rng.random_range(-0.3..0.3) * gh,
        gw * rng.random_range(0.5..1.6),
        gh * rng.random_range(0.5..1.6),
    ];

    let straddles = spec.kind == LossKind::SmoothL1 && rng.random_bool(0.3);
    if straddles {
        let j = rng.random_range(0..4);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let e = sign * spec.beta * (1.0 + side * rng.random_range(0.02..0.3));
        pred[j] = gt.params()[j] + e * diag;
    }
    let pred_box = BBox::new(pred[0], pred[1], pred[2], pred[3]).ok()?;

    let g = gt.params();
    for i in 0..4 {
        let e = (pred[i] - g[i]) / diag;
        let span = STENCIL_REACH * fd_step(pred[i]) / diag * 1.5;
        let near_kink = match spec.kind {
            LossKind::SmoothL1 => (e.abs() - spec.beta).abs() < span,
            LossKind::L1 => e.abs() < span,
            LossKind::L2 => false,
        };
        // the stencil must also keep the box valid
        if near_kink || (i >= 2 && pred[i] <= STENCIL_REACH * fd_step(pred[i])) {
            return None;
        }
    }

    let mut table = SigmaTable::uniform(sigma);
    table.set(stratum, sigma);
    let params = PsychLossParams::new(a, b, table, spec).ok()?;
    Some(Case {
        sample: LossSample {
            pred_box,
            gt_box: gt,
            stratum,
            has_behavioral_data: rng.random_bool(0.8),
        },
        params,
        at_sigma_min,
        straddles,
    })
}

/// Compares analytic and finite-difference gradients on random cases.
pub fn gradcheck(n_cases: usize, seed: u64) -> GradcheckReport {
    gradcheck_with(&GradcheckConfig::default(), n_cases, seed)
}

pub fn gradcheck_with(cfg: &GradcheckConfig, n_cases: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        cases: n_cases,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        sigma_min_cases: 0,
        straddle_cases: 0,
        failures: Vec::new(),
    };
    for case_idx in 0..n_cases {
        let case = draw_case(&mut rng, cfg);
        report.sigma_min_cases += usize::from(case.at_sigma_min);
        report.straddle_cases += usize::from(case.straddles);

        let analytic = human_loss_grad(&case.sample, &case.params).expect("valid case");
        let numeric = central_difference(case.sample.pred_box.params(), |p| {
            let pred_box = BBox {
                x_min: p[0],
                y_min: p[1],
                width: p[2],
                height: p[3],
            };
            human_loss(&LossSample { pred_box, ..case.sample }, &case.params).expect("valid case")
        });
        for component in 0..4 {
            let rel_error = relative_error(analytic[component], numeric[component]);
            report.max_rel_error = report.max_rel_error.max(rel_error);
            if rel_error > cfg.tolerance {
                report.failures.push(GradcheckFailure {
                    case: case_idx,
                    component,
                    analytic: analytic[component],
                    numeric: numeric[component],
                    rel_error,
                });
            }
        }
    }
    report
}
