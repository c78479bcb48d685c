//! Model parameters and the objectives.
//!
//! * `loss_tilde`: noise-free population loss over the four templates.
//! * `loss_hat`: the same, weighted by realised kind counts.
//! * `loss_ssl`: the augmented objective, estimated by Monte Carlo.
//! * `loss_sl_bce`: supervised binary cross-entropy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, ActivationKind};
use crate::data::{template, Dataset, Family};
use crate::error::{Error, Result};
use crate::rng;

pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SslModel {
    /// 2 x d, rows `w1`, `w2`.
    pub w: DMatrix<f64>,
    pub alpha: f64,
    pub activation: ActivationKind,
}

impl SslModel {
    pub fn new(w: DMatrix<f64>, alpha: f64, activation: ActivationKind) -> Result<Self> {
        check_weights(&w)?;
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { w, alpha, activation })
    }

    pub fn zeros(d: usize, alpha: f64, activation: ActivationKind) -> Self {
        Self {
            w: DMatrix::zeros(2, d),
            alpha,
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.w.row(j).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlModel {
    /// 2 x d, rows `w1^SL`, `w2^SL`.
    pub w: DMatrix<f64>,
    pub f: [f64; 2],
    pub beta: f64,
    pub gamma: f64,
}

impl SlModel {
    pub fn new(w: DMatrix<f64>, f: [f64; 2], beta: f64, gamma: f64) -> Result<Self> {
        check_weights(&w)?;
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("F has non-finite entries".into()));
        }
        if !(beta >= 0.0 && gamma >= 0.0) {
            return Err(Error::Config("beta and gamma must be >= 0".into()));
        }
        Ok(Self { w, f, beta, gamma })
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// `sigma(F sigma(W x))`.
    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn logit(&self, x: &DVector<f64>) -> f64 {
        let u = &self.w * x;
        self.f[0] * sigmoid(u[0]) + self.f[1] * sigmoid(u[1])
    }

    /// Fraction of points whose thresholded prediction equals the label.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data
            .points
            .iter()
            .filter(|p| u8::from(self.predict(&p.x) >= 0.5) == p.label)
            .count();
        hits as f64 / data.len().max(1) as f64
    }
}

fn check_weights(w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != 2 {
        return Err(Error::Dimension(format!("W must have 2 rows, got {}", w.nrows())));
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("W has non-finite entries".into()));
    }
    Ok(())
}

/// Monte Carlo settings for the augmented objective. Draws for point `i` come
/// from stream `i` of `seed`, so loss and gradient evaluated with the same
/// spec see the same augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
}

impl McSpec {
    pub fn new(samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
        }
        Ok(Self { samples, seed })
    }

    /// Same sample count, seed for step `t` of a run.
    pub fn at_step(&self, t: usize) -> Self {
        Self {
            samples: self.samples,
            seed: rng::child_seed(self.seed, t as u64),
        }
    }
}

/// Visits the augmentation pairs `(x_i + rho xi, x_i + rho xi')` for every
/// point and sample. With `rho = 0` the pair is deterministic and each point
/// is visited once with weight 1.
pub(crate) fn for_each_augmented_pair(
    data: &Dataset,
    rho: f64,
    mc: &McSpec,
    mut f: impl FnMut(usize, &DVector<f64>, &DVector<f64>, f64),
) {
    let d = data.dim();
    let mut a = DVector::zeros(d);
    let mut b = DVector::zeros(d);
    for (i, p) in data.points.iter().enumerate() {
        if rho == 0.0 {
            f(i, &p.x, &p.x, 1.0);
            continue;
        }
        let mut r = rng::stream(mc.seed, i as u64);
        let wgt = 1.0 / mc.samples as f64;
        for _ in 0..mc.samples {
            for k in 0..d {
                let z: f64 = r.sample(StandardNormal);
                a[k] = p.x[k] + rho * z;
            }
            for k in 0..d {
                let z: f64 = r.sample(StandardNormal);
                b[k] = p.x[k] + rho * z;
            }
            f(i, &a, &b, wgt);
        }
    }
}

/// Noise-free templates and their weights: the four kinds with the given
/// weights for the four-kind family, each point with weight `1/n` otherwise.
pub(crate) fn weighted_templates(data: &Dataset) -> Result<Vec<(DVector<f64>, f64)>> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let n = data.len() as f64;
    Ok(match data.family {
        Family::FourKind => (1..=4u8)
            .map(|k| {
                (
                    template(k, data.config.tau, data.dim()),
                    data.counts[(k - 1) as usize] as f64 / n,
                )
            })
            .collect(),
        Family::General { .. } => data.points.iter().map(|p| (p.x.clone(), 1.0 / n)).collect(),
    })
}

pub(crate) fn four_templates(tau: f64, d: usize) -> Vec<(DVector<f64>, f64)> {
    (1..=4u8).map(|k| (template(k, tau, d), 0.25)).collect()
}

fn template_loss(model: &SslModel, templates: &[(DVector<f64>, f64)]) -> f64 {
    let act = model.activation;
    let mut data = 0.0;
    for (t, wgt) in templates {
        let u = &model.w * t;
        let s0 = act.value(0, u[0]);
        let s1 = act.value(0, u[1]);
        data += wgt * (s0 * s0 + s1 * s1);
    }
    -data + model.alpha * model.w.norm_squared()
}

pub fn loss_tilde(model: &SslModel, tau: f64) -> f64 {
    template_loss(model, &four_templates(tau, model.dim()))
}

pub fn loss_hat(model: &SslModel, data: &Dataset) -> Result<f64> {
    check_dim(model.dim(), data)?;
    Ok(template_loss(model, &weighted_templates(data)?))
}

pub fn loss_ssl(model: &SslModel, data: &Dataset, rho: f64, mc: &McSpec) -> Result<f64> {
    check_dim(model.dim(), data)?;
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    if mc.samples == 0 {
        return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
    }
    let act = model.activation;
    let mut acc = 0.0;
    for_each_augmented_pair(data, rho, mc, |_, a, b, wgt| {
        let mut ip = 0.0;
        for j in 0..2 {
            ip += act.value(0, row_dot(&model.w, j, a)) * act.value(0, row_dot(&model.w, j, b));
        }
        acc += wgt * ip;
    });
    Ok(-acc / data.len() as f64 + model.alpha * model.w.norm_squared())
}

pub fn loss_sl_bce(model: &SlModel, data: &Dataset) -> Result<f64> {
    check_dim(model.dim(), data)?;
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let mut acc = 0.0;
    for p in &data.points {
        let y = model.predict(&p.x).clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if p.label == 1 { y.ln() } else { (1.0 - y).ln() };
    }
    let reg = model.beta * model.w.norm_squared()
        + model.gamma * (model.f[0] * model.f[0] + model.f[1] * model.f[1]);
    Ok(acc / data.len() as f64 + reg)
}

/// Checks `sigma(w_{y+1} . x) - sigma(w_{y'+1} . x) >= sigma(2) - sigma(-2) - 5 rho d^{1/10}`
/// on every point, where neuron 1 belongs to label 0. Returns whether it holds
/// everywhere and the smallest slack.
pub fn margin_constraint_check(model: &SlModel, data: &Dataset, rho: f64, d: usize) -> (bool, f64) {
    let rhs = sigmoid(2.0) - sigmoid(-2.0) - 5.0 * rho * (d as f64).powf(0.1);
    let mut worst = f64::INFINITY;
    for p in &data.points {
        let u = &model.w * &p.x;
        let (own, other) = if p.label == 0 { (u[0], u[1]) } else { (u[1], u[0]) };
        worst = worst.min(sigmoid(own) - sigmoid(other) - rhs);
    }
    (worst >= 0.0, worst)
}

/// `w_j . x` without allocating.
#[inline]
pub(crate) fn row_dot(w: &DMatrix<f64>, j: usize, x: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        s += w[(j, k)] * x[k];
    }
    s
}

pub(crate) fn check_dim(d: usize, data: &Dataset) -> Result<()> {
    if data.dim() != d {
        return Err(Error::Dimension(format!(
            "model has d = {d}, dataset has d = {}",
            data.dim()
        )));
    }
    Ok(())
}
