//! Full-batch gradient descent, initialisation schemes and checks of the
//! linear convergence rate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calculus::{grad_hat, grad_sl_bce, grad_ssl, grad_tilde};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::landscape::{Region, TanhBounds};
use crate::models::{loss_hat, loss_sl_bce, loss_ssl, loss_tilde, McSpec, SlModel, SslModel};
use crate::ActivationKind;

/// A differentiable objective on a flat parameter vector. For the SSL
/// objectives the vector is `W` in row-major order; the supervised objective
/// appends `F`. `step` is the GD iteration, which stochastic objectives use to
/// draw fresh augmentations.
pub trait Objective {
    fn n_params(&self) -> usize;
    fn loss(&self, params: &DVector<f64>, step: usize) -> Result<f64>;
    fn grad(&self, params: &DVector<f64>, step: usize) -> Result<DVector<f64>>;
}

pub fn flatten_w(w: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(w.len(), w.transpose().iter().copied())
}

pub fn unflatten_w(p: &DVector<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, d, &p.as_slice()[..2 * d])
}

fn ssl_model(p: &DVector<f64>, d: usize, alpha: f64, activation: ActivationKind) -> SslModel {
    SslModel {
        w: unflatten_w(p, d),
        alpha,
        activation,
    }
}

/// Noise-free population loss.
#[derive(Debug, Clone, Copy)]
pub struct TildeObjective {
    pub d: usize,
    pub tau: f64,
    pub alpha: f64,
    pub activation: ActivationKind,
}

impl Objective for TildeObjective {
    fn n_params(&self) -> usize {
        2 * self.d
    }
    fn loss(&self, p: &DVector<f64>, _: usize) -> Result<f64> {
        Ok(loss_tilde(&ssl_model(p, self.d, self.alpha, self.activation), self.tau))
    }
    fn grad(&self, p: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
        Ok(flatten_w(&grad_tilde(&ssl_model(p, self.d, self.alpha, self.activation), self.tau).w))
    }
}

/// Noise-free loss weighted by a dataset's kind counts.
#[derive(Debug, Clone, Copy)]
pub struct HatObjective<'a> {
    pub data: &'a Dataset,
    pub alpha: f64,
    pub activation: ActivationKind,
}

impl Objective for HatObjective<'_> {
    fn n_params(&self) -> usize {
        2 * self.data.dim()
    }
    fn loss(&self, p: &DVector<f64>, _: usize) -> Result<f64> {
        loss_hat(&ssl_model(p, self.data.dim(), self.alpha, self.activation), self.data)
    }
    fn grad(&self, p: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
        let m = ssl_model(p, self.data.dim(), self.alpha, self.activation);
        Ok(flatten_w(&grad_hat(&m, self.data)?.w))
    }
}

/// Augmented objective with fresh Monte Carlo draws at every step.
#[derive(Debug, Clone, Copy)]
pub struct SslObjective<'a> {
    pub data: &'a Dataset,
    pub rho: f64,
    pub alpha: f64,
    pub activation: ActivationKind,
    pub mc: McSpec,
}

impl Objective for SslObjective<'_> {
    fn n_params(&self) -> usize {
        2 * self.data.dim()
    }
    fn loss(&self, p: &DVector<f64>, step: usize) -> Result<f64> {
        let m = ssl_model(p, self.data.dim(), self.alpha, self.activation);
        loss_ssl(&m, self.data, self.rho, &self.mc.at_step(step))
    }
    fn grad(&self, p: &DVector<f64>, step: usize) -> Result<DVector<f64>> {
        let m = ssl_model(p, self.data.dim(), self.alpha, self.activation);
        Ok(flatten_w(&grad_ssl(&m, self.data, self.rho, &self.mc.at_step(step))?.w))
    }
}

/// Supervised cross-entropy on `(W^SL, F)`.
#[derive(Debug, Clone, Copy)]
pub struct BceObjective<'a> {
    pub data: &'a Dataset,
    pub beta: f64,
    pub gamma: f64,
}

impl BceObjective<'_> {
    fn model(&self, p: &DVector<f64>) -> SlModel {
        let d = self.data.dim();
        SlModel {
            w: unflatten_w(p, d),
            f: [p[2 * d], p[2 * d + 1]],
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

impl Objective for BceObjective<'_> {
    fn n_params(&self) -> usize {
        2 * self.data.dim() + 2
    }
    fn loss(&self, p: &DVector<f64>, _: usize) -> Result<f64> {
        loss_sl_bce(&self.model(p), self.data)
    }
    fn grad(&self, p: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
        let g = grad_sl_bce(&self.model(p), self.data)?;
        let f = g.f.unwrap_or([0.0; 2]);
        Ok(DVector::from_iterator(
            self.n_params(),
            g.w.transpose().iter().copied().chain(f),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum InitMode {
    /// Uniform over the initialisation boxes around the minimum.
    Region,
    /// Zero-mean Gaussian entries of the given scale with the four sign
    /// constraints enforced by reflection.
    SignOnly { scale: f64 },
    /// Caller supplies the weights.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub iters: usize,
    pub init_mode: InitMode,
    pub mc: McSpec,
    pub record_every: usize,
}

impl TrainConfig {
    /// `eta = 0` is accepted and leaves the weights fixed.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        if self.mc.samples == 0 {
            return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
        }
        if let InitMode::SignOnly { scale } = self.init_mode {
            if !(scale > 0.0) {
                return Err(Error::Config(format!("init scale must be > 0, got {scale}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: DVector<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrajectory {
    /// Starts at iteration 0 and always ends with the final iterate.
    pub snapshots: Vec<Snapshot>,
    pub final_params: DVector<f64>,
    pub d: usize,
}

impl TrainTrajectory {
    pub fn final_w(&self) -> DMatrix<f64> {
        unflatten_w(&self.final_params, self.d)
    }

    /// `F` for supervised runs.
    pub fn final_f(&self) -> Option<[f64; 2]> {
        let p = &self.final_params;
        (p.len() == 2 * self.d + 2).then(|| [p[2 * self.d], p[2 * self.d + 1]])
    }

    pub fn w_at(&self, i: usize) -> DMatrix<f64> {
        unflatten_w(&self.snapshots[i].params, self.d)
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }
}

/// Runs `W(t+1) = W(t) - eta grad L(W(t))` for `cfg.iters` steps from `init`.
pub fn gd_train<O: Objective + ?Sized>(
    objective: &O,
    init: &DVector<f64>,
    d: usize,
    cfg: &TrainConfig,
) -> Result<TrainTrajectory> {
    cfg.validate()?;
    if init.len() != objective.n_params() {
        return Err(Error::Dimension(format!(
            "initial parameters have length {}, objective expects {}",
            init.len(),
            objective.n_params()
        )));
    }
    let mut p = init.clone();
    let mut snapshots = Vec::with_capacity(cfg.iters / cfg.record_every + 2);
    for t in 0..=cfg.iters {
        let record = t % cfg.record_every == 0 || t == cfg.iters;
        if !record && t == cfg.iters {
            break;
        }
        let g = objective.grad(&p, t)?;
        let gn = g.norm();
        if !gn.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }
        if record {
            let loss = objective.loss(&p, t)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: t });
            }
            snapshots.push(Snapshot {
                iteration: t,
                params: p.clone(),
                loss,
                grad_norm: gn,
            });
        }
        if t == cfg.iters {
            break;
        }
        p.axpy(-cfg.eta, &g, 1.0);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
    }
    Ok(TrainTrajectory {
        snapshots,
        final_params: p,
        d,
    })
}

/// `w1` uniform over the first initialisation box, `w2` over its mirror.
pub fn init_in_region<R: Rng + ?Sized>(tau: f64, d: usize, rng: &mut R, activation: ActivationKind) -> DMatrix<f64> {
    let (r1, r2) = match activation {
        ActivationKind::Sigmoid => (Region::d1(tau, d), Region::d2(tau, d)),
        ActivationKind::Tanh => (
            Region::d1_tanh(tau, d, TanhBounds::default()),
            Region::d2_tanh(tau, d, TanhBounds::default()),
        ),
    };
    let mut w = DMatrix::zeros(2, d);
    w.set_row(0, &r1.sample(rng, f64::INFINITY).transpose());
    w.set_row(1, &r2.sample(rng, f64::INFINITY).transpose());
    w
}

/// Unconstrained `N(0, scale^2)` draw, used by [`init_sign_only`].
pub fn gaussian_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(2, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian entries with `w1^(1) > 0 > w2^(1)` and `w1^(2), w2^(2) > 0`
/// enforced by flipping signs.
pub fn init_sign_only<R: Rng + ?Sized>(d: usize, rng: &mut R, scale: f64) -> DMatrix<f64> {
    let mut w = gaussian_matrix(d, rng, scale);
    w[(0, 0)] = w[(0, 0)].abs();
    w[(1, 0)] = -w[(1, 0)].abs();
    w[(0, 1)] = w[(0, 1)].abs();
    w[(1, 1)] = w[(1, 1)].abs();
    w
}

/// Supervised starting point: `W ~ N(0, 0.1^2)`, `F ~ N(0, 1)`.
pub fn init_sl<R: Rng + ?Sized>(d: usize, rng: &mut R, beta: f64, gamma: f64) -> SlModel {
    let w = gaussian_matrix(d, rng, 0.1);
    let f = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    SlModel { w, f, beta, gamma }
}

pub fn train_sl_bce(model: &SlModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainTrajectory> {
    let obj = BceObjective {
        data,
        beta: model.beta,
        gamma: model.gamma,
    };
    let init = DVector::from_iterator(
        obj.n_params(),
        model.w.transpose().iter().copied().chain(model.f),
    );
    gd_train(&obj, &init, data.dim(), cfg)
}

/// Largest `|w_j(t) - w_j*| / (q^t |w_j(0) - w_j*|)` over snapshots and rows,
/// with `q = (kappa - 1)/(kappa + 1)`, and whether every snapshot satisfies the
/// bound up to `bound (1 + 1e-9) + 1e-12`.
pub fn verify_linear_convergence(traj: &TrainTrajectory, w_star: &DMatrix<f64>, kappa: f64) -> Result<(bool, f64)> {
    if !(kappa >= 1.0) {
        return Err(Error::Input(format!("kappa must be >= 1, got {kappa}")));
    }
    if w_star.shape() != (2, traj.d) {
        return Err(Error::Dimension("w_star must be 2 x d".into()));
    }
    let q = (kappa - 1.0) / (kappa + 1.0);
    let w0 = traj.w_at(0);
    let d0: Vec<f64> = (0..2).map(|j| (w0.row(j) - w_star.row(j)).norm()).collect();
    let mut ok = true;
    let mut worst = 0.0f64;
    for (i, s) in traj.snapshots.iter().enumerate() {
        let w = traj.w_at(i);
        let qt = q.powi(s.iteration as i32);
        for j in 0..2 {
            let dist = (w.row(j) - w_star.row(j)).norm();
            let bound = qt * d0[j];
            if dist > bound * (1.0 + 1e-9) + 1e-12 {
                ok = false;
            }
            if bound > 0.0 {
                worst = worst.max(dist / bound);
            }
        }
    }
    Ok((ok, worst))
}

/// `1 + (tau^2 + 1.5 + 2 d^{-0.1}) / (2 alpha - d^{-0.1})`, or `None` when the
/// denominator is not positive.
pub fn kappa_symbolic(tau: f64, alpha: f64, d: usize) -> Option<f64> {
    let e = (d as f64).powf(-0.1);
    let den = 2.0 * alpha - e;
    (den > 0.0).then(|| 1.0 + (tau * tau + 1.5 + 2.0 * e) / den)
}

/// `2 / (4 alpha + tau^2 + 1.5)`.
pub fn eta_symbolic(tau: f64, alpha: f64) -> f64 {
    2.0 / (4.0 * alpha + tau * tau + 1.5)
}

/// `2 / (mu + L)`, the step size that attains the `(kappa-1)/(kappa+1)` rate.
pub fn eta_optimal(mu: f64, lm: f64) -> f64 {
    2.0 / (mu + lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, DistributionConfig};
    use crate::rng;
    use ActivationKind::*;

    const ALPHA: f64 = 1.0 / 800.0;

    fn cfg(eta: f64, iters: usize, record_every: usize) -> TrainConfig {
        TrainConfig {
            eta,
            iters,
            init_mode: InitMode::Explicit,
            mc: McSpec::new(4, 0).unwrap(),
            record_every,
        }
    }

    #[test]
    fn region_init_membership() {
        let mut r = rng::stream(1, 0);
        let (r1, r2) = (Region::d1(7.0, 10), Region::d2(7.0, 10));
        let mut sum = 0.0;
        for _ in 0..1000 {
            let w = init_in_region(7.0, 10, &mut r, Sigmoid);
            assert!(r1.contains(&w.row(0).transpose()));
            assert!(r2.contains(&w.row(1).transpose()));
            assert!(w[(0, 0)] > 0.0 && 0.0 > w[(1, 0)]);
            sum += w[(0, 0)];
        }
        let sd = 0.8 / 12f64.sqrt() / 1000f64.sqrt();
        assert!((sum / 1000.0 - 3.5).abs() < 3.0 * sd);
    }

    #[test]
    fn sign_only_init_reflects() {
        for seed in 0..1000 {
            let w = init_sign_only(10, &mut rng::stream(seed, 0), 0.1);
            assert!(w[(0, 0)] > 0.0 && w[(1, 0)] < 0.0 && w[(0, 1)] > 0.0 && w[(1, 1)] > 0.0);
            let raw = gaussian_matrix(10, &mut rng::stream(seed, 0), 0.1);
            assert_eq!(w.abs(), raw.abs());
        }
    }

    #[test]
    fn rest_coordinates_decay_geometrically() {
        let obj = TildeObjective { d: 6, tau: 7.0, alpha: ALPHA, activation: Sigmoid };
        let w0 = init_in_region(7.0, 6, &mut rng::stream(4, 0), Sigmoid);
        let eta = 0.05;
        let traj = gd_train(&obj, &flatten_w(&w0), 6, &cfg(eta, 200, 1)).unwrap();
        let c = 1.0 - 2.0 * eta * ALPHA;
        for (i, s) in traj.snapshots.iter().enumerate() {
            let w = traj.w_at(i);
            for k in 2..6 {
                let expect = c.powi(s.iteration as i32) * w0[(0, k)];
                assert!((w[(0, k)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_step_is_constant() {
        let obj = TildeObjective { d: 4, tau: 7.0, alpha: ALPHA, activation: Sigmoid };
        let p = flatten_w(&init_in_region(7.0, 4, &mut rng::stream(2, 0), Sigmoid));
        let traj = gd_train(&obj, &p, 4, &cfg(0.0, 20, 3)).unwrap();
        assert!(traj.snapshots.iter().all(|s| s.params == p));
        let its: Vec<usize> = traj.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(its, vec![0, 3, 6, 9, 12, 15, 18, 20]);
    }

    #[test]
    fn converges_with_symbolic_step_size() {
        // the k >= 3 coordinates decay like (1 - 2 eta alpha)^t, about 1e4 steps per e-fold
        let w0 = init_in_region(7.0, 10, &mut rng::stream(6, 0), Sigmoid);
        let obj = TildeObjective { d: 10, tau: 7.0, alpha: ALPHA, activation: Sigmoid };
        let traj = gd_train(&obj, &flatten_w(&w0), 10, &cfg(eta_symbolic(7.0, ALPHA), 150_000, 1000)).unwrap();
        assert!(traj.last().grad_norm < 1e-6, "{}", traj.last().grad_norm);
        for pair in traj.snapshots.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        struct Blowup;
        impl Objective for Blowup {
            fn n_params(&self) -> usize {
                2
            }
            fn loss(&self, p: &DVector<f64>, _: usize) -> Result<f64> {
                Ok(p.norm_squared())
            }
            fn grad(&self, p: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
                Ok(p * -1e200)
            }
        }
        let r = gd_train(&Blowup, &DVector::from_vec(vec![1.0, 1.0]), 1, &cfg(1.0, 10, 1));
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn convergence_check_on_quadratic() {
        struct Quad;
        impl Objective for Quad {
            fn n_params(&self) -> usize {
                6
            }
            fn loss(&self, p: &DVector<f64>, _: usize) -> Result<f64> {
                Ok(ALPHA * p.norm_squared())
            }
            fn grad(&self, p: &DVector<f64>, _: usize) -> Result<DVector<f64>> {
                Ok(p * (2.0 * ALPHA))
            }
        }
        let p0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.3, 0.0, 4.0]);
        let traj = gd_train(&Quad, &p0, 3, &cfg(1.0 / (2.0 * ALPHA), 5, 1)).unwrap();
        let (ok, worst) = verify_linear_convergence(&traj, &DMatrix::zeros(2, 3), 1.0).unwrap();
        assert!(ok);
        assert_eq!(worst, 1.0);
    }

    #[test]
    fn first_snapshot_has_ratio_one() {
        let obj = TildeObjective { d: 4, tau: 7.0, alpha: ALPHA, activation: Sigmoid };
        let p = flatten_w(&init_in_region(7.0, 4, &mut rng::stream(3, 0), Sigmoid));
        let traj = gd_train(&obj, &p, 4, &cfg(0.1, 1, 1)).unwrap();
        let one = TrainTrajectory { snapshots: traj.snapshots[..1].to_vec(), ..traj.clone() };
        let (ok, worst) = verify_linear_convergence(&one, &DMatrix::zeros(2, 4), 3.0).unwrap();
        assert!(ok);
        assert_eq!(worst, 1.0);
    }

    #[test]
    fn symbolic_kappa_is_invalid_at_small_d() {
        assert_eq!(kappa_symbolic(7.0, ALPHA, 10), None);
        assert!((eta_symbolic(7.0, ALPHA) - 2.0 / 50.505).abs() < 1e-15);
    }

    #[test]
    fn strong_regularisation_collapses_sl_weights() {
        let ds = sample_dataset(&DistributionConfig { d: 5, tau: 7.0, rho: 0.05, n: 40, seed: 2 }).unwrap();
        let m = init_sl(5, &mut rng::stream(1, 0), 1e3, 1e3);
        let traj = train_sl_bce(&m, &ds, &cfg(1e-4, 10_000, 1000)).unwrap();
        assert!(traj.final_w().norm() < 1e-2);
    }

    #[test]
    fn sl_training_is_deterministic() {
        let ds = sample_dataset(&DistributionConfig { d: 5, tau: 7.0, rho: 0.05, n: 40, seed: 2 }).unwrap();
        let m = init_sl(5, &mut rng::stream(8, 0), 1.0 / 800.0, 1.0 / 800.0);
        let a = train_sl_bce(&m, &ds, &cfg(0.01, 300, 50)).unwrap();
        let b = train_sl_bce(&m, &ds, &cfg(0.01, 300, 50)).unwrap();
        assert_eq!(a, b);
        assert!(a.final_f().is_some());
    }
}
