//! Local structure of the noise-free loss around its minimum: regions, the
//! two-level root solve for the minimum, Hessian scans, the Lipschitz
//! constant of the Hessian, an eigenvalue perturbation check and the
//! inverse-function-theorem certificate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{active_block, grad_hat, grad_ssl, grad_tilde};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{McSpec, SslModel};
use crate::ActivationKind;

/// Cap on `tau w^(2)` used when a region is unbounded above and must be
/// sampled or gridded.
pub const DEFAULT_TW2_CAP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
    pub hi_open: bool,
}

impl Interval {
    pub fn open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: true, hi_open: true }
    }

    pub fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: false, hi_open: false }
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lo_open { x > self.lo } else { x >= self.lo };
        let below = if self.hi_open { x < self.hi } else { x <= self.hi };
        above && below
    }

    fn scaled(self, s: f64) -> Self {
        Self { lo: self.lo * s, hi: self.hi * s, ..self }
    }

    /// Finite version with `hi` replaced by `cap` when it is infinite.
    pub fn capped(self, cap: f64) -> Self {
        if self.hi.is_finite() {
            self
        } else {
            Self { hi: cap, hi_open: false, ..self }
        }
    }
}

/// Which interval set to use for the tanh regions. The wide set starts the
/// first coordinate at 2.7, the narrow one at 2.75.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TanhBounds {
    #[default]
    Wide,
    Narrow,
}

impl TanhBounds {
    fn lower(self) -> f64 {
        match self {
            Self::Wide => 2.7,
            Self::Narrow => 2.75,
        }
    }
}

/// Box of admissible values for one neuron row `w` in `R^d`: an interval for
/// `w^(1)`, one for `w^(2)` and a shared one for every `w^(k)`, `k >= 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub d: usize,
    pub tau: f64,
    pub first: Interval,
    pub second: Interval,
    pub rest: Interval,
}

fn small_box(d: usize) -> Interval {
    let r = 3.0 / (d as f64).powf(0.49);
    Interval::open(-r, r)
}

impl Region {
    fn build(name: &str, d: usize, tau: f64, first: Interval, tw2: Interval, rest: Interval) -> Self {
        Self {
            name: name.into(),
            d,
            tau,
            first,
            second: tw2.scaled(1.0 / tau),
            rest,
        }
    }

    fn mirrored(&self, name: &str) -> Self {
        let f = self.first;
        Self {
            name: name.into(),
            first: Interval { lo: -f.hi, hi: -f.lo, lo_open: f.hi_open, hi_open: f.lo_open },
            ..self.clone()
        }
    }

    /// Initialisation box: `w^(1) in (3.1, 3.9)`, `tau w^(2) in (8.5, 9)`.
    pub fn d1(tau: f64, d: usize) -> Self {
        Self::build("D1", d, tau, Interval::open(3.1, 3.9), Interval::open(8.5, 9.0), small_box(d))
    }

    pub fn d2(tau: f64, d: usize) -> Self {
        Self::d1(tau, d).mirrored("D2")
    }

    /// Where the minimum of the noise-free loss lies: `w^(1) in [3.1, 3.9]`,
    /// `tau w^(2) >= 9`, other coordinates zero.
    pub fn d1_tilde(tau: f64, d: usize) -> Self {
        Self::build(
            "D1~",
            d,
            tau,
            Interval::closed(3.1, 3.9),
            Interval { lo: 9.0, hi: f64::INFINITY, lo_open: false, hi_open: true },
            Interval::closed(0.0, 0.0),
        )
    }

    pub fn d2_tilde(tau: f64, d: usize) -> Self {
        Self::d1_tilde(tau, d).mirrored("D2~")
    }

    /// Ball-like neighbourhood of the initialisation box where the loss is
    /// strongly convex: `w^(1) in (2.3, 4.7)`, `tau w^(2) > 8.5`.
    pub fn d1_b0(tau: f64, d: usize) -> Self {
        Self::build(
            "D1B0",
            d,
            tau,
            Interval::open(2.3, 4.7),
            Interval::open(8.5, f64::INFINITY),
            small_box(d),
        )
    }

    pub fn d2_b0(tau: f64, d: usize) -> Self {
        Self::d1_b0(tau, d).mirrored("D2B0")
    }

    /// Tanh initialisation box: `tau w^(2) in (5.75, 6.1)`.
    pub fn d1_tanh(tau: f64, d: usize, bounds: TanhBounds) -> Self {
        Self::build(
            "D1tanh",
            d,
            tau,
            Interval::open(bounds.lower(), 3.1),
            Interval::open(5.75, 6.1),
            small_box(d),
        )
    }

    pub fn d2_tanh(tau: f64, d: usize, bounds: TanhBounds) -> Self {
        Self::d1_tanh(tau, d, bounds).mirrored("D2tanh")
    }

    /// Tanh minimum region: `tau w^(2) >= 6.1`.
    pub fn d1_tilde_tanh(tau: f64, d: usize, bounds: TanhBounds) -> Self {
        Self::build(
            "D1~tanh",
            d,
            tau,
            Interval::closed(bounds.lower(), 3.1),
            Interval { lo: 6.1, hi: f64::INFINITY, lo_open: false, hi_open: true },
            Interval::closed(0.0, 0.0),
        )
    }

    pub fn d2_tilde_tanh(tau: f64, d: usize, bounds: TanhBounds) -> Self {
        Self::d1_tilde_tanh(tau, d, bounds).mirrored("D2~tanh")
    }

    pub fn interval(&self, k: usize) -> Interval {
        match k {
            0 => self.first,
            1 => self.second,
            _ => self.rest,
        }
    }

    pub fn contains(&self, w: &DVector<f64>) -> bool {
        w.len() == self.d && w.iter().enumerate().all(|(k, &v)| self.interval(k).contains(v))
    }

    /// Uniform draw, with an infinite upper end of `tau w^(2)` capped at `tw2_cap`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, tw2_cap: f64) -> DVector<f64> {
        DVector::from_fn(self.d, |k, _| {
            let iv = self.interval(k).capped(tw2_cap / self.tau);
            if iv.hi > iv.lo {
                rng.random_range(iv.lo..iv.hi)
            } else {
                iv.lo
            }
        })
    }
}

/// `phi(x) = (4 alpha / tau^2) x - (h(x + a) + h(x - a))`; its root in `x`
/// is where the derivative in `w^(2)` vanishes for fixed `w^(1) = a`.
pub fn phi(x: f64, a: f64, tau: f64, alpha: f64, act: ActivationKind) -> f64 {
    4.0 * alpha / (tau * tau) * x - (act.h(0, x + a) + act.h(0, x - a))
}

pub fn phi_prime(x: f64, a: f64, tau: f64, alpha: f64, act: ActivationKind) -> f64 {
    4.0 * alpha / (tau * tau) - (act.h(1, x + a) + act.h(1, x - a))
}

/// Derivative of the noise-free loss in `w^(1)` for one row `(a, w2)`.
pub fn dtilde_da(a: f64, w2: f64, tau: f64, alpha: f64, act: ActivationKind) -> f64 {
    let b = tau * w2;
    let h = |x: f64| act.h(0, x);
    -0.5 * (h(a + b) - h(-a + b) + h(a) - h(-a)) + 2.0 * alpha * a
}

/// Derivative of the noise-free loss in `w^(2)` for one row `(a, w2)`.
pub fn dtilde_dw2(a: f64, w2: f64, tau: f64, alpha: f64, act: ActivationKind) -> f64 {
    let b = tau * w2;
    let h = |x: f64| act.h(0, x);
    -0.5 * tau * (h(a + b) + h(-a + b)) + 2.0 * alpha * w2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Bracket for `w^(1)`.
    pub a_range: (f64, f64),
    /// Lower end for `x = tau w^(2)`.
    pub x_lo: f64,
    /// First upper end for `x`; doubled until `phi > 0`.
    pub x_max: f64,
    /// Bisection stops when the bracket is shorter than this.
    pub abscissa_tol: f64,
}

impl SolverOptions {
    pub fn for_activation(act: ActivationKind, tanh: TanhBounds) -> Self {
        match act {
            ActivationKind::Sigmoid => Self {
                a_range: (3.1, 3.9),
                x_lo: 9.0,
                x_max: 30.0,
                abscissa_tol: 1e-12,
            },
            ActivationKind::Tanh => Self {
                a_range: (tanh.lower(), 3.1),
                x_lo: 6.1,
                x_max: 30.0,
                abscissa_tol: 1e-12,
            },
        }
    }
}

/// Minimum `w1* = (first, second, 0, ..)`, `w2* = (-first, second, 0, ..)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TildeMinimum {
    pub first: f64,
    pub second: f64,
    pub tau: f64,
    pub alpha: f64,
    pub activation: ActivationKind,
    /// Norm of the full gradient at the returned pair.
    pub residual: f64,
}

impl TildeMinimum {
    pub fn w1(&self, d: usize) -> DVector<f64> {
        let mut w = DVector::zeros(d);
        w[0] = self.first;
        w[1] = self.second;
        w
    }

    pub fn w2(&self, d: usize) -> DVector<f64> {
        let mut w = self.w1(d);
        w[0] = -self.first;
        w
    }

    pub fn matrix(&self, d: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(2, d);
        m.set_row(0, &self.w1(d).transpose());
        m.set_row(1, &self.w2(d).transpose());
        m
    }

    pub fn model(&self, d: usize) -> SslModel {
        SslModel {
            w: self.matrix(d),
            alpha: self.alpha,
            activation: self.activation,
        }
    }
}

fn bisect(
    what: &'static str,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    mut f: impl FnMut(f64) -> f64,
) -> Result<f64> {
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(Error::HypothesisViolation { what, lo, hi, f_lo, f_hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Root of `phi(., a)` above `opts.x_lo`.
pub fn inner_root(a: f64, tau: f64, alpha: f64, act: ActivationKind, opts: &SolverOptions) -> Result<f64> {
    let f = |x: f64| phi(x, a, tau, alpha, act);
    let mut x_max = opts.x_max;
    while f(x_max) <= 0.0 {
        x_max *= 2.0;
        if !x_max.is_finite() || x_max > 1e12 {
            return Err(Error::HypothesisViolation {
                what: "inner bracket upper end",
                lo: opts.x_lo,
                hi: x_max,
                f_lo: f(opts.x_lo),
                f_hi: f(x_max),
            });
        }
    }
    bisect("inner bracket [x_lo, x_max]", opts.x_lo, x_max, opts.abscissa_tol, f)
}

fn full_residual(a: f64, w2: f64, tau: f64, alpha: f64, act: ActivationKind) -> f64 {
    let g1 = dtilde_da(a, w2, tau, alpha, act);
    let g2 = dtilde_dw2(a, w2, tau, alpha, act);
    // both rows contribute the same magnitude by mirror symmetry
    (2.0 * (g1 * g1 + g2 * g2)).sqrt()
}

/// Two-level bisection for the minimum, followed by Newton polishing on the
/// active 2 x 2 block while it lowers the residual.
pub fn solve_tilde_minimum(tau: f64, alpha: f64, activation: ActivationKind, tol: f64) -> Result<TildeMinimum> {
    solve_tilde_minimum_with(
        tau,
        alpha,
        activation,
        tol,
        &SolverOptions::for_activation(activation, TanhBounds::default()),
    )
}

pub fn solve_tilde_minimum_with(
    tau: f64,
    alpha: f64,
    activation: ActivationKind,
    tol: f64,
    opts: &SolverOptions,
) -> Result<TildeMinimum> {
    if !(alpha > 0.0) || !(tau > 1.0) || !(tol > 0.0) {
        return Err(Error::Config(format!(
            "need alpha > 0, tau > 1, tol > 0 (got {alpha}, {tau}, {tol})"
        )));
    }
    let act = activation;
    let mut inner_err = None;
    let outer = |a: f64| match inner_root(a, tau, alpha, act, opts) {
        Ok(x) => dtilde_da(a, x / tau, tau, alpha, act),
        Err(e) => {
            inner_err.get_or_insert(e);
            f64::NAN
        }
    };
    let (lo, hi) = opts.a_range;
    let a = bisect("outer bracket on w^(1)", lo, hi, opts.abscissa_tol, outer);
    if let Some(e) = inner_err {
        return Err(e);
    }
    let a = a?;
    let mut w2 = inner_root(a, tau, alpha, act, opts)? / tau;
    let mut a = a;
    let mut res = full_residual(a, w2, tau, alpha, act);
    for _ in 0..8 {
        if res <= tol * 1e-3 {
            break;
        }
        let [h11, h12, h22] = active_block(a, w2, tau, alpha, act);
        let g1 = dtilde_da(a, w2, tau, alpha, act);
        let g2 = dtilde_dw2(a, w2, tau, alpha, act);
        let det = h11 * h22 - h12 * h12;
        if det == 0.0 {
            break;
        }
        let na = a - (h22 * g1 - h12 * g2) / det;
        let nw = w2 - (h11 * g2 - h12 * g1) / det;
        let nres = full_residual(na, nw, tau, alpha, act);
        if nres < res {
            a = na;
            w2 = nw;
            res = nres;
        } else {
            break;
        }
    }
    if res > tol {
        return Err(Error::NotConverged { tol, residual: res });
    }
    Ok(TildeMinimum {
        first: a,
        second: w2,
        tau,
        alpha,
        activation,
        residual: res,
    })
}

fn block_eigs(h: [f64; 3]) -> (f64, f64) {
    let [a, b, c] = h;
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (m - r, m + r)
}

/// Extreme Hessian eigenvalues over a grid on the `(w^(1), w^(2))` slice of
/// each region, with the closure of every interval gridded and an infinite
/// `tau w^(2)` range capped at [`DEFAULT_TW2_CAP`]. The `2 alpha` eigenvalue
/// of the remaining coordinates is included when `d >= 3`.
pub fn scan_convexity(
    regions: &[Region],
    tau: f64,
    alpha: f64,
    activation: ActivationKind,
    grid_points_per_dim: usize,
) -> Result<(f64, f64)> {
    scan_convexity_capped(regions, tau, alpha, activation, grid_points_per_dim, DEFAULT_TW2_CAP)
}

pub fn scan_convexity_capped(
    regions: &[Region],
    tau: f64,
    alpha: f64,
    activation: ActivationKind,
    grid_points_per_dim: usize,
    tw2_cap: f64,
) -> Result<(f64, f64)> {
    if grid_points_per_dim < 2 {
        return Err(Error::Config("need at least 2 grid points per dimension".into()));
    }
    if regions.is_empty() {
        return Err(Error::Input("no regions to scan".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let m = grid_points_per_dim;
    for r in regions {
        let i1 = r.first;
        let i2 = r.second.capped(tw2_cap / tau);
        for p in 0..m {
            let a = i1.lo + (i1.hi - i1.lo) * p as f64 / (m - 1) as f64;
            for q in 0..m {
                let w2 = i2.lo + (i2.hi - i2.lo) * q as f64 / (m - 1) as f64;
                let (e0, e1) = block_eigs(active_block(a, w2, tau, alpha, activation));
                lo = lo.min(e0);
                hi = hi.max(e1);
            }
        }
        if r.d >= 3 {
            lo = lo.min(2.0 * alpha);
            hi = hi.max(2.0 * alpha);
        }
    }
    Ok((lo, hi))
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Sampled lower bound on the Lipschitz constant of `hess`: the largest
/// `|H(x) - H(y)|_2 / |x - y|_2` over `n_pairs` pairs in `region`. Each pair
/// takes `x` uniform in the region and `y` on the segment towards a second
/// uniform point at a log-uniform fraction in `[1e-3, 1]`, so both local and
/// long-range variation are probed. Pairs are drawn sequentially, so more
/// pairs never lower the estimate.
pub fn estimate_lipschitz_hessian<H, R>(hess: H, region: &Region, n_pairs: usize, rng: &mut R) -> Result<f64>
where
    H: Fn(&DVector<f64>) -> DMatrix<f64>,
    R: Rng + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be >= 1".into()));
    }
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let x = region.sample(rng, DEFAULT_TW2_CAP);
        let z = region.sample(rng, DEFAULT_TW2_CAP);
        let t = 10f64.powf(-3.0 * rng.random::<f64>());
        let y = &x + (&z - &x) * t;
        let dist = (&x - &y).norm();
        if dist == 0.0 {
            continue;
        }
        let diff = hess(&x) - hess(&y);
        best = best.max(spectral_norm_sym(&diff) / dist);
    }
    Ok(best)
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{name} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym >= 1e-8 {
        return Err(Error::Input(format!("{name} is not symmetric (residual {asym:e})")));
    }
    Ok(())
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// `(sum_i (lambda_i - mu_i)^2, sqrt(2) |A - B|_F^2, lhs <= rhs)` with both
/// spectra sorted ascending.
pub fn hoffman_wielandt_check(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, f64, bool)> {
    check_symmetric(a, "A")?;
    check_symmetric(b, "B")?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension("A and B differ in size".into()));
    }
    let la = sorted_eigs(a);
    let lb = sorted_eigs(b);
    let lhs: f64 = la.iter().zip(&lb).map(|(x, y)| (x - y) * (x - y)).sum();
    let rhs = std::f64::consts::SQRT_2 * (a - b).norm_squared();
    Ok((lhs, rhs, lhs <= rhs))
}

/// Radii of the inverse-function-theorem certificate for a candidate with
/// Hessian `A`, Hessian Lipschitz constant `lh` and gradient residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `|A^{-1}|_2`
    pub inverse_norm: f64,
    /// `1 / (2 |A^{-1}| L_H)`
    pub radius_r: f64,
    /// `1 / (4 L_H |A^{-1}|^2)`
    pub radius_r0: f64,
    pub certified: bool,
    /// A true stationary point lies within this distance: `2 |A^{-1}| residual`.
    pub displacement_bound: f64,
}

pub fn ift_certificate(hessian: &DMatrix<f64>, lh: f64, grad_residual: f64) -> Result<Certificate> {
    check_symmetric(hessian, "Hessian")?;
    if !(lh > 0.0) {
        return Err(Error::Input(format!("Lipschitz constant must be > 0, got {lh}")));
    }
    let eigs = SymmetricEigen::new(hessian.clone()).eigenvalues;
    let min_abs = eigs.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if !(min_abs > 0.0) {
        return Err(Error::CertificateUnavailable { min_abs_eigenvalue: min_abs });
    }
    let inv = 1.0 / min_abs;
    let r = 1.0 / (2.0 * inv * lh);
    let r0 = 1.0 / (4.0 * lh * inv * inv);
    Ok(Certificate {
        inverse_norm: inv,
        radius_r: r,
        radius_r0: r0,
        certified: grad_residual <= r0,
        displacement_bound: 2.0 * inv * grad_residual,
    })
}

/// A measured quantity and the order expression it is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeasurement {
    pub value: f64,
    pub reference_scale: f64,
}

/// `|d(L^ - L~)/dw1|` at `model`, with reference scale `tau n^{-9/20}`.
pub fn measure_expectation_noise(model: &SslModel, data: &Dataset, tau: f64) -> Result<NoiseMeasurement> {
    let gh = grad_hat(model, data)?.row(0);
    let gt = grad_tilde(model, tau).row(0);
    Ok(NoiseMeasurement {
        value: (gh - gt).norm(),
        reference_scale: tau * (data.len() as f64).powf(-0.45),
    })
}

/// `|d(L - L^)/dw1|` at `model`, with reference scale `rho^{13/15} d^{6/10}`.
pub fn measure_sampling_noise(model: &SslModel, data: &Dataset, rho: f64, mc: &McSpec) -> Result<NoiseMeasurement> {
    let gs = grad_ssl(model, data, rho, mc)?.row(0);
    let gh = grad_hat(model, data)?.row(0);
    Ok(NoiseMeasurement {
        value: (gs - gh).norm(),
        reference_scale: rho.powf(13.0 / 15.0) * (data.dim() as f64).powf(0.6),
    })
}

/// Everything measured about the minimum of the noise-free loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub activation: ActivationKind,
    pub d: usize,
    pub tau: f64,
    pub alpha: f64,
    pub w1_star: Vec<f64>,
    pub w2_star: Vec<f64>,
    pub mu_hat: f64,
    pub lm_hat: f64,
    pub kappa_hat: f64,
    pub lh_hat: f64,
    pub lh_over_sqrt_d: f64,
    pub lh_safety_factor: f64,
    pub grad_residual: f64,
    /// Radii with the safety-factored constant; `certified` uses these.
    pub radius_r: f64,
    pub radius_r0: f64,
    /// Radii with the raw sampled constant.
    pub radius_r_raw: f64,
    pub radius_r0_raw: f64,
    pub displacement_bound: f64,
    pub certified: bool,
    pub expectation_noise: Option<NoiseMeasurement>,
    pub sampling_noise: Option<NoiseMeasurement>,
}

impl LandscapeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
