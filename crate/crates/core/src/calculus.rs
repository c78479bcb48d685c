//! Analytic gradients of every objective, the per-row Hessian of the
//! noise-free loss, and a finite-difference Hessian for objectives without a
//! closed form.

use nalgebra::{DMatrix, DVector};

use crate::activation::sigmoid;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{
    check_dim, for_each_augmented_pair, row_dot, four_templates, weighted_templates, McSpec, SlModel,
    SslModel, BCE_EPS,
};
use crate::ActivationKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// 2 x d, row `j` is the gradient with respect to `w_j`.
    pub w: DMatrix<f64>,
    pub f: Option<[f64; 2]>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        let f2 = self.f.map_or(0.0, |f| f[0] * f[0] + f[1] * f[1]);
        (self.w.norm_squared() + f2).sqrt()
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.w.row(j).transpose()
    }
}

fn template_grad(model: &SslModel, templates: &[(DVector<f64>, f64)]) -> Gradient {
    let act = model.activation;
    let mut g = &model.w * (2.0 * model.alpha);
    for (t, wgt) in templates {
        let u = &model.w * t;
        for j in 0..2 {
            // d/dw of sigma(w.t)^2 is 2 h(w.t) t
            let c = -2.0 * wgt * act.h(0, u[j]);
            for k in 0..t.len() {
                g[(j, k)] += c * t[k];
            }
        }
    }
    Gradient { w: g, f: None }
}

pub fn grad_tilde(model: &SslModel, tau: f64) -> Gradient {
    template_grad(model, &four_templates(tau, model.dim()))
}

pub fn grad_hat(model: &SslModel, data: &Dataset) -> Result<Gradient> {
    check_dim(model.dim(), data)?;
    Ok(template_grad(model, &weighted_templates(data)?))
}

/// Gradient of [`crate::models::loss_ssl`] under the same augmentation draws.
pub fn grad_ssl(model: &SslModel, data: &Dataset, rho: f64, mc: &McSpec) -> Result<Gradient> {
    check_dim(model.dim(), data)?;
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    if mc.samples == 0 {
        return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
    }
    let act = model.activation;
    let d = model.dim();
    let mut acc = DMatrix::zeros(2, d);
    for_each_augmented_pair(data, rho, mc, |_, a, b, wgt| {
        for j in 0..2 {
            let (sa, dsa) = act.value_and_slope(row_dot(&model.w, j, a));
            let (sb, dsb) = act.value_and_slope(row_dot(&model.w, j, b));
            let ca = wgt * dsa * sb;
            let cb = wgt * sa * dsb;
            for k in 0..d {
                acc[(j, k)] += ca * a[k] + cb * b[k];
            }
        }
    });
    let g = &model.w * (2.0 * model.alpha) - acc / data.len() as f64;
    Ok(Gradient { w: g, f: None })
}

/// Exact gradient of [`crate::models::loss_sl_bce`], including the clamp:
/// points whose prediction is clamped contribute nothing.
pub fn grad_sl_bce(model: &SlModel, data: &Dataset) -> Result<Gradient> {
    check_dim(model.dim(), data)?;
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let d = model.dim();
    let n = data.len() as f64;
    let mut gw = DMatrix::zeros(2, d);
    let mut gf = [0.0; 2];
    for p in &data.points {
        let u = &model.w * &p.x;
        let s = [sigmoid(u[0]), sigmoid(u[1])];
        let y = sigmoid(model.f[0] * s[0] + model.f[1] * s[1]);
        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&y) {
            continue;
        }
        let r = (y - f64::from(p.label)) / n;
        for j in 0..2 {
            gf[j] += r * s[j];
            let c = r * model.f[j] * s[j] * (1.0 - s[j]);
            for k in 0..d {
                gw[(j, k)] += c * p.x[k];
            }
        }
    }
    gw += &model.w * (2.0 * model.beta);
    for j in 0..2 {
        gf[j] += 2.0 * model.gamma * model.f[j];
    }
    Ok(Gradient { w: gw, f: Some(gf) })
}

/// Hessian of the noise-free loss with respect to one row. Only the leading
/// 2 x 2 block depends on the row; the rest is `2 alpha I`.
pub fn hessian_tilde_block(
    w_row: &DVector<f64>,
    tau: f64,
    alpha: f64,
    activation: ActivationKind,
) -> DMatrix<f64> {
    let d = w_row.len();
    let mut h = DMatrix::identity(d, d) * (2.0 * alpha);
    let [h11, h12, h22] = active_block(w_row[0], w_row[1], tau, alpha, activation);
    h[(0, 0)] = h11;
    h[(0, 1)] = h12;
    h[(1, 0)] = h12;
    h[(1, 1)] = h22;
    h
}

/// `(H11, H12, H22)` of the active block at `(w^(1), w^(2))`.
pub fn active_block(a: f64, w2: f64, tau: f64, alpha: f64, act: ActivationKind) -> [f64; 3] {
    let b = tau * w2;
    let hp = |x: f64| act.h(1, x);
    let (pp, mp, p0, m0) = (hp(a + b), hp(-a + b), hp(a), hp(-a));
    [
        -0.5 * (p0 + m0 + pp + mp) + 2.0 * alpha,
        -0.5 * tau * (pp - mp),
        -0.5 * tau * tau * (pp + mp) + 2.0 * alpha,
    ]
}

/// Finite-difference step `eps^{1/3} (1 + |w|)`.
pub fn default_fd_step(w: &DVector<f64>) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + w.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    /// Symmetrised estimate.
    pub h: DMatrix<f64>,
    /// `|H - H^T|_F / |H|_F` of the raw estimate.
    pub asymmetry: f64,
}

/// Central differences of `grad_fn` around `point`. A stochastic objective
/// must use fixed draws inside `grad_fn`. Fails with a numerical warning when
/// the raw estimate's relative asymmetry exceeds `1e-4`.
pub fn hessian_mc<G>(grad_fn: G, point: &DVector<f64>, step: f64) -> Result<HessianEstimate>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let d = point.len();
    let mut raw = DMatrix::zeros(d, d);
    let mut x = point.clone();
    for k in 0..d {
        x[k] = point[k] + step;
        let gp = grad_fn(&x);
        x[k] = point[k] - step;
        let gm = grad_fn(&x);
        x[k] = point[k];
        if gp.len() != d || gm.len() != d {
            return Err(Error::Dimension("gradient length differs from point".into()));
        }
        raw.set_column(k, &((gp - gm) / (2.0 * step)));
    }
    let scale = raw.norm();
    let asymmetry = if scale > 0.0 {
        (&raw - raw.transpose()).norm() / scale
    } else {
        0.0
    };
    if asymmetry > 1e-4 {
        return Err(Error::NumericalWarning { residual: asymmetry });
    }
    let h = (&raw + raw.transpose()) * 0.5;
    Ok(HessianEstimate { h, asymmetry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, DistributionConfig};
    use crate::models::{loss_hat, loss_sl_bce, loss_ssl, loss_tilde};
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use ActivationKind::*;

    const ALPHA: f64 = 1.0 / 800.0;

    fn random_w(seed: u64, d: usize, scale: f64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 1);
        DMatrix::from_fn(2, d, |_, _| scale * r.sample::<f64, _>(StandardNormal))
    }

    fn fd_matrix(w: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(w.nrows(), w.ncols());
        for idx in 0..w.len() {
            let e = 1e-3 * (1.0 + w[idx].abs());
            let at = |s: f64| {
                let mut v = w.clone();
                v[idx] += s * e;
                f(&v)
            };
            g[idx] = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * e);
        }
        g
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn k_ge_3_component_is_pure_regulariser() {
        let mut w = DMatrix::zeros(2, 5);
        w[(0, 0)] = 3.5;
        w[(0, 1)] = 1.3;
        w[(0, 2)] = 0.4;
        let m = SslModel::new(w, ALPHA, Sigmoid).unwrap();
        assert!((grad_tilde(&m, 7.0).w[(0, 2)] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn first_coordinate_vanishes_at_zero() {
        let mut w = random_w(2, 4, 1.0);
        w[(0, 0)] = 0.0;
        let m = SslModel::new(w, ALPHA, Tanh).unwrap();
        assert_eq!(grad_tilde(&m, 7.0).w[(0, 0)], 0.0);
    }

    #[test]
    fn tilde_matches_fd() {
        for act in [Sigmoid, Tanh] {
            for seed in 0..5 {
                let w = random_w(seed, 5, 1.5);
                let m = SslModel::new(w.clone(), ALPHA, act).unwrap();
                let num = fd_matrix(&w, |v| loss_tilde(&SslModel { w: v.clone(), ..m.clone() }, 7.0));
                assert!(rel(&grad_tilde(&m, 7.0).w, &num) < 1e-6);
            }
        }
    }

    #[test]
    fn hat_single_kind_has_no_tau_terms() {
        let ds = Dataset::from_counts([10, 0, 0, 0], 7.0, 4);
        let w = random_w(5, 4, 1.0);
        let m = SslModel::new(w.clone(), ALPHA, Sigmoid).unwrap();
        let g = grad_hat(&m, &ds).unwrap();
        for j in 0..2 {
            assert_eq!(g.w[(j, 1)], 2.0 * ALPHA * w[(j, 1)]);
        }
    }

    #[test]
    fn hat_with_equal_counts_is_tilde() {
        let ds = Dataset::from_counts([3, 3, 3, 3], 7.0, 4);
        let m = SslModel::new(random_w(9, 4, 1.0), ALPHA, Sigmoid).unwrap();
        assert_eq!(grad_hat(&m, &ds).unwrap(), grad_tilde(&m, 7.0));
    }

    #[test]
    fn ssl_with_crn_matches_fd() {
        let cfg = DistributionConfig { d: 5, tau: 7.0, rho: 0.2, n: 12, seed: 3 };
        let ds = sample_dataset(&cfg).unwrap();
        let mc = McSpec::new(5, 17).unwrap();
        let w = random_w(11, 5, 0.8);
        let m = SslModel::new(w.clone(), ALPHA, Sigmoid).unwrap();
        let num = fd_matrix(&w, |v| {
            loss_ssl(&SslModel { w: v.clone(), ..m.clone() }, &ds, 0.2, &mc).unwrap()
        });
        assert!(rel(&grad_ssl(&m, &ds, 0.2, &mc).unwrap().w, &num) < 1e-6);
    }

    #[test]
    fn ssl_with_zero_rho_is_hat() {
        let ds = Dataset::from_counts([2, 5, 1, 4], 7.0, 4);
        let m = SslModel::new(random_w(4, 4, 1.0), ALPHA, Sigmoid).unwrap();
        let a = grad_ssl(&m, &ds, 0.0, &McSpec::new(3, 0).unwrap()).unwrap();
        let b = grad_hat(&m, &ds).unwrap();
        assert!((a.w - b.w).norm() < 1e-15);
    }

    #[test]
    fn bce_matches_fd() {
        let cfg = DistributionConfig { d: 4, tau: 7.0, rho: 0.3, n: 16, seed: 2 };
        let ds = sample_dataset(&cfg).unwrap();
        let m = SlModel::new(random_w(1, 4, 0.7), [0.9, -1.4], 0.1, 0.2).unwrap();
        let g = grad_sl_bce(&m, &ds).unwrap();
        let num = fd_matrix(&m.w, |v| loss_sl_bce(&SlModel { w: v.clone(), ..m.clone() }, &ds).unwrap());
        assert!(rel(&g.w, &num) < 1e-6);
        let f = DMatrix::from_row_slice(1, 2, &m.f);
        let numf = fd_matrix(&f, |v| {
            loss_sl_bce(&SlModel { f: [v[0], v[1]], ..m.clone() }, &ds).unwrap()
        });
        let gf = DMatrix::from_row_slice(1, 2, &g.f.unwrap());
        assert!(rel(&gf, &numf) < 1e-6);
    }

    #[test]
    fn bce_with_zero_projection() {
        let ds = Dataset::from_counts([2, 2, 2, 2], 7.0, 3);
        let w = random_w(3, 3, 1.0);
        let m = SlModel::new(w.clone(), [0.0, 0.0], 0.5, 0.5).unwrap();
        let g = grad_sl_bce(&m, &ds).unwrap();
        assert_eq!(g.w, &w * 1.0);
        let mut expect = [0.0; 2];
        for p in &ds.points {
            let u = &w * &p.x;
            for j in 0..2 {
                expect[j] += (0.5 - f64::from(p.label)) * sigmoid(u[j]) / 8.0;
            }
        }
        let gf = g.f.unwrap();
        for j in 0..2 {
            assert!((gf[j] - expect[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_beta_delta() {
        let ds = Dataset::from_counts([2, 2, 2, 2], 7.0, 3);
        let w = random_w(8, 3, 1.0);
        let a = grad_sl_bce(&SlModel::new(w.clone(), [1.0, 2.0], 0.3, 0.0).unwrap(), &ds).unwrap();
        let b = grad_sl_bce(&SlModel::new(w.clone(), [1.0, 2.0], 0.1, 0.0).unwrap(), &ds).unwrap();
        assert!(((a.w - b.w) - &w * 0.4).norm() < 1e-15);
    }

    #[test]
    fn hessian_block_structure() {
        let w = DVector::from_vec(vec![3.5, 1.3, 0.2, -0.4, 0.1]);
        let h = hessian_tilde_block(&w, 7.0, ALPHA, Sigmoid);
        for i in 0..5 {
            for j in 0..5 {
                if i >= 2 || j >= 2 {
                    let expect = if i == j { 2.0 * ALPHA } else { 0.0 };
                    assert_eq!(h[(i, j)], expect);
                }
            }
        }
        assert_eq!(h[(2, 2)], 0.0025);
    }

    #[test]
    fn hessian_off_diagonal_vanishes_at_zero() {
        let w = DVector::from_vec(vec![0.0, 1.3, 0.0]);
        assert_eq!(hessian_tilde_block(&w, 7.0, ALPHA, Sigmoid)[(0, 1)], 0.0);
    }

    #[test]
    fn hessian_block_matches_fd_of_gradient() {
        for act in [Sigmoid, Tanh] {
            let w = DVector::from_vec(vec![3.3, 1.25, 0.1]);
            let grad = |v: &DVector<f64>| {
                let mut m = SslModel::zeros(3, ALPHA, act);
                m.w.set_row(0, &v.transpose());
                grad_tilde(&m, 7.0).row(0)
            };
            let est = hessian_mc(grad, &w, 1e-5).unwrap();
            let h = hessian_tilde_block(&w, 7.0, ALPHA, act);
            assert!((est.h - &h).norm() / h.norm() < 1e-6);
            assert!(est.asymmetry < 1e-6);
        }
    }

    #[test]
    fn hessian_mc_on_quadratic() {
        let w = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let est = hessian_mc(|v| v * (2.0 * ALPHA), &w, default_fd_step(&w)).unwrap();
        assert!((est.h - DMatrix::identity(3, 3) * (2.0 * ALPHA)).abs().max() < 1e-8);
    }

    #[test]
    fn hessian_mc_rejects_bad_step() {
        let w = DVector::from_vec(vec![0.3]);
        assert!(hessian_mc(|v| v.clone(), &w, 0.0).is_err());
    }

    #[test]
    fn hessian_mc_flags_asymmetric_jacobian() {
        let w = DVector::from_vec(vec![1.0, 1.0]);
        let r = hessian_mc(|v| DVector::from_vec(vec![v[1], 0.0]), &w, 1e-3);
        assert!(matches!(r, Err(Error::NumericalWarning { .. })));
    }

    #[test]
    fn hat_matches_fd() {
        let cfg = DistributionConfig { d: 5, tau: 7.0, rho: 0.1, n: 37, seed: 8 };
        let ds = sample_dataset(&cfg).unwrap();
        let w = random_w(21, 5, 1.2);
        let m = SslModel::new(w.clone(), ALPHA, Sigmoid).unwrap();
        let num = fd_matrix(&w, |v| loss_hat(&SslModel { w: v.clone(), ..m.clone() }, &ds).unwrap());
        assert!(rel(&grad_hat(&m, &ds).unwrap().w, &num) < 1e-6);
    }
}
