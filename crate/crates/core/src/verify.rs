//! A quick self-check suite run by the `verify` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::calculus::hessian_tilde_block;
use crate::data::{sample_dataset, DistributionConfig};
use crate::error::Result;
use crate::landscape::{
    estimate_lipschitz_hessian, hoffman_wielandt_check, ift_certificate, scan_convexity, solve_tilde_minimum,
    Region,
};
use crate::metrics::projection_onto_rowspan;
use crate::models::McSpec;
use crate::rng;
use crate::training::{
    flatten_w, init_in_region, init_sl, BceObjective, HatObjective, Objective, SslObjective, TildeObjective,
};
use crate::ActivationKind;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

const TAU: f64 = 7.0;
const ALPHA: f64 = 1.0 / 800.0;
const D: usize = 10;

fn random_symmetric<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&m + m.transpose()) * 0.5
}

/// Worst relative error between the analytic gradient and a central
/// difference of the loss, `|g - g_fd| / max(|g|, 1e-8)`.
pub fn fd_gradient_error<O: Objective + ?Sized>(obj: &O, at: &DVector<f64>, h: f64) -> Result<f64> {
    let g = obj.grad(at, 0)?;
    let mut fd = DVector::zeros(at.len());
    for i in 0..at.len() {
        let mut p = at.clone();
        let mut m = at.clone();
        p[i] += h;
        m[i] -= h;
        fd[i] = (obj.loss(&p, 0)? - obj.loss(&m, 0)?) / (2.0 * h);
    }
    Ok((&g - &fd).norm() / g.norm().max(1e-8))
}

fn solver_check() -> Result<Check> {
    let m = solve_tilde_minimum(TAU, ALPHA, ActivationKind::Sigmoid, 1e-10)?;
    let ok = (3.1..=3.9).contains(&m.first) && TAU * m.second >= 9.0 && m.residual < 1e-10;
    Ok(Check::new(
        "noise-free minimum in its region",
        ok,
        format!("w(1) = {:.6}, tau w(2) = {:.6}, residual = {:.2e}", m.first, TAU * m.second, m.residual),
    ))
}

fn convexity_check() -> Result<Check> {
    let regions = [Region::d1_b0(TAU, D), Region::d2_b0(TAU, D)];
    let (mu, lm) = scan_convexity(&regions, TAU, ALPHA, ActivationKind::Sigmoid, 80)?;
    let ok = mu >= 0.0025 - 1e-9 && lm <= 50.5025 + 1e-9;
    Ok(Check::new("Hessian bounds on the B0 regions", ok, format!("mu = {mu:.6}, L = {lm:.6}")))
}

fn gradient_check() -> Result<Check> {
    let mut r = rng::stream(11, 0);
    let data = sample_dataset(&DistributionConfig { d: D, tau: TAU, rho: (D as f64).powf(-1.5), n: 100, seed: 5 })?;
    let mut worst_det = 0.0f64;
    let mut worst_mc = 0.0f64;
    for _ in 0..3 {
        let w = init_in_region(TAU, D, &mut r, ActivationKind::Sigmoid);
        let p = flatten_w(&w);
        let tilde = TildeObjective { d: D, tau: TAU, alpha: ALPHA, activation: ActivationKind::Sigmoid };
        worst_det = worst_det.max(fd_gradient_error(&tilde, &p, 1e-5)?);
        let hat = HatObjective { data: &data, alpha: ALPHA, activation: ActivationKind::Sigmoid };
        worst_det = worst_det.max(fd_gradient_error(&hat, &p, 1e-5)?);
        let sl = init_sl(D, &mut r, ALPHA, ALPHA);
        let mut q: Vec<f64> = flatten_w(&sl.w).iter().copied().collect();
        q.extend(sl.f);
        let bce = BceObjective { data: &data, beta: ALPHA, gamma: ALPHA };
        worst_det = worst_det.max(fd_gradient_error(&bce, &DVector::from_vec(q), 1e-5)?);
        let ssl = SslObjective {
            data: &data,
            rho: data.config.rho,
            alpha: ALPHA,
            activation: ActivationKind::Sigmoid,
            mc: McSpec::new(4, r.random())?,
        };
        worst_mc = worst_mc.max(fd_gradient_error(&ssl, &p, 1e-5)?);
    }
    Ok(Check::new(
        "analytic gradients match finite differences",
        worst_det < 1e-6 && worst_mc < 1e-5,
        format!("deterministic {worst_det:.2e}, common random numbers {worst_mc:.2e}"),
    ))
}

fn hoffman_wielandt_suite(pairs: usize) -> Result<Check> {
    let mut r = rng::stream(12, 0);
    let mut fails = 0;
    for _ in 0..pairs {
        let n = r.random_range(1..=8);
        let a = random_symmetric(&mut r, n);
        let b = random_symmetric(&mut r, n);
        if !hoffman_wielandt_check(&a, &b)?.2 {
            fails += 1;
        }
    }
    Ok(Check::new("Hoffman-Wielandt inequality", fails == 0, format!("{fails} of {pairs} pairs violate")))
}

fn projection_suite(trials: usize) -> Result<Check> {
    let mut r = rng::stream(13, 0);
    let mut worst_inv = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut out_of_range = 0;
    for _ in 0..trials {
        let w = DMatrix::from_fn(2, D, |_, _| r.sample::<f64, _>(StandardNormal));
        let m = DMatrix::from_fn(2, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        if m.determinant().abs() < 1e-2 {
            continue;
        }
        let mw = &m * &w;
        let mut sum = 0.0;
        for k in 0..D {
            let e = DVector::from_fn(D, |i, _| if i == k { 1.0 } else { 0.0 });
            let p = projection_onto_rowspan(&w, &e)?;
            if !(-1e-8..=1.0 + 1e-8).contains(&p) {
                out_of_range += 1;
            }
            worst_inv = worst_inv.max((p - projection_onto_rowspan(&mw, &e)?).abs());
            sum += p * p;
        }
        worst_sum = worst_sum.max((sum - 2.0).abs());
    }
    Ok(Check::new(
        "projection invariants",
        worst_inv < 1e-10 && worst_sum < 1e-8 && out_of_range == 0,
        format!("span invariance {worst_inv:.1e}, basis sum {worst_sum:.1e}, out of range {out_of_range}"),
    ))
}

fn determinism_check() -> Result<Check> {
    let cfg = DistributionConfig { d: D, tau: TAU, rho: 0.03, n: 200, seed: 99 };
    let a = sample_dataset(&cfg)?;
    let b = sample_dataset(&cfg)?;
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    a.write_csv(&mut ba)?;
    b.write_csv(&mut bb)?;
    let mut rdr = csv::Reader::from_reader(ba.as_slice());
    let mut round_trip = true;
    for (rec, p) in rdr.records().zip(&a.points) {
        let rec = rec?;
        round_trip &= (0..D).all(|k| rec[k].parse::<f64>().ok() == Some(p.x[k]));
    }
    Ok(Check::new(
        "dataset determinism and CSV round trip",
        ba == bb && round_trip,
        format!("{} bytes", ba.len()),
    ))
}

fn certificate_check() -> Result<Check> {
    let m = solve_tilde_minimum(TAU, ALPHA, ActivationKind::Sigmoid, 1e-10)?;
    let hess = |w: &DVector<f64>| hessian_tilde_block(w, TAU, ALPHA, ActivationKind::Sigmoid);
    let lh = estimate_lipschitz_hessian(hess, &Region::d1_b0(TAU, D), 200, &mut rng::stream(14, 0))?;
    let c = ift_certificate(&hess(&m.w1(D)), 2.0 * lh, m.residual)?;
    Ok(Check::new(
        "certificate at the noise-free minimum",
        c.certified,
        format!("residual {:.2e} vs r0 {:.2e}", m.residual, c.radius_r0),
    ))
}

/// Runs every check. Errors inside a check are reported as failures.
pub fn run_verify() -> Vec<Check> {
    let suite: [(&'static str, fn() -> Result<Check>); 7] = [
        ("solver", solver_check),
        ("convexity", convexity_check),
        ("gradients", gradient_check),
        ("hoffman-wielandt", || hoffman_wielandt_suite(1000)),
        ("projection", || projection_suite(200)),
        ("determinism", determinism_check),
        ("certificate", certificate_check),
    ];
    suite
        .into_iter()
        .map(|(name, f)| f().unwrap_or_else(|e| Check::new(name, false, e.to_string())))
        .collect()
}
