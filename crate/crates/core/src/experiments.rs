//! Multi-seed experiments and their artifacts.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`]: seeds are
//! derived from the master seed and the seed index, and files are written by a
//! single writer after all seeds finish.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calculus::hessian_tilde_block;
use crate::data::{sample_dataset, DistributionConfig};
use crate::error::{Error, Result};
use crate::landscape::{
    estimate_lipschitz_hessian, ift_certificate, measure_expectation_noise, measure_sampling_noise,
    scan_convexity, solve_tilde_minimum_with, LandscapeReport, NoiseMeasurement, Region,
    SolverOptions, TanhBounds, DEFAULT_TW2_CAP,
};
use crate::metrics::{aggregate_ci, feature_projections, sl_hidden_feature_norm, SeedSummary};
use crate::models::{margin_constraint_check, McSpec, SlModel};
use crate::rng;
use crate::training::{
    flatten_w, gd_train, init_in_region, init_sign_only, init_sl, train_sl_bce, InitMode,
    SslObjective, TrainConfig, TrainTrajectory,
};
use crate::ActivationKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentName {
    Fig3,
    Fig4Sign,
    FigTau3,
    Fig6Sl,
    LandscapeCert,
    NoiseMeasure,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fig3 => "fig3",
            Self::Fig4Sign => "fig4_sign",
            Self::FigTau3 => "fig_tau3",
            Self::Fig6Sl => "fig6_sl",
            Self::LandscapeCert => "landscape_cert",
            Self::NoiseMeasure => "noise_measure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum InitModeName {
    Region,
    SignOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentName,
    pub d: usize,
    pub tau: f64,
    /// Defaults to `d^{-1.5}`.
    pub rho: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub iters: usize,
    /// Defaults to `d^2`.
    pub n: Option<usize>,
    pub seeds: usize,
    pub master_seed: u64,
    pub mc_samples: usize,
    pub activation: ActivationKind,
    pub tanh_bounds: TanhBounds,
    pub init_mode: InitModeName,
    pub init_scale: f64,
    pub record_every: usize,
    /// Grid points per dimension of the Hessian scan.
    pub scan_grid: usize,
    /// Pairs sampled for the Lipschitz-Hessian estimate.
    pub lh_pairs: usize,
    pub lh_safety_factor: f64,
    /// Resamples per sample size in the noise experiment.
    pub noise_resamples: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults: d = 10, tau = 7, rho = d^-1.5, alpha = 1/800, n = d^2,
    /// eta = 0.001, 20 seeds; T = 4000 for SSL and 8000 for SL.
    pub fn defaults_for(experiment: ExperimentName) -> Self {
        let mut c = Self {
            experiment,
            d: 10,
            tau: 7.0,
            rho: None,
            alpha: 1.0 / 800.0,
            beta: 1.0 / 800.0,
            gamma: 1.0 / 800.0,
            eta: 0.001,
            iters: 4000,
            n: None,
            seeds: 20,
            master_seed: 0,
            mc_samples: 16,
            activation: ActivationKind::Sigmoid,
            tanh_bounds: TanhBounds::Wide,
            init_mode: InitModeName::Region,
            init_scale: 0.1,
            record_every: 10,
            scan_grid: 80,
            lh_pairs: 2000,
            lh_safety_factor: 2.0,
            noise_resamples: 50,
            out_dir: PathBuf::from("out").join(experiment.as_str()),
        };
        match experiment {
            ExperimentName::Fig4Sign => c.init_mode = InitModeName::SignOnly,
            ExperimentName::FigTau3 => c.tau = 3.0,
            ExperimentName::Fig6Sl => c.iters = 8000,
            ExperimentName::LandscapeCert => c.mc_samples = 10_000,
            ExperimentName::NoiseMeasure => {
                c.mc_samples = 10_000;
                c.n = Some(10_000);
            }
            ExperimentName::Fig3 => {}
        }
        c
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or_else(|| (self.d as f64).powf(-1.5))
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or(self.d * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.d < 3 {
            return Err(Error::Config("d must be >= 3".into()));
        }
        if self.mc_samples == 0 || self.record_every == 0 || self.iters == 0 {
            return Err(Error::Config("mc_samples, record_every and iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Overlays the keys of a JSON object onto this config.
    pub fn merge_json(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(Error::Config("config document must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("config serialises to an object");
        for (k, v) in map {
            obj.insert(k.clone(), v.clone());
        }
        Ok(serde_json::from_value(base)?)
    }

    /// Reads a JSON config; the `experiment` key (or `fallback`) selects the
    /// defaults the file is laid over.
    pub fn from_file(path: &Path, fallback: ExperimentName) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        let name = match v.get("experiment") {
            Some(n) => serde_json::from_value(n.clone())?,
            None => fallback,
        };
        Self::defaults_for(name).merge_json(&v)
    }

    fn distribution(&self, seed: u64) -> DistributionConfig {
        DistributionConfig {
            d: self.d,
            tau: self.tau,
            rho: self.rho(),
            n: self.n(),
            seed,
        }
    }

    fn seed_for(&self, tag: &str, index: usize) -> u64 {
        rng::tagged_seed(self.master_seed, tag, index as u64)
    }
}

/// Calibrated thresholds for the qualitative claims; recorded with every
/// summary.
pub mod thresholds {
    pub const PROJECTION_HIGH: f64 = 0.9;
    pub const PROJECTION_LOW: f64 = 0.1;
    pub const MIN_PROJECTION_TAU3: f64 = 0.8;
    pub const SIGN_SUCCESS_FRACTION: f64 = 0.7;
    pub const SYMMETRY: f64 = 0.5;
    pub const SL_SHRINK: f64 = 0.2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslSeedResult {
    pub seed_index: usize,
    pub trajectory: TrainTrajectory,
    pub proj_e1: f64,
    pub proj_e2: f64,
}

impl SslSeedResult {
    pub fn final_w(&self) -> DMatrix<f64> {
        self.trajectory.final_w()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslRun {
    pub config: ExperimentConfig,
    pub seeds: Vec<SslSeedResult>,
    pub summary: Value,
}

fn train_config(cfg: &ExperimentConfig, mc_seed: u64, init_mode: InitMode) -> TrainConfig {
    TrainConfig {
        eta: cfg.eta,
        iters: cfg.iters,
        init_mode,
        mc: McSpec {
            samples: cfg.mc_samples,
            seed: mc_seed,
        },
        record_every: cfg.record_every,
    }
}

/// One SSL training run for seed `index` of `cfg`.
pub fn run_ssl_seed(cfg: &ExperimentConfig, index: usize) -> Result<SslSeedResult> {
    let data = sample_dataset(&cfg.distribution(cfg.seed_for("data", index)))?;
    let mut init_rng = rng::stream(cfg.seed_for("init", index), 0);
    let (w0, mode) = match cfg.init_mode {
        InitModeName::Region => (
            init_in_region(cfg.tau, cfg.d, &mut init_rng, cfg.activation),
            InitMode::Region,
        ),
        InitModeName::SignOnly => (
            init_sign_only(cfg.d, &mut init_rng, cfg.init_scale),
            InitMode::SignOnly { scale: cfg.init_scale },
        ),
    };
    let tc = train_config(cfg, cfg.seed_for("mc", index), mode);
    let obj = SslObjective {
        data: &data,
        rho: cfg.rho(),
        alpha: cfg.alpha,
        activation: cfg.activation,
        mc: tc.mc,
    };
    let trajectory = gd_train(&obj, &flatten_w(&w0), cfg.d, &tc)?;
    let p = feature_projections(&trajectory.final_w())?;
    Ok(SslSeedResult {
        seed_index: index,
        trajectory,
        proj_e1: p.e1,
        proj_e2: p.e2,
    })
}

fn run_seeds<T: Send>(cfg: &ExperimentConfig, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..cfg.seeds).into_par_iter().map(&f).collect()
}

fn ci(values: &[f64]) -> Result<Option<SeedSummary>> {
    if values.len() < 2 {
        return Ok(None);
    }
    aggregate_ci(values).map(Some)
}

/// Shared driver for the SSL experiments; also backs `train-ssl`.
pub fn run_ssl_experiment(cfg: &ExperimentConfig) -> Result<SslRun> {
    cfg.validate()?;
    let seeds = run_seeds(cfg, |i| run_ssl_seed(cfg, i))?;
    let e1: Vec<f64> = seeds.iter().map(|s| s.proj_e1).collect();
    let e2: Vec<f64> = seeds.iter().map(|s| s.proj_e2).collect();
    let mins: Vec<f64> = seeds.iter().map(|s| s.proj_e1.min(s.proj_e2)).collect();
    let success: Vec<bool> = e2.iter().map(|&v| v >= thresholds::PROJECTION_HIGH).collect();
    let sign_ok = seeds.iter().all(|s| {
        let w = s.final_w();
        w[(0, 0)] > 0.0 && w[(1, 0)] < 0.0
    });
    let max_asym = seeds
        .iter()
        .map(|s| {
            let w = s.final_w();
            (w[(0, 0)] + w[(1, 0)]).abs()
        })
        .fold(0.0f64, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let success_fraction = success.iter().filter(|&&b| b).count() as f64 / success.len() as f64;
    let summary = json!({
        "experiment": cfg.experiment.as_str(),
        "config": cfg,
        "rho": cfg.rho(),
        "n": cfg.n(),
        "proj_e1": ci(&e1)?,
        "proj_e2": ci(&e2)?,
        "min_projection": ci(&mins)?,
        "mean_proj_e1": mean(&e1),
        "mean_proj_e2": mean(&e2),
        "mean_min_projection": mean(&mins),
        "success_flags": success,
        "success_fraction": success_fraction,
        "sign_pattern_holds": sign_ok,
        "max_abs_w1_1_plus_w2_1": max_asym,
        "calibration": {
            "note": "thresholds calibrate qualitative claims; they are not derived constants",
            "projection_high": thresholds::PROJECTION_HIGH,
            "min_projection_tau3": thresholds::MIN_PROJECTION_TAU3,
            "sign_success_fraction": thresholds::SIGN_SUCCESS_FRACTION,
            "symmetry": thresholds::SYMMETRY,
        },
    });
    Ok(SslRun {
        config: cfg.clone(),
        seeds,
        summary,
    })
}

fn weight_header(d: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(2 * d);
    for j in 1..=2 {
        for k in 1..=d {
            h.push(format!("w{j}_{k}"));
        }
    }
    h
}

/// Learning-curve CSV: seed, iteration, loss, grad_norm, w1_1..w1_d, w2_1..w2_d.
pub fn write_learning_curves(path: &Path, d: usize, runs: &[(usize, &TrainTrajectory)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string(), "iteration".into(), "loss".into(), "grad_norm".into()];
    header.extend(weight_header(d));
    w.write_record(&header)?;
    for (seed, traj) in runs {
        for s in &traj.snapshots {
            let mut rec = vec![seed.to_string(), s.iteration.to_string(), s.loss.to_string(), s.grad_norm.to_string()];
            rec.extend(s.params.iter().take(2 * d).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Files written by an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

pub fn write_ssl_artifacts(run: &SslRun, dir: &Path) -> Result<Artifacts> {
    fs::create_dir_all(dir)?;
    let d = run.config.d;
    let weights = dir.join("final_weights.csv");
    {
        let mut w = csv::Writer::from_path(&weights)?;
        let mut header = vec!["seed".to_string(), "w1_1".into(), "w1_2".into(), "w2_1".into(), "w2_2".into()];
        header.extend(weight_header(d).into_iter().map(|h| format!("full_{h}")));
        w.write_record(&header)?;
        for s in &run.seeds {
            let fw = s.final_w();
            let mut rec = vec![s.seed_index.to_string()];
            rec.extend([fw[(0, 0)], fw[(0, 1)], fw[(1, 0)], fw[(1, 1)]].iter().map(|v| v.to_string()));
            rec.extend(flatten_w(&fw).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    let curves = dir.join("learning_curve.csv");
    let trajs: Vec<(usize, &TrainTrajectory)> = run.seeds.iter().map(|s| (s.seed_index, &s.trajectory)).collect();
    write_learning_curves(&curves, d, &trajs)?;
    let proj = dir.join("projections.csv");
    {
        let mut w = csv::Writer::from_path(&proj)?;
        w.write_record(["seed", "proj_e1", "proj_e2", "min_projection", "success"])?;
        for s in &run.seeds {
            w.write_record([
                s.seed_index.to_string(),
                s.proj_e1.to_string(),
                s.proj_e2.to_string(),
                s.proj_e1.min(s.proj_e2).to_string(),
                u8::from(s.proj_e2 >= thresholds::PROJECTION_HIGH).to_string(),
            ])?;
        }
        w.flush()?;
    }
    let summary = dir.join("summary.json");
    write_json(&summary, &run.summary)?;
    Ok(Artifacts {
        files: vec![weights, curves, proj, summary],
    })
}

pub fn run_fig3(cfg: &ExperimentConfig) -> Result<(SslRun, Artifacts)> {
    let run = run_ssl_experiment(cfg)?;
    let a = write_ssl_artifacts(&run, &cfg.out_dir)?;
    Ok((run, a))
}

pub fn run_fig4_sign(cfg: &ExperimentConfig) -> Result<(SslRun, Artifacts)> {
    if cfg.init_mode != InitModeName::SignOnly {
        return Err(Error::Config("fig4_sign requires init_mode = sign_only".into()));
    }
    run_fig3(cfg)
}

pub fn run_fig_tau3(cfg: &ExperimentConfig) -> Result<(SslRun, Artifacts)> {
    run_fig3(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlSeedResult {
    pub seed_index: usize,
    pub trajectory: TrainTrajectory,
    pub proj_e1: f64,
    pub proj_e2: f64,
    pub hidden_norm: f64,
    pub accuracy: f64,
    /// Largest `|w_j^(k)|` over both rows and `k >= 2`.
    pub max_rest: f64,
    pub margin_holds: bool,
    pub margin_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlRun {
    pub config: ExperimentConfig,
    pub seeds: Vec<SlSeedResult>,
    pub summary: Value,
}

pub fn run_sl_seed(cfg: &ExperimentConfig, index: usize) -> Result<SlSeedResult> {
    let data = sample_dataset(&cfg.distribution(cfg.seed_for("data", index)))?;
    let mut init_rng = rng::stream(cfg.seed_for("init", index), 0);
    let init = init_sl(cfg.d, &mut init_rng, cfg.beta, cfg.gamma);
    let tc = train_config(cfg, cfg.seed_for("mc", index), InitMode::Explicit);
    let trajectory = train_sl_bce(&init, &data, &tc)?;
    let w = trajectory.final_w();
    let model = SlModel {
        w: w.clone(),
        f: trajectory.final_f().unwrap_or([0.0; 2]),
        beta: cfg.beta,
        gamma: cfg.gamma,
    };
    let p = feature_projections(&w)?;
    let max_rest = (0..2)
        .flat_map(|j| (1..cfg.d).map(move |k| (j, k)))
        .map(|(j, k)| w[(j, k)].abs())
        .fold(0.0f64, f64::max);
    let (margin_holds, margin_slack) = margin_constraint_check(&model, &data, cfg.rho(), cfg.d);
    Ok(SlSeedResult {
        seed_index: index,
        proj_e1: p.e1,
        proj_e2: p.e2,
        hidden_norm: sl_hidden_feature_norm(&w),
        accuracy: model.accuracy(&data),
        max_rest,
        margin_holds,
        margin_slack,
        trajectory,
    })
}

pub fn run_sl_experiment(cfg: &ExperimentConfig) -> Result<SlRun> {
    cfg.validate()?;
    let seeds = run_seeds(cfg, |i| run_sl_seed(cfg, i))?;
    let col = |f: fn(&SlSeedResult) -> f64| seeds.iter().map(f).collect::<Vec<f64>>();
    let e1 = col(|s| s.proj_e1);
    let e2 = col(|s| s.proj_e2);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = json!({
        "experiment": cfg.experiment.as_str(),
        "config": cfg,
        "rho": cfg.rho(),
        "n": cfg.n(),
        "proj_e1": ci(&e1)?,
        "proj_e2": ci(&e2)?,
        "hidden_feature_norm": ci(&col(|s| s.hidden_norm))?,
        "accuracy": ci(&col(|s| s.accuracy))?,
        "mean_proj_e1": mean(&e1),
        "mean_proj_e2": mean(&e2),
        "max_rest_coordinate": col(|s| s.max_rest).into_iter().fold(0.0f64, f64::max),
        "margin_holds": seeds.iter().map(|s| s.margin_holds).collect::<Vec<_>>(),
        "calibration": {
            "note": "thresholds calibrate qualitative claims; they are not derived constants",
            "projection_high": thresholds::PROJECTION_HIGH,
            "projection_low": thresholds::PROJECTION_LOW,
            "sl_shrink": thresholds::SL_SHRINK,
        },
    });
    Ok(SlRun {
        config: cfg.clone(),
        seeds,
        summary,
    })
}

pub fn write_sl_artifacts(run: &SlRun, dir: &Path) -> Result<Artifacts> {
    fs::create_dir_all(dir)?;
    let d = run.config.d;
    let curves = dir.join("learning_curve.csv");
    let trajs: Vec<(usize, &TrainTrajectory)> = run.seeds.iter().map(|s| (s.seed_index, &s.trajectory)).collect();
    write_learning_curves(&curves, d, &trajs)?;
    let metrics = dir.join("projections.csv");
    {
        let mut w = csv::Writer::from_path(&metrics)?;
        w.write_record([
            "seed", "proj_e1", "proj_e2", "hidden_feature_norm", "accuracy", "max_rest", "margin_holds",
            "margin_slack", "f1", "f2",
        ])?;
        for s in &run.seeds {
            let f = s.trajectory.final_f().unwrap_or([0.0; 2]);
            w.write_record([
                s.seed_index.to_string(),
                s.proj_e1.to_string(),
                s.proj_e2.to_string(),
                s.hidden_norm.to_string(),
                s.accuracy.to_string(),
                s.max_rest.to_string(),
                u8::from(s.margin_holds).to_string(),
                s.margin_slack.to_string(),
                f[0].to_string(),
                f[1].to_string(),
            ])?;
        }
        w.flush()?;
    }
    let summary = dir.join("summary.json");
    write_json(&summary, &run.summary)?;
    Ok(Artifacts {
        files: vec![curves, metrics, summary],
    })
}

pub fn run_fig6_sl(cfg: &ExperimentConfig) -> Result<(SlRun, Artifacts)> {
    let run = run_sl_experiment(cfg)?;
    let a = write_sl_artifacts(&run, &cfg.out_dir)?;
    Ok((run, a))
}

/// Regions scanned for the convexity constants of each activation.
pub fn scan_regions(cfg: &ExperimentConfig) -> Vec<Region> {
    match cfg.activation {
        ActivationKind::Sigmoid => vec![Region::d1_b0(cfg.tau, cfg.d), Region::d2_b0(cfg.tau, cfg.d)],
        ActivationKind::Tanh => vec![
            Region::d1_tanh(cfg.tau, cfg.d, cfg.tanh_bounds),
            Region::d1_tilde_tanh(cfg.tau, cfg.d, cfg.tanh_bounds),
            Region::d2_tanh(cfg.tau, cfg.d, cfg.tanh_bounds),
            Region::d2_tilde_tanh(cfg.tau, cfg.d, cfg.tanh_bounds),
        ],
    }
}

/// Region sampled for the Lipschitz-Hessian estimate.
pub fn lipschitz_region(cfg: &ExperimentConfig) -> Region {
    match cfg.activation {
        ActivationKind::Sigmoid => Region::d1_b0(cfg.tau, cfg.d),
        ActivationKind::Tanh => {
            let mut r = Region::d1_tanh(cfg.tau, cfg.d, cfg.tanh_bounds);
            r.second.hi = DEFAULT_TW2_CAP / cfg.tau;
            r.name = "D1tanh-extended".into();
            r
        }
    }
}

/// Solve, scan, estimate `L_H`, measure the noise terms and certify.
pub fn landscape_report(cfg: &ExperimentConfig) -> Result<LandscapeReport> {
    cfg.validate()?;
    let opts = SolverOptions::for_activation(cfg.activation, cfg.tanh_bounds);
    let min = solve_tilde_minimum_with(cfg.tau, cfg.alpha, cfg.activation, 1e-10, &opts)?;
    let (mu, lm) = scan_convexity(&scan_regions(cfg), cfg.tau, cfg.alpha, cfg.activation, cfg.scan_grid)?;
    let hess = |w: &nalgebra::DVector<f64>| hessian_tilde_block(w, cfg.tau, cfg.alpha, cfg.activation);
    let mut lh_rng = rng::stream(cfg.seed_for("lipschitz", 0), 0);
    let lh = estimate_lipschitz_hessian(hess, &lipschitz_region(cfg), cfg.lh_pairs, &mut lh_rng)?;
    let a = hessian_tilde_block(&min.w1(cfg.d), cfg.tau, cfg.alpha, cfg.activation);
    let raw = ift_certificate(&a, lh, min.residual)?;
    let factored = ift_certificate(&a, cfg.lh_safety_factor * lh, min.residual)?;
    let model = min.model(cfg.d);
    let data = sample_dataset(&cfg.distribution(cfg.seed_for("data", 0)))?;
    let expectation = measure_expectation_noise(&model, &data, cfg.tau)?;
    let mc = McSpec::new(cfg.mc_samples, cfg.seed_for("mc", 0))?;
    let sampling = measure_sampling_noise(&model, &data, cfg.rho(), &mc)?;
    Ok(LandscapeReport {
        activation: cfg.activation,
        d: cfg.d,
        tau: cfg.tau,
        alpha: cfg.alpha,
        w1_star: min.w1(cfg.d).iter().copied().collect(),
        w2_star: min.w2(cfg.d).iter().copied().collect(),
        mu_hat: mu,
        lm_hat: lm,
        kappa_hat: lm / mu,
        lh_hat: lh,
        lh_over_sqrt_d: lh / (cfg.d as f64).sqrt(),
        lh_safety_factor: cfg.lh_safety_factor,
        grad_residual: min.residual,
        radius_r: factored.radius_r,
        radius_r0: factored.radius_r0,
        radius_r_raw: raw.radius_r,
        radius_r0_raw: raw.radius_r0,
        displacement_bound: factored.displacement_bound,
        certified: factored.certified,
        expectation_noise: Some(expectation),
        sampling_noise: Some(sampling),
    })
}

pub fn run_landscape_cert(cfg: &ExperimentConfig) -> Result<(LandscapeReport, Artifacts)> {
    let report = landscape_report(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("landscape_report.json");
    write_json(&path, &report)?;
    Ok((report, Artifacts { files: vec![path] }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// Sample size or noise scale, depending on the sweep.
    pub x: f64,
    pub median: f64,
    pub reference_scale: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median of `|d(L^ - L~)/dw1|` at the minimum over `resamples` datasets for
/// each `n` in `ns`.
pub fn expectation_noise_sweep(cfg: &ExperimentConfig, ns: &[usize], resamples: usize) -> Result<Vec<NoiseRow>> {
    let opts = SolverOptions::for_activation(cfg.activation, cfg.tanh_bounds);
    let model = solve_tilde_minimum_with(cfg.tau, cfg.alpha, cfg.activation, 1e-10, &opts)?.model(cfg.d);
    ns.iter()
        .enumerate()
        .map(|(i, &n)| {
            let vals: Vec<NoiseMeasurement> = (0..resamples)
                .into_par_iter()
                .map(|r| {
                    let dc = DistributionConfig {
                        n,
                        ..cfg.distribution(rng::tagged_seed(cfg.master_seed, "noise-n", (i * resamples + r) as u64))
                    };
                    measure_expectation_noise(&model, &sample_dataset(&dc)?, cfg.tau)
                })
                .collect::<Result<_>>()?;
            Ok(NoiseRow {
                x: n as f64,
                median: median(vals.iter().map(|m| m.value).collect()),
                reference_scale: vals[0].reference_scale,
            })
        })
        .collect()
}

/// Median of `|d(L - L^)/dw1|` at the minimum over `resamples` datasets for
/// each `rho`. The datasets for different `rho` share their kinds and
/// Gaussian draws.
pub fn sampling_noise_sweep(cfg: &ExperimentConfig, rhos: &[f64], resamples: usize) -> Result<Vec<NoiseRow>> {
    let opts = SolverOptions::for_activation(cfg.activation, cfg.tanh_bounds);
    let model = solve_tilde_minimum_with(cfg.tau, cfg.alpha, cfg.activation, 1e-10, &opts)?.model(cfg.d);
    rhos.iter()
        .map(|&rho| {
            let vals: Vec<NoiseMeasurement> = (0..resamples)
                .into_par_iter()
                .map(|r| {
                    let dc = DistributionConfig {
                        rho,
                        ..cfg.distribution(rng::tagged_seed(cfg.master_seed, "noise-rho", r as u64))
                    };
                    let mc = McSpec::new(cfg.mc_samples, rng::tagged_seed(cfg.master_seed, "noise-mc", r as u64))?;
                    measure_sampling_noise(&model, &sample_dataset(&dc)?, rho, &mc)
                })
                .collect::<Result<_>>()?;
            Ok(NoiseRow {
                x: rho,
                median: median(vals.iter().map(|m| m.value).collect()),
                reference_scale: vals[0].reference_scale,
            })
        })
        .collect()
}

pub fn is_strictly_decreasing(rows: &[NoiseRow]) -> bool {
    rows.windows(2).all(|w| w[1].median < w[0].median)
}

/// Sample sizes `n, 2n, 4n, 8n, 16n` and noise scales `rho, rho/10, rho/100`.
pub fn noise_measure(cfg: &ExperimentConfig) -> Result<(Value, Artifacts)> {
    cfg.validate()?;
    let n0 = cfg.n();
    let ns: Vec<usize> = (0..5).map(|k| n0 << k).collect();
    let exp = expectation_noise_sweep(cfg, &ns, cfg.noise_resamples)?;
    let rho0 = cfg.rho();
    let rhos = [rho0, rho0 / 10.0, rho0 / 100.0];
    let samp_cfg = ExperimentConfig {
        n: Some(cfg.d * cfg.d),
        ..cfg.clone()
    };
    let samp = sampling_noise_sweep(&samp_cfg, &rhos, 5)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let write_rows = |name: &str, key: &str, rows: &[NoiseRow]| -> Result<PathBuf> {
        let path = cfg.out_dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([key, "median", "reference_scale"])?;
        for r in rows {
            w.write_record([r.x.to_string(), r.median.to_string(), r.reference_scale.to_string()])?;
        }
        w.flush()?;
        Ok(path)
    };
    let p1 = write_rows("noise_expectation.csv", "n", &exp)?;
    let p2 = write_rows("noise_sampling.csv", "rho", &samp)?;
    let summary = json!({
        "experiment": cfg.experiment.as_str(),
        "config": cfg,
        "expectation_noise": exp,
        "expectation_noise_decreasing": is_strictly_decreasing(&exp),
        "sampling_noise": samp,
        "sampling_noise_decreasing": is_strictly_decreasing(&samp),
        "note": "reference scales are order expressions; only trends are checked",
    });
    let p3 = cfg.out_dir.join("summary.json");
    write_json(&p3, &summary)?;
    Ok((summary, Artifacts { files: vec![p1, p2, p3] }))
}

/// Runs the named experiment and returns its summary document.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Value, Artifacts)> {
    match cfg.experiment {
        ExperimentName::Fig3 => run_fig3(cfg).map(|(r, a)| (r.summary, a)),
        ExperimentName::Fig4Sign => run_fig4_sign(cfg).map(|(r, a)| (r.summary, a)),
        ExperimentName::FigTau3 => run_fig_tau3(cfg).map(|(r, a)| (r.summary, a)),
        ExperimentName::Fig6Sl => run_fig6_sl(cfg).map(|(r, a)| (r.summary, a)),
        ExperimentName::LandscapeCert => {
            run_landscape_cert(cfg).map(|(r, a)| (serde_json::to_value(r).unwrap_or(Value::Null), a))
        }
        ExperimentName::NoiseMeasure => noise_measure(cfg),
    }
}
