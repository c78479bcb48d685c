//! Synthetic four-kind distribution and its generalisation to P label
//! features and Q hidden features.
//!
//! Kind 1: `e1`, kind 2: `e1 + tau e2`, kind 3: `-e1`, kind 4: `-e1 + tau e2`,
//! each plus `rho * xi` with `xi ~ N(0, I_d)`. Kinds 1-2 carry label 0 and
//! kinds 3-4 label 1.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionConfig {
    pub d: usize,
    pub tau: f64,
    pub rho: f64,
    pub n: usize,
    pub seed: u64,
}

impl DistributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::Config(format!("d must be >= 3, got {}", self.d)));
        }
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 1, got {}", self.tau)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.n < 4 {
            return Err(Error::Config(format!("n must be >= 4, got {}", self.n)));
        }
        Ok(())
    }
}

/// Where a dataset came from; decides how the noise-free template of a point
/// is reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    FourKind,
    General { p: usize, q: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datapoint {
    pub x: DVector<f64>,
    /// 1..=4
    pub kind: u8,
    /// 0 or 1
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Datapoint>,
    pub counts: [usize; 4],
    pub config: DistributionConfig,
    pub family: Family,
}

/// Label of a kind: 0 for kinds 1 and 2, 1 for kinds 3 and 4.
pub fn label_of(kind: u8) -> u8 {
    u8::from(kind >= 3)
}

/// Noise-free template of a four-kind datapoint.
pub fn template(kind: u8, tau: f64, d: usize) -> DVector<f64> {
    let mut x = DVector::zeros(d);
    x[0] = if kind <= 2 { 1.0 } else { -1.0 };
    if kind % 2 == 0 {
        x[1] = tau;
    }
    x
}

struct TemplateDraw {
    label_feature: usize,
    /// `None` is the zero hidden feature.
    hidden_feature: Option<usize>,
    positive: bool,
}

impl TemplateDraw {
    fn kind(&self) -> u8 {
        match (self.positive, self.hidden_feature.is_some()) {
            (true, false) => 1,
            (true, true) => 2,
            (false, false) => 3,
            (false, true) => 4,
        }
    }
}

fn draw_template(rng: &mut LabRng, p: usize, q: usize) -> TemplateDraw {
    let label_feature = rng.random_range(0..p);
    let h = rng.random_range(0..=q);
    let positive = rng.random_bool(0.5);
    TemplateDraw {
        label_feature,
        hidden_feature: (h < q).then_some(p + h),
        positive,
    }
}

fn general_point(draw: &TemplateDraw, tau: f64, d: usize) -> DVector<f64> {
    let mut x = DVector::zeros(d);
    x[draw.label_feature] = if draw.positive { 1.0 } else { -1.0 };
    if let Some(h) = draw.hidden_feature {
        x[h] = tau;
    }
    x
}

impl Dataset {
    fn from_points(points: Vec<Datapoint>, config: DistributionConfig, family: Family) -> Self {
        let mut counts = [0usize; 4];
        for p in &points {
            counts[(p.kind - 1) as usize] += 1;
        }
        Self {
            points,
            counts,
            config,
            family,
        }
    }

    /// Noise-free dataset with the given kind counts, in kind order. `rho`
    /// in the stored config is set to zero.
    pub fn from_counts(counts: [usize; 4], tau: f64, d: usize) -> Self {
        let n = counts.iter().sum();
        let config = DistributionConfig {
            d,
            tau,
            rho: 0.0,
            n,
            seed: 0,
        };
        let points = (1..=4u8)
            .flat_map(|kind| {
                std::iter::repeat_with(move || Datapoint {
                    x: template(kind, tau, d),
                    kind,
                    label: label_of(kind),
                })
                .take(counts[(kind - 1) as usize])
            })
            .collect();
        Self::from_points(points, config, Family::FourKind)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    /// Same kinds and noise draws with every noise vector rescaled to `rho`.
    /// Relies on the noise being stored as `template + rho * xi`.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        let cfg = DistributionConfig { rho, ..self.config };
        match self.family {
            Family::FourKind => sample_dataset(&cfg),
            Family::General { .. } => Err(Error::Input(
                "general datasets are noise-free; rho does not apply".into(),
            )),
        }
    }

    /// Writes one point per line: coordinates, kind, label, with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        header.push("kind".into());
        header.push("label".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
            rec.push(p.kind.to_string());
            rec.push(p.label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Draws `cfg.n` points of the four-kind distribution. Point `i` depends only
/// on `(cfg.seed, i)`.
pub fn sample_dataset(cfg: &DistributionConfig) -> Result<Dataset> {
    cfg.validate()?;
    let points = (0..cfg.n)
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, i as u64);
            let draw = draw_template(&mut rng, 1, 1);
            let kind = draw.kind();
            let mut x = general_point(&draw, cfg.tau, cfg.d);
            for v in x.iter_mut() {
                let xi: f64 = rng.sample(StandardNormal);
                *v += cfg.rho * xi;
            }
            Datapoint {
                x,
                kind,
                label: label_of(kind),
            }
        })
        .collect();
    Ok(Dataset::from_points(points, *cfg, Family::FourKind))
}

/// `(x + xi, x + xi')` with independent `N(0, rho^2 I)` perturbations.
pub fn sample_augmented_pair<R: Rng + ?Sized>(
    x: &DVector<f64>,
    rho: f64,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let mut a = x.clone();
    let mut b = x.clone();
    for v in a.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += rho * z;
    }
    for v in b.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += rho * z;
    }
    (a, b)
}

/// Noise-free points `z e^L + tau e^H` with `e^L` uniform over the first `p`
/// basis vectors, `e^H` uniform over the next `q` basis vectors and zero, and
/// a fair sign `z`. Kind encodes (sign, hidden present) as in the four-kind
/// family; label is 1 for negative sign.
pub fn sample_general_dataset(
    p: usize,
    q: usize,
    tau: f64,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<Dataset> {
    if p == 0 || q == 0 {
        return Err(Error::Config("P and Q must be positive".into()));
    }
    if p + q > d {
        return Err(Error::Dimension(format!("P + Q = {} exceeds d = {d}", p + q)));
    }
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let config = DistributionConfig {
        d,
        tau,
        rho: 0.0,
        n,
        seed,
    };
    let points = (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let draw = draw_template(&mut rng, p, q);
            let kind = draw.kind();
            Datapoint {
                x: general_point(&draw, tau, d),
                kind,
                label: label_of(kind),
            }
        })
        .collect();
    Ok(Dataset::from_points(points, config, Family::General { p, q }))
}
