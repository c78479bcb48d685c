//! Feature-recovery metrics and multi-seed aggregation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gram matrices with a larger condition number are treated as rank deficient.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub e1: f64,
    pub e2: f64,
}

impl ProjectionResult {
    pub fn min(&self) -> f64 {
        self.e1.min(self.e2)
    }
}

fn gram_condition(w: &DMatrix<f64>) -> f64 {
    let g = w * w.transpose();
    let (a, b, c) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lo, hi) = (m - r, m + r);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Length of the orthogonal projection of `e` onto the span of the two rows
/// of `w`, computed from an orthonormal basis of that span.
pub fn projection_onto_rowspan(w: &DMatrix<f64>, e: &DVector<f64>) -> Result<f64> {
    if w.nrows() != 2 || w.ncols() != e.len() {
        return Err(Error::Dimension(format!(
            "W is {}x{}, e has length {}",
            w.nrows(),
            w.ncols(),
            e.len()
        )));
    }
    let condition = gram_condition(w);
    if !(condition < MAX_GRAM_CONDITION) {
        return Err(Error::DegenerateSpan { condition });
    }
    let q = w.transpose().qr().q();
    Ok((q.transpose() * e).norm())
}

/// `(|P e1|, |P e2|)` for the row span of `w`.
pub fn feature_projections(w: &DMatrix<f64>) -> Result<ProjectionResult> {
    let d = w.ncols();
    if d < 2 {
        return Err(Error::Dimension("need d >= 2".into()));
    }
    let basis = |k: usize| {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        e
    };
    Ok(ProjectionResult {
        e1: projection_onto_rowspan(w, &basis(0))?,
        e2: projection_onto_rowspan(w, &basis(1))?,
    })
}

/// `(w1^(2))^2 + (w2^(2))^2`.
pub fn sl_hidden_feature_norm(w_sl: &DMatrix<f64>) -> f64 {
    w_sl[(0, 1)].powi(2) + w_sl[(1, 1)].powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// `1.96 s / sqrt(n)` with the sample standard deviation `s`.
    pub half_width: f64,
    pub min: f64,
    pub max: f64,
    pub method: String,
}

/// Mean and normal-approximation 95% half-width. The result does not depend
/// on the order of `values`.
pub fn aggregate_ci(values: &[f64]) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::Input(format!("need at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = (sorted.iter().sum::<f64>() / n).clamp(sorted[0], sorted[sorted.len() - 1]);
    let ss: f64 = sorted.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    Ok(SeedSummary {
        values: values.to_vec(),
        mean,
        half_width: 1.96 * sd / n.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        method: "normal approximation, 1.96 * sample sd / sqrt(n)".into(),
    })
}
