//! Forecast metrics, repeated-experiment summaries, the cross-validated
//! variance/bias estimators, and 2-state linear stability analysis.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const HYPO: f64 = 80.0;
pub const HYPER: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Glycemia {
    Hypo,
    InRange,
    Hyper,
}

/// Boundaries belong to the extreme classes.
pub fn classify(v: f64, thresholds: (f64, f64)) -> Glycemia {
    if v <= thresholds.0 {
        Glycemia::Hypo
    } else if v >= thresholds.1 {
        Glycemia::Hyper
    } else {
        Glycemia::InRange
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mape: f64,
    /// Points left out of MAPE because the target is zero.
    pub mape_excluded: usize,
    pub peak_rmse: f64,
    pub peak_mape: f64,
    pub pearson_corr: f64,
    pub diag_accuracy: f64,
    pub points: usize,
}

fn check_pairs(preds: &[Array2<f64>], targets: &[Array2<f64>]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(EvalError::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if let Some(i) = preds.iter().zip(targets).position(|(p, t)| p.dim() != t.dim()) {
        return Err(EvalError::Shape(format!("instance {i}: {:?} vs {:?}", preds[i].dim(), targets[i].dim())));
    }
    Ok(())
}

/// Point metrics over instance-shaped prediction arrays. Peak values are the
/// worst per-instance RMSE and MAPE.
pub fn metrics(preds: &[Array2<f64>], targets: &[Array2<f64>], thresholds: (f64, f64)) -> Result<PointMetrics> {
    check_pairs(preds, targets)?;
    let (mut se, mut ape, mut n, mut n_ape, mut excluded, mut agree) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
    let (mut peak_rmse, mut peak_mape) = (0.0f64, 0.0f64);
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (mut ise, mut iape, mut in_ape) = (0.0, 0.0, 0usize);
        for (&y, &x) in p.iter().zip(t.iter()) {
            let e = y - x;
            ise += e * e;
            if x == 0.0 {
                excluded += 1;
            } else {
                iape += (e / x).abs();
                in_ape += 1;
            }
            agree += usize::from(classify(y, thresholds) == classify(x, thresholds));
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let m = p.len();
        if m > 0 {
            peak_rmse = peak_rmse.max((ise / m as f64).sqrt());
        }
        if in_ape > 0 {
            peak_mape = peak_mape.max(iape / in_ape as f64);
        }
        se += ise;
        ape += iape;
        n += m;
        n_ape += in_ape;
    }
    if n == 0 {
        return Err(EvalError::Invalid("no prediction points".into()));
    }
    let nf = n as f64;
    let cov = sxy - sx * sy / nf;
    let vx = sxx - sx * sx / nf;
    let vy = syy - sy * sy / nf;
    let corr = if vx > 0.0 && vy > 0.0 { cov / (vx * vy).sqrt() } else { f64::NAN };
    Ok(PointMetrics {
        rmse: (se / nf).sqrt(),
        mape: if n_ape > 0 { ape / n_ape as f64 } else { f64::NAN },
        mape_excluded: excluded,
        peak_rmse,
        peak_mape,
        pearson_corr: corr,
        diag_accuracy: agree as f64 / nf,
        points: n,
    })
}

pub fn rmse(preds: &[Array2<f64>], targets: &[Array2<f64>]) -> Result<f64> {
    check_pairs(preds, targets)?;
    let n: usize = targets.iter().map(|t| t.len()).sum();
    let se: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).mapv(|e| e * e).sum()).sum();
    Ok((se / n.max(1) as f64).sqrt())
}

/// Mean and Monte Carlo standard error sqrt(sum (mean - x)^2 / (K (K - 1))).
pub fn mean_se(values: &[f64]) -> Result<(f64, f64)> {
    let k = values.len();
    if k < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 repetitions, got {k}")));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let ss: f64 = values.iter().map(|v| (mean - v).powi(2)).sum();
    Ok((mean, (ss / (k * (k - 1)) as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub per_rep: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

/// Test-set RMSE of each repetition's model, with the across-repetition
/// mean and standard error.
pub fn test_set_rmse(per_rep_preds: &[Vec<Array2<f64>>], targets: &[Array2<f64>]) -> Result<RmseSummary> {
    let per_rep = per_rep_preds.iter().map(|p| rmse(p, targets)).collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_se(&per_rep)?;
    Ok(RmseSummary { per_rep, mean, se })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvDecomposition {
    pub variance: f64,
    pub bias_sq: f64,
    pub mse: f64,
    pub rmse: f64,
}

/// Variance, squared bias and MSE from K models each fitted on a single fold.
/// `preds[i][n]` is model i's prediction for case n; case n lies in fold
/// `fold_of[n]` and is scored by the K-1 models fitted on other folds.
/// Squared norms are averaged per entry so the result is on the RMSE scale.
pub fn cv_variance_bias(preds: &[Vec<Array2<f64>>], targets: &[Array2<f64>], fold_of: &[usize], k: usize) -> Result<CvDecomposition> {
    if k < 3 {
        return Err(EvalError::Invalid(format!("variance needs K >= 3 (got {k})")));
    }
    if preds.len() != k {
        return Err(EvalError::Shape(format!("{} models for K = {k}", preds.len())));
    }
    if fold_of.len() != targets.len() || fold_of.iter().any(|&f| f >= k) {
        return Err(EvalError::Shape("fold assignment does not match the cases".into()));
    }
    for p in preds {
        check_pairs(p, targets)?;
    }
    let others = (k - 1) as f64;
    let (mut var, mut bias, mut mse, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (c, t) in targets.iter().enumerate() {
        let models: Vec<&Array2<f64>> = (0..k).filter(|&i| i != fold_of[c]).map(|i| &preds[i][c]).collect();
        let mut mean = Array2::zeros(t.dim());
        for m in &models {
            mean += *m;
        }
        mean /= others;
        for m in &models {
            var += (*m - &mean).mapv(|e| e * e).sum() / others;
            mse += (*m - t).mapv(|e| e * e).sum() / others;
        }
        bias += (&mean - t).mapv(|e| e * e).sum();
        n += t.len();
    }
    let n = n.max(1) as f64;
    let (variance, bias_sq, mse) = (var / n, bias / n, mse / n);
    Ok(CvDecomposition { variance, bias_sq, mse, rmse: mse.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn norm(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub jacobian: [[f64; 2]; 2],
    pub h: f64,
    /// lambda+ then lambda-.
    pub eigenvalues: [Complex; 2],
    /// Spectral radius of hJ + I.
    pub euler_radius: f64,
    pub blow_up: bool,
    /// Fastest over slowest decay rate; infinite unless both rates are stable.
    pub kappa: f64,
}

/// Eigenvalues, forward-Euler growth and stiffness of ds/dt = J s with
/// J = [[a, b], [c, d]].
pub fn stability_analyze(a: f64, b: f64, c: f64, d: f64, h: f64) -> StabilityReport {
    let half = (a + d) / 2.0;
    let disc = (a - d).powi(2) + 4.0 * b * c;
    let eigenvalues = if b * c == 0.0 {
        // triangular: the diagonal, exactly
        [Complex { re: a.max(d), im: 0.0 }, Complex { re: a.min(d), im: 0.0 }]
    } else if disc >= 0.0 {
        let r = disc.sqrt() / 2.0;
        [Complex { re: half + r, im: 0.0 }, Complex { re: half - r, im: 0.0 }]
    } else {
        let r = (-disc).sqrt() / 2.0;
        [Complex { re: half, im: r }, Complex { re: half, im: -r }]
    };
    let euler_radius = eigenvalues
        .iter()
        .map(|l| Complex { re: 1.0 + h * l.re, im: h * l.im }.norm())
        .fold(0.0, f64::max);
    let kappa = if eigenvalues.iter().all(|l| l.re < 0.0) {
        let (hi, lo) = (eigenvalues[0].re.abs(), eigenvalues[1].re.abs());
        hi.max(lo) / hi.min(lo)
    } else {
        f64::INFINITY
    };
    StabilityReport { jacobian: [[a, b], [c, d]], h, eigenvalues, euler_radius, blow_up: euler_radius > 1.0, kappa }
}
