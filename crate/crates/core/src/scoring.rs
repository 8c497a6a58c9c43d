//! Proper scoring rules for predictive draws: CRPS, interval score, negative
//! log predictive density, RMSE, and the per-location report the CLI writes.

use crate::autodiff::logsumexp_slice;
use crate::error::{Error, Result};
use crate::models::{log_normal_pdf, log_poisson_pmf};
use crate::predict::{PredictiveDensity, PredictiveDraws};
use serde::{Deserialize, Serialize};

/// Mixture densities below e^-700 are clamped there and flagged.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// Empirical CRPS of a predictive sample against a scalar truth:
/// (1/m) sum |x_i - y| - (1/(2 m^2)) sum_ij |x_i - x_j|, computed in
/// O(m log m) using the sorted form of the double sum.
pub fn crps_from_draws(draws: &[f64], y: f64) -> f64 {
    let m = draws.len();
    assert!(m >= 1, "crps needs at least one draw");
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mad: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / m as f64;
    // sum_{i<j} (x_(j) - x_(i)) = sum_i (2i + 1 - m) x_(i)
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 + 1.0 - m as f64) * x)
        .sum();
    mad - pair / (m as f64 * m as f64)
}

/// Quantile of a sorted sample by linear interpolation between order
/// statistics.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    debug_assert!(m >= 1 && (0.0..=1.0).contains(&q));
    let pos = q * (m as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Interval score of the central (1 - alpha) interval from empirical
/// quantiles: width plus 2/alpha times the distance by which y escapes it.
pub fn interval_score(draws: &[f64], y: f64, alpha: f64) -> f64 {
    assert!(draws.len() >= 2, "interval score needs at least two draws");
    assert!(alpha > 0.0 && alpha < 1.0);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let l = empirical_quantile(&sorted, alpha / 2.0);
    let u = empirical_quantile(&sorted, 1.0 - alpha / 2.0);
    let mut score = u - l;
    if y < l {
        score += 2.0 / alpha * (l - y);
    }
    if y > u {
        score += 2.0 / alpha * (y - u);
    }
    score
}

/// Negative log of the equally-weighted mixture of the per-draw predictive
/// densities, evaluated at the truth. Returns the score and whether the
/// density floor was hit.
pub fn nlpd(densities: &[PredictiveDensity], y: f64) -> (f64, bool) {
    assert!(!densities.is_empty(), "nlpd needs at least one draw");
    let logs: Vec<f64> = densities
        .iter()
        .map(|d| match *d {
            PredictiveDensity::Gaussian { mean, variance } => log_normal_pdf(y, mean, variance),
            PredictiveDensity::Poisson { lambda } => log_poisson_pmf(y, lambda),
        })
        .map(|l| l.max(LOG_DENSITY_FLOOR))
        .collect();
    let log_mix = logsumexp_slice(&logs) - (logs.len() as f64).ln();
    if log_mix <= LOG_DENSITY_FLOOR {
        (-LOG_DENSITY_FLOOR, true)
    } else {
        (-log_mix, false)
    }
}

/// Root mean squared error of point predictions.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "rmse over {} predictions vs {} truths",
            predictions.len(),
            truth.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Per-location scores for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScore {
    pub crps: f64,
    pub interval_score: f64,
    pub nlpd: f64,
    pub nlpd_floored: bool,
    pub point_prediction: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub alpha: f64,
    pub draw_count: usize,
    pub per_location: Vec<LocationScore>,
    pub mean_crps: f64,
    pub mean_interval_score: f64,
    pub mean_nlpd: f64,
    pub rmse: f64,
}

/// Score predictive draws against held-out truth. `alpha` is the central
/// interval level for the interval score.
pub fn score(draws: &PredictiveDraws, truth: &[f64], alpha: f64) -> Result<ScoreReport> {
    let q = draws.locations();
    if truth.len() != q || q == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} truths for {} predicted locations",
            truth.len(),
            q
        )));
    }
    let mut per_location = Vec::with_capacity(q);
    for i in 0..q {
        let resp = &draws.response[i];
        let (nl, floored) = nlpd(&draws.density[i], truth[i]);
        per_location.push(LocationScore {
            crps: crps_from_draws(resp, truth[i]),
            interval_score: interval_score(resp, truth[i], alpha),
            nlpd: nl,
            nlpd_floored: floored,
            point_prediction: resp.iter().sum::<f64>() / resp.len() as f64,
            truth: truth[i],
        });
    }
    let mean = |f: &dyn Fn(&LocationScore) -> f64| {
        per_location.iter().map(|s| f(s)).sum::<f64>() / q as f64
    };
    let points: Vec<f64> = per_location.iter().map(|s| s.point_prediction).collect();
    Ok(ScoreReport {
        alpha,
        draw_count: draws.draw_count(),
        mean_crps: mean(&|s| s.crps),
        mean_interval_score: mean(&|s| s.interval_score),
        mean_nlpd: mean(&|s| s.nlpd),
        rmse: rmse(&points, truth)?,
        per_location,
    })
}

impl ScoreReport {
    /// One row per location plus a mean row; full-precision floats.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("location,crps,interval_score,nlpd,nlpd_floored,point_prediction,truth\n");
        for (i, s) in self.per_location.iter().enumerate() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{},{:e},{:e}\n",
                i, s.crps, s.interval_score, s.nlpd, s.nlpd_floored, s.point_prediction, s.truth
            ));
        }
        out.push_str(&format!(
            "mean,{:e},{:e},{:e},,{:e},\n",
            self.mean_crps, self.mean_interval_score, self.mean_nlpd, self.rmse
        ));
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "locations: {}\ndraws: {}\nalpha: {}\ncrps: {:.6}\ninterval_score: {:.6}\nnlpd: {:.6}\nrmse: {:.6}\nnlpd_floored: {}\n",
            self.per_location.len(),
            self.draw_count,
            self.alpha,
            self.mean_crps,
            self.mean_interval_score,
            self.mean_nlpd,
            self.rmse,
            self.per_location.iter().filter(|s| s.nlpd_floored).count()
        )
    }
}
