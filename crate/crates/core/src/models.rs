//! Log joint densities for the three model formulations, scalar log-density
//! primitives, and inverse-gamma prior elicitation for the range parameter.

use crate::autodiff::{NodeId, Tape};
use crate::covariance::{pairwise_distances, Location};
use crate::error::{Error, Result};
use crate::nngp::{NeighborGraph, VecchiaLogPriorOp};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};
use std::sync::Arc;

pub const LN_2PI: f64 = 1.8378770664093453;

// ---- scalar log densities ---------------------------------------------------

/// log N(x; mean, variance). Returns -inf for non-positive variance.
pub fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    if variance <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln()) - d * d / (2.0 * variance)
}

/// log of the inverse-gamma density with the given shape and scale.
/// Out-of-support x (or invalid hyperparameters) gives -inf.
pub fn log_invgamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 || shape <= 0.0 || scale <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// log density of a log-normal: ln x ~ N(mu, sigma2).
pub fn log_lognormal_pdf(x: f64, mu: f64, sigma2: f64) -> f64 {
    if x <= 0.0 || sigma2 <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let lx = x.ln();
    let d = lx - mu;
    -lx - 0.5 * (LN_2PI + sigma2.ln()) - d * d / (2.0 * sigma2)
}

/// log Poisson(k; lambda). Non-integer or negative k gives -inf.
pub fn log_poisson_pmf(k: f64, lambda: f64) -> f64 {
    if lambda <= 0.0 || k < 0.0 || k.fract() != 0.0 {
        return f64::NEG_INFINITY;
    }
    k * lambda.ln() - lambda - ln_gamma(k + 1.0)
}

// ---- model specification ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    GaussianConditional,
    GaussianMarginal,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgPrior {
    pub shape: f64,
    pub scale: f64,
}

impl IgPrior {
    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }
}

/// Default cap on the Poisson log intensity; prevents exp overflow early in
/// training.
pub const DEFAULT_LOG_LAMBDA_CAP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Count of non-intercept covariates; the design matrix has p+1 columns.
    pub covariate_count: usize,
    /// One prior per regression coefficient, intercept first.
    pub beta_priors: Vec<GaussianPrior>,
    pub sigma2_prior: IgPrior,
    /// Nugget-variance prior; absent for the Poisson family.
    pub tau2_prior: Option<IgPrior>,
    pub phi_prior: IgPrior,
    pub log_lambda_cap: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta_priors.len() != self.covariate_count + 1 {
            return Err(Error::Config(format!(
                "{} coefficient priors for {} covariates plus intercept",
                self.beta_priors.len(),
                self.covariate_count
            )));
        }
        for bp in &self.beta_priors {
            if bp.variance <= 0.0 {
                return Err(Error::Config("coefficient prior variance must be positive".into()));
            }
        }
        let igs = [Some(&self.sigma2_prior), self.tau2_prior.as_ref(), Some(&self.phi_prior)];
        for ig in igs.into_iter().flatten() {
            if ig.shape <= 0.0 || ig.scale <= 0.0 {
                return Err(Error::Config("inverse-gamma shape and scale must be positive".into()));
            }
        }
        match self.family {
            ModelFamily::Poisson if self.tau2_prior.is_some() => {
                Err(Error::Config("poisson family has no nugget variance".into()))
            }
            ModelFamily::GaussianConditional | ModelFamily::GaussianMarginal
                if self.tau2_prior.is_none() =>
            {
                Err(Error::Config("gaussian families need a nugget-variance prior".into()))
            }
            _ => Ok(()),
        }
    }

    fn gaussian(family: ModelFamily, p: usize, var_y: f64, phi_prior: IgPrior) -> Self {
        ModelSpec {
            family,
            covariate_count: p,
            beta_priors: vec![GaussianPrior { mean: 0.0, variance: 1.0 }; p + 1],
            sigma2_prior: IgPrior { shape: 2.0, scale: var_y },
            tau2_prior: Some(IgPrior { shape: 2.0, scale: var_y }),
            phi_prior,
            log_lambda_cap: DEFAULT_LOG_LAMBDA_CAP,
        }
    }

    /// Gaussian model keeping the random effects, with default priors:
    /// standard-normal coefficients and IG(2, sample variance of y) for the
    /// variance components.
    pub fn gaussian_conditional(p: usize, var_y: f64, phi_prior: IgPrior) -> Self {
        Self::gaussian(ModelFamily::GaussianConditional, p, var_y, phi_prior)
    }

    /// Gaussian model with the random effects integrated out.
    pub fn gaussian_marginal(p: usize, var_y: f64, phi_prior: IgPrior) -> Self {
        Self::gaussian(ModelFamily::GaussianMarginal, p, var_y, phi_prior)
    }

    /// Poisson count model with default priors: intercept N(1, 1), other
    /// coefficients standard normal, sigma2 ~ IG(2, 0.1).
    pub fn poisson(p: usize, phi_prior: IgPrior) -> Self {
        let mut beta_priors = vec![GaussianPrior { mean: 0.0, variance: 1.0 }; p + 1];
        beta_priors[0].mean = 1.0;
        ModelSpec {
            family: ModelFamily::Poisson,
            covariate_count: p,
            beta_priors,
            sigma2_prior: IgPrior { shape: 2.0, scale: 0.1 },
            tau2_prior: None,
            phi_prior,
            log_lambda_cap: DEFAULT_LOG_LAMBDA_CAP,
        }
    }

    pub fn has_nugget(&self) -> bool {
        self.tau2_prior.is_some()
    }

    pub fn has_random_effects(&self) -> bool {
        self.family != ModelFamily::GaussianMarginal
    }
}

// ---- data and parameter containers -------------------------------------------

/// One draw of the model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSample {
    /// p+1 coefficients, intercept first.
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: Option<f64>,
    pub phi: f64,
    /// Spatial random effects in dataset order; absent when marginalized out.
    pub w: Option<Vec<f64>>,
}

impl ThetaSample {
    /// True when every component is inside the support of its prior.
    pub fn in_support(&self) -> bool {
        self.beta.iter().all(|b| b.is_finite())
            && self.sigma2 > 0.0
            && self.sigma2.is_finite()
            && self.tau2.map_or(true, |t| t > 0.0 && t.is_finite())
            && self.phi > 0.0
            && self.phi.is_finite()
            && self.w.as_ref().map_or(true, |w| w.iter().all(|v| v.is_finite()))
    }
}

/// Observed responses, design matrix (first column ones), and locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDataset {
    pub locations: Vec<Location>,
    pub x: Tensor,
    pub y: Vec<f64>,
}

impl SpatialDataset {
    pub fn new(locations: Vec<Location>, x: Tensor, y: Vec<f64>) -> Result<Self> {
        let n = locations.len();
        if !x.is_matrix() || x.rows() != n || y.len() != n {
            return Err(Error::DimensionMismatch("theta and dataset shapes disagree".into()));
        }
        for i in 0..n {
            if x.at(i, 0) != 1.0 {
                return Err(Error::Config("design matrix must start with a ones column".into()));
            }
        }
        Ok(SpatialDataset { locations, x, y })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    /// Number of design columns, p+1.
    pub fn design_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn check_counts(&self) -> Result<()> {
        for &v in &self.y {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "count responses must be non-negative integers, got {}",
                    v
                )));
            }
        }
        Ok(())
    }
}

/// Sample variance of the responses, the default scale for the Gaussian-case
/// variance priors.
pub fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// How the prior on the spatial random effects is evaluated.
#[derive(Debug, Clone)]
pub enum PriorMode {
    DenseGp,
    Nngp(Arc<NeighborGraph>),
}

// ---- tape assembly pieces ----------------------------------------------------

/// Handles to the parameter leaves a log-joint tape differentiates against.
#[derive(Debug, Clone, Copy)]
pub struct ThetaNodes {
    pub beta: NodeId,
    pub sigma2: NodeId,
    pub tau2: Option<NodeId>,
    pub phi: NodeId,
    pub w: Option<NodeId>,
}

fn gaussian_log_prior_on_tape(
    tape: &mut Tape,
    beta: NodeId,
    priors: &[GaussianPrior],
) -> Result<NodeId> {
    let means = tape.constant(Tensor::vector(priors.iter().map(|p| p.mean).collect()));
    let two_vars = tape.constant(Tensor::vector(priors.iter().map(|p| 2.0 * p.variance).collect()));
    let diff = tape.sub(beta, means)?;
    let sq = tape.square(diff)?;
    let scaled = tape.div(sq, two_vars)?;
    let s = tape.sum(scaled);
    let neg = tape.neg(s);
    let norm: f64 = priors.iter().map(|p| -0.5 * (LN_2PI + p.variance.ln())).sum();
    Ok(tape.add_const(neg, norm))
}

fn invgamma_log_prior_on_tape(tape: &mut Tape, x: NodeId, prior: &IgPrior) -> Result<NodeId> {
    let lx = tape.ln(x);
    let t1 = tape.scale(lx, -(prior.shape + 1.0));
    let b = tape.constant_scalar(prior.scale);
    let frac = tape.div(b, x)?;
    let t2 = tape.sub(t1, frac)?;
    Ok(tape.add_const(t2, prior.shape * prior.scale.ln() - ln_gamma(prior.shape)))
}

/// Log prior of the spatial random effects: dense zero-mean multivariate normal
/// through a Cholesky factor, or the sparse Vecchia density as one fused node.
fn w_log_prior_on_tape(
    tape: &mut Tape,
    locations: &[Location],
    mode: &PriorMode,
    sigma2: NodeId,
    phi: NodeId,
    w: NodeId,
) -> Result<NodeId> {
    match mode {
        PriorMode::DenseGp => {
            let n = locations.len();
            let d = tape.constant(pairwise_distances(locations));
            let c = crate::covariance::build_cov_matrix_on_tape(tape, d, sigma2, phi)?;
            let l = tape.cholesky(c).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } => Error::CovarianceSingular,
                other => other,
            })?;
            let z = tape.solve_lower(l, w)?;
            let quad = tape.dot(z, z)?;
            let dl = tape.diag(l)?;
            let ld = tape.ln(dl);
            let lds = tape.sum(ld);
            let logdet = tape.scale(lds, 2.0);
            let s = tape.add(logdet, quad)?;
            let s = tape.add_const(s, n as f64 * LN_2PI);
            Ok(tape.scale(s, -0.5))
        }
        PriorMode::Nngp(graph) => {
            let w_ordered = tape.gather(w, Arc::new(graph.permutation.clone()))?;
            tape.custom(
                Arc::new(VecchiaLogPriorOp { graph: Arc::clone(graph) }),
                vec![sigma2, phi, w_ordered],
            )
        }
    }
}

// ---- the three log joints ----------------------------------------------------

/// Gaussian model keeping the random effects:
/// sum_i log N(y_i; x_i'beta + w_i, tau2) + log prior of w + scalar priors.
pub fn log_joint_gaussian_conditional_on_tape(
    tape: &mut Tape,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    theta: &ThetaNodes,
) -> Result<NodeId> {
    let tau2 = theta.tau2.ok_or(Error::Config("gaussian conditional needs tau2".into()))?;
    let w = theta.w.ok_or(Error::Config("gaussian conditional needs w".into()))?;
    let n = data.n();

    let xc = tape.constant(data.x.clone());
    let yc = tape.constant(Tensor::vector(data.y.clone()));
    let xb = tape.matmul(xc, theta.beta)?;
    let mean = tape.add(xb, w)?;
    let resid = tape.sub(yc, mean)?;
    let rss = tape.dot(resid, resid)?;
    let two_tau2 = tape.scale(tau2, 2.0);
    let quad = tape.div(rss, two_tau2)?;
    let lt = tape.ln(tau2);
    let ltn = tape.scale(lt, -0.5 * n as f64);
    let lik = tape.sub(ltn, quad)?;
    let lik = tape.add_const(lik, -0.5 * n as f64 * LN_2PI);

    let wp = w_log_prior_on_tape(tape, &data.locations, mode, theta.sigma2, theta.phi, w)?;
    let bp = gaussian_log_prior_on_tape(tape, theta.beta, &spec.beta_priors)?;
    let s2p = invgamma_log_prior_on_tape(tape, theta.sigma2, &spec.sigma2_prior)?;
    let t2p = invgamma_log_prior_on_tape(
        tape,
        tau2,
        spec.tau2_prior.as_ref().ok_or(Error::Config("missing tau2 prior".into()))?,
    )?;
    let php = invgamma_log_prior_on_tape(tape, theta.phi, &spec.phi_prior)?;

    let mut total = tape.add(lik, wp)?;
    for t in [bp, s2p, t2p, php] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Gaussian model with w integrated out: y ~ MVN(X beta, C + tau2 I).
pub fn log_joint_gaussian_marginal_on_tape(
    tape: &mut Tape,
    data: &SpatialDataset,
    spec: &ModelSpec,
    theta: &ThetaNodes,
) -> Result<NodeId> {
    let tau2 = theta.tau2.ok_or(Error::Config("gaussian marginal needs tau2".into()))?;
    let n = data.n();

    let d = tape.constant(pairwise_distances(&data.locations));
    let c = crate::covariance::build_cov_matrix_on_tape(tape, d, theta.sigma2, theta.phi)?;
    let eye = tape.constant(Tensor::identity(n));
    let nugget = tape.mul(tau2, eye)?;
    let cov = tape.add(c, nugget)?;
    let l = tape.cholesky(cov).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::CovarianceSingular,
        other => other,
    })?;

    let xc = tape.constant(data.x.clone());
    let yc = tape.constant(Tensor::vector(data.y.clone()));
    let xb = tape.matmul(xc, theta.beta)?;
    let resid = tape.sub(yc, xb)?;
    let z = tape.solve_lower(l, resid)?;
    let quad = tape.dot(z, z)?;
    let dl = tape.diag(l)?;
    let ld = tape.ln(dl);
    let lds = tape.sum(ld);
    let logdet = tape.scale(lds, 2.0);
    let s = tape.add(logdet, quad)?;
    let s = tape.add_const(s, n as f64 * LN_2PI);
    let lik = tape.scale(s, -0.5);

    let bp = gaussian_log_prior_on_tape(tape, theta.beta, &spec.beta_priors)?;
    let s2p = invgamma_log_prior_on_tape(tape, theta.sigma2, &spec.sigma2_prior)?;
    let t2p = invgamma_log_prior_on_tape(
        tape,
        tau2,
        spec.tau2_prior.as_ref().ok_or(Error::Config("missing tau2 prior".into()))?,
    )?;
    let php = invgamma_log_prior_on_tape(tape, theta.phi, &spec.phi_prior)?;

    let mut total = tape.add(lik, bp)?;
    for t in [s2p, t2p, php] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Poisson count model with log link:
/// sum_i log Poisson(y_i; exp(x_i'beta + w_i)) + log prior of w + scalar priors.
/// The log intensity is clamped at `spec.log_lambda_cap`.
pub fn log_joint_poisson_on_tape(
    tape: &mut Tape,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    theta: &ThetaNodes,
) -> Result<NodeId> {
    let w = theta.w.ok_or(Error::Config("poisson joint needs w".into()))?;

    let xc = tape.constant(data.x.clone());
    let yc = tape.constant(Tensor::vector(data.y.clone()));
    let xb = tape.matmul(xc, theta.beta)?;
    let eta = tape.add(xb, w)?;
    let eta = tape.clamp_max(eta, spec.log_lambda_cap);
    let t1 = tape.dot(yc, eta)?;
    let lam = tape.exp(eta);
    let t2 = tape.sum(lam);
    let lik = tape.sub(t1, t2)?;
    let norm: f64 = data.y.iter().map(|&k| -ln_gamma(k + 1.0)).sum();
    let lik = tape.add_const(lik, norm);

    let wp = w_log_prior_on_tape(tape, &data.locations, mode, theta.sigma2, theta.phi, w)?;
    let bp = gaussian_log_prior_on_tape(tape, theta.beta, &spec.beta_priors)?;
    let s2p = invgamma_log_prior_on_tape(tape, theta.sigma2, &spec.sigma2_prior)?;
    let php = invgamma_log_prior_on_tape(tape, theta.phi, &spec.phi_prior)?;

    let mut total = tape.add(lik, wp)?;
    for t in [bp, s2p, php] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn theta_leaves(tape: &mut Tape, theta: &ThetaSample) -> ThetaNodes {
    ThetaNodes {
        beta: tape.leaf(Tensor::vector(theta.beta.clone())),
        sigma2: tape.leaf(Tensor::scalar(theta.sigma2)),
        tau2: theta.tau2.map(|t| tape.leaf(Tensor::scalar(t))),
        phi: tape.leaf(Tensor::scalar(theta.phi)),
        w: theta.w.as_ref().map(|w| tape.leaf(Tensor::vector(w.clone()))),
    }
}

fn check_dims(theta: &ThetaSample, data: &SpatialDataset, needs_w: bool) -> Result<()> {
    if theta.beta.len() != data.design_dim() {
        return Err(Error::DimensionMismatch("theta and dataset shapes disagree".into()));
    }
    if needs_w {
        match &theta.w {
            Some(w) if w.len() == data.n() => {}
            _ => return Err(Error::DimensionMismatch("theta and dataset shapes disagree".into())),
        }
    }
    Ok(())
}

/// Value of the conditional-Gaussian log joint; -inf for out-of-support theta.
pub fn log_joint_gaussian_conditional(
    theta: &ThetaSample,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
) -> Result<f64> {
    check_dims(theta, data, true)?;
    if !theta.in_support() || theta.tau2.is_none() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut tape = Tape::new();
    let nodes = theta_leaves(&mut tape, theta);
    let out = log_joint_gaussian_conditional_on_tape(&mut tape, data, spec, mode, &nodes)?;
    Ok(tape.value(out).scalar_value())
}

/// Value of the marginal-Gaussian log joint; -inf for out-of-support theta.
pub fn log_joint_gaussian_marginal(
    theta: &ThetaSample,
    data: &SpatialDataset,
    spec: &ModelSpec,
) -> Result<f64> {
    check_dims(theta, data, false)?;
    if !theta.in_support() || theta.tau2.is_none() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut tape = Tape::new();
    let nodes = theta_leaves(&mut tape, theta);
    let out = log_joint_gaussian_marginal_on_tape(&mut tape, data, spec, &nodes)?;
    Ok(tape.value(out).scalar_value())
}

/// Value of the Poisson log joint; -inf for out-of-support theta.
pub fn log_joint_poisson(
    theta: &ThetaSample,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
) -> Result<f64> {
    check_dims(theta, data, true)?;
    if !theta.in_support() || theta.tau2.is_some() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut tape = Tape::new();
    let nodes = theta_leaves(&mut tape, theta);
    let out = log_joint_poisson_on_tape(&mut tape, data, spec, mode, &nodes)?;
    Ok(tape.value(out).scalar_value())
}

// ---- range-prior elicitation -------------------------------------------------

/// Inverse-gamma CDF at x.
pub fn invgamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_ur(shape, scale / x)
}

/// Find inverse-gamma hyperparameters (shape a, scale b) for the range decay
/// phi such that E[phi] = 6 / max_distance and Pr[phi < 2 E[phi]] = 0.99.
///
/// With b tied to a through the mean constraint, the probability constraint
/// reduces to Q(a, (a-1)/2) = 0.99, which does not involve b. That function
/// dips below 0.99 near a = 2 and rises back through it around a = 21; the
/// root on the rising branch is taken, giving the concentrated prior the mean
/// constraint intends rather than the barely-proper one near a = 1.
pub fn elicit_phi_prior(max_distance: f64) -> Result<IgPrior> {
    if max_distance <= 0.0 || !max_distance.is_finite() {
        return Err(Error::ElicitationFailed(format!(
            "max distance must be positive, got {}",
            max_distance
        )));
    }
    let g = |a: f64| gamma_ur(a, (a - 1.0) / 2.0) - 0.99;

    // bracket the rising crossing on a multiplicative grid of a - 1
    let mut lo = f64::NAN;
    let mut hi = f64::NAN;
    let mut prev_a = 1.0 + 1e-6;
    let mut prev_g = g(prev_a);
    let mut t = 1e-6;
    while 1.0 + t < 1e4 {
        t *= 1.2;
        let a = 1.0 + t;
        let ga = g(a);
        if prev_g < 0.0 && ga >= 0.0 {
            lo = prev_a;
            hi = a;
            break;
        }
        prev_a = a;
        prev_g = ga;
    }
    if !lo.is_finite() {
        return Err(Error::ElicitationFailed("no sign change on the rising branch".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm.abs() < 1e-12 {
            lo = mid;
            hi = mid;
            break;
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let b = (a - 1.0) * 6.0 / max_distance;
    Ok(IgPrior { shape: a, scale: b })
}
