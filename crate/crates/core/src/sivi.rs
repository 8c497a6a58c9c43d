//! Semi-implicit variational family: an MLP maps Gaussian noise to the
//! hyperparameters of reparameterized conditional distributions over the model
//! parameters. The surrogate lower bound mixes each conditional density with K
//! auxiliary hyperparameter draws, and training ascends that bound.

use crate::autodiff::{
    adam_step, sgd_step, AdamState, CustomOp, NodeId, Tape,
};
use crate::error::{Error, Result};
use crate::models::{
    log_invgamma_pdf, log_joint_gaussian_conditional_on_tape, log_joint_gaussian_marginal_on_tape,
    log_joint_poisson_on_tape, log_lognormal_pdf, log_normal_pdf, IgPrior, ModelFamily, ModelSpec,
    PriorMode, SpatialDataset, ThetaNodes, ThetaSample,
};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_ur, ln_gamma};
use std::path::Path;
use std::sync::Arc;

// ---- generator configuration -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub hidden_layer_sizes: Vec<usize>,
    pub output_dim: usize,
}

impl GeneratorConfig {
    /// Full-scale architecture used for the reported experiments.
    pub fn full(output_dim: usize) -> Self {
        GeneratorConfig {
            noise_dim: 100,
            hidden_layer_sizes: vec![2048, 1500, 1000, 800, 600],
            output_dim,
        }
    }

    /// Small architecture for CPU-budget runs and tests.
    pub fn desk(output_dim: usize) -> Self {
        GeneratorConfig { noise_dim: 100, hidden_layer_sizes: vec![128, 128], output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.hidden_layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Layer in/out sizes, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.noise_dim;
        for &h in &self.hidden_layer_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

// ---- hyperparameter layout ----------------------------------------------------

/// Which two-parameter family the conditional on each variance component uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceFamily {
    InverseGamma,
    LogNormal,
}

/// IG shapes are offset by this after the positivity transform so the
/// conditional mean stays finite.
pub const IG_SHAPE_OFFSET: f64 = 1.01;

/// Map from named hyperparameters to generator output slots. The output vector
/// is grouped: coefficient means, coefficient log-variances, variance-component
/// parameter pairs, range pair, then the random-effect means and their single
/// shared log-variance. Frozen components are pinned to a constant, drop their
/// slots, and contribute no conditional density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiLayout {
    /// p+1 regression coefficients.
    pub coeff_count: usize,
    /// Number of spatial random effects, absent for the marginal family.
    pub n_effects: Option<usize>,
    pub variance_family: VarianceFamily,
    pub has_tau2: bool,
    pub frozen_sigma2: Option<f64>,
    pub frozen_tau2: Option<f64>,
    pub frozen_phi: Option<f64>,
}

struct Offsets {
    beta_mu: usize,
    beta_ls: usize,
    sigma2: Option<usize>,
    tau2: Option<usize>,
    phi: Option<usize>,
    w_mu: Option<usize>,
    w_ls: Option<usize>,
    total: usize,
}

impl PsiLayout {
    pub fn for_model(spec: &ModelSpec, n: usize, variance_family: VarianceFamily) -> Self {
        PsiLayout {
            coeff_count: spec.covariate_count + 1,
            n_effects: if spec.has_random_effects() { Some(n) } else { None },
            variance_family,
            has_tau2: spec.has_nugget(),
            frozen_sigma2: None,
            frozen_tau2: None,
            frozen_phi: None,
        }
    }

    fn offsets(&self) -> Offsets {
        let c = self.coeff_count;
        let mut cur = 2 * c;
        let mut take = |on: bool, len: usize| -> Option<usize> {
            if on {
                let s = cur;
                cur += len;
                Some(s)
            } else {
                None
            }
        };
        let sigma2 = take(self.frozen_sigma2.is_none(), 2);
        let tau2 = take(self.has_tau2 && self.frozen_tau2.is_none(), 2);
        let phi = take(self.frozen_phi.is_none(), 2);
        let w_mu = take(self.n_effects.is_some(), self.n_effects.unwrap_or(0));
        let w_ls = take(self.n_effects.is_some(), 1);
        Offsets { beta_mu: 0, beta_ls: c, sigma2, tau2, phi, w_mu, w_ls, total: cur }
    }

    pub fn output_dim(&self) -> usize {
        self.offsets().total
    }
}

/// Transformed hyperparameter values for one generator draw. Variance-component
/// pairs are (shape, scale) for the inverse-gamma family and (mu, s2) for the
/// log-normal family; the range pair is always (mu, s2) of a log-normal.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiValues {
    pub beta_mu: Vec<f64>,
    pub beta_s2: Vec<f64>,
    pub sigma2: Option<(f64, f64)>,
    pub tau2: Option<(f64, f64)>,
    pub phi: Option<(f64, f64)>,
    pub w_mu: Option<Vec<f64>>,
    pub w_s2: Option<f64>,
}

/// Tape handles to the same groups.
#[derive(Debug, Clone, Copy)]
pub struct PsiNodes {
    pub beta_mu: NodeId,
    pub beta_s2: NodeId,
    pub sigma2: Option<(NodeId, NodeId)>,
    pub tau2: Option<(NodeId, NodeId)>,
    pub phi: Option<(NodeId, NodeId)>,
    pub w: Option<(NodeId, NodeId)>,
}

// ---- variational state ---------------------------------------------------------

/// Generator weights and the layout they feed. Parameters are stored
/// interleaved as [weight, bias] per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub config: GeneratorConfig,
    pub layout: PsiLayout,
    pub params: Vec<Tensor>,
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-8);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// (mu, s2) of a log-normal matching the mean and variance of an inverse-gamma
/// prior; the variance falls back to the squared mean when the prior variance
/// is infinite.
fn lognormal_match(prior: &IgPrior) -> (f64, f64) {
    let m = if prior.shape > 1.0 { prior.mean() } else { prior.scale };
    let v = if prior.shape > 2.0 {
        prior.scale * prior.scale
            / ((prior.shape - 1.0) * (prior.shape - 1.0) * (prior.shape - 2.0))
    } else {
        m * m
    };
    let s2 = (1.0 + v / (m * m)).ln();
    (m.ln() - 0.5 * s2, s2)
}

impl VariationalState {
    /// He-initialized hidden layers; the output layer's weights are shrunk so
    /// the initial hyperparameters are dominated by its bias, which is set to
    /// reproduce each prior's location and scale.
    pub fn init(
        config: GeneratorConfig,
        layout: PsiLayout,
        spec: &ModelSpec,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.output_dim != layout.output_dim() {
            return Err(Error::Config(format!(
                "generator output dim {} vs layout {}",
                config.output_dim,
                layout.output_dim()
            )));
        }
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let mut params = Vec::with_capacity(2 * dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let sd = (2.0 / fan_in as f64).sqrt() * if l == last { 1e-3 } else { 1.0 };
            let w: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.push(Tensor::matrix(fan_out, fan_in, w)?);
            let bias = if l == last {
                initial_psi_raw(&layout, spec)
            } else {
                vec![0.0; fan_out]
            };
            params.push(Tensor::vector(bias));
        }
        Ok(VariationalState { config, layout, params })
    }
}

/// Raw (pre-transform) generator output that maps to prior-matched
/// hyperparameters.
fn initial_psi_raw(layout: &PsiLayout, spec: &ModelSpec) -> Vec<f64> {
    let off = layout.offsets();
    let mut raw = vec![0.0; off.total];
    for (k, bp) in spec.beta_priors.iter().enumerate() {
        raw[off.beta_mu + k] = bp.mean;
        raw[off.beta_ls + k] = softplus_inv(bp.variance);
    }
    let mut variance_pair = |start: usize, prior: &IgPrior| match layout.variance_family {
        VarianceFamily::InverseGamma => {
            raw[start] = softplus_inv((prior.shape - IG_SHAPE_OFFSET).max(1e-3));
            raw[start + 1] = softplus_inv(prior.scale);
        }
        VarianceFamily::LogNormal => {
            let (mu, s2) = lognormal_match(prior);
            raw[start] = mu;
            raw[start + 1] = softplus_inv(s2);
        }
    };
    if let Some(s) = off.sigma2 {
        variance_pair(s, &spec.sigma2_prior);
    }
    if let (Some(s), Some(p)) = (off.tau2, spec.tau2_prior.as_ref()) {
        variance_pair(s, p);
    }
    if let Some(s) = off.phi {
        let (mu, s2) = lognormal_match(&spec.phi_prior);
        raw[s] = mu;
        raw[s + 1] = softplus_inv(s2);
    }
    if let (Some(_wm), Some(wl)) = (off.w_mu, off.w_ls) {
        // means stay zero; shared variance starts at the prior mean of sigma2
        let target = if spec.sigma2_prior.shape > 1.0 { spec.sigma2_prior.mean() } else { 1.0 };
        raw[wl] = softplus_inv(target);
    }
    raw
}

// ---- generator forward ---------------------------------------------------------

/// Tape handles to the generator parameters, in the same order as
/// `VariationalState::params`.
#[derive(Debug, Clone)]
pub struct GeneratorNodes {
    pub ids: Vec<NodeId>,
}

/// Register every generator parameter as a differentiable leaf.
pub fn generator_leaves(tape: &mut Tape, state: &VariationalState) -> GeneratorNodes {
    GeneratorNodes { ids: state.params.iter().map(|p| tape.leaf(p.clone())).collect() }
}

/// Register the parameters as constants for value-only evaluation.
pub fn generator_constants(tape: &mut Tape, state: &VariationalState) -> GeneratorNodes {
    GeneratorNodes { ids: state.params.iter().map(|p| tape.constant(p.clone())).collect() }
}

fn generator_raw_on_tape(
    tape: &mut Tape,
    nodes: &GeneratorNodes,
    eps: &[f64],
) -> Result<NodeId> {
    let layers = nodes.ids.len() / 2;
    let mut h = tape.constant(Tensor::vector(eps.to_vec()));
    for l in 0..layers {
        let wh = tape.matmul(nodes.ids[2 * l], h)?;
        h = tape.add(wh, nodes.ids[2 * l + 1])?;
        if l + 1 < layers {
            h = tape.relu(h);
        }
    }
    if !tape.value(h).all_finite() {
        return Err(Error::GeneratorOverflow);
    }
    Ok(h)
}

/// One generator pass followed by the per-slot transforms: identity for means,
/// softplus for everything required positive, and the extra shape offset for
/// inverse-gamma slots.
pub fn sample_psi_on_tape(
    tape: &mut Tape,
    nodes: &GeneratorNodes,
    layout: &PsiLayout,
    eps: &[f64],
) -> Result<PsiNodes> {
    let raw = generator_raw_on_tape(tape, nodes, eps)?;
    let off = layout.offsets();
    let c = layout.coeff_count;
    let beta_mu = tape.slice(raw, off.beta_mu, c)?;
    let bl = tape.slice(raw, off.beta_ls, c)?;
    let beta_s2 = tape.softplus(bl);
    let pair = |tape: &mut Tape, start: usize, ig: bool| -> Result<(NodeId, NodeId)> {
        let r1 = tape.slice(raw, start, 1)?;
        let r2 = tape.slice(raw, start + 1, 1)?;
        let p1 = if ig {
            let sp = tape.softplus(r1);
            tape.add_const(sp, IG_SHAPE_OFFSET)
        } else {
            r1
        };
        let p2 = tape.softplus(r2);
        Ok((p1, p2))
    };
    let ig = layout.variance_family == VarianceFamily::InverseGamma;
    let sigma2 = match off.sigma2 {
        Some(s) => Some(pair(tape, s, ig)?),
        None => None,
    };
    let tau2 = match off.tau2 {
        Some(s) => Some(pair(tape, s, ig)?),
        None => None,
    };
    let phi = match off.phi {
        Some(s) => Some(pair(tape, s, false)?),
        None => None,
    };
    let w = match (off.w_mu, off.w_ls) {
        (Some(wm), Some(wl)) => {
            let mu = tape.slice(raw, wm, layout.n_effects.unwrap())?;
            let ls = tape.slice(raw, wl, 1)?;
            let s2 = tape.softplus(ls);
            Some((mu, s2))
        }
        _ => None,
    };
    Ok(PsiNodes { beta_mu, beta_s2, sigma2, tau2, phi, w })
}

/// Read the current values out of a set of hyperparameter nodes.
pub fn psi_values(tape: &Tape, psi: &PsiNodes) -> PsiValues {
    let sc = |id: NodeId| tape.value(id).values[0];
    PsiValues {
        beta_mu: tape.value(psi.beta_mu).values.clone(),
        beta_s2: tape.value(psi.beta_s2).values.clone(),
        sigma2: psi.sigma2.map(|(a, b)| (sc(a), sc(b))),
        tau2: psi.tau2.map(|(a, b)| (sc(a), sc(b))),
        phi: psi.phi.map(|(a, b)| (sc(a), sc(b))),
        w_mu: psi.w.map(|(m, _)| tape.value(m).values.clone()),
        w_s2: psi.w.map(|(_, s)| sc(s)),
    }
}

/// Hyperparameter draw without gradient tracking.
pub fn sample_psi(state: &VariationalState, eps: &[f64]) -> Result<PsiValues> {
    let mut tape = Tape::new();
    let nodes = generator_constants(&mut tape, state);
    let psi = sample_psi_on_tape(&mut tape, &nodes, &state.layout, eps)?;
    Ok(psi_values(&tape, &psi))
}

// ---- reparameterized theta draws ------------------------------------------------

/// The noise consumed by one conditional draw of theta. Variance-component
/// noise is a uniform for the inverse-gamma family and a standard normal for
/// the log-normal family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaNoise {
    pub z_beta: Vec<f64>,
    pub sigma2: Option<f64>,
    pub tau2: Option<f64>,
    pub z_phi: Option<f64>,
    pub z_w: Vec<f64>,
}

fn variance_noise(
    rng: &mut ChaCha20Rng,
    family: VarianceFamily,
    frozen: bool,
) -> Option<f64> {
    if frozen {
        return None;
    }
    Some(match family {
        VarianceFamily::InverseGamma => rng.gen_range(1e-12..1.0),
        VarianceFamily::LogNormal => rng.sample::<f64, _>(StandardNormal),
    })
}

fn gaussian_noise(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl ThetaNoise {
    pub fn draw(rng: &mut ChaCha20Rng, layout: &PsiLayout) -> Self {
        let fam = layout.variance_family;
        let z_beta = gaussian_noise(rng, layout.coeff_count);
        let sigma2 = variance_noise(rng, fam, layout.frozen_sigma2.is_some());
        let tau2 = if layout.has_tau2 {
            variance_noise(rng, fam, layout.frozen_tau2.is_some())
        } else {
            None
        };
        let z_phi = if layout.frozen_phi.is_none() {
            Some(rng.sample::<f64, _>(StandardNormal))
        } else {
            None
        };
        let z_w = gaussian_noise(rng, layout.n_effects.unwrap_or(0));
        ThetaNoise { z_beta, sigma2, tau2, z_phi, z_w }
    }
}

/// Gamma(shape, rate 1) quantile by Newton iteration on the regularized CDF,
/// with a bisection safeguard. Accurate to near machine precision, which the
/// implicit variance gradients rely on.
pub fn gamma_quantile(shape: f64, p: f64) -> f64 {
    debug_assert!(shape > 0.0 && p > 0.0 && p < 1.0);
    let log_gamma = ln_gamma(shape);
    let pdf = |x: f64| ((shape - 1.0) * x.ln() - x - log_gamma).exp();
    let cdf = |x: f64| 1.0 - gamma_ur(shape, x);
    // bracket
    let mut lo = 0.0;
    let mut hi = shape.max(1.0);
    while cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    // Wilson-Hilferty start
    use statrs::distribution::ContinuousCDF;
    let z = statrs::distribution::Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
    let t = 1.0 - 1.0 / (9.0 * shape) + z * (1.0 / (9.0 * shape)).sqrt();
    let mut x = (shape * t * t * t).clamp(lo + 1e-300, hi);
    for _ in 0..100 {
        let f = cdf(x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = pdf(x);
        let mut next = if d > 0.0 { x - f / d } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Inverse-gamma quantile at probability u.
pub fn invgamma_quantile(shape: f64, scale: f64, u: f64) -> f64 {
    scale / gamma_quantile(shape, 1.0 - u)
}

/// Inverse-gamma sampling by quantile transform, with implicit gradients:
/// the draw x = b / G^{-1}(a, 1-u) is exact in b, and the shape derivative
/// comes from differentiating the CDF identity Q(a, b/x) = u.
#[derive(Debug)]
pub struct InvGammaSampleOp {
    pub u: f64,
}

impl CustomOp for InvGammaSampleOp {
    fn name(&self) -> &'static str {
        "invgamma-sample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let a = inputs[0].scalar_value();
        let b = inputs[1].scalar_value();
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::Other(format!("invgamma sample needs positive (a, b), got ({}, {})", a, b)));
        }
        let t = gamma_quantile(a, 1.0 - self.u);
        Ok((Tensor::scalar(b / t), vec![Tensor::scalar(t)]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let a = inputs[0].scalar_value();
        let b = inputs[1].scalar_value();
        let t = saved[0].scalar_value();
        let g = grad.scalar_value();
        // dQ/da by central differences; dQ/dt is minus the gamma density
        let h = 1e-6 * a.max(1.0);
        let dq_da = (gamma_ur(a + h, t) - gamma_ur(a - h, t)) / (2.0 * h);
        let pdf = ((a - 1.0) * t.ln() - t - ln_gamma(a)).exp();
        let dt_da = dq_da / pdf;
        let dx_da = -(b / (t * t)) * dt_da;
        let dx_db = 1.0 / t;
        Ok(vec![Tensor::scalar(g * dx_da), Tensor::scalar(g * dx_db)])
    }
}

/// Build theta from one hyperparameter draw and its noise, differentiably.
pub fn sample_theta_on_tape(
    tape: &mut Tape,
    psi: &PsiNodes,
    layout: &PsiLayout,
    noise: &ThetaNoise,
) -> Result<ThetaNodes> {
    let zb = tape.constant(Tensor::vector(noise.z_beta.clone()));
    let sb = tape.sqrt(psi.beta_s2);
    let sz = tape.mul(sb, zb)?;
    let beta = tape.add(psi.beta_mu, sz)?;

    let variance_draw = |tape: &mut Tape,
                             pair: Option<(NodeId, NodeId)>,
                             frozen: Option<f64>,
                             noise: Option<f64>|
     -> Result<Option<NodeId>> {
        match (pair, frozen) {
            (_, Some(v)) => Ok(Some(tape.constant_scalar(v))),
            (Some((p1, p2)), None) => {
                let nz = noise.ok_or(Error::Config("missing variance noise".into()))?;
                Ok(Some(match layout.variance_family {
                    VarianceFamily::InverseGamma => {
                        tape.custom(Arc::new(InvGammaSampleOp { u: nz }), vec![p1, p2])?
                    }
                    VarianceFamily::LogNormal => {
                        let s = tape.sqrt(p2);
                        let sz = tape.scale(s, nz);
                        let e = tape.add(p1, sz)?;
                        tape.exp(e)
                    }
                }))
            }
            (None, None) => Ok(None),
        }
    };
    let sigma2 = variance_draw(tape, psi.sigma2, layout.frozen_sigma2, noise.sigma2)?
        .ok_or(Error::Config("layout has no sigma2".into()))?;
    let tau2 = if layout.has_tau2 {
        variance_draw(tape, psi.tau2, layout.frozen_tau2, noise.tau2)?
    } else {
        None
    };
    let phi = match (psi.phi, layout.frozen_phi) {
        (_, Some(v)) => tape.constant_scalar(v),
        (Some((mu, s2)), None) => {
            let z = noise.z_phi.ok_or(Error::Config("missing phi noise".into()))?;
            let s = tape.sqrt(s2);
            let sz = tape.scale(s, z);
            let e = tape.add(mu, sz)?;
            tape.exp(e)
        }
        (None, None) => return Err(Error::Config("layout has no phi".into())),
    };
    let w = match psi.w {
        Some((mu, s2)) => {
            let zw = tape.constant(Tensor::vector(noise.z_w.clone()));
            let s = tape.sqrt(s2);
            let sz = tape.mul(s, zw)?;
            Some(tape.add(mu, sz)?)
        }
        None => None,
    };
    Ok(ThetaNodes { beta, sigma2, tau2, phi, w })
}

/// Plain draw of theta from transformed hyperparameters.
pub fn sample_theta(psi: &PsiValues, layout: &PsiLayout, noise: &ThetaNoise) -> ThetaSample {
    let beta: Vec<f64> = psi
        .beta_mu
        .iter()
        .zip(psi.beta_s2.iter())
        .zip(noise.z_beta.iter())
        .map(|((m, s2), z)| m + s2.sqrt() * z)
        .collect();
    let variance = |pair: Option<(f64, f64)>, frozen: Option<f64>, nz: Option<f64>| -> f64 {
        if let Some(v) = frozen {
            return v;
        }
        let (p1, p2) = pair.expect("variance slots");
        let nz = nz.expect("variance noise");
        match layout.variance_family {
            VarianceFamily::InverseGamma => invgamma_quantile(p1, p2, nz),
            VarianceFamily::LogNormal => (p1 + p2.sqrt() * nz).exp(),
        }
    };
    let sigma2 = variance(psi.sigma2, layout.frozen_sigma2, noise.sigma2);
    let tau2 = if layout.has_tau2 {
        Some(variance(psi.tau2, layout.frozen_tau2, noise.tau2))
    } else {
        None
    };
    let phi = match layout.frozen_phi {
        Some(v) => v,
        None => {
            let (mu, s2) = psi.phi.expect("phi slots");
            (mu + s2.sqrt() * noise.z_phi.expect("phi noise")).exp()
        }
    };
    let w = psi.w_mu.as_ref().map(|mu| {
        let s = psi.w_s2.expect("w variance slot").sqrt();
        mu.iter().zip(noise.z_w.iter()).map(|(m, z)| m + s * z).collect()
    });
    ThetaSample { beta, sigma2, tau2, phi, w }
}

// ---- conditional log density -----------------------------------------------------

/// Sum of per-component conditional log densities; frozen components are point
/// masses and contribute nothing.
pub fn conditional_log_density(theta: &ThetaSample, psi: &PsiValues, layout: &PsiLayout) -> f64 {
    let mut lp = 0.0;
    for ((x, m), s2) in theta.beta.iter().zip(psi.beta_mu.iter()).zip(psi.beta_s2.iter()) {
        lp += log_normal_pdf(*x, *m, *s2);
    }
    let variance_term = |x: f64, pair: (f64, f64)| -> f64 {
        match layout.variance_family {
            VarianceFamily::InverseGamma => log_invgamma_pdf(x, pair.0, pair.1),
            VarianceFamily::LogNormal => log_lognormal_pdf(x, pair.0, pair.1),
        }
    };
    if let Some(pair) = psi.sigma2 {
        lp += variance_term(theta.sigma2, pair);
    }
    if let (Some(pair), Some(t2)) = (psi.tau2, theta.tau2) {
        lp += variance_term(t2, pair);
    }
    if let Some((mu, s2)) = psi.phi {
        lp += log_lognormal_pdf(theta.phi, mu, s2);
    }
    if let (Some(w), Some(w_mu), Some(w_s2)) = (theta.w.as_ref(), psi.w_mu.as_ref(), psi.w_s2) {
        for (x, m) in w.iter().zip(w_mu.iter()) {
            lp += log_normal_pdf(*x, *m, w_s2);
        }
    }
    lp
}

/// The same conditional density as one fused tape node with closed-form
/// derivatives, evaluated once per (theta draw, hyperparameter draw) pair in
/// the mixture denominator. Inputs are ordered theta-group then psi-group:
/// [beta, beta_mu, beta_s2] then per free component [x, p1, p2] for sigma2,
/// tau2, phi, then [w, w_mu, w_s2].
#[derive(Debug)]
pub struct CondLogDensityOp {
    pub layout: PsiLayout,
}

impl CondLogDensityOp {
    fn walk(
        &self,
        inputs: &[&Tensor],
        mut grads: Option<&mut Vec<Tensor>>,
        g: f64,
    ) -> f64 {
        let lay = &self.layout;
        let mut lp = 0.0;
        let mut cur = 0usize;

        // coefficient block
        {
            let (x, mu, s2) = (inputs[cur], inputs[cur + 1], inputs[cur + 2]);
            let mut dx = vec![0.0; x.len()];
            let mut dmu = vec![0.0; x.len()];
            let mut ds2 = vec![0.0; x.len()];
            for k in 0..x.len() {
                let v = s2.values[k];
                let d = x.values[k] - mu.values[k];
                lp += -0.5 * (crate::models::LN_2PI + v.ln()) - d * d / (2.0 * v);
                dx[k] = -d / v;
                dmu[k] = d / v;
                ds2[k] = (d * d / v - 1.0) / (2.0 * v);
            }
            if let Some(gr) = grads.as_deref_mut() {
                gr.push(scaled(dx, g, x));
                gr.push(scaled(dmu, g, mu));
                gr.push(scaled(ds2, g, s2));
            }
            cur += 3;
        }

        let free = [
            lay.frozen_sigma2.is_none(),
            lay.has_tau2 && lay.frozen_tau2.is_none(),
            lay.frozen_phi.is_none(),
        ];
        for (slot, &on) in free.iter().enumerate() {
            if !on {
                continue;
            }
            let (xt, p1t, p2t) = (inputs[cur], inputs[cur + 1], inputs[cur + 2]);
            let (x, p1, p2) = (xt.values[0], p1t.values[0], p2t.values[0]);
            let lognormal = slot == 2 || lay.variance_family == VarianceFamily::LogNormal;
            let (term, dx, d1, d2) = if lognormal {
                let l = x.ln();
                let d = l - p1;
                (
                    -l - 0.5 * (crate::models::LN_2PI + p2.ln()) - d * d / (2.0 * p2),
                    (-1.0 - d / p2) / x,
                    d / p2,
                    (d * d / p2 - 1.0) / (2.0 * p2),
                )
            } else {
                (
                    p1 * p2.ln() - ln_gamma(p1) - (p1 + 1.0) * x.ln() - p2 / x,
                    -(p1 + 1.0) / x + p2 / (x * x),
                    p2.ln() - digamma(p1) - x.ln(),
                    p1 / p2 - 1.0 / x,
                )
            };
            lp += term;
            if let Some(gr) = grads.as_deref_mut() {
                gr.push(scaled(vec![dx], g, xt));
                gr.push(scaled(vec![d1], g, p1t));
                gr.push(scaled(vec![d2], g, p2t));
            }
            cur += 3;
        }

        if lay.n_effects.is_some() {
            let (x, mu, s2t) = (inputs[cur], inputs[cur + 1], inputs[cur + 2]);
            let v = s2t.values[0];
            let n = x.len();
            let mut dx = vec![0.0; n];
            let mut dmu = vec![0.0; n];
            let mut ds2 = 0.0;
            for i in 0..n {
                let d = x.values[i] - mu.values[i];
                lp += -0.5 * (crate::models::LN_2PI + v.ln()) - d * d / (2.0 * v);
                dx[i] = -d / v;
                dmu[i] = d / v;
                ds2 += (d * d / v - 1.0) / (2.0 * v);
            }
            if let Some(gr) = grads.as_deref_mut() {
                gr.push(scaled(dx, g, x));
                gr.push(scaled(dmu, g, mu));
                gr.push(scaled(vec![ds2], g, s2t));
            }
        }
        lp
    }
}

fn scaled(mut v: Vec<f64>, g: f64, like: &Tensor) -> Tensor {
    for x in v.iter_mut() {
        *x *= g;
    }
    Tensor { shape: like.shape.clone(), values: v }
}

impl CustomOp for CondLogDensityOp {
    fn name(&self) -> &'static str {
        "conditional-log-density"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((Tensor::scalar(self.walk(inputs, None, 1.0)), vec![]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let mut grads = Vec::with_capacity(inputs.len());
        self.walk(inputs, Some(&mut grads), grad.scalar_value());
        Ok(grads)
    }
}

fn cond_density_node(
    tape: &mut Tape,
    op: &Arc<CondLogDensityOp>,
    theta: &ThetaNodes,
    psi: &PsiNodes,
) -> Result<NodeId> {
    let mut inputs = vec![theta.beta, psi.beta_mu, psi.beta_s2];
    if let Some((a, b)) = psi.sigma2 {
        inputs.extend([theta.sigma2, a, b]);
    }
    if let Some((a, b)) = psi.tau2 {
        inputs.extend([
            theta.tau2.ok_or(Error::Config("theta lacks tau2".into()))?,
            a,
            b,
        ]);
    }
    if let Some((mu, s2)) = psi.phi {
        inputs.extend([theta.phi, mu, s2]);
    }
    if let Some((mu, s2)) = psi.w {
        inputs.extend([theta.w.ok_or(Error::Config("theta lacks w".into()))?, mu, s2]);
    }
    tape.custom(Arc::clone(op) as Arc<dyn CustomOp>, inputs)
}

// ---- surrogate lower bound --------------------------------------------------------

/// All randomness consumed by one lower-bound evaluation, drawn up front so
/// value recomputations and oracles can share the exact stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboNoise {
    pub eps: Vec<Vec<f64>>,
    pub theta: Vec<ThetaNoise>,
    pub aux_eps: Vec<Vec<f64>>,
}

impl ElboNoise {
    pub fn draw(
        rng: &mut ChaCha20Rng,
        config: &GeneratorConfig,
        layout: &PsiLayout,
        j: usize,
        k: usize,
    ) -> Self {
        let mut eps = Vec::with_capacity(j);
        let mut theta = Vec::with_capacity(j);
        for _ in 0..j {
            eps.push(gaussian_noise(rng, config.noise_dim));
            theta.push(ThetaNoise::draw(rng, layout));
        }
        let aux_eps = (0..k).map(|_| gaussian_noise(rng, config.noise_dim)).collect();
        ElboNoise { eps, theta, aux_eps }
    }

    pub fn j(&self) -> usize {
        self.eps.len()
    }

    pub fn k(&self) -> usize {
        self.aux_eps.len()
    }
}

fn log_joint_node(
    tape: &mut Tape,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    theta: &ThetaNodes,
) -> Result<NodeId> {
    match spec.family {
        ModelFamily::GaussianConditional => {
            log_joint_gaussian_conditional_on_tape(tape, data, spec, mode, theta)
        }
        ModelFamily::GaussianMarginal => {
            log_joint_gaussian_marginal_on_tape(tape, data, spec, theta)
        }
        ModelFamily::Poisson => log_joint_poisson_on_tape(tape, data, spec, mode, theta),
    }
}

/// Monte Carlo surrogate of the lower bound:
/// (1/J) sum_j [ log p(y, theta_j) - log mean of q(theta_j | psi) over psi_j
/// and the K auxiliary draws ], with the mixture evaluated by log-sum-exp.
/// Theta is only ever drawn from its own psi_j, never from the auxiliaries.
pub fn surrogate_elbo_on_tape(
    tape: &mut Tape,
    nodes: &GeneratorNodes,
    state: &VariationalState,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    noise: &ElboNoise,
) -> Result<NodeId> {
    let layout = &state.layout;
    let op = Arc::new(CondLogDensityOp { layout: layout.clone() });
    let psi_tilde: Vec<PsiNodes> = noise
        .aux_eps
        .iter()
        .map(|eps| sample_psi_on_tape(tape, nodes, layout, eps))
        .collect::<Result<Vec<_>>>()?;

    let j = noise.j();
    let mut acc: Option<NodeId> = None;
    for (ji, (eps, tn)) in noise.eps.iter().zip(noise.theta.iter()).enumerate() {
        let psi_j = sample_psi_on_tape(tape, nodes, layout, eps)?;
        let theta_j = sample_theta_on_tape(tape, &psi_j, layout, tn)?;
        let lp = log_joint_node(tape, data, spec, mode, &theta_j)?;
        let mut logqs = vec![cond_density_node(tape, &op, &theta_j, &psi_j)?];
        for pt in &psi_tilde {
            logqs.push(cond_density_node(tape, &op, &theta_j, pt)?);
        }
        let stacked = tape.stack(&logqs)?;
        let lse = tape.logsumexp(stacked);
        let mix = tape.add_const(lse, -((noise.k() + 1) as f64).ln());
        let term = tape.sub(lp, mix)?;
        if !tape.value(term).scalar_value().is_finite() {
            return Err(Error::ElboOverflow { j: ji });
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let total = acc.ok_or(Error::Config("surrogate bound needs J >= 1".into()))?;
    Ok(tape.scale(total, 1.0 / j as f64))
}

/// Value-only surrogate bound with freshly drawn noise.
pub fn surrogate_elbo(
    state: &VariationalState,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    j: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let noise = ElboNoise::draw(rng, &state.config, &state.layout, j, k);
    let mut tape = Tape::new();
    let nodes = generator_constants(&mut tape, state);
    let out = surrogate_elbo_on_tape(&mut tape, &nodes, state, data, spec, mode, &noise)?;
    Ok(tape.value(out).scalar_value())
}

// ---- training ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub j: usize,
    pub k: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            learning_rate: 1e-3,
            j: 50,
            k: 1000,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    /// Smaller Monte Carlo budget for large n, where wide mixtures overflow.
    pub fn large_n(mut self) -> Self {
        self.j = 10;
        self.k = 10;
        self
    }
}

/// Ascend the surrogate bound. Each iteration draws fresh noise, records the
/// bound on a tape, backpropagates to the generator parameters, and takes one
/// optimizer step. Returns the per-iteration trace of the bound.
pub fn train(
    state: &mut VariationalState,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    cfg: &TrainConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    train_observed(state, data, spec, mode, cfg, opt, rng, &mut |_, _| {})
}

/// `train` with a per-iteration observer called after each optimizer step
/// with (iteration index, surrogate bound value).
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    state: &mut VariationalState,
    data: &SpatialDataset,
    spec: &ModelSpec,
    mode: &PriorMode,
    cfg: &TrainConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha20Rng,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut tape = Tape::new();
        let nodes = generator_leaves(&mut tape, state);
        let noise = ElboNoise::draw(rng, &state.config, &state.layout, cfg.j, cfg.k);
        let elbo = surrogate_elbo_on_tape(&mut tape, &nodes, state, data, spec, mode, &noise)?;
        trace.push(tape.value(elbo).scalar_value());
        let grads_map = tape.backward(elbo)?;
        let grads: Vec<Tensor> =
            nodes.ids.iter().map(|&id| grads_map.get_or_zeros(&tape, id)).collect();
        let stepped = match cfg.optimizer {
            OptimizerKind::Adam => adam_step(
                &mut state.params,
                &grads,
                opt,
                cfg.learning_rate,
                0.9,
                0.999,
                1e-8,
            ),
            OptimizerKind::Sgd => sgd_step(&mut state.params, &grads, cfg.learning_rate),
        };
        stepped.map_err(|_| Error::Diverged { iteration: iter })?;
        if state.params.iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged { iteration: iter });
        }
        observer(iter, trace[iter]);
    }
    Ok(trace)
}

// ---- posterior draws ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub draws: Vec<ThetaSample>,
}

/// m independent noise-to-theta draws from the trained family.
pub fn draw_posterior(
    state: &VariationalState,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> Result<PosteriorSamples> {
    let mut draws = Vec::with_capacity(m);
    for _ in 0..m {
        let eps: Vec<f64> =
            (0..state.config.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        let psi = sample_psi(state, &eps)?;
        let noise = ThetaNoise::draw(rng, &state.layout);
        draws.push(sample_theta(&psi, &state.layout, &noise));
    }
    Ok(PosteriorSamples { draws })
}

// ---- checkpointing -----------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or draw from a fitted family.
/// Serialized as JSON; f64 values round-trip exactly through the shortest
/// decimal representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub state: VariationalState,
    pub optimizer: AdamState,
    pub rng: ChaCha20Rng,
    pub trace: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ck).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported (expected {})",
            ck.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ck)
}
