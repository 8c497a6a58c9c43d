//! Posterior-predictive draws at held-out locations. Each posterior sample
//! contributes one response draw per location, built from the exact Gaussian
//! process conditional under that sample's parameters.

use crate::covariance::{build_cov_matrix, distance, exp_cov, CovParams, Location};
use crate::error::{Error, Result};
use crate::models::{ModelFamily, ModelSpec, SpatialDataset};
use crate::nngp::predict_sequential;
use crate::sivi::PosteriorSamples;
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the latent conditional at new locations is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    Dense,
    /// Condition on the M nearest observed locations only.
    Nngp(usize),
}

/// Parameters of one draw's predictive density at one location, kept so the
/// log predictive density can be evaluated exactly as a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictiveDensity {
    Gaussian { mean: f64, variance: f64 },
    Poisson { lambda: f64 },
}

/// Predictive output indexed `[location][draw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDraws {
    pub family: ModelFamily,
    pub response: Vec<Vec<f64>>,
    pub latent_mean: Vec<Vec<f64>>,
    pub density: Vec<Vec<PredictiveDensity>>,
}

impl PredictiveDraws {
    pub fn locations(&self) -> usize {
        self.response.len()
    }

    pub fn draw_count(&self) -> usize {
        self.response.first().map_or(0, |v| v.len())
    }
}

fn check_new_x(new_locations: &[Location], new_x: &Tensor, design_dim: usize) -> Result<()> {
    if !new_x.is_matrix() || new_x.rows() != new_locations.len() || new_x.cols() != design_dim {
        return Err(Error::DimensionMismatch(format!(
            "new design matrix {:?} for {} locations and {} columns",
            new_x.shape,
            new_locations.len(),
            design_dim
        )));
    }
    for i in 0..new_x.rows() {
        if new_x.at(i, 0) != 1.0 {
            return Err(Error::Config("first design column must be ones".into()));
        }
    }
    Ok(())
}

fn dot_row(x: &Tensor, i: usize, beta: &[f64]) -> f64 {
    (0..x.cols()).map(|k| x.at(i, k) * beta[k]).sum()
}

/// Mean and variance of w(s0) | w at the observed locations, exactly, for one
/// parameter draw.
pub fn latent_conditional_dense(
    observed: &[Location],
    w: &[f64],
    p: &CovParams,
    new_locations: &[Location],
) -> Result<Vec<(f64, f64)>> {
    let n = observed.len();
    if w.len() != n {
        return Err(Error::ShapeMismatch(format!("w length {} vs {} locations", w.len(), n)));
    }
    let c_full = build_cov_matrix(observed, p);
    let l = tensor::cholesky(&c_full).map_err(|_| Error::CovarianceSingular)?;
    new_locations
        .iter()
        .map(|s0| {
            let c: Vec<f64> = observed.iter().map(|s| exp_cov(distance(s0, s), p)).collect();
            let b = tensor::solve_spd(&l, &c)?;
            let mean: f64 = b.iter().zip(w.iter()).map(|(bv, wv)| bv * wv).sum();
            let var =
                (p.sigma2 - c.iter().zip(b.iter()).map(|(cv, bv)| cv * bv).sum::<f64>()).max(0.0);
            Ok((mean, var))
        })
        .collect()
}

fn latent_conditional(
    observed: &[Location],
    w: &[f64],
    p: &CovParams,
    new_locations: &[Location],
    mode: PredictMode,
) -> Result<Vec<(f64, f64)>> {
    match mode {
        PredictMode::Dense => latent_conditional_dense(observed, w, p, new_locations),
        PredictMode::Nngp(m) => predict_sequential(new_locations, observed, w, p, m),
    }
}

fn per_draw_seeds(rng: &mut ChaCha20Rng, m: usize) -> Vec<u64> {
    (0..m).map(|_| rng.gen()).collect()
}

fn transpose_draws(per_draw: Vec<Vec<(f64, f64, PredictiveDensity)>>, q: usize) -> PredictiveDraws {
    let m = per_draw.len();
    let mut response = vec![Vec::with_capacity(m); q];
    let mut latent_mean = vec![Vec::with_capacity(m); q];
    let mut density = vec![Vec::with_capacity(m); q];
    let family = match per_draw.first().and_then(|d| d.first()) {
        Some((_, _, PredictiveDensity::Poisson { .. })) => ModelFamily::Poisson,
        _ => ModelFamily::GaussianConditional,
    };
    for draw in per_draw {
        for (i, (y, lm, dens)) in draw.into_iter().enumerate() {
            response[i].push(y);
            latent_mean[i].push(lm);
            density[i].push(dens);
        }
    }
    PredictiveDraws { family, response, latent_mean, density }
}

/// Gaussian predictive draws. Conditional-family samples carry w and predict
/// through the latent conditional plus nugget noise; marginal-family samples
/// predict y(s0) directly from its conditional MVN given the training
/// responses.
pub fn predict_gaussian(
    samples: &PosteriorSamples,
    train: &SpatialDataset,
    spec: &ModelSpec,
    new_locations: &[Location],
    new_x: &Tensor,
    mode: PredictMode,
    rng: &mut ChaCha20Rng,
) -> Result<PredictiveDraws> {
    check_new_x(new_locations, new_x, train.design_dim())?;
    let seeds = per_draw_seeds(rng, samples.draws.len());
    let q = new_locations.len();
    let marginal = spec.family == ModelFamily::GaussianMarginal;
    if marginal && mode != PredictMode::Dense {
        return Err(Error::Config("marginal prediction is dense only".into()));
    }
    let per_draw: Vec<Vec<(f64, f64, PredictiveDensity)>> = samples
        .draws
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(th, &seed)| {
            let mut drng = ChaCha20Rng::seed_from_u64(seed);
            let p = CovParams::new(th.sigma2, th.phi)?;
            let tau2 = th.tau2.ok_or(Error::Config("gaussian draw lacks tau2".into()))?;
            let mut out = Vec::with_capacity(q);
            if marginal {
                // conditional MVN of y(s0) given y_train
                let mut cov = build_cov_matrix(&train.locations, &p);
                let n = train.n();
                for i in 0..n {
                    cov.values[i * n + i] += tau2;
                }
                let l = tensor::cholesky(&cov).map_err(|_| Error::CovarianceSingular)?;
                let resid: Vec<f64> = (0..n)
                    .map(|i| train.y[i] - dot_row(&train.x, i, &th.beta))
                    .collect();
                let alpha = tensor::solve_spd(&l, &resid)?;
                for (i, s0) in new_locations.iter().enumerate() {
                    let c: Vec<f64> =
                        train.locations.iter().map(|s| exp_cov(distance(s0, s), &p)).collect();
                    let b = tensor::solve_spd(&l, &c)?;
                    let trend = dot_row(new_x, i, &th.beta);
                    let mean =
                        trend + c.iter().zip(alpha.iter()).map(|(cv, av)| cv * av).sum::<f64>();
                    let var = (th.sigma2 + tau2
                        - c.iter().zip(b.iter()).map(|(cv, bv)| cv * bv).sum::<f64>())
                    .max(0.0);
                    let y = mean + var.sqrt() * drng.sample::<f64, _>(StandardNormal);
                    out.push((y, mean, PredictiveDensity::Gaussian { mean, variance: var }));
                }
            } else {
                let w = th.w.as_ref().ok_or(Error::Config("conditional draw lacks w".into()))?;
                let cond = latent_conditional(&train.locations, w, &p, new_locations, mode)?;
                for (i, &(wm, wv)) in cond.iter().enumerate() {
                    let w_star = wm + wv.sqrt() * drng.sample::<f64, _>(StandardNormal);
                    let mean = dot_row(new_x, i, &th.beta) + w_star;
                    let y = mean + tau2.sqrt() * drng.sample::<f64, _>(StandardNormal);
                    out.push((y, mean, PredictiveDensity::Gaussian { mean, variance: tau2 }));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut draws = transpose_draws(per_draw, q);
    draws.family = spec.family;
    Ok(draws)
}

/// Poisson predictive draws: latent conditional, capped log intensity, then a
/// Poisson response draw.
pub fn predict_poisson(
    samples: &PosteriorSamples,
    train: &SpatialDataset,
    spec: &ModelSpec,
    new_locations: &[Location],
    new_x: &Tensor,
    mode: PredictMode,
    rng: &mut ChaCha20Rng,
) -> Result<PredictiveDraws> {
    check_new_x(new_locations, new_x, train.design_dim())?;
    let seeds = per_draw_seeds(rng, samples.draws.len());
    let q = new_locations.len();
    let cap = spec.log_lambda_cap;
    let per_draw: Vec<Vec<(f64, f64, PredictiveDensity)>> = samples
        .draws
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(th, &seed)| {
            let mut drng = ChaCha20Rng::seed_from_u64(seed);
            let p = CovParams::new(th.sigma2, th.phi)?;
            let w = th.w.as_ref().ok_or(Error::Config("poisson draw lacks w".into()))?;
            let cond = latent_conditional(&train.locations, w, &p, new_locations, mode)?;
            let mut out = Vec::with_capacity(q);
            for (i, &(wm, wv)) in cond.iter().enumerate() {
                let w_star = wm + wv.sqrt() * drng.sample::<f64, _>(StandardNormal);
                let log_lambda = (dot_row(new_x, i, &th.beta) + w_star).min(cap);
                let lambda = log_lambda.exp();
                let y = Poisson::new(lambda)
                    .map(|d| drng.sample(d))
                    .unwrap_or(0.0);
                out.push((y, log_lambda, PredictiveDensity::Poisson { lambda }));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut draws = transpose_draws(per_draw, q);
    draws.family = ModelFamily::Poisson;
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{IgPrior, ThetaSample};

    fn grid_locations(n: usize) -> Vec<Location> {
        (0..n).map(|i| Location::new((i as f64) * 1.3, (i as f64 * 2.7) % 5.0)).collect()
    }

    fn dataset(locs: Vec<Location>, beta: &[f64], w: &[f64], tau_noise: &[f64]) -> SpatialDataset {
        let n = locs.len();
        let mut xv = Vec::with_capacity(2 * n);
        for i in 0..n {
            xv.push(1.0);
            xv.push((i as f64 * 0.37).sin());
        }
        let x = Tensor::matrix(n, 2, xv).unwrap();
        let y = (0..n)
            .map(|i| beta[0] + beta[1] * x.at(i, 1) + w[i] + tau_noise[i])
            .collect();
        SpatialDataset::new(locs, x, y).unwrap()
    }

    fn cond_spec() -> ModelSpec {
        ModelSpec::gaussian_conditional(1, 1.0, IgPrior { shape: 3.0, scale: 0.4 })
    }

    #[test]
    fn coincident_location_zero_nugget_interpolates() {
        let locs = grid_locations(4);
        let beta = [0.3, -0.5];
        let w = [0.6, -0.2, 0.9, 0.1];
        let data = dataset(locs.clone(), &beta, &w, &[0.0; 4]);
        let th = ThetaSample {
            beta: beta.to_vec(),
            sigma2: 1.0,
            tau2: Some(0.0),
            phi: 0.1,
            w: Some(w.to_vec()),
        };
        let samples = PosteriorSamples { draws: vec![th] };
        let new_locs = vec![locs[0]];
        let new_x = Tensor::matrix(1, 2, vec![1.0, data.x.at(0, 1)]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let out = predict_gaussian(
            &samples,
            &data,
            &cond_spec(),
            &new_locs,
            &new_x,
            PredictMode::Dense,
            &mut rng,
        )
        .unwrap();
        // zero nugget and exact interpolation: response equals the response
        assert!((out.response[0][0] - data.y[0]).abs() < 1e-6);
        assert!((out.latent_mean[0][0] - data.y[0]).abs() < 1e-6);
    }

    #[test]
    fn distant_location_reverts_to_trend() {
        let locs = grid_locations(5);
        let w = [0.6, -0.2, 0.9, 0.1, -0.4];
        let p = CovParams::new(1.4, 0.1).unwrap();
        // phi * d = 20 away from everything
        let far = vec![Location::new(500.0, 500.0)];
        let cond = latent_conditional_dense(&locs, &w, &p, &far).unwrap();
        assert!(cond[0].0.abs() < 1e-6);
        assert!((cond[0].1 - p.sigma2).abs() < 1e-6);
    }

    #[test]
    fn dense_latent_matches_hand_kriging_n3() {
        let locs = vec![
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.5),
            Location::new(2.5, 1.0),
        ];
        let w = [0.4, -0.7, 0.2];
        let p = CovParams::new(0.8, 0.3).unwrap();
        let s0 = Location::new(1.2, 0.2);
        let got = latent_conditional_dense(&locs, &w, &p, &[s0]).unwrap()[0];
        // hand 3x3 Gaussian elimination
        let mut a = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = exp_cov(distance(&locs[i], &locs[j]), &p);
            }
            a[i][3] = exp_cov(distance(&s0, &locs[i]), &p);
        }
        let c = [a[0][3], a[1][3], a[2][3]];
        for col in 0..3 {
            let piv = (col..3).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..4 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let b: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
        let mean: f64 = (0..3).map(|i| b[i] * w[i]).sum();
        let var = p.sigma2 - (0..3).map(|i| b[i] * c[i]).sum::<f64>();
        assert!((got.0 - mean).abs() < 1e-8);
        assert!((got.1 - var).abs() < 1e-8);
    }

    #[test]
    fn marginal_prediction_matches_hand_kriging_of_y() {
        let locs = vec![
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.5),
            Location::new(2.5, 1.0),
        ];
        let beta = [0.2, 0.1];
        let w = [0.4, -0.7, 0.2];
        let noise = [0.05, -0.1, 0.02];
        let data = dataset(locs.clone(), &beta, &w, &noise);
        let (sigma2, tau2, phi) = (0.8, 0.3, 0.3);
        let th = ThetaSample {
            beta: beta.to_vec(),
            sigma2,
            tau2: Some(tau2),
            phi,
            w: None,
        };
        let spec = ModelSpec::gaussian_marginal(1, 1.0, IgPrior { shape: 3.0, scale: 0.4 });
        let s0 = Location::new(1.2, 0.2);
        let new_x = Tensor::matrix(1, 2, vec![1.0, 0.9]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let out = predict_gaussian(
            &PosteriorSamples { draws: vec![th] },
            &data,
            &spec,
            &[s0],
            &new_x,
            PredictMode::Dense,
            &mut rng,
        )
        .unwrap();
        // oracle: solve (sigma2 R + tau2 I) b = c by elimination
        let p = CovParams::new(sigma2, phi).unwrap();
        let mut a = [[0.0f64; 5]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = exp_cov(distance(&locs[i], &locs[j]), &p)
                    + if i == j { tau2 } else { 0.0 };
            }
            a[i][3] = exp_cov(distance(&s0, &locs[i]), &p);
            a[i][4] = data.y[i] - (beta[0] + beta[1] * data.x.at(i, 1));
        }
        for col in 0..3 {
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in 0..5 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let b: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
        let alpha: Vec<f64> = (0..3).map(|i| a[i][4] / a[i][i]).collect();
        let c: Vec<f64> = locs.iter().map(|s| exp_cov(distance(&s0, s), &p)).collect();
        let mean =
            (0.2 + 0.1 * 0.9) + c.iter().zip(alpha.iter()).map(|(x, y)| x * y).sum::<f64>();
        let var = sigma2 + tau2 - c.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        match out.density[0][0] {
            PredictiveDensity::Gaussian { mean: m, variance: v } => {
                assert!((m - mean).abs() < 1e-8);
                assert!((v - var).abs() < 1e-8);
            }
            _ => panic!("wrong family"),
        }
    }

    #[test]
    fn nngp_agrees_with_dense_at_saturation() {
        let locs = grid_locations(7);
        let w = [0.6, -0.2, 0.9, 0.1, -0.4, 0.3, -0.8];
        let p = CovParams::new(1.1, 0.25).unwrap();
        let news = vec![Location::new(0.7, 0.9), Location::new(4.0, 2.0)];
        let dense = latent_conditional_dense(&locs, &w, &p, &news).unwrap();
        let nngp = predict_sequential(&news, &locs, &w, &p, locs.len()).unwrap();
        for (d, s) in dense.iter().zip(nngp.iter()) {
            assert!((d.0 - s.0).abs() < 1e-8, "mean {} vs {}", d.0, s.0);
            assert!((d.1 - s.1).abs() < 1e-8);
        }
    }

    #[test]
    fn latent_variance_shrinks_with_more_data() {
        let locs = grid_locations(8);
        let w = [0.6, -0.2, 0.9, 0.1, -0.4, 0.3, -0.8, 0.5];
        let p = CovParams::new(1.0, 0.2).unwrap();
        let s0 = vec![Location::new(1.0, 1.0)];
        let v5 = latent_conditional_dense(&locs[..5], &w[..5], &p, &s0).unwrap()[0].1;
        let v8 = latent_conditional_dense(&locs, &w, &p, &s0).unwrap()[0].1;
        assert!(v8 <= v5 + 1e-12, "{} vs {}", v8, v5);
    }

    #[test]
    fn poisson_identity_link_at_zero() {
        let locs = grid_locations(3);
        let data = dataset(locs.clone(), &[0.0, 0.0], &[0.0; 3], &[0.0; 3]);
        let th = ThetaSample {
            beta: vec![0.0, 0.0],
            sigma2: 1e-30,
            tau2: None,
            phi: 0.1,
            w: Some(vec![0.0; 3]),
        };
        let spec = ModelSpec::poisson(1, IgPrior { shape: 3.0, scale: 0.4 });
        let new_x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = predict_poisson(
            &PosteriorSamples { draws: vec![th] },
            &data,
            &spec,
            &[Location::new(0.5, 0.5)],
            &new_x,
            PredictMode::Dense,
            &mut rng,
        )
        .unwrap();
        match out.density[0][0] {
            PredictiveDensity::Poisson { lambda } => assert!((lambda - 1.0).abs() < 1e-6),
            _ => panic!("wrong family"),
        }
        let y = out.response[0][0];
        assert!(y >= 0.0 && y.fract() == 0.0);
    }

    #[test]
    fn poisson_draws_match_pmf_chi_square() {
        // fixed lambda = 2 via a degenerate single-location setup repeated
        let locs = grid_locations(2);
        let data = dataset(locs.clone(), &[0.0, 0.0], &[0.0; 2], &[0.0; 2]);
        let th = ThetaSample {
            beta: vec![2f64.ln(), 0.0],
            sigma2: 1e-30,
            tau2: None,
            phi: 0.1,
            w: Some(vec![0.0; 2]),
        };
        let m = 100_000;
        let samples = PosteriorSamples { draws: vec![th; m] };
        let spec = ModelSpec::poisson(1, IgPrior { shape: 3.0, scale: 0.4 });
        let new_x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let out = predict_poisson(
            &samples,
            &data,
            &spec,
            &[Location::new(0.3, 0.3)],
            &new_x,
            PredictMode::Dense,
            &mut rng,
        )
        .unwrap();
        let draws = &out.response[0];
        assert_eq!(draws.len(), m);
        // bins 0..=7 and >= 8; chi-square critical value 20.09 (df 8, 1%)
        let lambda = 2.0f64;
        let mut observed = [0.0f64; 9];
        for &y in draws {
            assert!(y >= 0.0 && y.fract() == 0.0);
            observed[(y as usize).min(8)] += 1.0;
        }
        let mut pmf = [0.0f64; 9];
        let mut acc = (-lambda).exp();
        let mut total = 0.0;
        for k in 0..8 {
            pmf[k] = acc;
            total += acc;
            acc *= lambda / (k as f64 + 1.0);
        }
        pmf[8] = 1.0 - total;
        let chi2: f64 = (0..9)
            .map(|k| {
                let e = pmf[k] * m as f64;
                (observed[k] - e) * (observed[k] - e) / e
            })
            .sum();
        assert!(chi2 < 20.09, "chi-square {}", chi2);
    }

    #[test]
    fn prediction_is_deterministic_given_seed() {
        let locs = grid_locations(5);
        let beta = [0.3, -0.5];
        let w = [0.6, -0.2, 0.9, 0.1, -0.4];
        let data = dataset(locs.clone(), &beta, &w, &[0.0; 5]);
        let th = ThetaSample {
            beta: beta.to_vec(),
            sigma2: 1.0,
            tau2: Some(0.25),
            phi: 0.1,
            w: Some(w.to_vec()),
        };
        let samples = PosteriorSamples { draws: vec![th; 8] };
        let news = vec![Location::new(0.7, 0.9), Location::new(4.0, 2.0)];
        let new_x = Tensor::matrix(2, 2, vec![1.0, 0.2, 1.0, -0.3]).unwrap();
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            predict_gaussian(
                &samples,
                &data,
                &cond_spec(),
                &news,
                &new_x,
                PredictMode::Nngp(4),
                &mut rng,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.draw_count(), 8);
        assert_eq!(a.locations(), 2);
    }
}
