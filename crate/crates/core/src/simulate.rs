//! Synthetic data generation: the two small-scale replicate designs, the
//! train/validation split, and large constant-mean fields simulated without a
//! dense factorization.

use crate::covariance::{build_cov_matrix, CovParams, Location};
use crate::error::{Error, Result};
use crate::models::{sample_variance, SpatialDataset, ThetaSample};
use crate::nngp::{build_graph, vecchia_terms};
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Side length of the sampling square shared by both replicate designs.
pub const SQUARE_SIDE: f64 = 50.0;

/// Default held-out set size per replicate.
pub const VALIDATION_SIZE: usize = 20;

/// True parameters of the Gaussian replicate design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianScenario {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2: f64,
    pub tau2: f64,
    pub phi: f64,
    /// Rate of the Poisson covariate before standardization.
    pub covariate_rate: f64,
}

pub const GAUSSIAN_SCENARIO: GaussianScenario = GaussianScenario {
    beta0: 0.0,
    beta1: 0.5,
    sigma2: 1.0,
    tau2: 0.25,
    phi: 0.1,
    covariate_rate: 3.0,
};

/// True parameters of the Poisson replicate design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonScenario {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2: f64,
    pub phi: f64,
}

pub const POISSON_SCENARIO: PoissonScenario =
    PoissonScenario { beta0: 1.5, beta1: 0.25, sigma2: 0.1, phi: 0.1 };

/// n locations uniform on [0, side]^2.
pub fn gen_locations(n: usize, side: f64, rng: &mut ChaCha20Rng) -> Vec<Location> {
    (0..n)
        .map(|_| Location::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side)))
        .collect()
}

/// Draw from MVN(0, C) over the given locations by dense Cholesky.
pub fn mvn_draw(locations: &[Location], p: &CovParams, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    let n = locations.len();
    let c = build_cov_matrix(locations, p);
    let l = tensor::cholesky(&c)?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..=i {
            acc += l.values[i * n + k] * z[k];
        }
        w[i] = acc;
    }
    Ok(w)
}

/// Standardize to sample mean 0 and sample sd 1 (n-1 denominator).
fn standardize(x: &mut [f64]) -> Result<()> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = sample_variance(x);
    if var <= 0.0 {
        return Err(Error::DegenerateCovariate);
    }
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok(())
}

fn design_with_covariate(n: usize, x: &[f64]) -> Result<Tensor> {
    let mut values = Vec::with_capacity(2 * n);
    for &v in x {
        values.push(1.0);
        values.push(v);
    }
    Tensor::matrix(n, 2, values)
}

/// One Gaussian replicate: standardized Poisson covariate, exponential-GP
/// random effects, nugget noise. A degenerate (constant) covariate draw is
/// resampled once before failing.
pub fn gen_gaussian_replicate(
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(SpatialDataset, ThetaSample)> {
    let sc = GAUSSIAN_SCENARIO;
    let locations = gen_locations(n, SQUARE_SIDE, rng);
    let pois = Poisson::new(sc.covariate_rate).map_err(|e| Error::Config(e.to_string()))?;
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(pois)).collect();
    if standardize(&mut x).is_err() {
        x = (0..n).map(|_| rng.sample(pois)).collect();
        standardize(&mut x)?;
    }
    let p = CovParams::new(sc.sigma2, sc.phi)?;
    let w = mvn_draw(&locations, &p, rng)?;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            sc.beta0
                + sc.beta1 * x[i]
                + w[i]
                + sc.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let data = SpatialDataset::new(locations, design_with_covariate(n, &x)?, y)?;
    let truth = ThetaSample {
        beta: vec![sc.beta0, sc.beta1],
        sigma2: sc.sigma2,
        tau2: Some(sc.tau2),
        phi: sc.phi,
        w: Some(w),
    };
    Ok((data, truth))
}

/// One Poisson replicate: standard-normal covariate, exponential-GP random
/// effects, Poisson counts through the log link.
pub fn gen_poisson_replicate(
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(SpatialDataset, ThetaSample)> {
    let sc = POISSON_SCENARIO;
    let locations = gen_locations(n, SQUARE_SIDE, rng);
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let p = CovParams::new(sc.sigma2, sc.phi)?;
    let w = mvn_draw(&locations, &p, rng)?;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let lambda = (sc.beta0 + sc.beta1 * x[i] + w[i]).exp();
            let d = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?;
            Ok(rng.sample::<f64, _>(d))
        })
        .collect::<Result<Vec<f64>>>()?;
    let data = SpatialDataset::new(locations, design_with_covariate(n, &x)?, y)?;
    let truth = ThetaSample {
        beta: vec![sc.beta0, sc.beta1],
        sigma2: sc.sigma2,
        tau2: None,
        phi: sc.phi,
        w: Some(w),
    };
    Ok((data, truth))
}

/// Uniformly random disjoint train/validation split, keeping the original
/// relative order within each part.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: SpatialDataset,
    pub validation: SpatialDataset,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

fn subset(data: &SpatialDataset, indices: &[usize]) -> Result<SpatialDataset> {
    let p = data.design_dim();
    let mut xv = Vec::with_capacity(indices.len() * p);
    let mut y = Vec::with_capacity(indices.len());
    let mut locations = Vec::with_capacity(indices.len());
    for &i in indices {
        locations.push(data.locations[i]);
        for k in 0..p {
            xv.push(data.x.at(i, k));
        }
        y.push(data.y[i]);
    }
    SpatialDataset::new(locations, Tensor::matrix(indices.len(), p, xv)?, y)
}

pub fn split(data: &SpatialDataset, n_validation: usize, rng: &mut ChaCha20Rng) -> Result<Split> {
    let n = data.n();
    if n_validation >= n {
        return Err(Error::Config(format!(
            "validation size {} must be below n = {}",
            n_validation, n
        )));
    }
    // Fisher-Yates, then take the tail as validation
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut train_indices = idx[..n - n_validation].to_vec();
    let mut validation_indices = idx[n - n_validation..].to_vec();
    train_indices.sort_unstable();
    validation_indices.sort_unstable();
    Ok(Split {
        train: subset(data, &train_indices)?,
        validation: subset(data, &validation_indices)?,
        train_indices,
        validation_indices,
    })
}

/// Large constant-mean Gaussian field. The random effects are simulated
/// sequentially through the nearest-neighbor graph (w_i given its neighbor
/// set), so no n x n matrix is ever formed.
pub fn gen_large_field(
    n: usize,
    side: f64,
    mean: f64,
    p: &CovParams,
    tau2: f64,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(SpatialDataset, Vec<f64>)> {
    let locations = gen_locations(n, side, rng);
    let graph = build_graph(&locations, m)?;
    let terms = vecchia_terms(&graph, p)?;
    let mut w_ordered = vec![0.0; n];
    for i in 0..n {
        let cond_mean: f64 = terms.weights[i]
            .iter()
            .zip(graph.neighbor_sets[i].iter())
            .map(|(b, &j)| b * w_ordered[j])
            .sum();
        w_ordered[i] =
            cond_mean + terms.cond_vars[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let mut w = vec![0.0; n];
    for (i, &orig) in graph.permutation.iter().enumerate() {
        w[orig] = w_ordered[i];
    }
    let y: Vec<f64> = (0..n)
        .map(|i| mean + w[i] + tau2.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let x = Tensor::matrix(n, 1, vec![1.0; n])?;
    let data = SpatialDataset::new(locations, x, y)?;
    Ok((data, w))
}
