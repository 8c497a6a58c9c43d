//! Exponential covariance function, distances, and covariance-matrix assembly.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A point in the plane. All experiments are two-dimensional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub coords: [f64; 2],
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { coords: [x, y] }
    }
}

/// Partial sill and range decay rate of the exponential covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    pub sigma2: f64,
    pub phi: f64,
}

impl CovParams {
    pub fn new(sigma2: f64, phi: f64) -> Result<Self> {
        if sigma2 <= 0.0 || phi <= 0.0 || !sigma2.is_finite() || !phi.is_finite() {
            return Err(Error::Config(format!(
                "covariance parameters must be positive, got sigma2={}, phi={}",
                sigma2, phi
            )));
        }
        Ok(CovParams { sigma2, phi })
    }
}

/// Euclidean distance.
pub fn distance(a: &Location, b: &Location) -> f64 {
    let dx = a.coords[0] - b.coords[0];
    let dy = a.coords[1] - b.coords[1];
    (dx * dx + dy * dy).sqrt()
}

/// C(d) = sigma^2 exp(-phi d).
pub fn exp_cov(d: f64, p: &CovParams) -> f64 {
    debug_assert!(d >= 0.0);
    p.sigma2 * (-p.phi * d).exp()
}

/// Full pairwise-distance matrix.
pub fn pairwise_distances(locations: &[Location]) -> Tensor {
    let n = locations.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distance(&locations[i], &locations[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Tensor { shape: vec![n, n], values }
}

/// Largest pairwise distance; used for range-prior elicitation.
pub fn max_distance(locations: &[Location]) -> f64 {
    let n = locations.len();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max(distance(&locations[i], &locations[j]));
        }
    }
    best
}

/// Dense n x n covariance matrix. Duplicate locations are tolerated; the
/// resulting singular matrix is handled by jitter downstream.
pub fn build_cov_matrix(locations: &[Location], p: &CovParams) -> Tensor {
    let n = locations.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = p.sigma2;
        for j in (i + 1)..n {
            let c = exp_cov(distance(&locations[i], &locations[j]), p);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Tensor { shape: vec![n, n], values }
}

/// Record the covariance matrix on a tape as a differentiable function of
/// (sigma2, phi): C = sigma2 * exp(-phi * D) with D a constant distance matrix.
pub fn build_cov_matrix_on_tape(
    tape: &mut Tape,
    distances: NodeId,
    sigma2: NodeId,
    phi: NodeId,
) -> Result<NodeId> {
    let pd = tape.mul(phi, distances)?;
    let npd = tape.neg(pd);
    let corr = tape.exp(npd);
    tape.mul(sigma2, corr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::central_difference_gradient;
    use crate::tensor::cholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn distance_basics() {
        let a = Location::new(1.0, 2.0);
        assert_eq!(distance(&a, &a), 0.0);
        assert_eq!(distance(&Location::new(0.0, 0.0), &Location::new(3.0, 4.0)), 5.0);
        let corner = distance(&Location::new(0.0, 0.0), &Location::new(50.0, 50.0));
        assert!((corner - 50.0 * 2f64.sqrt()).abs() < 1e-10);
        assert!((corner - 70.7107).abs() < 1e-4);
    }

    #[test]
    fn exp_cov_anchors() {
        let unit = CovParams::new(1.0, 0.1).unwrap();
        assert_eq!(exp_cov(0.0, &unit), 1.0);
        // correlation at distance 30 is about 0.05
        let c = exp_cov(30.0, &unit);
        assert!((c - 0.049787).abs() < 1e-6);
        assert!((c - 0.05).abs() < 5e-3);
        let p = CovParams::new(2.0, 1.0).unwrap();
        assert!((exp_cov(2f64.ln(), &p) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_location_matrix() {
        let p = CovParams::new(1.7, 0.3).unwrap();
        let c = build_cov_matrix(&[Location::new(0.0, 0.0)], &p);
        assert_eq!(c.values, vec![1.7]);
    }

    #[test]
    fn two_location_off_diagonal() {
        let p = CovParams::new(1.0, 0.1).unwrap();
        let c = build_cov_matrix(&[Location::new(0.0, 0.0), Location::new(30.0, 0.0)], &p);
        assert!((c.at(0, 1) - 0.049787).abs() < 1e-6);
    }

    #[test]
    fn matrix_matches_double_loop_oracle_and_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let locs: Vec<Location> =
            (0..5).map(|_| Location::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0))).collect();
        let p = CovParams::new(1.3, 0.08).unwrap();
        let c = build_cov_matrix(&locs, &p);
        for i in 0..5 {
            for j in 0..5 {
                let d = ((locs[i].coords[0] - locs[j].coords[0]).powi(2)
                    + (locs[i].coords[1] - locs[j].coords[1]).powi(2))
                .sqrt();
                let expect = p.sigma2 * (-p.phi * d).exp();
                assert!((c.at(i, j) - expect).abs() < 1e-14);
                assert_eq!(c.at(i, j), c.at(j, i));
            }
        }
    }

    #[test]
    fn exp_cov_monotone_in_distance_and_phi() {
        let p = CovParams::new(1.0, 0.2).unwrap();
        let mut prev = exp_cov(0.0, &p);
        for k in 1..50 {
            let cur = exp_cov(k as f64 * 0.5, &p);
            assert!(cur < prev);
            prev = cur;
        }
        let d = 3.0;
        let mut prev = exp_cov(d, &CovParams::new(1.0, 0.01).unwrap());
        for k in 1..20 {
            let cur = exp_cov(d, &CovParams::new(1.0, 0.01 + 0.05 * k as f64).unwrap());
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn random_matrices_are_positive_definite() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let locs: Vec<Location> = (0..n)
                .map(|_| Location::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)))
                .collect();
            let p = CovParams::new(rng.gen_range(0.5..2.0), rng.gen_range(0.05..0.3)).unwrap();
            let c = build_cov_matrix(&locs, &p);
            assert!(cholesky(&c).is_ok());
        }
    }

    #[test]
    fn tape_cov_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let locs: Vec<Location> =
            (0..4).map(|_| Location::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0))).collect();
        let d = pairwise_distances(&locs);
        // scalar objective: sum of all covariance entries
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let dc = t.constant(d.clone());
            let s2 = t.leaf(Tensor::scalar(v[0]));
            let ph = t.leaf(Tensor::scalar(v[1]));
            let c = build_cov_matrix_on_tape(&mut t, dc, s2, ph).unwrap();
            let s = t.sum(c);
            t.value(s).scalar_value()
        };
        let x = [1.3, 0.12];
        let mut t = Tape::new();
        let dc = t.constant(d.clone());
        let s2 = t.leaf(Tensor::scalar(x[0]));
        let ph = t.leaf(Tensor::scalar(x[1]));
        let c = build_cov_matrix_on_tape(&mut t, dc, s2, ph).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        let fd = central_difference_gradient(&f, &x, 1e-6);
        let gs2 = g.get(s2).unwrap().values[0];
        let gph = g.get(ph).unwrap().values[0];
        assert!((gs2 - fd[0]).abs() / fd[0].abs() < 1e-5);
        assert!((gph - fd[1]).abs() / fd[1].abs() < 1e-5);
    }
}
