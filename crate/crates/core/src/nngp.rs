//! Nearest-neighbor Gaussian process: ordering, conditioning sets, the sparse
//! Vecchia log density, and sequential prediction at new locations.

use crate::autodiff::CustomOp;
use crate::covariance::{distance, exp_cov, CovParams, Location};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LN_2PI: f64 = 1.8378770664093453;

/// Ordering permutation plus per-location conditioning sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborGraph {
    /// Locations in Vecchia order (ascending first coordinate).
    pub ordered_locations: Vec<Location>,
    /// `permutation[i]` is the original index of ordered location i.
    pub permutation: Vec<usize>,
    /// For each ordered index i, the up-to-M nearest predecessors, sorted by
    /// (distance, index).
    pub neighbor_sets: Vec<Vec<usize>>,
    pub max_neighbors: usize,
}

/// Per-location kriging weights and conditional variances of the Vecchia
/// factorization.
#[derive(Debug, Clone)]
pub struct VecchiaTerms {
    pub weights: Vec<Vec<f64>>,
    pub cond_vars: Vec<f64>,
}

// ---- nearest-neighbor search ------------------------------------------------

fn d2(a: &Location, b: &Location) -> f64 {
    let dx = a.coords[0] - b.coords[0];
    let dy = a.coords[1] - b.coords[1];
    dx * dx + dy * dy
}

/// Keeps the m smallest (squared distance, index) pairs under lexicographic
/// order, which encodes the tie-break by lower index.
struct BoundedNearest {
    m: usize,
    kept: Vec<(f64, usize)>,
}

impl BoundedNearest {
    fn new(m: usize) -> Self {
        BoundedNearest { m, kept: Vec::with_capacity(m + 1) }
    }

    fn worst(&self) -> Option<(f64, usize)> {
        self.kept.last().copied()
    }

    fn push(&mut self, d2: f64, idx: usize) {
        let key = (d2, idx);
        match self.kept.binary_search_by(|probe| {
            probe.0.total_cmp(&key.0).then(probe.1.cmp(&key.1))
        }) {
            Ok(_) => {} // already kept (grid rings may revisit a cell)
            Err(pos) => {
                if pos >= self.m {
                    return;
                }
                self.kept.insert(pos, key);
                if self.kept.len() > self.m {
                    self.kept.pop();
                }
            }
        }
    }

    fn into_indices(self) -> Vec<usize> {
        self.kept.into_iter().map(|(_, i)| i).collect()
    }
}

/// Exhaustive-scan and grid-bucket nearest-neighbor search behind one
/// interface. Both return identical results; the grid only prunes.
pub struct NeighborFinder<'a> {
    locs: &'a [Location],
    grid: Option<Grid>,
}

struct Grid {
    cell: f64,
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn build(locs: &[Location]) -> Option<Grid> {
        let n = locs.len();
        if n == 0 {
            return None;
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for l in locs {
            xmin = xmin.min(l.coords[0]);
            xmax = xmax.max(l.coords[0]);
            ymin = ymin.min(l.coords[1]);
            ymax = ymax.max(l.coords[1]);
        }
        let span = (xmax - xmin).max(ymax - ymin).max(1e-12);
        // aim for a couple of points per cell
        let cells_per_side = ((n as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let cell = span / cells_per_side as f64;
        let nx = ((xmax - xmin) / cell).floor() as usize + 1;
        let ny = ((ymax - ymin) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (i, l) in locs.iter().enumerate() {
            let cx = (((l.coords[0] - xmin) / cell).floor() as usize).min(nx - 1);
            let cy = (((l.coords[1] - ymin) / cell).floor() as usize).min(ny - 1);
            buckets[cy * nx + cx].push(i);
        }
        Some(Grid { cell, nx, ny, x0: xmin, y0: ymin, buckets })
    }

    fn cell_of(&self, l: &Location) -> (usize, usize) {
        let cx = (((l.coords[0] - self.x0) / self.cell).floor() as usize).min(self.nx - 1);
        let cy = (((l.coords[1] - self.y0) / self.cell).floor() as usize).min(self.ny - 1);
        (cx, cy)
    }
}

impl<'a> NeighborFinder<'a> {
    pub fn new(locs: &'a [Location]) -> Self {
        // exhaustive scan is fine at small n; the grid pays off beyond a few thousand
        let grid = if locs.len() > 2048 { Grid::build(locs) } else { None };
        NeighborFinder { locs, grid }
    }

    /// The m nearest locations to `target` among indices `< upto`, sorted by
    /// (distance, index).
    pub fn nearest(&self, target: &Location, upto: usize, m: usize) -> Vec<usize> {
        let upto = upto.min(self.locs.len());
        if m == 0 || upto == 0 {
            return Vec::new();
        }
        match &self.grid {
            None => self.nearest_exhaustive(target, upto, m),
            Some(grid) => self.nearest_grid(grid, target, upto, m),
        }
    }

    fn nearest_exhaustive(&self, target: &Location, upto: usize, m: usize) -> Vec<usize> {
        let mut best = BoundedNearest::new(m);
        for (i, l) in self.locs[..upto].iter().enumerate() {
            best.push(d2(target, l), i);
        }
        best.into_indices()
    }

    fn nearest_grid(&self, grid: &Grid, target: &Location, upto: usize, m: usize) -> Vec<usize> {
        let (cx, cy) = grid.cell_of(target);
        let (cx, cy) = (cx as isize, cy as isize);
        let (nx, ny) = (grid.nx as isize, grid.ny as isize);
        let mut best = BoundedNearest::new(m);
        let visit = |gx: isize, gy: isize, best: &mut BoundedNearest| {
            if gx < 0 || gy < 0 || gx >= nx || gy >= ny {
                return;
            }
            for &idx in &grid.buckets[gy as usize * grid.nx + gx as usize] {
                if idx < upto {
                    best.push(d2(target, &self.locs[idx]), idx);
                }
            }
        };
        let max_ring = nx.max(ny);
        for r in 0..=max_ring {
            // points outside ring r are at least (r-1)*cell away
            if best.kept.len() == m {
                if let Some((wd2, _)) = best.worst() {
                    let bound = (r - 1).max(0) as f64 * grid.cell;
                    if bound * bound > wd2 {
                        break;
                    }
                }
            }
            if r == 0 {
                visit(cx, cy, &mut best);
                continue;
            }
            for gx in (cx - r)..=(cx + r) {
                visit(gx, cy - r, &mut best);
                visit(gx, cy + r, &mut best);
            }
            for gy in (cy - r + 1)..(cy + r) {
                visit(cx - r, gy, &mut best);
                visit(cx + r, gy, &mut best);
            }
        }
        best.into_indices()
    }
}

// ---- graph construction -----------------------------------------------------

/// Order locations by first coordinate (ties: second coordinate, then input
/// index) and attach each location's up-to-M nearest predecessors.
pub fn build_graph(locations: &[Location], m: usize) -> Result<NeighborGraph> {
    if m == 0 {
        return Err(Error::Config("max neighbors M must be at least 1".into()));
    }
    let n = locations.len();
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.sort_by(|&a, &b| {
        locations[a].coords[0]
            .total_cmp(&locations[b].coords[0])
            .then(locations[a].coords[1].total_cmp(&locations[b].coords[1]))
            .then(a.cmp(&b))
    });
    let ordered: Vec<Location> = permutation.iter().map(|&i| locations[i]).collect();
    let finder = NeighborFinder::new(&ordered);
    let neighbor_sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| finder.nearest(&ordered[i], i, m))
        .collect();
    Ok(NeighborGraph {
        ordered_locations: ordered,
        permutation,
        neighbor_sets,
        max_neighbors: m,
    })
}

// ---- Vecchia terms and density ----------------------------------------------

/// Weights b and conditional variance f for ordered location i, via the
/// correlation-matrix route (sigma2 cancels out of b).
/// Also returns the correlation vector r and the factor of the neighbor
/// correlation matrix for callers that need derivatives.
fn local_solve(
    graph: &NeighborGraph,
    i: usize,
    p: &CovParams,
) -> Result<(Vec<f64>, f64, Vec<f64>, Tensor)> {
    let nb = &graph.neighbor_sets[i];
    let k = nb.len();
    if k == 0 {
        return Ok((Vec::new(), p.sigma2, Vec::new(), Tensor::zeros(vec![0, 0])));
    }
    let si = &graph.ordered_locations[i];
    let mut r = vec![0.0; k];
    for (a, &j) in nb.iter().enumerate() {
        r[a] = (-p.phi * distance(si, &graph.ordered_locations[j])).exp();
    }
    let mut corr = vec![0.0; k * k];
    for a in 0..k {
        corr[a * k + a] = 1.0;
        for b in (a + 1)..k {
            let c = (-p.phi
                * distance(&graph.ordered_locations[nb[a]], &graph.ordered_locations[nb[b]]))
            .exp();
            corr[a * k + b] = c;
            corr[b * k + a] = c;
        }
    }
    let corr = Tensor::matrix(k, k, corr)?;
    let l = tensor::cholesky(&corr)
        .map_err(|_| Error::SingularConditioningSet { index: i })?;
    let b = tensor::solve_spd(&l, &r)?;
    let g: f64 = 1.0 - r.iter().zip(b.iter()).map(|(rv, bv)| rv * bv).sum::<f64>();
    let f = p.sigma2 * g;
    if f <= 0.0 || !f.is_finite() {
        return Err(Error::SingularConditioningSet { index: i });
    }
    Ok((b, f, r, l))
}

/// Per-location weight vectors and conditional variances.
pub fn vecchia_terms(graph: &NeighborGraph, p: &CovParams) -> Result<VecchiaTerms> {
    let per: Vec<(Vec<f64>, f64)> = (0..graph.ordered_locations.len())
        .into_par_iter()
        .map(|i| local_solve(graph, i, p).map(|(b, f, _, _)| (b, f)))
        .collect::<Result<Vec<_>>>()?;
    let (weights, cond_vars) = per.into_iter().unzip();
    Ok(VecchiaTerms { weights, cond_vars })
}

/// Sparse log density: sum_i log N(w_i; b_i' w_{N(i)}, f_i).
/// `w` is indexed in the graph's ordering.
pub fn vecchia_log_density(w: &[f64], terms: &VecchiaTerms, graph: &NeighborGraph) -> f64 {
    let n = w.len();
    debug_assert_eq!(n, graph.ordered_locations.len());
    let mut lp = 0.0;
    for i in 0..n {
        let nb = &graph.neighbor_sets[i];
        let mean: f64 = terms.weights[i]
            .iter()
            .zip(nb.iter())
            .map(|(b, &j)| b * w[j])
            .sum();
        let f = terms.cond_vars[i];
        let e = w[i] - mean;
        lp += -0.5 * (LN_2PI + f.ln()) - e * e / (2.0 * f);
    }
    lp
}

/// Conditional mean and variance at each new location given a draw of the
/// random effects at observed locations. Each new location conditions on its
/// M nearest observed neighbors only, never on other new locations.
pub fn predict_sequential(
    new_locations: &[Location],
    observed_locations: &[Location],
    w_draw: &[f64],
    p: &CovParams,
    m: usize,
) -> Result<Vec<(f64, f64)>> {
    if observed_locations.is_empty() {
        return Err(Error::Config("prediction needs at least one observed location".into()));
    }
    if w_draw.len() != observed_locations.len() {
        return Err(Error::ShapeMismatch(format!(
            "w draw length {} vs {} observed locations",
            w_draw.len(),
            observed_locations.len()
        )));
    }
    let finder = NeighborFinder::new(observed_locations);
    new_locations
        .par_iter()
        .map(|s0| {
            let nb = finder.nearest(s0, observed_locations.len(), m);
            let k = nb.len();
            let mut c = vec![0.0; k];
            for (a, &j) in nb.iter().enumerate() {
                c[a] = exp_cov(distance(s0, &observed_locations[j]), p);
            }
            let mut cn = vec![0.0; k * k];
            for a in 0..k {
                cn[a * k + a] = p.sigma2;
                for b in (a + 1)..k {
                    let cv = exp_cov(
                        distance(&observed_locations[nb[a]], &observed_locations[nb[b]]),
                        p,
                    );
                    cn[a * k + b] = cv;
                    cn[b * k + a] = cv;
                }
            }
            let cn = Tensor::matrix(k, k, cn)?;
            let l = tensor::cholesky(&cn)?;
            let b = tensor::solve_spd(&l, &c)?;
            let mean: f64 = b.iter().zip(nb.iter()).map(|(bv, &j)| bv * w_draw[j]).sum();
            let var = (p.sigma2
                - c.iter().zip(b.iter()).map(|(cv, bv)| cv * bv).sum::<f64>())
            .max(0.0);
            Ok((mean, var))
        })
        .collect()
}

// ---- fused tape op ----------------------------------------------------------

/// Vecchia log prior as one tape operation: inputs (sigma2, phi, w-ordered),
/// output the scalar log density, with a hand-derived backward pass. Much
/// cheaper than recording tens of small nodes per location.
#[derive(Debug)]
pub struct VecchiaLogPriorOp {
    pub graph: Arc<NeighborGraph>,
}

impl CustomOp for VecchiaLogPriorOp {
    fn name(&self) -> &'static str {
        "vecchia-log-prior"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let (sigma2, phi, w) = unpack3(inputs)?;
        let p = CovParams::new(sigma2, phi)?;
        let n = self.graph.ordered_locations.len();
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "vecchia prior: w length {} vs {} locations",
                w.len(),
                n
            )));
        }
        let lp: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let (b, f, _, _) = local_solve(&self.graph, i, &p)?;
                let nb = &self.graph.neighbor_sets[i];
                let mean: f64 = b.iter().zip(nb.iter()).map(|(bv, &j)| bv * w.values[j]).sum();
                let e = w.values[i] - mean;
                Ok(-0.5 * (LN_2PI + f.ln()) - e * e / (2.0 * f))
            })
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        Ok((Tensor::scalar(lp), vec![]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Tensor],
        grad: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let (sigma2, phi, w) = unpack3(inputs)?;
        let p = CovParams::new(sigma2, phi)?;
        let g = grad.scalar_value();
        let n = w.len();

        struct LocalGrad {
            d_sigma2: f64,
            d_phi: f64,
            d_wi: f64,
            d_wn: Vec<f64>,
        }

        let locals: Vec<LocalGrad> = (0..n)
            .into_par_iter()
            .map(|i| {
                let graph = &self.graph;
                let nb = &graph.neighbor_sets[i];
                let k = nb.len();
                let (b, f, r, l) = local_solve(graph, i, &p)?;
                let mean: f64 = b.iter().zip(nb.iter()).map(|(bv, &j)| bv * w.values[j]).sum();
                let e = w.values[i] - mean;
                let inv_f = 1.0 / f;
                let d_sigma2 = (e * e * inv_f - 1.0) / (2.0 * sigma2);
                let d_wi = -e * inv_f;
                let d_wn: Vec<f64> = b.iter().map(|bv| e * bv * inv_f).collect();
                let d_phi = if k == 0 {
                    0.0
                } else {
                    let si = &graph.ordered_locations[i];
                    // r' = -d o r; R' = -D o R
                    let dvec: Vec<f64> = nb
                        .iter()
                        .map(|&j| distance(si, &graph.ordered_locations[j]))
                        .collect();
                    let rprime: Vec<f64> =
                        r.iter().zip(dvec.iter()).map(|(rv, dv)| -dv * rv).collect();
                    // rhs = r' - R' b
                    let mut rhs = rprime.clone();
                    for a in 0..k {
                        for c in 0..k {
                            if a == c {
                                continue;
                            }
                            let dac = distance(
                                &graph.ordered_locations[nb[a]],
                                &graph.ordered_locations[nb[c]],
                            );
                            let rac = (-phi * dac).exp();
                            rhs[a] += dac * rac * b[c];
                        }
                    }
                    let bprime = tensor::solve_spd(&l, &rhs)?;
                    let gprime: f64 = -(rprime.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()
                        + r.iter().zip(bprime.iter()).map(|(x, y)| x * y).sum::<f64>());
                    let fprime = sigma2 * gprime;
                    let bw: f64 = bprime.iter().zip(nb.iter()).map(|(bv, &j)| bv * w.values[j]).sum();
                    fprime * (e * e * inv_f * inv_f - inv_f) / 2.0 + e * bw * inv_f
                };
                Ok(LocalGrad { d_sigma2, d_phi, d_wi, d_wn })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut d_sigma2 = 0.0;
        let mut d_phi = 0.0;
        let mut d_w = vec![0.0; n];
        for (i, lg) in locals.iter().enumerate() {
            d_sigma2 += lg.d_sigma2;
            d_phi += lg.d_phi;
            d_w[i] += lg.d_wi;
            for (&j, dv) in self.graph.neighbor_sets[i].iter().zip(lg.d_wn.iter()) {
                d_w[j] += dv;
            }
        }
        for v in d_w.iter_mut() {
            *v *= g;
        }
        Ok(vec![
            Tensor::scalar(g * d_sigma2),
            Tensor::scalar(g * d_phi),
            Tensor { shape: inputs[2].shape.clone(), values: d_w },
        ])
    }
}

fn unpack3<'a>(inputs: &[&'a Tensor]) -> Result<(f64, f64, &'a Tensor)> {
    if inputs.len() != 3 || !inputs[0].is_scalar() || !inputs[1].is_scalar() {
        return Err(Error::ShapeMismatch(
            "vecchia prior expects (scalar sigma2, scalar phi, vector w)".into(),
        ));
    }
    Ok((inputs[0].scalar_value(), inputs[1].scalar_value(), inputs[2]))
}
