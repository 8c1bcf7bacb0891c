//! Sensor graph construction and the fixed Chebyshev graph convolution.

use crate::autodiff::{Graph, Mask, Tensor, Var};
use crate::error::{Error, Result};

/// One `(from, to, metres)` entry of a sensor distance list.
pub type Distance = (usize, usize, f64);

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_CHEB_ORDER: usize = 3;

const POWER_ITER_TOL: f64 = 1e-9;
const POWER_ITER_MAX: usize = 10_000;
const POWER_ITER_TARGET: f64 = 1e-13;
const ROUNDOFF_CHANGE: f64 = 1e-15;

/// Kernel adjacency plus the nodes that ended up with no incident edge.
#[derive(Clone, Debug)]
pub struct KernelAdjacency {
    pub adjacency: Tensor,
    pub isolated: Vec<usize>,
}

/// Population standard deviation of all finite distances.
///
/// Falls back to the mean distance when every distance is equal, and to 1
/// when that is zero too, so the kernel width is always positive.
pub fn default_sigma(distances: &[Distance]) -> f64 {
    let finite: Vec<f64> = distances.iter().map(|d| d.2).filter(|d| d.is_finite()).collect();
    if finite.is_empty() {
        return 1.0;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        std
    } else if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// `A_ij = exp(-d_ij² / σ²)`, pruned below `epsilon`, then symmetrised by max.
pub fn gaussian_kernel_adjacency(
    distances: &[Distance],
    n: usize,
    sigma: f64,
    epsilon: f64,
) -> Result<KernelAdjacency> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Value(format!("kernel width sigma must be > 0, got {sigma}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Value(format!("threshold epsilon must be in [0, 1), got {epsilon}")));
    }
    let mut directed = Tensor::zeros(&[n, n]);
    for &(i, j, d) in distances {
        for index in [i, j] {
            if index >= n {
                return Err(Error::Index { index, n });
            }
        }
        if d.is_nan() || d < 0.0 {
            return Err(Error::Value(format!("negative distance {d} between {i} and {j}")));
        }
        if i == j {
            continue;
        }
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w >= epsilon && w > directed.get(&[i, j]) {
            directed.set(&[i, j], w);
        }
    }
    let adjacency = symmetrize_max(&directed)?;
    let isolated: Vec<usize> = (0..n)
        .filter(|&i| adjacency.row(i).iter().all(|&w| w == 0.0))
        .collect();
    if !isolated.is_empty() {
        log::warn!("isolated sensor nodes after thresholding: {isolated:?}");
    }
    Ok(KernelAdjacency { adjacency, isolated })
}

/// `out_ij = out_ji = max(A_ij, A_ji)` with a zero diagonal.
pub fn symmetrize_max(directed: &Tensor) -> Result<Tensor> {
    let n = square_dim(directed, "symmetrize_max")?;
    if let Some(v) = directed.data().iter().find(|&&v| v.is_nan() || v < 0.0) {
        return Err(Error::Value(format!("negative adjacency weight {v}")));
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = directed.get(&[i, j]).max(directed.get(&[j, i]));
            out.set(&[i, j], w);
            out.set(&[j, i], w);
        }
    }
    Ok(out)
}

fn square_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape() {
        &[r, c] if r == c => Ok(r),
        s => Err(Error::shape(op, s, &[s.first().copied().unwrap_or(0); 2])),
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`; zero-degree nodes get `D^{-1/2} = 0`.
pub fn normalized_laplacian(adjacency: &Tensor) -> Result<Tensor> {
    let n = square_dim(adjacency, "normalized_laplacian")?;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let degree: f64 = adjacency.row(i).iter().sum();
            if degree > 0.0 {
                1.0 / degree.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            let v = l.get(&[i, j]) - inv_sqrt[i] * adjacency.get(&[i, j]) * inv_sqrt[j];
            l.set(&[i, j], v);
        }
    }
    Ok(l)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration.
///
/// The Rayleigh quotient approaches the eigenvalue geometrically, so the
/// remaining error is estimated from the ratio of successive changes. The
/// iteration runs until that estimate falls to roundoff level; if the
/// iteration cap is hit first, the result is still accepted when the
/// estimated relative error is within 1e-9.
pub fn largest_eigenvalue(m: &Tensor) -> Result<f64> {
    let n = square_dim(m, "largest_eigenvalue")?;
    // deterministic start with no special symmetry
    let mut v: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i as u64 * 2_654_435_761 + 97) % 1000) as f64 / 1000.0)
        .collect();
    normalize(&mut v);
    let mut previous = f64::NAN;
    let mut previous_change = f64::NAN;
    let mut estimate = f64::INFINITY;
    for iter in 1..=POWER_ITER_MAX {
        let w: Vec<f64> = (0..n)
            .map(|i| m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if iter > 1 {
            let change = (rayleigh - previous).abs() / rayleigh.abs();
            let ratio = if previous_change > 0.0 {
                (change / previous_change).min(1.0 - 1e-6)
            } else {
                0.0
            };
            estimate = change + change * ratio / (1.0 - ratio);
            if change <= ROUNDOFF_CHANGE || estimate <= POWER_ITER_TARGET {
                return Ok(rayleigh);
            }
            if iter == POWER_ITER_MAX && change <= POWER_ITER_TOL && estimate <= POWER_ITER_TOL {
                return Ok(rayleigh);
            }
            previous_change = change;
        }
        previous = rayleigh;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge in {POWER_ITER_MAX} iterations \
         (estimated relative error {estimate:.1e})"
    )))
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// `(L̃, λ_max)` with `L̃ = 2L/λ_max - I`.
pub fn scaled_laplacian(adjacency: &Tensor) -> Result<(Tensor, f64)> {
    let l = normalized_laplacian(adjacency)?;
    let lambda_max = largest_eigenvalue(&l)?;
    if lambda_max <= 0.0 {
        return Err(Error::Numeric(format!("non-positive largest eigenvalue {lambda_max}")));
    }
    let n = l.shape()[0];
    let mut scaled = l.map(|v| 2.0 * v / lambda_max);
    for i in 0..n {
        let d = scaled.get(&[i, i]) - 1.0;
        scaled.set(&[i, i], d);
    }
    Ok((scaled, lambda_max))
}

/// `[T_0(L̃), …, T_K(L̃)]` by the three-term recurrence.
pub fn chebyshev_basis(scaled: &Tensor, order: usize) -> Result<Vec<Tensor>> {
    let n = square_dim(scaled, "chebyshev_basis")?;
    let mut basis = vec![Tensor::eye(n)];
    if order >= 1 {
        basis.push(scaled.clone());
    }
    for k in 2..=order {
        let prod = scaled.matmul(&basis[k - 1])?;
        let prev = &basis[k - 2];
        let data = prod
            .data()
            .iter()
            .zip(prev.data())
            .map(|(p, q)| 2.0 * p - q)
            .collect();
        basis.push(Tensor::new(&[n, n], data)?);
    }
    Ok(basis)
}

/// Road graph with its precomputed spectral operators. Immutable once built.
#[derive(Clone, Debug)]
pub struct TrafficGraph {
    n_nodes: usize,
    adjacency: Tensor,
    lambda_max: f64,
    scaled_laplacian: Tensor,
    cheb_basis: Vec<Tensor>,
}

impl TrafficGraph {
    pub fn from_adjacency(adjacency: Tensor, cheb_order: usize) -> Result<Self> {
        let n_nodes = square_dim(&adjacency, "TrafficGraph")?;
        for i in 0..n_nodes {
            if adjacency.get(&[i, i]) != 0.0 {
                return Err(Error::Value(format!("adjacency diagonal entry {i} is non-zero")));
            }
            for j in 0..n_nodes {
                let w = adjacency.get(&[i, j]);
                if !(0.0..=1.0).contains(&w) || w != adjacency.get(&[j, i]) {
                    return Err(Error::Value(format!(
                        "adjacency must be symmetric with weights in [0, 1]; entry ({i}, {j}) = {w}"
                    )));
                }
            }
        }
        let (scaled_laplacian, lambda_max) = scaled_laplacian(&adjacency)?;
        let cheb_basis = chebyshev_basis(&scaled_laplacian, cheb_order)?;
        Ok(TrafficGraph {
            n_nodes,
            adjacency,
            lambda_max,
            scaled_laplacian,
            cheb_basis,
        })
    }

    /// Kernel adjacency from a distance list. `sigma = None` uses
    /// [`default_sigma`].
    pub fn from_distances(
        distances: &[Distance],
        n: usize,
        sigma: Option<f64>,
        epsilon: f64,
        cheb_order: usize,
    ) -> Result<Self> {
        let sigma = sigma.unwrap_or_else(|| default_sigma(distances));
        let kernel = gaussian_kernel_adjacency(distances, n, sigma, epsilon)?;
        Self::from_adjacency(kernel.adjacency, cheb_order)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn scaled_laplacian(&self) -> &Tensor {
        &self.scaled_laplacian
    }

    pub fn cheb_basis(&self) -> &[Tensor] {
        &self.cheb_basis
    }

    pub fn cheb_order(&self) -> usize {
        self.cheb_basis.len() - 1
    }

    /// Keeps each node and its `k` strongest neighbours (positive weight only).
    pub fn local_mask(&self, k: usize) -> Mask {
        let n = self.n_nodes;
        let mut keep = vec![false; n * n];
        for i in 0..n {
            keep[i * n + i] = true;
            let mut neighbours: Vec<(usize, f64)> = self
                .adjacency
                .row(i)
                .iter()
                .copied()
                .enumerate()
                .filter(|&(j, w)| j != i && w > 0.0)
                .collect();
            // strongest first, ties by index
            neighbours.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(j, _) in neighbours.iter().take(k) {
                keep[i * n + j] = true;
            }
        }
        Mask::new(n, n, keep).expect("diagonal is always kept")
    }
}

/// Fixed graph convolution
/// `out[..., :, j] = Σ_i Σ_k θ[k, i, j] · T_k(L̃) · x[..., :, i]`.
///
/// `x` is `[..., N, d_in]`, each basis entry `[N, N]`, `theta` is
/// `[K+1, d_in, d_out]`.
pub fn chebyshev_graph_conv(g: &mut Graph, x: Var, basis: &[Var], theta: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ts = g.shape(theta).to_vec();
    let r = xs.len();
    if r < 2 || ts.len() != 3 || ts[1] != xs[r - 1] {
        return Err(Error::shape("chebyshev_graph_conv", &xs, &ts));
    }
    if ts[0] != basis.len() {
        return Err(Error::shape("chebyshev_graph_conv", &[basis.len()], &ts));
    }
    let (n, d_in, d_out) = (xs[r - 2], xs[r - 1], ts[2]);

    // bring the node axis to the front so T_k @ x is a single matmul
    let lead: usize = xs[..r - 2].iter().product();
    let node_major = if r == 2 {
        x
    } else {
        let mut perm = vec![r - 2];
        perm.extend(0..r - 2);
        perm.push(r - 1);
        let p = g.permute(x, &perm)?;
        g.reshape(p, &[n, lead * d_in])?
    };
    let mut terms = Vec::with_capacity(basis.len());
    for &t_k in basis {
        let z = g.matmul(t_k, node_major)?;
        let z = if r == 2 {
            z
        } else {
            let mut shape = vec![n];
            shape.extend_from_slice(&xs[..r - 2]);
            shape.push(d_in);
            let z = g.reshape(z, &shape)?;
            let mut perm: Vec<usize> = (1..r - 1).collect();
            perm.push(0);
            perm.push(r - 1);
            g.permute(z, &perm)?
        };
        terms.push(z);
    }
    let stacked = g.concat(&terms, r - 1)?;
    let weights = g.reshape(theta, &[basis.len() * d_in, d_out])?;
    g.matmul(stacked, weights)
}
