//! Interpolation nodes and the coefficient/value maps on the reference triangle.
//!
//! Nodes are approximate Fekete points: the candidates that a column-pivoted
//! Gram-Schmidt sweep over the Koornwinder Vandermonde picks first. Candidates
//! come from the interior of a barycentric lattice, so no node lies on an edge
//! and neighbouring patches never share discretization points.

use super::koornwinder::{basis_count, KoornwinderBasis};
use super::UVPoint;
use crate::{Error, Result};
use nalgebra::DMatrix;

/// Default cap on generated interpolation orders.
pub const P_MAX: usize = 12;

/// Interpolation nodes of order `p` and the associated `U`/`V` matrices.
#[derive(Debug, Clone)]
pub struct InterpNodeSet {
    pub order: usize,
    pub nodes: Vec<UVPoint>,
    /// `values = U * coeffs`; row `j` holds every `K_nm` at node `j`.
    pub matrix_u: DMatrix<f64>,
    /// `coeffs = V * values`, the inverse of `U`.
    pub matrix_v: DMatrix<f64>,
    /// Spectral norm of `V`.
    pub norm_v: f64,
    /// 2-norm condition number of `U`.
    pub cond_u: f64,
}

impl InterpNodeSet {
    /// Builds the set for explicit nodes (used for loaded tables).
    pub fn from_nodes(order: usize, nodes: Vec<UVPoint>) -> Result<Self> {
        let n = basis_count(order);
        if nodes.len() != n {
            return Err(Error::Validation(format!(
                "order {order} needs {n} nodes, got {}",
                nodes.len()
            )));
        }
        let basis = KoornwinderBasis::new(order);
        let mut u = DMatrix::<f64>::zeros(n, n);
        let mut row = vec![0.0; n];
        for (j, x) in nodes.iter().enumerate() {
            super::koornwinder::check_domain(*x)?;
            basis.eval_into(x.u, x.v, &mut row);
            for (b, &val) in row.iter().enumerate() {
                u[(j, b)] = val;
            }
        }
        let svd = u.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 0.0) || !(smax / smin).is_finite() || smax / smin > 1e12 {
            return Err(Error::Internal(format!(
                "order-{order} interpolation matrix is singular (cond {:.3e})",
                smax / smin
            )));
        }
        let v = u
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Internal(format!("order-{order} interpolation matrix not invertible")))?;
        Ok(Self {
            order,
            nodes,
            matrix_u: u,
            matrix_v: v,
            norm_v: 1.0 / smin,
            cond_u: smax / smin,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weights of the interpolatory rule on these nodes (exact below degree `order`).
    pub fn smooth_weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| self.matrix_v[(0, j)] * std::f64::consts::FRAC_1_SQRT_2)
            .collect()
    }

    /// Koornwinder coefficients of the interpolant through `values`.
    pub fn coeffs_from_values(&self, values: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(values);
        (&self.matrix_v * v).as_slice().to_vec()
    }

    /// Values at the nodes of a coefficient vector.
    pub fn values_from_coeffs(&self, coeffs: &[f64]) -> Vec<f64> {
        let c = nalgebra::DVector::from_column_slice(coeffs);
        (&self.matrix_u * c).as_slice().to_vec()
    }
}

/// Degree of the barycentric candidate lattice used for order `p`.
pub fn candidate_lattice_degree(p: usize) -> usize {
    3 * (p + 3)
}

/// Strictly interior points `(i/M, j/M)` with `i, j, M-i-j >= 1`.
fn interior_lattice(m: usize) -> Vec<UVPoint> {
    let mf = m as f64;
    let mut pts = Vec::new();
    for j in 1..m {
        for i in 1..(m - j) {
            pts.push(UVPoint::new(i as f64 / mf, j as f64 / mf));
        }
    }
    // put the centroid first so ties on symmetric lattices resolve toward it
    if let Some(pos) = pts
        .iter()
        .position(|x| (3 * (x.u * mf).round() as usize == m) && (3 * (x.v * mf).round() as usize == m))
    {
        let c = pts.remove(pos);
        pts.insert(0, c);
    }
    pts
}

/// Approximate Fekete nodes of order `p`.
pub fn build_interp_nodes(p: usize, p_max: usize) -> Result<InterpNodeSet> {
    if p == 0 || p > p_max {
        return Err(Error::Argument(format!(
            "interpolation order {p} outside 1..={p_max}; load a table for higher orders"
        )));
    }
    let n = basis_count(p);
    let lattice = candidate_lattice_degree(p);
    let candidates = interior_lattice(lattice);
    let basis = KoornwinderBasis::new(p);
    let mut residual: Vec<Vec<f64>> = candidates
        .iter()
        .map(|x| {
            let mut row = vec![0.0; n];
            basis.eval_into(x.u, x.v, &mut row);
            row
        })
        .collect();
    let mut norms: Vec<f64> = residual.iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
    let mut taken = vec![false; candidates.len()];
    let mut chosen = Vec::with_capacity(n);
    for step in 0..n {
        let mut best = None;
        let mut best_norm = 0.0;
        for (i, &nrm) in norms.iter().enumerate() {
            if !taken[i] && nrm > best_norm * (1.0 + 1e-12) {
                best = Some(i);
                best_norm = nrm;
            }
        }
        let sel = best.filter(|_| best_norm > 1e-24).ok_or_else(|| {
            Error::Internal(format!(
                "pivoted factorization broke down at step {step} of {n} \
                 (order {p}, {} candidates on a degree-{lattice} lattice)",
                candidates.len()
            ))
        })?;
        taken[sel] = true;
        chosen.push(sel);
        let scale = best_norm.sqrt();
        let q: Vec<f64> = residual[sel].iter().map(|x| x / scale).collect();
        for (i, r) in residual.iter_mut().enumerate() {
            if taken[i] {
                continue;
            }
            let dot: f64 = r.iter().zip(&q).map(|(a, b)| a * b).sum();
            for (a, b) in r.iter_mut().zip(&q) {
                *a -= dot * b;
            }
            norms[i] = r.iter().map(|x| x * x).sum();
        }
    }
    let nodes = chosen.into_iter().map(|i| candidates[i]).collect();
    InterpNodeSet::from_nodes(p, nodes)
}
