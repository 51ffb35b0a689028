//! Quadrature rules on the reference triangle and on `[0, 1]`.

use super::koornwinder::{basis_count, basis_degrees, basis_index, KoornwinderBasis};
use super::nodes::build_interp_nodes;
use super::UVPoint;
use crate::{Error, Result};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Default cap on generated rule orders.
pub const Q_MAX: usize = 20;

/// Moment residual accepted when checking exactness.
pub const EXACTNESS_TOL: f64 = 1e-12;

/// Nodes and area weights on the reference triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<UVPoint>,
    pub weights: Vec<f64>,
    /// All polynomials of total degree below this value are integrated exactly.
    pub exactness: usize,
    /// `false` when some weight is negative.
    pub positive: bool,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Integrates `f` over the reference triangle.
    pub fn integrate(&self, mut f: impl FnMut(UVPoint) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Builds the interpolatory rule of order `q` on the order-`q` interpolation
/// nodes. The rule integrates every polynomial of degree `< q`.
pub fn build_quadrature(q: usize) -> Result<QuadratureRule> {
    build_quadrature_capped(q, Q_MAX)
}

pub fn build_quadrature_capped(q: usize, q_max: usize) -> Result<QuadratureRule> {
    if q == 0 || q > q_max {
        return Err(Error::Argument(format!(
            "quadrature order {q} outside 1..={q_max}; load a table for higher orders"
        )));
    }
    let set = build_interp_nodes(q, q_max.max(super::nodes::P_MAX))?;
    // integral of f = c_00 / sqrt(2), and c_00 = (V f)_0
    let weights: Vec<f64> = (0..set.nodes.len())
        .map(|j| set.matrix_v[(0, j)] * FRAC_1_SQRT_2)
        .collect();
    let exactness = verified_exactness(&set.nodes, &weights, q + 2);
    let positive = weights.iter().all(|&w| w > 0.0);
    if !positive {
        log::warn!("order-{q} moment-fitted rule has non-positive weights");
    }
    Ok(QuadratureRule {
        order: q,
        nodes: set.nodes,
        weights,
        exactness,
        positive,
    })
}

/// Largest `d <= limit` such that the rule integrates every `K_nm` with
/// `n < d` to [`EXACTNESS_TOL`].
pub fn verified_exactness(nodes: &[UVPoint], weights: &[f64], limit: usize) -> usize {
    if limit == 0 {
        return 0;
    }
    let basis = KoornwinderBasis::new(limit);
    let mut moments = vec![0.0; basis_count(limit)];
    let mut vals = vec![0.0; basis_count(limit)];
    for (x, &w) in nodes.iter().zip(weights) {
        basis.eval_into(x.u, x.v, &mut vals);
        for (m, v) in moments.iter_mut().zip(&vals) {
            *m += w * v;
        }
    }
    let mut degree = 0;
    for n in 0..limit {
        let ok = (0..=n).all(|m| {
            let want = if n == 0 { FRAC_1_SQRT_2 } else { 0.0 };
            (moments[basis_index(n, m)] - want).abs() <= EXACTNESS_TOL
        });
        if !ok {
            break;
        }
        degree = n + 1;
    }
    degree
}

/// Analytic moments `∫ K_nm` over the reference triangle.
pub fn analytic_moments(p: usize) -> Vec<f64> {
    basis_degrees(p)
        .into_iter()
        .map(|(n, _)| if n == 0 { FRAC_1_SQRT_2 } else { 0.0 })
        .collect()
}

/// `n`-point Gauss-Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[n - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wi;
        w[n - 1 - i] = 0.5 * wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.5;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Conical product rule with `n x n` points: `u = ξ(1-η)`, `v = η`.
/// Exact for total degree `<= 2n - 2`.
pub fn collapsed_gauss(n: usize) -> QuadratureRule {
    let (x, w) = gauss_legendre(n);
    let mut nodes = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (&eta, &we) in x.iter().zip(&w) {
        for (&xi, &wx) in x.iter().zip(&w) {
            nodes.push(UVPoint::new(xi * (1.0 - eta), eta));
            weights.push(wx * we * (1.0 - eta));
        }
    }
    QuadratureRule {
        order: 2 * n - 1,
        nodes,
        weights,
        exactness: 2 * n - 1,
        positive: true,
    }
}

/// Collapsed rule exact for every polynomial of total degree `< degree`.
pub fn collapsed_gauss_for_degree(degree: usize) -> QuadratureRule {
    collapsed_gauss(degree.div_ceil(2).max(1))
}
