//! Orthonormal polynomials on the reference triangle.
//!
//! `K_nm(u,v) = c_nm (1-v)^m P_{n-m}^{(0,2m+1)}(1-2v) P_m((2u+v-1)/(1-v))`, with
//! `m <= n < p`. The factor `(1-v)^m P_m(s/(1-v))` is generated by the
//! homogeneous form of the Legendre recurrence in `s = 2u+v-1` and `t = 1-v`,
//! so nothing is divided by `1-v` and the apex `v = 1` needs no special case.

use super::UVPoint;
use crate::{Error, Result};

/// Tolerance used when deciding whether a point lies in the reference triangle.
pub const DOMAIN_TOL: f64 = 1e-13;

/// Number of basis functions of total degree `< p`.
#[inline]
pub fn basis_count(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Position of `K_nm` in the lexicographic `(n, m)` ordering.
#[inline]
pub fn basis_index(n: usize, m: usize) -> usize {
    debug_assert!(m <= n);
    n * (n + 1) / 2 + m
}

/// `(n, m)` pairs in storage order.
pub fn basis_degrees(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|n| (0..=n).map(move |m| (n, m))).collect()
}

/// Normalization constant making `K_nm` unit-norm on the reference triangle.
#[inline]
pub fn norm_constant(n: usize, m: usize) -> f64 {
    (2.0 * (2 * m + 1) as f64 * (n + 1) as f64).sqrt()
}

/// The Koornwinder basis of a fixed order.
#[derive(Debug, Clone)]
pub struct KoornwinderBasis {
    order: usize,
    norms: Vec<f64>,
}

impl KoornwinderBasis {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "basis order must be positive");
        let norms = basis_degrees(order)
            .into_iter()
            .map(|(n, m)| norm_constant(n, m))
            .collect();
        Self { order, norms }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `n_p = p(p+1)/2`.
    pub fn count(&self) -> usize {
        self.norms.len()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Checked evaluation of all basis functions at `pt`.
    pub fn eval(&self, pt: UVPoint) -> Result<Vec<f64>> {
        check_domain(pt)?;
        let mut out = vec![0.0; self.count()];
        self.eval_into(pt.u, pt.v, &mut out);
        Ok(out)
    }

    /// Checked evaluation of values and first derivatives.
    pub fn eval_derivs(&self, pt: UVPoint) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        check_domain(pt)?;
        let n = self.count();
        let (mut val, mut du, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        self.eval_derivs_into(pt.u, pt.v, &mut val, &mut du, &mut dv);
        Ok((val, du, dv))
    }

    /// Unchecked evaluation into a caller-provided buffer of length `count()`.
    pub fn eval_into(&self, u: f64, v: f64, out: &mut [f64]) {
        let p = self.order;
        let s = 2.0 * u + v - 1.0;
        let t = 1.0 - v;
        let y = 1.0 - 2.0 * v;
        let mut q_prev = 0.0;
        let mut q = 1.0;
        for m in 0..p {
            let b = (2 * m + 1) as f64;
            let mut j_prev = 0.0;
            let mut j = 1.0;
            for k in 0..(p - m) {
                let n = m + k;
                out[basis_index(n, m)] = self.norms[basis_index(n, m)] * j * q;
                let (j_next, _) = jacobi_step(k, b, y, j, j_prev, 0.0, 0.0);
                j_prev = j;
                j = j_next;
            }
            let mf = m as f64;
            let q_next = ((2.0 * mf + 1.0) * s * q - mf * t * t * q_prev) / (mf + 1.0);
            q_prev = q;
            q = q_next;
        }
    }

    /// Unchecked evaluation of values and `u`/`v` partial derivatives.
    pub fn eval_derivs_into(
        &self,
        u: f64,
        v: f64,
        val: &mut [f64],
        du: &mut [f64],
        dv: &mut [f64],
    ) {
        let p = self.order;
        let s = 2.0 * u + v - 1.0;
        let t = 1.0 - v;
        let y = 1.0 - 2.0 * v;
        // scaled Legendre factor and its partials in s and t
        let (mut q_prev, mut qs_prev, mut qt_prev) = (0.0, 0.0, 0.0);
        let (mut q, mut qs, mut qt) = (1.0, 0.0, 0.0);
        for m in 0..p {
            let b = (2 * m + 1) as f64;
            let (mut j_prev, mut jd_prev) = (0.0, 0.0);
            let (mut j, mut jd) = (1.0, 0.0);
            for k in 0..(p - m) {
                let idx = basis_index(m + k, m);
                let c = self.norms[idx];
                val[idx] = c * j * q;
                du[idx] = c * j * 2.0 * qs;
                dv[idx] = c * (-2.0 * jd * q + j * (qs - qt));
                let (j_next, jd_next) = jacobi_step(k, b, y, j, j_prev, jd, jd_prev);
                j_prev = j;
                jd_prev = jd;
                j = j_next;
                jd = jd_next;
            }
            let mf = m as f64;
            let a = 2.0 * mf + 1.0;
            let q_next = (a * s * q - mf * t * t * q_prev) / (mf + 1.0);
            let qs_next = (a * (q + s * qs) - mf * t * t * qs_prev) / (mf + 1.0);
            let qt_next = (a * s * qt - mf * (2.0 * t * q_prev + t * t * qt_prev)) / (mf + 1.0);
            q_prev = q;
            qs_prev = qs;
            qt_prev = qt;
            q = q_next;
            qs = qs_next;
            qt = qt_next;
        }
    }
}

/// One step of the three-term recurrence for `P_k^{(0,b)}(y)` and its derivative:
/// returns `(P_{k+1}, P'_{k+1})` given `P_k`, `P_{k-1}` and their derivatives.
#[inline]
fn jacobi_step(k: usize, b: f64, y: f64, pk: f64, pkm1: f64, dk: f64, dkm1: f64) -> (f64, f64) {
    if k == 0 {
        let c = 0.5 * (b + 2.0);
        return (1.0 + c * (y - 1.0), c);
    }
    let kf = k as f64;
    let two_kb = 2.0 * kf + b;
    let den = 2.0 * (kf + 1.0) * (kf + b + 1.0) * two_kb;
    let alpha = (two_kb + 1.0) * (two_kb + 2.0) * two_kb;
    let beta = -(two_kb + 1.0) * b * b;
    let gamma = 2.0 * kf * (kf + b) * (two_kb + 2.0);
    let next = ((alpha * y + beta) * pk - gamma * pkm1) / den;
    let dnext = (alpha * pk + (alpha * y + beta) * dk - gamma * dkm1) / den;
    (next, dnext)
}

/// Rejects points outside the reference triangle (beyond [`DOMAIN_TOL`]).
pub fn check_domain(pt: UVPoint) -> Result<()> {
    if !(pt.u.is_finite() && pt.v.is_finite())
        || pt.u < -DOMAIN_TOL
        || pt.v < -DOMAIN_TOL
        || pt.u + pt.v > 1.0 + DOMAIN_TOL
    {
        return Err(Error::Domain(format!(
            "point ({}, {}) lies outside the reference triangle",
            pt.u, pt.v
        )));
    }
    Ok(())
}

/// All `K_nm(u,v)` for `m <= n < p`.
pub fn eval_koornwinder(p: usize, pt: UVPoint) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(Error::Argument("order must be at least 1".into()));
    }
    KoornwinderBasis::new(p).eval(pt)
}

/// Values together with `d/du` and `d/dv`.
pub fn eval_koornwinder_derivs(p: usize, pt: UVPoint) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if p == 0 {
        return Err(Error::Argument("order must be at least 1".into()));
    }
    KoornwinderBasis::new(p).eval_derivs(pt)
}
