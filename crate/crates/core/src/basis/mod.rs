//! Polynomial machinery on the reference triangle `T0 = {u, v >= 0, u + v <= 1}`.

mod koornwinder;
mod nodes;
mod rules;
mod table;

pub use koornwinder::{
    basis_count, basis_degrees, basis_index, check_domain, eval_koornwinder,
    eval_koornwinder_derivs, norm_constant, KoornwinderBasis, DOMAIN_TOL,
};
pub use nodes::{build_interp_nodes, candidate_lattice_degree, InterpNodeSet, P_MAX};
pub use rules::{
    analytic_moments, build_quadrature, build_quadrature_capped, collapsed_gauss,
    collapsed_gauss_for_degree, gauss_legendre, verified_exactness, QuadratureRule,
    EXACTNESS_TOL, Q_MAX,
};
pub use table::{
    format_nodes, format_quadrature, load_quadrature_table, parse_table, save_nodes,
    save_quadrature, LoadedTable,
};

use crate::Result;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// A point of the reference triangle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UVPoint {
    pub u: f64,
    pub v: f64,
}

impl UVPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn in_triangle(&self, tol: f64) -> bool {
        self.u >= -tol && self.v >= -tol && self.u + self.v <= 1.0 + tol
    }
}

/// Lazily built, shared node sets and rules keyed by order.
///
/// Loaded tables registered with [`RuleLibrary::insert`] take precedence over
/// generated ones and lift the order caps for their order.
#[derive(Debug)]
pub struct RuleLibrary {
    p_max: usize,
    q_max: usize,
    nodes: Mutex<HashMap<usize, Arc<InterpNodeSet>>>,
    quads: Mutex<HashMap<usize, Arc<QuadratureRule>>>,
}

impl Default for RuleLibrary {
    fn default() -> Self {
        Self::new(P_MAX, Q_MAX)
    }
}

impl RuleLibrary {
    pub fn new(p_max: usize, q_max: usize) -> Self {
        Self {
            p_max,
            q_max,
            nodes: Mutex::new(HashMap::new()),
            quads: Mutex::new(HashMap::new()),
        }
    }

    /// Process-wide library with the default caps.
    pub fn global() -> &'static RuleLibrary {
        static LIB: OnceLock<RuleLibrary> = OnceLock::new();
        LIB.get_or_init(RuleLibrary::default)
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn q_max(&self) -> usize {
        self.q_max
    }

    pub fn nodes(&self, p: usize) -> Result<Arc<InterpNodeSet>> {
        let mut map = self.nodes.lock().expect("rule library poisoned");
        if let Some(s) = map.get(&p) {
            return Ok(s.clone());
        }
        let s = Arc::new(build_interp_nodes(p, self.p_max)?);
        map.insert(p, s.clone());
        Ok(s)
    }

    pub fn quadrature(&self, q: usize) -> Result<Arc<QuadratureRule>> {
        let mut map = self.quads.lock().expect("rule library poisoned");
        if let Some(r) = map.get(&q) {
            return Ok(r.clone());
        }
        let r = Arc::new(build_quadrature_capped(q, self.q_max)?);
        map.insert(q, r.clone());
        Ok(r)
    }

    /// Registers a loaded table, replacing any rule of the same order.
    pub fn insert(&self, table: LoadedTable) {
        match table {
            LoadedTable::Quadrature(r) => {
                self.quads
                    .lock()
                    .expect("rule library poisoned")
                    .insert(r.order, Arc::new(r));
            }
            LoadedTable::Nodes(s) => {
                self.nodes
                    .lock()
                    .expect("rule library poisoned")
                    .insert(s.order, Arc::new(s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matrix_is_identity() {
        for p in 1..=P_MAX {
            let rule = collapsed_gauss_for_degree(2 * p);
            let basis = KoornwinderBasis::new(p);
            let n = basis.count();
            let mut gram = vec![0.0; n * n];
            let mut vals = vec![0.0; n];
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                basis.eval_into(x.u, x.v, &mut vals);
                for i in 0..n {
                    for j in 0..n {
                        gram[i * n + j] += w * vals[i] * vals[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[i * n + j] - want).abs() < 1e-12, "p={p} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn library_prefers_loaded_tables() {
        let lib = RuleLibrary::new(4, 4);
        assert!(lib.quadrature(6).is_err());
        let mut r = build_quadrature(6).unwrap();
        r.order = 6;
        lib.insert(LoadedTable::Quadrature(r.clone()));
        assert_eq!(*lib.quadrature(6).unwrap(), r);
    }
}
