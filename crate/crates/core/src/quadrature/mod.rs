//! Per-patch quadrature: singular self interactions, far-field order
//! selection and adaptive near-field correction rows.
//!
//! Everything here works with Koornwinder moment vectors
//! `I_b(x) = ∫_{T0} K(x, X(u,v)) K_b(u,v) J(u,v) du dv`. A row mapping node
//! values of the density to a potential is `a(x) = Vᵀ I(x)`.

mod dump;
mod singular;

pub use dump::{read_dump, write_dump, DumpHeader, DUMP_MAGIC};

use crate::basis::{KoornwinderBasis, InterpNodeSet, QuadratureRule, RuleLibrary, UVPoint};
use crate::geometry::{ChartJet, Patch};
use crate::kernels::KernelSpec;
use crate::{Error, Result, Vec3, C64};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Sub-triangles one adaptive integration may visit. Targets within a tiny
/// fraction of the patch size from the surface would otherwise refine rings of
/// millions of triangles before reaching the depth cap.
pub const MAX_ADAPTIVE_TRIANGLES: usize = 50_000;

/// Near-field multiplier recommended for order `p`.
pub fn default_eta(p: usize) -> f64 {
    match p {
        0..=4 => 2.75,
        5..=8 => 2.0,
        _ => 1.25,
    }
}

/// Accuracy and geometry parameters of the local quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearParams {
    pub eps: f64,
    pub eta: f64,
    /// Targets within `eta1 * R_j` use adaptive integration.
    pub eta1: f64,
    pub max_levels: usize,
    /// Factor applied to `eps` in the subdivision test.
    pub adaptive_inflation: f64,
    /// Order of the rule used on each adaptive sub-triangle; 0 means `p + 2`.
    pub adaptive_order: usize,
}

impl NearParams {
    pub fn new(p: usize, eps: f64) -> Self {
        Self {
            eps,
            eta: default_eta(p),
            eta1: 1.25,
            max_levels: 30,
            adaptive_inflation: 5.0,
            adaptive_order: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Argument(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.eta1 >= 1.0 && self.eta >= self.eta1) {
            return Err(Error::Argument(format!(
                "need eta >= eta1 >= 1, got eta={} eta1={}",
                self.eta, self.eta1
            )));
        }
        if self.max_levels == 0 || self.max_levels > 31 {
            return Err(Error::Argument("max_levels must be in 1..=31".into()));
        }
        Ok(())
    }

    fn sub_order(&self, p: usize, q_max: usize) -> usize {
        if self.adaptive_order > 0 {
            self.adaptive_order
        } else {
            (p + 2).min(q_max)
        }
    }
}

/// Evaluation point with the normal used by target-normal kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub x: Vec3,
    pub normal: Vec3,
}

impl Target {
    pub fn new(x: Vec3, normal: Vec3) -> Self {
        Self { x, normal }
    }

    pub fn point(x: Vec3) -> Self {
        Self {
            x,
            normal: Vec3::zeros(),
        }
    }
}

/// Chart samples under some quadrature rule, with all basis values.
#[derive(Debug, Clone)]
pub struct RuleSamples {
    pub x: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    /// Parametric weight times Jacobian.
    pub wj: Vec<f64>,
    /// `basis[l * n_p + b] = K_b(u_l, v_l)`.
    pub basis: Vec<f64>,
    pub n_p: usize,
}

impl RuleSamples {
    /// Samples `patch` at parametric points with parametric weights.
    pub fn from_points(patch: &Patch, basis: &KoornwinderBasis, pts: &[UVPoint], wts: &[f64]) -> Self {
        let n_p = basis.count();
        let mut out = Self {
            x: Vec::with_capacity(pts.len()),
            normal: Vec::with_capacity(pts.len()),
            wj: Vec::with_capacity(pts.len()),
            basis: Vec::with_capacity(pts.len() * n_p),
            n_p,
        };
        let (mut val, mut du, mut dv) = (vec![0.0; n_p], vec![0.0; n_p], vec![0.0; n_p]);
        for (pt, w) in pts.iter().zip(wts) {
            basis.eval_derivs_into(pt.u, pt.v, &mut val, &mut du, &mut dv);
            let jet = ChartJet::from_basis(&patch.coeffs, &val, &du, &dv);
            out.x.push(jet.x);
            out.normal.push(jet.normal);
            out.wj.push(w * jet.jac);
            out.basis.extend_from_slice(&val);
        }
        out
    }

    /// Samples the sub-triangle `tri` of `T0` with `rule`.
    pub fn on_triangle(patch: &Patch, basis: &KoornwinderBasis, tri: &[UVPoint; 3], rule: &QuadratureRule) -> Self {
        let [a, b, c] = *tri;
        let det = ((b.u - a.u) * (c.v - a.v) - (b.v - a.v) * (c.u - a.u)).abs();
        let pts: Vec<UVPoint> = rule
            .nodes
            .iter()
            .map(|x| {
                UVPoint::new(
                    a.u + (b.u - a.u) * x.u + (c.u - a.u) * x.v,
                    a.v + (b.v - a.v) * x.u + (c.v - a.v) * x.v,
                )
            })
            .collect();
        let wts: Vec<f64> = rule.weights.iter().map(|w| w * det).collect();
        Self::from_points(patch, basis, &pts, &wts)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Adds the moment vectors of every kernel at `t` into `out`
    /// (`out[k * n_p + b]`).
    pub fn accumulate(&self, kernels: &[KernelSpec], t: &Target, out: &mut [C64]) {
        let n_p = self.n_p;
        for l in 0..self.x.len() {
            let row = &self.basis[l * n_p..(l + 1) * n_p];
            for (k, ker) in kernels.iter().enumerate() {
                let kv = ker.eval(&t.x, &self.x[l], &self.normal[l], &t.normal) * self.wj[l];
                for (o, &b) in out[k * n_p..(k + 1) * n_p].iter_mut().zip(row) {
                    *o += kv * b;
                }
            }
        }
    }
}

/// Largest per-kernel ℓ² norm of `a - b` over stacked moment vectors.
pub fn moment_diff(a: &[C64], b: &[C64], n_p: usize) -> f64 {
    a.chunks(n_p)
        .zip(b.chunks(n_p))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Counters of chart sampling work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Chart evaluations actually performed.
    pub evaluations: u64,
    /// Chart evaluations avoided by cache hits.
    pub saved: u64,
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    /// `(evaluations + saved) / evaluations`; 1 means no reuse.
    pub fn reuse_factor(&self) -> f64 {
        if self.evaluations == 0 {
            1.0
        } else {
            (self.evaluations + self.saved) as f64 / self.evaluations as f64
        }
    }

    pub fn merge(&mut self, other: &CacheStats) {
        self.evaluations += other.evaluations;
        self.saved += other.saved;
        self.hits += other.hits;
        self.misses += other.misses;
    }
}

/// Per-patch store of sampled sub-triangles keyed by subdivision path, plus
/// whole-patch samples keyed by rule order.
#[derive(Debug, Default)]
pub struct AdaptiveCache {
    enabled: bool,
    tris: HashMap<(u8, u64), Arc<RuleSamples>>,
    roots: HashMap<usize, Arc<RuleSamples>>,
    stats: CacheStats,
}

impl AdaptiveCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Default::default()
        }
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.tris.len() + self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_insert(
        &mut self,
        key: CacheKey,
        make: impl FnOnce() -> RuleSamples,
    ) -> Arc<RuleSamples> {
        let found = if self.enabled {
            match key {
                CacheKey::Tri(d, p) => self.tris.get(&(d, p)).cloned(),
                CacheKey::Root(q) => self.roots.get(&q).cloned(),
            }
        } else {
            None
        };
        if let Some(s) = found {
            self.stats.hits += 1;
            self.stats.saved += s.len() as u64;
            return s;
        }
        let s = Arc::new(make());
        self.stats.misses += 1;
        self.stats.evaluations += s.len() as u64;
        if self.enabled {
            match key {
                CacheKey::Tri(d, p) => {
                    self.tris.insert((d, p), s.clone());
                }
                CacheKey::Root(q) => {
                    self.roots.insert(q, s.clone());
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
enum CacheKey {
    Tri(u8, u64),
    Root(usize),
}

/// Counts of chart evaluations saved by a cache.
pub fn adaptive_stats(cache: &AdaptiveCache) -> CacheStats {
    cache.stats()
}

/// Outcome of one adaptive integration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdaptiveReport {
    pub triangles: usize,
    pub max_depth: usize,
    /// False when some triangle hit the depth cap before passing the test.
    pub converged: bool,
    /// Sum of parent-vs-children differences over accepted triangles.
    pub error_estimate: f64,
}

/// Result of far-order selection for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarOrder {
    pub patch: usize,
    pub q: usize,
    /// False when `q_max` was reached without meeting the tolerance.
    pub converged: bool,
    /// `min_ℓ sqrt(J_ℓ w_ℓ)` over the order-`p` nodes.
    pub d: f64,
    pub probes: Vec<[f64; 3]>,
}

/// Self-interaction blocks of one patch, one `n_p × n_p` matrix per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfMatrix {
    pub patch: usize,
    pub mats: Vec<DMatrix<C64>>,
}

/// Near-field rows of one patch, one `targets × n_p` matrix per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct NearMatrix {
    pub patch: usize,
    pub targets: Vec<usize>,
    pub mats: Vec<DMatrix<C64>>,
    /// Targets whose adaptive integration hit the depth cap.
    pub unconverged: Vec<usize>,
}

/// Spherical Fibonacci points on the sphere of radius `r` about `c`.
pub fn fibonacci_sphere(n: usize, c: Vec3, r: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let s = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            c + r * Vec3::new(s * phi.cos(), s * phi.sin(), z)
        })
        .collect()
}

/// Quadrature context of one patch for a fixed kernel list.
pub struct PatchQuad<'a> {
    pub patch: &'a Patch,
    pub kernels: &'a [KernelSpec],
    pub params: NearParams,
    lib: &'a RuleLibrary,
    set: Arc<InterpNodeSet>,
    basis: KoornwinderBasis,
    d: f64,
    tol: f64,
    pub cache: AdaptiveCache,
}

impl<'a> PatchQuad<'a> {
    pub fn new(
        patch: &'a Patch,
        kernels: &'a [KernelSpec],
        params: NearParams,
        lib: &'a RuleLibrary,
    ) -> Result<Self> {
        params.validate()?;
        if kernels.is_empty() {
            return Err(Error::Argument("no kernels requested".into()));
        }
        for k in kernels {
            k.validate()?;
        }
        let set = lib.nodes(patch.order)?;
        let w = set.smooth_weights();
        let jets = patch.jets_at(&set.nodes);
        let d = jets
            .iter()
            .zip(&w)
            .map(|(j, w)| (j.jac * w).max(0.0).sqrt())
            .fold(f64::INFINITY, f64::min);
        let tol = params.eps * d / set.norm_v;
        Ok(Self {
            patch,
            kernels,
            params,
            lib,
            basis: KoornwinderBasis::new(patch.order),
            set,
            d,
            tol,
            cache: AdaptiveCache::new(true),
        })
    }

    pub fn with_cache(mut self, enabled: bool) -> Self {
        self.cache = AdaptiveCache::new(enabled);
        self
    }

    pub fn n_p(&self) -> usize {
        self.basis.count()
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// Tolerance on moment differences, `eps * d_j / ‖V‖`.
    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn node_set(&self) -> &InterpNodeSet {
        &self.set
    }

    fn zero_moments(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); self.kernels.len() * self.n_p()]
    }

    fn root_samples(&mut self, q: usize) -> Result<Arc<RuleSamples>> {
        let rule = self.lib.quadrature(q)?;
        let (patch, basis) = (self.patch, &self.basis);
        Ok(self.cache.get_or_insert(CacheKey::Root(q), || {
            RuleSamples::from_points(patch, basis, &rule.nodes, &rule.weights)
        }))
    }

    /// Moments with the plain order-`q` rule on the whole patch.
    pub fn moments_fixed(&mut self, q: usize, t: &Target) -> Result<Vec<C64>> {
        let s = self.root_samples(q)?;
        let mut out = self.zero_moments();
        s.accumulate(self.kernels, t, &mut out);
        Ok(out)
    }

    /// Smallest `q >= p` whose moments agree with order `q + 1` at every probe.
    /// Returns `(q, converged)`.
    fn converged_order(&mut self, probes: &[Target]) -> Result<(usize, bool)> {
        let q_max = self.lib.q_max();
        let mut q = self.patch.order;
        let mut cur: Vec<Vec<C64>> = probes
            .iter()
            .map(|t| self.moments_fixed(q, t))
            .collect::<Result<_>>()?;
        while q < q_max {
            let next: Vec<Vec<C64>> = probes
                .iter()
                .map(|t| self.moments_fixed(q + 1, t))
                .collect::<Result<_>>()?;
            let diff = cur
                .iter()
                .zip(&next)
                .map(|(a, b)| moment_diff(a, b, self.n_p()))
                .fold(0.0, f64::max);
            if diff <= self.tol {
                return Ok((q, true));
            }
            q += 1;
            cur = next;
        }
        Ok((q_max.max(self.patch.order), false))
    }

    /// Far-field order from the probe construction over `near` targets.
    pub fn far_order(&mut self, near: &[Target]) -> Result<FarOrder> {
        let c = self.patch.centroid;
        let mut by_dist: Vec<&Target> = near.iter().collect();
        by_dist.sort_by(|a, b| {
            (b.x - c)
                .norm()
                .partial_cmp(&(a.x - c).norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut probes: Vec<Target> = if near.len() >= 20 {
            by_dist[..10].iter().map(|t| **t).collect()
        } else {
            by_dist[..near.len() / 2].iter().map(|t| **t).collect()
        };
        if near.len() < 20 {
            let r = self.params.eta * self.patch.radius;
            probes.extend(
                fibonacci_sphere(15, c, r)
                    .into_iter()
                    .map(|x| Target::new(x, (x - c) / r)),
            );
        }
        let (q, converged) = self.converged_order(&probes)?;
        if !converged {
            log::warn!(
                "patch {}: far order did not converge by q = {q}",
                self.patch.id
            );
        }
        Ok(FarOrder {
            patch: self.patch.id,
            q,
            converged,
            d: self.d,
            probes: probes.iter().map(|t| [t.x.x, t.x.y, t.x.z]).collect(),
        })
    }

    /// Adaptive moments by 4-way subdivision of `T0`.
    pub fn moments_adaptive(&mut self, t: &Target) -> Result<(Vec<C64>, AdaptiveReport)> {
        let q = self.params.sub_order(self.patch.order, self.lib.q_max());
        let rule = self.lib.quadrature(q)?;
        let root = [UVPoint::new(0.0, 0.0), UVPoint::new(1.0, 0.0), UVPoint::new(0.0, 1.0)];
        let mut report = AdaptiveReport {
            converged: true,
            ..Default::default()
        };
        let est = self.tri_moments(&root, 0, 0, &rule, t);
        let mut out = self.zero_moments();
        self.refine(&root, 0, 0, est, &rule, t, &mut out, &mut report);
        Ok((out, report))
    }

    fn tri_moments(
        &mut self,
        tri: &[UVPoint; 3],
        depth: usize,
        path: u64,
        rule: &QuadratureRule,
        t: &Target,
    ) -> Vec<C64> {
        let (patch, basis) = (self.patch, &self.basis);
        let s = self
            .cache
            .get_or_insert(CacheKey::Tri(depth as u8, path), || {
                RuleSamples::on_triangle(patch, basis, tri, rule)
            });
        let mut out = self.zero_moments();
        s.accumulate(self.kernels, t, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(
        &mut self,
        tri: &[UVPoint; 3],
        depth: usize,
        path: u64,
        est: Vec<C64>,
        rule: &QuadratureRule,
        t: &Target,
        out: &mut [C64],
        report: &mut AdaptiveReport,
    ) {
        report.triangles += 1;
        report.max_depth = report.max_depth.max(depth);
        let kids = children(tri);
        let kid_est: Vec<Vec<C64>> = kids
            .iter()
            .enumerate()
            .map(|(i, k)| self.tri_moments(k, depth + 1, path * 4 + i as u64, rule, t))
            .collect();
        let mut sum = self.zero_moments();
        for e in &kid_est {
            for (s, v) in sum.iter_mut().zip(e) {
                *s += v;
            }
        }
        let diff = moment_diff(&est, &sum, self.n_p());
        let area = tri_area(tri);
        let tol = self.params.adaptive_inflation * self.tol * area / 0.5;
        let exhausted = depth + 1 >= self.params.max_levels || report.triangles >= MAX_ADAPTIVE_TRIANGLES;
        if diff < tol || exhausted {
            if !(diff < tol) {
                report.converged = false;
            }
            report.error_estimate += diff;
            for (o, s) in out.iter_mut().zip(&sum) {
                *o += s;
            }
            return;
        }
        for (i, (k, e)) in kids.iter().zip(kid_est).enumerate() {
            self.refine(k, depth + 1, path * 4 + i as u64, e, rule, t, out, report);
        }
    }

    /// Converts stacked moment vectors into stacked rows `Vᵀ I`.
    pub fn rows_from_moments(&self, m: &[C64]) -> Vec<C64> {
        let n = self.n_p();
        let v = &self.set.matrix_v;
        let mut out = vec![C64::new(0.0, 0.0); m.len()];
        for (k, chunk) in m.chunks(n).enumerate() {
            for l in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for b in 0..n {
                    s += chunk[b] * v[(b, l)];
                }
                out[k * n + l] = s;
            }
        }
        out
    }

    /// Moments for one near target: adaptive inside `eta1 * R_j`, otherwise
    /// the smallest converged fixed order (adaptive if none converges).
    pub fn near_moments(&mut self, t: &Target) -> Result<(Vec<C64>, Option<AdaptiveReport>)> {
        let dist = (t.x - self.patch.centroid).norm();
        if dist > self.params.eta1 * self.patch.radius {
            let (q, ok) = self.converged_order(std::slice::from_ref(t))?;
            if ok {
                return Ok((self.moments_fixed(q, t)?, None));
            }
        }
        let (m, r) = self.moments_adaptive(t)?;
        Ok((m, Some(r)))
    }

    /// Correction rows for `targets` (ids and points), one matrix per kernel.
    pub fn near_matrix(&mut self, targets: &[(usize, Target)]) -> Result<NearMatrix> {
        let n = self.n_p();
        let nk = self.kernels.len();
        let mut mats = vec![DMatrix::from_element(targets.len(), n, C64::new(0.0, 0.0)); nk];
        let mut unconverged = Vec::new();
        for (i, (id, t)) in targets.iter().enumerate() {
            let (m, rep) = self.near_moments(t)?;
            if let Some(r) = rep {
                if !r.converged {
                    log::warn!(
                        "patch {}: adaptive integration for target {id} stopped at depth {} (estimate {:.2e})",
                        self.patch.id,
                        r.max_depth,
                        r.error_estimate
                    );
                    unconverged.push(*id);
                }
            }
            let rows = self.rows_from_moments(&m);
            for k in 0..nk {
                for l in 0..n {
                    mats[k][(i, l)] = rows[k * n + l];
                }
            }
        }
        Ok(NearMatrix {
            patch: self.patch.id,
            targets: targets.iter().map(|(id, _)| *id).collect(),
            mats,
            unconverged,
        })
    }

    /// Singular moments for a target on the patch with preimage `uv`.
    pub fn moments_singular(&self, uv: UVPoint, t: &Target) -> Result<Vec<C64>> {
        singular::singular_moments(self, uv, t)
    }

    /// Self-interaction matrices at the patch's own nodes.
    pub fn self_matrix(&self) -> Result<SelfMatrix> {
        let n = self.n_p();
        let nk = self.kernels.len();
        let mut mats = vec![DMatrix::from_element(n, n, C64::new(0.0, 0.0)); nk];
        let jets = self.patch.jets_at(&self.set.nodes);
        for (i, (uv, jet)) in self.set.nodes.iter().zip(&jets).enumerate() {
            let t = Target::new(jet.x, jet.normal);
            let m = self.moments_singular(*uv, &t).map_err(|e| match e {
                Error::Quadrature(msg) => Error::Quadrature(format!(
                    "patch {}, node {i}: {msg}",
                    self.patch.id
                )),
                other => other,
            })?;
            let rows = self.rows_from_moments(&m);
            for k in 0..nk {
                for l in 0..n {
                    mats[k][(i, l)] = rows[k * n + l];
                }
            }
        }
        Ok(SelfMatrix {
            patch: self.patch.id,
            mats,
        })
    }
}

fn mid(a: UVPoint, b: UVPoint) -> UVPoint {
    UVPoint::new(0.5 * (a.u + b.u), 0.5 * (a.v + b.v))
}

/// Four children at edge midpoints.
pub fn children(t: &[UVPoint; 3]) -> [[UVPoint; 3]; 4] {
    let [a, b, c] = *t;
    let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
    [[a, ab, ca], [ab, b, bc], [ca, bc, c], [bc, ca, ab]]
}

pub fn tri_area(t: &[UVPoint; 3]) -> f64 {
    let [a, b, c] = *t;
    0.5 * ((b.u - a.u) * (c.v - a.v) - (b.v - a.v) * (c.u - a.u)).abs()
}

/// Far-field order for `patch` given its near targets.
pub fn select_far_order(
    patch: &Patch,
    near: &[Target],
    kernels: &[KernelSpec],
    params: NearParams,
    lib: &RuleLibrary,
) -> Result<FarOrder> {
    PatchQuad::new(patch, kernels, params, lib)?.far_order(near)
}

pub fn self_matrix(
    patch: &Patch,
    kernels: &[KernelSpec],
    params: NearParams,
    lib: &RuleLibrary,
) -> Result<SelfMatrix> {
    PatchQuad::new(patch, kernels, params, lib)?.self_matrix()
}

pub fn near_matrix(
    patch: &Patch,
    targets: &[(usize, Target)],
    kernels: &[KernelSpec],
    params: NearParams,
    lib: &RuleLibrary,
    cache: bool,
) -> Result<(NearMatrix, CacheStats)> {
    let mut pq = PatchQuad::new(patch, kernels, params, lib)?.with_cache(cache);
    let m = pq.near_matrix(targets)?;
    Ok((m, pq.cache.stats()))
}
