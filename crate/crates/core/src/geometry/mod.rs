//! Curvilinear triangular patches and surfaces assembled from them.
//!
//! Each patch is a chart `X: T0 -> R^3` stored as Koornwinder coefficients of
//! the same order `p` used for densities. Discretization nodes are the images
//! of the order-`p` interpolation nodes.

mod generators;
mod io;

pub use generators::{gen_sphere, gen_sphere_with, gen_stellarator, stellarator_point, SphereBase};
pub use generators::gen_stellarator_with;
pub use io::{flat_mesh, format_kpatch, import_flat_tri, load_kpatch, parse_flat_tri, parse_kpatch, save_kpatch};

use crate::basis::{check_domain, KoornwinderBasis, RuleLibrary, UVPoint};
use crate::{Error, Result, Vec3};
use sha2::{Digest, Sha256};

/// Inflation applied to the sampled enclosing radius.
pub const RADIUS_INFLATION: f64 = 0.05;

/// Jacobians below this are treated as degenerate.
pub const MIN_JACOBIAN: f64 = 1e-14;

/// Chart position, tangents, unit normal and area element at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartJet {
    pub x: Vec3,
    pub xu: Vec3,
    pub xv: Vec3,
    pub normal: Vec3,
    pub jac: f64,
}

impl ChartJet {
    /// Assembles a jet from basis values and derivatives; no degeneracy check.
    #[inline]
    pub fn from_basis(coeffs: &[Vec3], val: &[f64], du: &[f64], dv: &[f64]) -> Self {
        let mut x = Vec3::zeros();
        let mut xu = Vec3::zeros();
        let mut xv = Vec3::zeros();
        for (i, c) in coeffs.iter().enumerate() {
            x += c * val[i];
            xu += c * du[i];
            xv += c * dv[i];
        }
        let cr = xu.cross(&xv);
        let jac = cr.norm();
        let normal = if jac > 0.0 { cr / jac } else { Vec3::zeros() };
        Self { x, xu, xv, normal, jac }
    }

    /// Eigenvalues `(σ1, σ2)`, `σ1 >= σ2`, of the first fundamental form.
    pub fn metric_eigenvalues(&self) -> (f64, f64) {
        let e = self.xu.dot(&self.xu);
        let f = self.xu.dot(&self.xv);
        let g = self.xv.dot(&self.xv);
        let mean = 0.5 * (e + g);
        let disc = (0.25 * (e - g) * (e - g) + f * f).sqrt();
        (mean + disc, mean - disc)
    }
}

/// One curvilinear triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: usize,
    pub order: usize,
    /// Koornwinder coefficients of the chart, one 3-vector per basis function.
    pub coeffs: Vec<Vec3>,
    pub centroid: Vec3,
    pub radius: f64,
    /// Far-field quadrature order; equals `order` until the quadrature stage sets it.
    pub far_order: usize,
    pub aspect: f64,
}

impl Patch {
    /// Fits a chart through `pts`, the images of the order-`p` interpolation nodes.
    pub fn from_samples(id: usize, p: usize, pts: &[Vec3], lib: &RuleLibrary) -> Result<Self> {
        let set = lib.nodes(p)?;
        if pts.len() != set.len() {
            return Err(Error::Argument(format!(
                "order {p} needs {} samples, got {}",
                set.len(),
                pts.len()
            )));
        }
        let n = set.len();
        let coeffs: Vec<Vec3> = (0..n)
            .map(|b| {
                (0..n).fold(Vec3::zeros(), |acc, j| acc + pts[j] * set.matrix_v[(b, j)])
            })
            .collect();
        Self::from_coeffs(id, p, coeffs, lib)
    }

    /// Builds a patch from chart coefficients, checking non-degeneracy at the nodes.
    pub fn from_coeffs(id: usize, p: usize, coeffs: Vec<Vec3>, lib: &RuleLibrary) -> Result<Self> {
        let set = lib.nodes(p)?;
        if coeffs.len() != set.len() {
            return Err(Error::Argument(format!(
                "order {p} needs {} coefficients, got {}",
                set.len(),
                coeffs.len()
            )));
        }
        let mut patch = Patch {
            id,
            order: p,
            coeffs,
            centroid: Vec3::zeros(),
            radius: 0.0,
            far_order: p,
            aspect: 1.0,
        };
        let jets = patch.jets_at(&set.nodes);
        if let Some((i, j)) = jets
            .iter()
            .enumerate()
            .find(|(_, j)| !(j.jac > MIN_JACOBIAN))
        {
            return Err(Error::Geometry(format!(
                "patch {id}: Jacobian {:e} at node {i}",
                j.jac
            )));
        }
        let (c, r) = patch.centroid_radius(lib)?;
        patch.centroid = c;
        patch.radius = r;
        patch.aspect = patch.aspect_ratio(lib)?;
        Ok(patch)
    }

    pub fn basis_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Jet at `pt`, rejecting points outside the triangle and degenerate charts.
    pub fn chart_eval(&self, pt: UVPoint) -> Result<ChartJet> {
        check_domain(pt)?;
        let jet = self.jet_unchecked(pt);
        if !(jet.jac >= MIN_JACOBIAN) {
            return Err(Error::Geometry(format!(
                "patch {}: Jacobian {:e} at ({}, {})",
                self.id, jet.jac, pt.u, pt.v
            )));
        }
        Ok(jet)
    }

    /// Jet without domain or degeneracy checks.
    pub fn jet_unchecked(&self, pt: UVPoint) -> ChartJet {
        let basis = KoornwinderBasis::new(self.order);
        let n = basis.count();
        let (mut val, mut du, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        basis.eval_derivs_into(pt.u, pt.v, &mut val, &mut du, &mut dv);
        ChartJet::from_basis(&self.coeffs, &val, &du, &dv)
    }

    /// Chart position only.
    pub fn point(&self, pt: UVPoint) -> Vec3 {
        let basis = KoornwinderBasis::new(self.order);
        let mut val = vec![0.0; basis.count()];
        basis.eval_into(pt.u, pt.v, &mut val);
        self.coeffs
            .iter()
            .zip(&val)
            .fold(Vec3::zeros(), |acc, (c, v)| acc + c * *v)
    }

    pub fn jets_at(&self, pts: &[UVPoint]) -> Vec<ChartJet> {
        let basis = KoornwinderBasis::new(self.order);
        let n = basis.count();
        let (mut val, mut du, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        pts.iter()
            .map(|pt| {
                basis.eval_derivs_into(pt.u, pt.v, &mut val, &mut du, &mut dv);
                ChartJet::from_basis(&self.coeffs, &val, &du, &dv)
            })
            .collect()
    }

    /// `∫_{T0} X du dv` exactly as written, without dividing by `|T0|`.
    pub fn centroid_unnormalized(&self, lib: &RuleLibrary) -> Result<Vec3> {
        let rule = lib.quadrature(self.order)?;
        Ok(rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .fold(Vec3::zeros(), |acc, (x, w)| acc + self.point(*x) * *w))
    }

    /// Centroid (parametric mean of the chart) and inflated enclosing radius.
    pub fn centroid_radius(&self, lib: &RuleLibrary) -> Result<(Vec3, f64)> {
        let c = self.centroid_unnormalized(lib)? * 2.0;
        let rmax = radius_samples()
            .iter()
            .map(|s| (self.point(*s) - c).norm())
            .fold(0.0, f64::max);
        Ok((c, (1.0 + RADIUS_INFLATION) * rmax))
    }

    /// Root-mean-square ratio of first-fundamental-form eigenvalues, area weighted.
    pub fn aspect_ratio(&self, lib: &RuleLibrary) -> Result<f64> {
        let rule = lib.quadrature(self.order)?;
        let jets = self.jets_at(&rule.nodes);
        let mut num = 0.0;
        let mut den = 0.0;
        for (jet, w) in jets.iter().zip(&rule.weights) {
            let (s1, s2) = jet.metric_eigenvalues();
            if !(s2 > 0.0) {
                return Err(Error::Geometry(format!(
                    "patch {}: degenerate first fundamental form",
                    self.id
                )));
            }
            num += w * jet.jac * (s1 / s2).powi(2);
            den += w * jet.jac;
        }
        Ok((num / den).sqrt())
    }

    /// Area via the order-`q` rule.
    pub fn area(&self, q: usize, lib: &RuleLibrary) -> Result<f64> {
        Ok(self.oversample(q, lib)?.iter().map(|n| n.weight).sum())
    }

    /// Chart jets at the order-`q` quadrature nodes with weights `w * J`.
    pub fn oversample(&self, q: usize, lib: &RuleLibrary) -> Result<Vec<OversampledNode>> {
        let rule = lib.quadrature(q)?;
        let jets = self.jets_at(&rule.nodes);
        jets.iter()
            .zip(&rule.weights)
            .enumerate()
            .map(|(i, (jet, w))| {
                if !(jet.jac >= MIN_JACOBIAN) {
                    return Err(Error::Geometry(format!(
                        "patch {}: Jacobian {:e} at order-{q} node {i}",
                        self.id, jet.jac
                    )));
                }
                Ok(OversampledNode {
                    x: jet.x,
                    normal: jet.normal,
                    weight: w * jet.jac,
                })
            })
            .collect()
    }
}

/// Sample points used for the enclosing radius: the 45-point degree-8
/// barycentric lattice plus 32 points per edge.
pub fn radius_samples() -> Vec<UVPoint> {
    let mut pts = Vec::with_capacity(45 + 96);
    for j in 0..=8 {
        for i in 0..=(8 - j) {
            pts.push(UVPoint::new(i as f64 / 8.0, j as f64 / 8.0));
        }
    }
    for k in 0..32 {
        let t = (k as f64 + 0.5) / 32.0;
        pts.push(UVPoint::new(t, 0.0));
        pts.push(UVPoint::new(0.0, t));
        pts.push(UVPoint::new(t, 1.0 - t));
    }
    pts
}

/// Free-function form of [`Patch::oversample`].
pub fn oversample_patch(patch: &Patch, q: usize, lib: &RuleLibrary) -> Result<Vec<OversampledNode>> {
    patch.oversample(q, lib)
}

/// A quadrature node on the surface with its combined weight `w * J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OversampledNode {
    pub x: Vec3,
    pub normal: Vec3,
    pub weight: f64,
}

/// Discretization node of a surface mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceNode {
    pub x: Vec3,
    pub normal: Vec3,
    pub jac: f64,
    /// Smooth-rule weight `w * J`.
    pub weight: f64,
    pub patch: usize,
    pub local: usize,
    pub uv: UVPoint,
}

/// A surface made of patches of a common order.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    order: usize,
    patches: Vec<Patch>,
    nodes: Vec<SurfaceNode>,
}

impl SurfaceMesh {
    pub fn new(order: usize, patches: Vec<Patch>, lib: &RuleLibrary) -> Result<Self> {
        let set = lib.nodes(order)?;
        let weights = set.smooth_weights();
        let mut nodes = Vec::with_capacity(patches.len() * set.len());
        for (j, patch) in patches.iter().enumerate() {
            if patch.order != order {
                return Err(Error::Argument(format!(
                    "patch {j} has order {}, mesh order is {order}",
                    patch.order
                )));
            }
            for (l, (jet, (uv, w))) in patch
                .jets_at(&set.nodes)
                .into_iter()
                .zip(set.nodes.iter().zip(&weights))
                .enumerate()
            {
                nodes.push(SurfaceNode {
                    x: jet.x,
                    normal: jet.normal,
                    jac: jet.jac,
                    weight: w * jet.jac,
                    patch: j,
                    local: l,
                    uv: *uv,
                });
            }
        }
        let mut patches = patches;
        for (j, p) in patches.iter_mut().enumerate() {
            p.id = j;
        }
        Ok(Self {
            order,
            patches,
            nodes,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn patches_mut(&mut self) -> &mut [Patch] {
        &mut self.patches
    }

    pub fn nodes(&self) -> &[SurfaceNode] {
        &self.nodes
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    /// Number of nodes per patch, `n_p`.
    pub fn nodes_per_patch(&self) -> usize {
        self.order * (self.order + 1) / 2
    }

    /// Total number of discretization nodes `N = Npat * n_p`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn patch_node_range(&self, j: usize) -> std::ops::Range<usize> {
        let n = self.nodes_per_patch();
        j * n..(j + 1) * n
    }

    pub fn area(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight).sum()
    }

    /// `(1/3) ∫ x · n da`; positive for closed surfaces with outward normals.
    pub fn signed_volume(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight * n.x.dot(&n.normal)).sum::<f64>() / 3.0
    }

    pub fn min_jacobian(&self) -> f64 {
        self.nodes.iter().map(|n| n.jac).fold(f64::INFINITY, f64::min)
    }

    /// Largest enclosing radius, used as the mesh size `h`.
    pub fn max_radius(&self) -> f64 {
        self.patches.iter().map(|p| p.radius).fold(0.0, f64::max)
    }

    /// `(a_max, a_avg)`.
    pub fn aspect_stats(&self) -> (f64, f64) {
        let amax = self.patches.iter().map(|p| p.aspect).fold(0.0, f64::max);
        let aavg = self.patches.iter().map(|p| p.aspect).sum::<f64>() / self.patches.len().max(1) as f64;
        (amax, aavg)
    }

    /// Content hash over the order and chart coefficients.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.order as u64).to_le_bytes());
        h.update((self.patches.len() as u64).to_le_bytes());
        for p in &self.patches {
            for c in &p.coeffs {
                for v in c.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    /// L2 norm of node values with the smooth-rule weights.
    pub fn l2_norm<T: Copy + Into<num_complex::Complex64>>(&self, vals: &[T]) -> f64 {
        self.nodes
            .iter()
            .zip(vals)
            .map(|(n, v)| n.weight * (*v).into().norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}
