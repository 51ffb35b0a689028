//! GMRES, the exterior Dirichlet combined-field solve and Green's identity checks.

use crate::eval::{precompute, FarAccelerator, QuadCache};
use crate::geometry::SurfaceMesh;
use crate::kernels::{greens, greens_gradient, KernelSpec};
use crate::quadrature::{NearParams, Target};
use crate::{Error, Result, Vec3, C64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Linear map on complex vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64]) -> Result<Vec<C64>>;
}

/// Dense matrix as an operator.
pub struct DenseOperator(pub DMatrix<C64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[C64]) -> Result<Vec<C64>> {
        let v = &self.0 * nalgebra::DVector::from_column_slice(x);
        Ok(v.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GmresResult {
    pub x: Vec<C64>,
    /// Relative residual after each iteration, starting with 1.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Unrestarted GMRES from a zero initial guess, modified Gram-Schmidt and
/// Givens rotations. Stops when the relative residual drops to `tol` or after
/// `maxit` iterations (then `converged` is false and the best iterate is returned).
pub fn gmres(op: &dyn LinearOperator, rhs: &[C64], tol: f64, maxit: usize) -> Result<GmresResult> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::Argument(format!("rhs has {} entries, operator dimension is {n}", rhs.len())));
    }
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return Ok(GmresResult {
            x: vec![C64::new(0.0, 0.0); n],
            residuals: vec![0.0],
            iterations: 0,
            converged: true,
        });
    }
    let mut basis: Vec<Vec<C64>> = vec![rhs.iter().map(|z| z / bnorm).collect()];
    let mut h: Vec<Vec<C64>> = Vec::new();
    let mut cs: Vec<C64> = Vec::new();
    let mut sn: Vec<C64> = Vec::new();
    let mut g = vec![C64::new(bnorm, 0.0)];
    let mut residuals = vec![1.0];
    let mut converged = false;
    let maxit = maxit.min(n.max(1));
    for j in 0..maxit {
        let mut w = op.apply(&basis[j])?;
        let mut col = vec![C64::new(0.0, 0.0); j + 2];
        for (i, v) in basis.iter().enumerate() {
            let hij = dot(v, &w);
            col[i] = hij;
            for (wk, vk) in w.iter_mut().zip(v) {
                *wk -= hij * vk;
            }
        }
        let hn = norm(&w);
        col[j + 1] = C64::new(hn, 0.0);
        for i in 0..j {
            let t = cs[i].conj() * col[i] + sn[i].conj() * col[i + 1];
            col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
            col[i] = t;
        }
        let (a, b) = (col[j], col[j + 1]);
        let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (c, s) = if r == 0.0 {
            (C64::new(1.0, 0.0), C64::new(0.0, 0.0))
        } else {
            (a / r, b / r)
        };
        col[j] = C64::new(r, 0.0);
        col[j + 1] = C64::new(0.0, 0.0);
        cs.push(c);
        sn.push(s);
        let gj = g[j];
        g[j] = c.conj() * gj;
        g.push(-s * gj);
        h.push(col);
        let rel = g[j + 1].norm() / bnorm;
        residuals.push(rel);
        let breakdown = hn <= 1e-14 * bnorm.max(1.0) * r.max(1e-300);
        if rel <= tol || breakdown {
            converged = rel <= tol || breakdown;
            break;
        }
        basis.push(w.iter().map(|z| z / hn).collect());
    }
    let m = h.len();
    let mut y = vec![C64::new(0.0, 0.0); m];
    for i in (0..m).rev() {
        let mut s = g[i];
        for k in i + 1..m {
            s -= h[k][i] * y[k];
        }
        y[i] = if h[i][i].norm() > 0.0 { s / h[i][i] } else { C64::new(0.0, 0.0) };
    }
    let mut x = vec![C64::new(0.0, 0.0); n];
    for (yi, v) in y.iter().zip(&basis) {
        for (xk, vk) in x.iter_mut().zip(v) {
            *xk += yi * vk;
        }
    }
    Ok(GmresResult {
        x,
        iterations: m,
        converged,
        residuals,
    })
}

/// `diag · I + K` for kernel `kernel` of a cache, restricted to surface nodes.
pub struct LayerOperator<'a, 'm> {
    pub cache: &'a QuadCache<'m>,
    pub kernel: usize,
    pub diag: C64,
    pub acc: &'a dyn FarAccelerator,
}

impl LinearOperator for LayerOperator<'_, '_> {
    fn dim(&self) -> usize {
        self.cache.n_nodes()
    }

    fn apply(&self, x: &[C64]) -> Result<Vec<C64>> {
        let pot = self.cache.apply(x, self.kernel, self.acc)?;
        Ok(pot.surface().iter().zip(x).map(|(p, s)| p + self.diag * s).collect())
    }
}

/// Result of a combined-field solve. The cache holds the representation
/// kernel `D_k - ik S_k` and any registered exterior targets.
pub struct CfieSolution<'m> {
    pub k: C64,
    pub sigma: Vec<C64>,
    pub gmres: GmresResult,
    pub cache: QuadCache<'m>,
}

impl<'m> CfieSolution<'m> {
    /// Field at the exterior points registered before the solve.
    pub fn field_at_registered(&self, acc: &dyn FarAccelerator) -> Result<Vec<C64>> {
        Ok(self.cache.apply(&self.sigma, 0, acc)?.off_surface().to_vec())
    }

    /// Field at new exterior points; their near rows are built on demand.
    pub fn evaluate(&mut self, points: &[Vec3], acc: &dyn FarAccelerator) -> Result<Vec<C64>> {
        let ids = self
            .cache
            .extend_targets(&points.iter().map(|p| Target::point(*p)).collect::<Vec<_>>())?;
        let pot = self.cache.apply(&self.sigma, 0, acc)?;
        Ok(pot.values[ids].to_vec())
    }
}

/// Solves `σ/2 + D_k σ - ik S_k σ = f` on a closed mesh. `exterior` points are
/// registered with the cache so the field there is available afterwards.
pub fn solve_dirichlet_cfie<'m>(
    mesh: &'m SurfaceMesh,
    k: C64,
    f: &[C64],
    params: NearParams,
    exterior: &[Vec3],
    acc: &dyn FarAccelerator,
    maxit: usize,
) -> Result<CfieSolution<'m>> {
    if k.im < 0.0 {
        return Err(Error::Argument("wavenumber must have Im k >= 0".into()));
    }
    if f.len() != mesh.len() {
        return Err(Error::Argument("boundary data must have one value per node".into()));
    }
    let targets: Vec<Target> = exterior.iter().map(|p| Target::point(*p)).collect();
    let cache = precompute(mesh, &[KernelSpec::cfie(k)], params, &targets)?;
    let op = LayerOperator {
        cache: &cache,
        kernel: 0,
        diag: C64::new(0.5, 0.0),
        acc,
    };
    let res = gmres(&op, f, params.eps, maxit)?;
    if !res.converged {
        log::warn!(
            "GMRES stopped after {} iterations at relative residual {:.3e}",
            res.iterations,
            res.residuals.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(CfieSolution {
        k,
        sigma: res.x.clone(),
        gmres: res,
        cache,
    })
}

/// Field of unit point sources, `Σ_i G_k(x, s_i)`.
pub fn point_source_field(k: C64, sources: &[Vec3], x: &Vec3) -> Result<C64> {
    sources.iter().map(|s| greens(k, x, s)).sum()
}

/// `n · ∇_x Σ_i G_k(x, s_i)`.
pub fn point_source_normal_derivative(k: C64, sources: &[Vec3], x: &Vec3, n: &Vec3) -> Result<C64> {
    let mut acc = C64::new(0.0, 0.0);
    for s in sources {
        let g = greens_gradient(k, x, s)?;
        acc += g[0] * n.x + g[1] * n.y + g[2] * n.z;
    }
    Ok(acc)
}

/// Relative L² error of `u/2 = S_k[∂u/∂n] - D_k[u]` on the surface, for the
/// interior solution generated by the exterior point `sources`.
pub fn greens_identity_error(
    mesh: &SurfaceMesh,
    k: C64,
    sources: &[Vec3],
    params: NearParams,
    acc: &dyn FarAccelerator,
) -> Result<f64> {
    let u: Vec<C64> = mesh
        .nodes()
        .iter()
        .map(|n| point_source_field(k, sources, &n.x))
        .collect::<Result<_>>()?;
    let dudn: Vec<C64> = mesh
        .nodes()
        .iter()
        .map(|n| point_source_normal_derivative(k, sources, &n.x, &n.normal))
        .collect::<Result<_>>()?;
    let cache = precompute(mesh, &[KernelSpec::single(k), KernelSpec::double(k)], params, &[])?;
    let s = cache.apply(&dudn, 0, acc)?;
    let d = cache.apply(&u, 1, acc)?;
    let resid: Vec<C64> = (0..mesh.len()).map(|i| 0.5 * u[i] - s.values[i] + d.values[i]).collect();
    Ok(mesh.l2_norm(&resid) / mesh.l2_norm(&u))
}

/// Winding number of the surface about `x` from the smooth rule, `-D_0[1](x)`.
pub fn winding_number(mesh: &SurfaceMesh, x: &Vec3) -> f64 {
    let d = KernelSpec::laplace_double();
    -mesh
        .nodes()
        .iter()
        .map(|n| d.eval(x, &n.x, &n.normal, &Vec3::zeros()).re * n.weight)
        .sum::<f64>()
}

fn bounding_sphere(mesh: &SurfaceMesh) -> (Vec3, f64) {
    let nodes = mesh.nodes();
    let c = nodes.iter().fold(Vec3::zeros(), |a, n| a + n.x) / nodes.len().max(1) as f64;
    let r = nodes.iter().map(|n| (n.x - c).norm()).fold(0.0, f64::max);
    (c, r)
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `n` seeded points inside a closed mesh, at depth at least half the
/// estimated inradius (the deepest of a few thousand random candidates).
pub fn interior_sources(mesh: &SurfaceMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    let (c, r) = bounding_sphere(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = |x: &Vec3| mesh.nodes().iter().map(|m| (m.x - x).norm()).fold(f64::INFINITY, f64::min);
    let mut inside = Vec::new();
    for _ in 0..4000 {
        let x = c + r * rng.gen::<f64>().cbrt() * random_direction(&mut rng);
        if winding_number(mesh, &x) > 0.5 {
            inside.push((x, depth(&x)));
        }
    }
    let inradius = inside.iter().map(|p| p.1).fold(0.0, f64::max);
    let deep: Vec<Vec3> = inside.iter().filter(|p| p.1 >= 0.5 * inradius).map(|p| p.0).collect();
    if deep.len() < n {
        return Err(Error::Geometry(format!("found only {} interior points", deep.len())));
    }
    Ok((0..n).map(|i| deep[(i * deep.len()) / n]).collect())
}

/// `n` seeded points on the sphere of 1.5 times the bounding radius.
pub fn exterior_sources(mesh: &SurfaceMesh, n: usize, seed: u64) -> Vec<Vec3> {
    let (c, r) = bounding_sphere(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| c + 1.5 * r * random_direction(&mut rng)).collect()
}
