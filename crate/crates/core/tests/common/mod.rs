#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use surfquad::basis::{gauss_legendre, RuleLibrary, UVPoint};
use surfquad::geometry::Patch;
use surfquad::kernels::KernelSpec;
use surfquad::quadrature::Target;
use surfquad::{Vec3, C64};

pub fn lib() -> &'static RuleLibrary {
    RuleLibrary::global()
}

pub fn patch_from_map(p: usize, f: impl Fn(UVPoint) -> Vec3) -> Patch {
    let set = lib().nodes(p).unwrap();
    let pts: Vec<Vec3> = set.nodes.iter().map(|x| f(*x)).collect();
    Patch::from_samples(0, p, &pts, lib()).unwrap()
}

/// Random quadratic patch of size about `scale` with a random affine frame.
pub fn random_patch(p: usize, scale: f64, rng: &mut ChaCha8Rng) -> Patch {
    let mut r = || rng.gen::<f64>() * 2.0 - 1.0;
    let e1 = Vec3::new(1.0 + 0.3 * r(), 0.2 * r(), 0.1 * r());
    let e2 = Vec3::new(0.3 * r(), 1.0 + 0.3 * r(), 0.1 * r());
    let n = e1.cross(&e2).normalize();
    let c = [0.3 * r(), 0.3 * r(), 0.3 * r()];
    let o = Vec3::new(r(), r(), r());
    patch_from_map(p, move |x| {
        let (u, v) = (x.u, x.v);
        o + scale * (u * e1 + v * e2 + (c[0] * u * u + c[1] * u * v + c[2] * v * v) * n)
    })
}

/// `u^a v^b` with `a + b < p`, coefficients in `[-1, 1]`.
pub fn random_polynomial(p: usize, rng: &mut ChaCha8Rng) -> Vec<(i32, i32, f64)> {
    let mut out = Vec::new();
    for a in 0..p as i32 {
        for b in 0..(p as i32 - a) {
            out.push((a, b, rng.gen::<f64>() * 2.0 - 1.0));
        }
    }
    out
}

pub fn eval_polynomial(poly: &[(i32, i32, f64)], x: UVPoint) -> f64 {
    poly.iter().map(|(a, b, c)| c * x.u.powi(*a) * x.v.powi(*b)).sum()
}

/// `∫_T u^a v^b = a! b! / (a + b + 2)!`.
pub fn monomial_integral(a: u32, b: u32) -> f64 {
    let f = |n: u32| (1..=n).map(|k| k as f64).product::<f64>();
    f(a) * f(b) / f(a + b + 2)
}

/// Polar integration about `uv0` in the parameter plane: the angle is split at
/// the vertex directions and into `pieces`, the radius geometrically from `rho0`.
pub fn polar_oracle(
    patch: &Patch,
    uv0: UVPoint,
    target: &Target,
    kernel: &KernelSpec,
    density: impl Fn(UVPoint) -> f64,
    pieces: usize,
    rho0: f64,
) -> C64 {
    let (gt, wt) = gauss_legendre(40);
    let (gr, wr) = gauss_legendre(24);
    let verts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
    let mut sum = C64::new(0.0, 0.0);
    for i in 0..3 {
        let (a, b) = (verts[i], verts[(i + 1) % 3]);
        let ang = |q: (f64, f64)| (q.1 - uv0.v).atan2(q.0 - uv0.u);
        let (t0, mut t1) = (ang(a), ang(b));
        while t1 < t0 {
            t1 += 2.0 * PI;
        }
        let span = t1 - t0;
        if span <= 1e-14 || span >= PI - 1e-14 {
            continue;
        }
        for k in 0..pieces {
            let (lo, hi) = (t0 + span * k as f64 / pieces as f64, t0 + span * (k + 1) as f64 / pieces as f64);
            for (x, w) in gt.iter().zip(&wt) {
                let th = lo + (hi - lo) * x;
                let (c, s) = (th.cos(), th.sin());
                let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                let rho_max = ((a.0 - uv0.u) * ey - (a.1 - uv0.v) * ex) / (c * ey - s * ex);
                let mut cuts = vec![0.0];
                let mut r = rho0;
                while r < rho_max {
                    cuts.push(r);
                    r *= 2.0;
                }
                cuts.push(rho_max);
                for seg in cuts.windows(2) {
                    for (y, v) in gr.iter().zip(&wr) {
                        let rho = seg[0] + (seg[1] - seg[0]) * y;
                        let pt = UVPoint::new(uv0.u + rho * c, uv0.v + rho * s);
                        let jet = patch.jet_unchecked(pt);
                        let kv = kernel.eval(&target.x, &jet.x, &jet.normal, &target.normal);
                        sum += kv * (density(pt) * jet.jac * rho * (seg[1] - seg[0]) * v * w * (hi - lo));
                    }
                }
            }
        }
    }
    sum
}

/// Oracle value and its own error estimate (difference from a coarser run).
pub fn polar_oracle_checked(
    patch: &Patch,
    uv0: UVPoint,
    target: &Target,
    kernel: &KernelSpec,
    density: impl Fn(UVPoint) -> f64 + Copy,
    rho0: f64,
) -> (C64, f64) {
    let fine = polar_oracle(patch, uv0, target, kernel, density, 16, rho0);
    let coarse = polar_oracle(patch, uv0, target, kernel, density, 8, rho0);
    (fine, (fine - coarse).norm())
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        if v.norm() > 0.05 {
            return v.normalize();
        }
    }
}

pub fn random_points_in_cube(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
}

/// `max |a - b| / max |b|`.
pub fn relative_max(a: &[C64], b: &[C64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    num / b.iter().map(|y| y.norm()).fold(0.0, f64::max)
}

/// Least-squares slope of `ln e` against `ln h`.
pub fn fitted_slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = h.iter().zip(e).map(|(h, e)| (h.ln(), e.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
