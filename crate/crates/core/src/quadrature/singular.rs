//! Weakly singular integrals over a patch at one of its own points.
//!
//! `T0` is split into up to three triangles joining the target preimage `P`
//! to the edges. Each is cut at the foot of the perpendicular from `P` into
//! right triangles, which are integrated in Duffy coordinates
//! `y = P + s (F + u e - P)`: the factor `s` in the area element cancels the
//! `1/r` singularity. Along the edge `u` is split into panels that double in
//! length away from the foot, so targets close to an edge cost only a few
//! extra panels. Gauss orders are doubled until the moments settle.

use super::{moment_diff, PatchQuad, RuleSamples, Target};
use crate::basis::{gauss_legendre, UVPoint};
use crate::{Error, Result, C64};

/// Sub-triangles with smaller parametric area are dropped.
const SLIVER_AREA: f64 = 1e-14;
const START_POINTS: usize = 8;
const MAX_POINTS: usize = 128;

struct Wedge {
    p: UVPoint,
    f: UVPoint,
    e: (f64, f64),
    len: f64,
    /// `|cross(F - P, e)|`, the distance from `P` to the edge line.
    height: f64,
}

fn wedges(p: UVPoint) -> Vec<Wedge> {
    let verts = [UVPoint::new(0.0, 0.0), UVPoint::new(1.0, 0.0), UVPoint::new(0.0, 1.0)];
    let mut out = Vec::with_capacity(6);
    for i in 0..3 {
        let (a, b) = (verts[i], verts[(i + 1) % 3]);
        let (ex, ey) = (b.u - a.u, b.v - a.v);
        let area = 0.5 * ((a.u - p.u) * (b.v - p.v) - (a.v - p.v) * (b.u - p.u)).abs();
        if area < SLIVER_AREA {
            continue;
        }
        let l2 = ex * ex + ey * ey;
        let t = (((p.u - a.u) * ex + (p.v - a.v) * ey) / l2).clamp(0.0, 1.0);
        let f = UVPoint::new(a.u + t * ex, a.v + t * ey);
        for v in [a, b] {
            let (dx, dy) = (v.u - f.u, v.v - f.v);
            let len = (dx * dx + dy * dy).sqrt();
            if len * len < SLIVER_AREA {
                continue;
            }
            let e = (dx / len, dy / len);
            let height = ((f.u - p.u) * e.1 - (f.v - p.v) * e.0).abs();
            if 0.5 * height * len < SLIVER_AREA {
                continue;
            }
            out.push(Wedge { p, f, e, len, height });
        }
    }
    out
}

/// Panel breakpoints on `[0, len]` doubling from `height`.
fn panels(len: f64, height: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut a = 0.0;
    let mut h = height.max(1e-3 * len).min(len);
    while a < len {
        let b = (a + h).min(len);
        // avoid a last panel much shorter than its neighbour
        let b = if len - b < 0.5 * h { len } else { b };
        out.push((a, b));
        a = b;
        h = b;
    }
    out
}

fn nodes_weights(p: UVPoint, n: usize) -> (Vec<UVPoint>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(n);
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    for w in wedges(p) {
        for (a, b) in panels(w.len, w.height) {
            for (xu, wu) in gx.iter().zip(&gw) {
                let u = a + (b - a) * xu;
                let wu = wu * (b - a);
                let q = UVPoint::new(w.f.u + u * w.e.0, w.f.v + u * w.e.1);
                for (xs, ws) in gx.iter().zip(&gw) {
                    pts.push(UVPoint::new(w.p.u + xs * (q.u - w.p.u), w.p.v + xs * (q.v - w.p.v)));
                    wts.push(ws * wu * xs * w.height);
                }
            }
        }
    }
    (pts, wts)
}

pub(super) fn singular_moments(pq: &PatchQuad<'_>, uv: UVPoint, t: &Target) -> Result<Vec<C64>> {
    crate::basis::check_domain(uv)?;
    let n_p = pq.n_p();
    let zero = || vec![C64::new(0.0, 0.0); pq.kernels.len() * n_p];
    let eval = |n: usize| {
        let (pts, wts) = nodes_weights(uv, n);
        let s = RuleSamples::from_points(pq.patch, &pq.basis, &pts, &wts);
        let mut out = zero();
        s.accumulate(pq.kernels, t, &mut out);
        out
    };
    let mut n = START_POINTS.max(pq.patch.order + 2);
    let mut prev = eval(n);
    let mut last_diff = f64::INFINITY;
    while n < MAX_POINTS {
        n *= 2;
        let cur = eval(n);
        last_diff = moment_diff(&prev, &cur, n_p);
        if last_diff < pq.tolerance() {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Quadrature(format!(
        "singular integral at ({:.6}, {:.6}) did not converge with {MAX_POINTS} points per direction \
         (last change {last_diff:.3e}, tolerance {:.3e})",
        uv.u,
        uv.v,
        pq.tolerance()
    )))
}
