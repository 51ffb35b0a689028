//! Analytic test surfaces.

use super::{Patch, SurfaceMesh};
use crate::basis::{RuleLibrary, UVPoint};
use crate::{Result, Vec3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;

/// Flat polyhedron refined before projection to the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SphereBase {
    Octahedron,
    Icosahedron,
}

fn octahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let v = vec![
        Vec3::x(),
        -Vec3::x(),
        Vec3::y(),
        -Vec3::y(),
        Vec3::z(),
        -Vec3::z(),
    ];
    let f = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    (v, f)
}

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v, f)
}

/// Splits every face into four at edge midpoints.
fn refine(verts: &mut Vec<Vec3>, faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
        let key = (a.min(b), a.max(b));
        *mid.entry(key).or_insert_with(|| {
            verts.push(0.5 * (verts[a] + verts[b]));
            verts.len() - 1
        })
    };
    let mut out = Vec::with_capacity(4 * faces.len());
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, verts);
        let bc = midpoint(b, c, verts);
        let ca = midpoint(c, a, verts);
        out.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    out
}

/// Unit sphere from a refined octahedron: `8 * 4^nrefine` patches.
pub fn gen_sphere(nrefine: usize, p: usize) -> Result<SurfaceMesh> {
    gen_sphere_with(SphereBase::Octahedron, nrefine, p, RuleLibrary::global())
}

pub fn gen_sphere_with(
    base: SphereBase,
    nrefine: usize,
    p: usize,
    lib: &RuleLibrary,
) -> Result<SurfaceMesh> {
    let (mut verts, mut faces) = match base {
        SphereBase::Octahedron => octahedron(),
        SphereBase::Icosahedron => icosahedron(),
    };
    for _ in 0..nrefine {
        faces = refine(&mut verts, &faces);
    }
    let set = lib.nodes(p)?;
    let patches = faces
        .par_iter()
        .enumerate()
        .map(|(id, &[a, b, c])| {
            let (a, b, c) = (verts[a], verts[b], verts[c]);
            let pts: Vec<Vec3> = set
                .nodes
                .iter()
                .map(|x| (a + (b - a) * x.u + (c - a) * x.v).normalize())
                .collect();
            Patch::from_samples(id, p, &pts, lib)
        })
        .collect::<Result<Vec<_>>>()?;
    SurfaceMesh::new(p, patches, lib)
}

const STELLARATOR_COEFFS: [(i32, i32, f64); 7] = [
    (-1, -1, 0.17),
    (-1, 0, 0.11),
    (0, 0, 1.0),
    (1, 0, 4.5),
    (2, 0, -0.25),
    (0, 1, 0.07),
    (2, 1, -0.45),
];

/// The stellarator-like torus; `v` runs the long way round.
pub fn stellarator_point(u: f64, v: f64) -> Vec3 {
    let mut x = Vec3::zeros();
    for &(i, j, d) in &STELLARATOR_COEFFS {
        let arg = (1 - i) as f64 * u + j as f64 * v;
        x += d * Vec3::new(v.cos() * arg.cos(), v.sin() * arg.cos(), arg.sin());
    }
    x
}

/// Stellarator with `2 * nu * nv` patches over `[0, 2π]²`, normals outward.
pub fn gen_stellarator(nu: usize, nv: usize, p: usize) -> Result<SurfaceMesh> {
    gen_stellarator_with(nu, nv, p, RuleLibrary::global())
}

pub fn gen_stellarator_with(nu: usize, nv: usize, p: usize, lib: &RuleLibrary) -> Result<SurfaceMesh> {
    if nu == 0 || nv == 0 {
        return Err(crate::Error::Argument("nu and nv must be positive".into()));
    }
    let build = |flip: bool| -> Result<SurfaceMesh> {
        let set = lib.nodes(p)?;
        let (du, dv) = (2.0 * PI / nu as f64, 2.0 * PI / nv as f64);
        let mut tris = Vec::with_capacity(2 * nu * nv);
        for b in 0..nv {
            for a in 0..nu {
                let p00 = UVPoint::new(a as f64 * du, b as f64 * dv);
                let p10 = UVPoint::new(p00.u + du, p00.v);
                let p01 = UVPoint::new(p00.u, p00.v + dv);
                let p11 = UVPoint::new(p00.u + du, p00.v + dv);
                if flip {
                    tris.push([p00, p01, p10]);
                    tris.push([p11, p10, p01]);
                } else {
                    tris.push([p00, p10, p01]);
                    tris.push([p11, p01, p10]);
                }
            }
        }
        let patches = tris
            .par_iter()
            .enumerate()
            .map(|(id, [a, b, c])| {
                let pts: Vec<Vec3> = set
                    .nodes
                    .iter()
                    .map(|x| {
                        stellarator_point(
                            a.u + (b.u - a.u) * x.u + (c.u - a.u) * x.v,
                            a.v + (b.v - a.v) * x.u + (c.v - a.v) * x.v,
                        )
                    })
                    .collect();
                Patch::from_samples(id, p, &pts, lib)
            })
            .collect::<Result<Vec<_>>>()?;
        SurfaceMesh::new(p, patches, lib)
    };
    let mesh = build(false)?;
    if mesh.signed_volume() > 0.0 {
        Ok(mesh)
    } else {
        build(true)
    }
}
