//! Flat triangle meshes and patch-coefficient files.
//!
//! ```text
//! NVERT NTRI          KPATCH <Npat> <p>
//! x y z   (NVERT)     cx cy cz   (n_p lines per patch)
//! i j k   (NTRI)
//! ```

use super::{Patch, SurfaceMesh};
use crate::basis::{basis_count, RuleLibrary};
use crate::{Error, Result, Vec3};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn numbers<T: std::str::FromStr>(line: &str, lineno: usize, want: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let v: Vec<T> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<T>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad number {t:?}: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    if v.len() != want {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {want} values, found {}", v.len()),
        });
    }
    Ok(v)
}

/// Reads a flat triangle mesh into vertices and 0-based faces.
pub fn parse_flat_tri(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut lines = tokens(text);
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty mesh file".into(),
    })?;
    let h: Vec<usize> = numbers(header, hl, 2)?;
    let (nv, nt) = (h[0], h[1]);
    let mut verts = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or(Error::Parse {
            line: hl,
            msg: format!("file ends before {nv} vertices"),
        })?;
        let x: Vec<f64> = numbers(l, ln, 3)?;
        verts.push(Vec3::new(x[0], x[1], x[2]));
    }
    let mut faces = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = lines.next().ok_or(Error::Parse {
            line: hl,
            msg: format!("file ends before {nt} triangles"),
        })?;
        let f: Vec<usize> = numbers(l, ln, 3)?;
        let mut tri = [0; 3];
        for (k, &i) in f.iter().enumerate() {
            if i == 0 || i > nv {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("vertex index {i} outside 1..={nv}"),
                });
            }
            tri[k] = i - 1;
        }
        faces.push(tri);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse {
            line: ln,
            msg: "trailing data after triangles".into(),
        });
    }
    Ok((verts, faces))
}

/// True when every undirected edge borders exactly two faces.
fn is_closed(faces: &[[usize; 3]]) -> bool {
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    count.values().all(|&c| c == 2)
}

/// Imports a flat triangle mesh as affine order-`p` patches.
///
/// Closed meshes whose enclosed signed volume is negative are flipped so that
/// normals point outward.
pub fn import_flat_tri(path: impl AsRef<Path>, p: usize) -> Result<SurfaceMesh> {
    let (verts, faces) = parse_flat_tri(&std::fs::read_to_string(path)?)?;
    flat_mesh(&verts, &faces, p, RuleLibrary::global())
}

pub fn flat_mesh(verts: &[Vec3], faces: &[[usize; 3]], p: usize, lib: &RuleLibrary) -> Result<SurfaceMesh> {
    if faces.is_empty() {
        return Err(Error::Geometry("mesh has no triangles".into()));
    }
    let mut used = vec![false; verts.len()];
    for (t, f) in faces.iter().enumerate() {
        f.iter().for_each(|&i| used[i] = true);
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        let scale = (b - a).norm().max((c - a).norm()).max(f64::MIN_POSITIVE);
        if (b - a).cross(&(c - a)).norm() <= 1e-12 * scale * scale {
            return Err(Error::Geometry(format!("triangle {} is degenerate", t + 1)));
        }
    }
    let unused = used.iter().filter(|u| !**u).count();
    if unused > 0 {
        log::warn!("{unused} vertices are not referenced by any triangle");
    }
    let mut faces = faces.to_vec();
    if is_closed(&faces) {
        let vol: f64 = faces
            .iter()
            .map(|f| verts[f[0]].dot(&verts[f[1]].cross(&verts[f[2]])))
            .sum();
        if vol < 0.0 {
            faces.iter_mut().for_each(|f| f.swap(1, 2));
        }
    }
    let set = lib.nodes(p)?;
    let patches = faces
        .iter()
        .enumerate()
        .map(|(id, f)| {
            let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            let pts: Vec<Vec3> = set
                .nodes
                .iter()
                .map(|x| a + (b - a) * x.u + (c - a) * x.v)
                .collect();
            Patch::from_samples(id, p, &pts, lib)
        })
        .collect::<Result<Vec<_>>>()?;
    SurfaceMesh::new(p, patches, lib)
}

pub fn format_kpatch(mesh: &SurfaceMesh) -> String {
    let mut s = format!("KPATCH {} {}\n", mesh.num_patches(), mesh.order());
    for patch in mesh.patches() {
        for c in &patch.coeffs {
            let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", c.x, c.y, c.z);
        }
    }
    s
}

pub fn save_kpatch(mesh: &SurfaceMesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_kpatch(mesh))?;
    Ok(())
}

pub fn parse_kpatch(text: &str, lib: &RuleLibrary) -> Result<SurfaceMesh> {
    let mut lines = tokens(text);
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty patch file".into(),
    })?;
    let mut it = header.split_whitespace();
    if it.next() != Some("KPATCH") {
        return Err(Error::Parse {
            line: hl,
            msg: "missing KPATCH header".into(),
        });
    }
    let h: Vec<usize> = numbers(&it.collect::<Vec<_>>().join(" "), hl, 2)?;
    let (npat, p) = (h[0], h[1]);
    if p == 0 {
        return Err(Error::Validation("patch order must be positive".into()));
    }
    let np = basis_count(p);
    let mut patches = Vec::with_capacity(npat);
    for id in 0..npat {
        let mut coeffs = Vec::with_capacity(np);
        for _ in 0..np {
            let (ln, l) = lines.next().ok_or_else(|| {
                Error::Validation(format!("header announces {npat} patches of {np} rows; file is short"))
            })?;
            let c: Vec<f64> = numbers(l, ln, 3)?;
            coeffs.push(Vec3::new(c[0], c[1], c[2]));
        }
        patches.push(Patch::from_coeffs(id, p, coeffs, lib)?);
    }
    if lines.next().is_some() {
        return Err(Error::Validation(format!(
            "header announces {npat} patches but the file has more rows"
        )));
    }
    SurfaceMesh::new(p, patches, lib)
}

pub fn load_kpatch(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    parse_kpatch(&std::fs::read_to_string(path)?, RuleLibrary::global())
}
