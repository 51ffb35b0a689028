//! Layer potential evaluation with locally corrected quadrature.
//!
//! `precompute` builds everything that depends only on geometry and targets:
//! near lists, far orders `q_j`, self and near correction blocks and the
//! oversampled far-field sources. `apply` then evaluates a density by the
//! subtract-and-add scheme: a plain point sum over oversampled sources,
//! minus the same sum restricted to each near or self pair, plus the
//! corrected rows.

pub mod accel;

pub use accel::{
    direct_accelerator, point_field, relative_l2, treecode_accelerator, Direct, FarAccelerator, FieldKind, SourceSet,
    Treecode,
};

use crate::basis::{KoornwinderBasis, RuleLibrary};
use crate::geometry::SurfaceMesh;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::octree::{build_near_lists, NearList, OctTree};
use crate::quadrature::{
    read_dump, write_dump, CacheStats, DumpHeader, FarOrder, NearMatrix, NearParams, PatchQuad, SelfMatrix, Target,
};
use crate::{Error, Result, Vec3, C64};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Oversampled far-field data of one patch.
#[derive(Debug, Clone)]
pub struct Oversampled {
    /// Offset of the patch's sources in the global source arrays.
    pub start: usize,
    pub len: usize,
    /// Values at the order-`q_j` nodes from node values, `n_q × n_p`.
    pub interp: DMatrix<f64>,
}

/// Where a correction row for a (target, patch) pair lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowRef {
    patch: u32,
    block: u32,
    row: u32,
}

/// Options for [`precompute_with`].
#[derive(Debug, Clone)]
pub struct PrecomputeOptions {
    /// Leaf capacity of the near-list tree.
    pub leaf_size: usize,
    /// Reuse of adaptive sub-triangle samples.
    pub cache: bool,
    /// Load correction blocks from this dump when it matches, write it otherwise.
    pub dump: Option<PathBuf>,
}

impl Default for PrecomputeOptions {
    fn default() -> Self {
        Self {
            leaf_size: 32,
            cache: true,
            dump: None,
        }
    }
}

/// Benchmark figures of a precomputation (and optionally one apply).
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Metrics {
    pub order: usize,
    pub eps: f64,
    pub eta: f64,
    pub eta1: f64,
    pub n_patches: usize,
    pub n: usize,
    pub n_over: usize,
    pub n_targets: usize,
    pub alpha: f64,
    /// `n_p (Σ_j N_near(j) + n_p) / N`.
    pub m: f64,
    /// `n_p Σ_j (N_near(j) + n_p) / N`.
    pub m_per_patch: f64,
    pub t_init: f64,
    pub s_init: f64,
    pub t_lp: Option<f64>,
    pub s_lp: Option<f64>,
    pub a_max: f64,
    pub a_avg: f64,
    pub q_min: usize,
    pub q_max: usize,
    pub unconverged_orders: usize,
    pub unconverged_near: usize,
    pub cache_reuse: f64,
}

/// Precomputed quadrature data for a mesh, a kernel list and a target set.
pub struct QuadCache<'m> {
    pub mesh: &'m SurfaceMesh,
    pub kernels: Vec<KernelSpec>,
    pub params: NearParams,
    /// Surface nodes first, then off-surface points.
    pub targets: Vec<Target>,
    pub owner: Vec<Option<usize>>,
    pub far: Vec<FarOrder>,
    pub over: Vec<Oversampled>,
    pub src_points: Vec<Vec3>,
    pub src_normals: Vec<Vec3>,
    pub src_weights: Vec<f64>,
    pub src_patch: Vec<u32>,
    pub selfs: Vec<SelfMatrix>,
    pub nears: Vec<NearMatrix>,
    pub near_list: NearList,
    pub cache_stats: CacheStats,
    pub t_init: f64,
    rows: Vec<Vec<RowRef>>,
    dump_hash: [u8; 32],
}

/// Values of a potential at the cache's targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub values: Vec<C64>,
    /// Targets `0..n_surface` are mesh nodes.
    pub n_surface: usize,
    pub seconds: f64,
}

/// Location of a potential value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetTag {
    Node(usize),
    Point(usize),
}

impl Potential {
    pub fn tag(&self, i: usize) -> TargetTag {
        if i < self.n_surface {
            TargetTag::Node(i)
        } else {
            TargetTag::Point(i - self.n_surface)
        }
    }

    pub fn surface(&self) -> &[C64] {
        &self.values[..self.n_surface]
    }

    pub fn off_surface(&self) -> &[C64] {
        &self.values[self.n_surface..]
    }
}

/// Strength multipliers and output kind for a kernel: charge, dipole.
fn source_factors(spec: &KernelSpec) -> (C64, C64, FieldKind) {
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    match spec.family {
        KernelFamily::SingleLayer => (one, zero, FieldKind::Potential),
        KernelFamily::DoubleLayer => (zero, one, FieldKind::Potential),
        KernelFamily::CombinedField => (spec.beta_s, spec.beta_d, FieldKind::Potential),
        KernelFamily::AdjointDoubleLayer => (one, zero, FieldKind::NormalDerivative),
    }
}

fn target_hash(mesh_hash: &[u8; 32], extra: &[Target]) -> [u8; 32] {
    if extra.is_empty() {
        return *mesh_hash;
    }
    let mut h = Sha256::new();
    h.update(mesh_hash);
    for t in extra {
        for c in t.x.iter().chain(t.normal.iter()) {
            h.update(c.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Precomputes with default options; `extra` are off-surface targets.
pub fn precompute<'m>(
    mesh: &'m SurfaceMesh,
    kernels: &[KernelSpec],
    params: NearParams,
    extra: &[Target],
) -> Result<QuadCache<'m>> {
    precompute_with(mesh, kernels, params, extra, &PrecomputeOptions::default())
}

struct PatchResult {
    far: FarOrder,
    over: Vec<crate::geometry::OversampledNode>,
    interp: DMatrix<f64>,
    selfm: Option<SelfMatrix>,
    near: Option<NearMatrix>,
    stats: CacheStats,
}

pub fn precompute_with<'m>(
    mesh: &'m SurfaceMesh,
    kernels: &[KernelSpec],
    params: NearParams,
    extra: &[Target],
    opts: &PrecomputeOptions,
) -> Result<QuadCache<'m>> {
    let start = Instant::now();
    params.validate()?;
    if kernels.is_empty() {
        return Err(Error::Argument("no kernels requested".into()));
    }
    for k in kernels {
        k.validate()?;
    }
    let lib = RuleLibrary::global();
    let mut targets: Vec<Target> = mesh.nodes().iter().map(|n| Target::new(n.x, n.normal)).collect();
    let mut owner: Vec<Option<usize>> = mesh.nodes().iter().map(|n| Some(n.patch)).collect();
    targets.extend_from_slice(extra);
    owner.extend(std::iter::repeat(None).take(extra.len()));
    let dump_hash = target_hash(&mesh.hash(), extra);
    let header = DumpHeader {
        eps: params.eps,
        eta: params.eta,
        eta1: params.eta1,
        kernels: kernels.to_vec(),
        mesh_hash: dump_hash,
    };
    let loaded = match &opts.dump {
        Some(path) if path.exists() => {
            let f = std::io::BufReader::new(std::fs::File::open(path)?);
            let (s, n) = read_dump(f, &header)?;
            log::info!("loaded {} self and {} near blocks from {}", s.len(), n.len(), path.display());
            Some((s, n))
        }
        _ => None,
    };

    let near_list = near_lists_for(mesh, &targets, &owner, params.eta, opts.leaf_size)?;
    let patches = mesh.patches();
    let basis = KoornwinderBasis::new(mesh.order());
    let results: Vec<PatchResult> = (0..patches.len())
        .into_par_iter()
        .map(|j| -> Result<PatchResult> {
            let patch = &patches[j];
            let mut pq = PatchQuad::new(patch, kernels, params, lib)?.with_cache(opts.cache);
            let near_t: Vec<Target> = near_list.lists[j].iter().map(|&t| targets[t]).collect();
            let far = pq.far_order(&near_t)?;
            let over = patch.oversample(far.q, lib)?;
            let rule = lib.quadrature(far.q)?;
            let mut bvals = DMatrix::zeros(rule.nodes.len(), basis.count());
            let mut buf = vec![0.0; basis.count()];
            for (i, uv) in rule.nodes.iter().enumerate() {
                basis.eval_into(uv.u, uv.v, &mut buf);
                for (b, v) in buf.iter().enumerate() {
                    bvals[(i, b)] = *v;
                }
            }
            let interp = bvals * &pq.node_set().matrix_v;
            let (selfm, near) = if loaded.is_some() {
                (None, None)
            } else {
                let ids: Vec<(usize, Target)> = near_list.lists[j].iter().map(|&t| (t, targets[t])).collect();
                (Some(pq.self_matrix()?), Some(pq.near_matrix(&ids)?))
            };
            Ok(PatchResult {
                far,
                over,
                interp,
                selfm,
                near,
                stats: pq.cache.stats(),
            })
        })
        .collect::<Result<_>>()?;

    let mut cache = QuadCache {
        mesh,
        kernels: kernels.to_vec(),
        params,
        targets,
        owner,
        far: Vec::with_capacity(patches.len()),
        over: Vec::with_capacity(patches.len()),
        src_points: Vec::new(),
        src_normals: Vec::new(),
        src_weights: Vec::new(),
        src_patch: Vec::new(),
        selfs: Vec::with_capacity(patches.len()),
        nears: Vec::with_capacity(patches.len()),
        near_list,
        cache_stats: CacheStats::default(),
        t_init: 0.0,
        rows: Vec::new(),
        dump_hash,
    };
    for (j, r) in results.into_iter().enumerate() {
        if !r.far.converged {
            log::warn!("patch {j}: far order capped at {}", r.far.q);
        }
        cache.over.push(Oversampled {
            start: cache.src_points.len(),
            len: r.over.len(),
            interp: r.interp,
        });
        for o in &r.over {
            cache.src_points.push(o.x);
            cache.src_normals.push(o.normal);
            cache.src_weights.push(o.weight);
            cache.src_patch.push(j as u32);
        }
        cache.far.push(r.far);
        cache.cache_stats.merge(&r.stats);
        if let Some(s) = r.selfm {
            cache.selfs.push(s);
        }
        if let Some(n) = r.near {
            cache.nears.push(n);
        }
    }
    if let Some((s, n)) = loaded {
        cache.selfs = s;
        cache.nears = n;
        cache.check_blocks()?;
    } else if let Some(path) = &opts.dump {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_dump(f, &header, &cache.selfs, &cache.nears)?;
    }
    cache.index_rows();
    cache.t_init = start.elapsed().as_secs_f64();
    Ok(cache)
}

fn near_lists_for(
    mesh: &SurfaceMesh,
    targets: &[Target],
    owner: &[Option<usize>],
    eta: f64,
    leaf: usize,
) -> Result<NearList> {
    let cents: Vec<Vec3> = mesh.patches().iter().map(|p| p.centroid).collect();
    let reach: Vec<f64> = mesh.patches().iter().map(|p| eta * p.radius).collect();
    let pts: Vec<Vec3> = targets.iter().map(|t| t.x).collect();
    let tree = OctTree::build(&cents, &reach, &pts, leaf)?;
    Ok(build_near_lists(&tree, owner))
}

impl<'m> QuadCache<'m> {
    pub fn n_nodes(&self) -> usize {
        self.mesh.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn n_over(&self) -> usize {
        self.src_points.len()
    }

    /// Off-surface target points in registration order.
    pub fn extra_points(&self) -> Vec<Vec3> {
        self.targets[self.n_nodes()..].iter().map(|t| t.x).collect()
    }

    /// Hash identifying the mesh and the registered targets.
    pub fn dump_hash(&self) -> [u8; 32] {
        self.dump_hash
    }

    fn check_blocks(&self) -> Result<()> {
        let np = self.mesh.nodes_per_patch();
        let nk = self.kernels.len();
        let npat = self.mesh.num_patches();
        if self.selfs.len() != npat || self.selfs.iter().enumerate().any(|(j, s)| s.patch != j) {
            return Err(Error::Validation("dump self blocks do not cover the mesh".into()));
        }
        let mut covered = vec![Vec::new(); npat];
        for n in &self.nears {
            if n.patch >= npat || n.mats.len() != nk {
                return Err(Error::Validation("dump near block has wrong patch or kernel count".into()));
            }
            covered[n.patch].extend_from_slice(&n.targets);
        }
        for (j, mut c) in covered.into_iter().enumerate() {
            c.sort_unstable();
            if c != self.near_list.lists[j] {
                return Err(Error::Validation(format!("dump near targets of patch {j} differ from this run")));
            }
        }
        for s in &self.selfs {
            if s.mats.len() != nk || s.mats.iter().any(|m| m.nrows() != np || m.ncols() != np) {
                return Err(Error::Validation("dump self block has wrong shape".into()));
            }
        }
        Ok(())
    }

    fn index_rows(&mut self) {
        let mut rows = vec![Vec::new(); self.targets.len()];
        for (b, blk) in self.nears.iter().enumerate() {
            for (r, &t) in blk.targets.iter().enumerate() {
                rows[t].push(RowRef {
                    patch: blk.patch as u32,
                    block: b as u32,
                    row: r as u32,
                });
            }
        }
        self.rows = rows;
    }

    /// Registers more off-surface targets, building near lists and
    /// correction rows for them only. Returns their target ids.
    pub fn extend_targets(&mut self, points: &[Target]) -> Result<std::ops::Range<usize>> {
        let first = self.targets.len();
        if points.is_empty() {
            return Ok(first..first);
        }
        let owner = vec![None; points.len()];
        let lists = near_lists_for(self.mesh, points, &owner, self.params.eta, 32)?;
        let lib = RuleLibrary::global();
        let patches = self.mesh.patches();
        let kernels = &self.kernels;
        let params = self.params;
        let blocks: Vec<(NearMatrix, CacheStats)> = (0..patches.len())
            .into_par_iter()
            .filter(|&j| !lists.lists[j].is_empty())
            .map(|j| {
                let mut pq = PatchQuad::new(&patches[j], kernels, params, lib)?;
                let ids: Vec<(usize, Target)> = lists.lists[j].iter().map(|&t| (first + t, points[t])).collect();
                Ok((pq.near_matrix(&ids)?, pq.cache.stats()))
            })
            .collect::<Result<_>>()?;
        self.targets.extend_from_slice(points);
        self.owner.extend(owner);
        for (j, l) in lists.lists.into_iter().enumerate() {
            self.near_list.lists[j].extend(l.into_iter().map(|t| first + t));
        }
        for (b, s) in blocks {
            self.cache_stats.merge(&s);
            self.nears.push(b);
        }
        let all: Vec<Target> = self.targets[self.n_nodes()..].to_vec();
        self.dump_hash = target_hash(&self.mesh.hash(), &all);
        self.index_rows();
        Ok(first..self.targets.len())
    }

    fn check_density(&self, sigma: &[C64], kernel: usize) -> Result<()> {
        if sigma.len() != self.n_nodes() {
            return Err(Error::Argument(format!(
                "density has {} entries, mesh has {} nodes",
                sigma.len(),
                self.n_nodes()
            )));
        }
        if kernel >= self.kernels.len() {
            return Err(Error::Argument(format!("kernel index {kernel} out of range")));
        }
        Ok(())
    }

    /// Oversampled point sources for density `sigma` under kernel `kernel`.
    pub fn sources(&self, sigma: &[C64], kernel: usize) -> Result<(SourceSet, FieldKind)> {
        self.check_density(sigma, kernel)?;
        let spec = &self.kernels[kernel];
        let (cf, df, kind) = source_factors(spec);
        let np = self.mesh.nodes_per_patch();
        let mut vals = vec![C64::new(0.0, 0.0); self.n_over()];
        for (j, o) in self.over.iter().enumerate() {
            let s = &sigma[j * np..(j + 1) * np];
            for i in 0..o.len {
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..np {
                    acc += s[l] * o.interp[(i, l)];
                }
                vals[o.start + i] = acc;
            }
        }
        let w: Vec<C64> = vals.iter().zip(&self.src_weights).map(|(v, w)| v * *w).collect();
        Ok((
            SourceSet {
                points: self.src_points.clone(),
                normals: self.src_normals.clone(),
                charges: w.iter().map(|v| v * cf).collect(),
                dipoles: w.iter().map(|v| v * df).collect(),
                groups: self.src_patch.clone(),
            },
            kind,
        ))
    }

    fn corrected_rows(&self, t: usize, sigma: &[C64], kernel: usize) -> C64 {
        let np = self.mesh.nodes_per_patch();
        let dot = |m: &DMatrix<C64>, row: usize, j: usize| -> C64 {
            let s = &sigma[j * np..(j + 1) * np];
            (0..np).map(|l| m[(row, l)] * s[l]).sum()
        };
        let mut acc = C64::new(0.0, 0.0);
        for r in &self.rows[t] {
            acc += dot(&self.nears[r.block as usize].mats[kernel], r.row as usize, r.patch as usize);
        }
        if let Some(j) = self.owner[t] {
            acc += dot(&self.selfs[j].mats[kernel], t - j * np, j);
        }
        acc
    }

    fn local_patches(&self, t: usize) -> Vec<u32> {
        let mut g: Vec<u32> = self.rows[t].iter().map(|r| r.patch).collect();
        if let Some(j) = self.owner[t] {
            g.push(j as u32);
        }
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Subtract-and-add evaluation of kernel `kernel` applied to `sigma` at all targets.
    pub fn apply(&self, sigma: &[C64], kernel: usize, acc: &dyn FarAccelerator) -> Result<Potential> {
        let start = Instant::now();
        let (src, kind) = self.sources(sigma, kernel)?;
        let k = self.kernels[kernel].k;
        let mut values = acc.evaluate(k, &src, &self.targets, kind)?;
        values.par_iter_mut().enumerate().for_each(|(t, v)| {
            let tg = &self.targets[t];
            let mut spurious = C64::new(0.0, 0.0);
            for j in self.local_patches(t) {
                let o = &self.over[j as usize];
                for i in o.start..o.start + o.len {
                    spurious += point_field(k, &tg.x, &tg.normal, kind, &src.points[i], &src.normals[i], src.charges[i], src.dipoles[i]);
                }
            }
            *v = *v - spurious + self.corrected_rows(t, sigma, kernel);
        });
        Ok(Potential {
            values,
            n_surface: self.n_nodes(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// As [`QuadCache::apply`], but near and self pairs are left out of the
    /// point sum instead of being subtracted afterwards.
    pub fn apply_skip_near(&self, sigma: &[C64], kernel: usize, acc: &dyn FarAccelerator) -> Result<Potential> {
        let start = Instant::now();
        let (src, kind) = self.sources(sigma, kernel)?;
        let k = self.kernels[kernel].k;
        let exclude: Vec<Vec<u32>> = (0..self.targets.len()).map(|t| self.local_patches(t)).collect();
        let mut values = acc.evaluate_excluding(k, &src, &self.targets, kind, &exclude)?;
        values
            .par_iter_mut()
            .enumerate()
            .for_each(|(t, v)| *v += self.corrected_rows(t, sigma, kernel));
        Ok(Potential {
            values,
            n_surface: self.n_nodes(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Writes the correction blocks with a header tied to this run.
    pub fn write_dump(&self, w: impl Write) -> Result<()> {
        let header = DumpHeader {
            eps: self.params.eps,
            eta: self.params.eta,
            eta1: self.params.eta1,
            kernels: self.kernels.clone(),
            mesh_hash: self.dump_hash,
        };
        write_dump(w, &header, &self.selfs, &self.nears)
    }
}

/// Metrics of `cache`, with `t_lp` the time of one apply when available.
pub fn metrics(cache: &QuadCache<'_>, t_lp: Option<f64>) -> Metrics {
    let n = cache.n_nodes();
    let np = cache.mesh.nodes_per_patch();
    let near_total = cache.near_list.total();
    let npat = cache.mesh.num_patches();
    let (a_max, a_avg) = cache.mesh.aspect_stats();
    let nf = n.max(1) as f64;
    Metrics {
        order: cache.mesh.order(),
        eps: cache.params.eps,
        eta: cache.params.eta,
        eta1: cache.params.eta1,
        n_patches: npat,
        n,
        n_over: cache.n_over(),
        n_targets: cache.n_targets(),
        alpha: cache.n_over() as f64 / nf,
        m: (np * (near_total + np)) as f64 / nf,
        m_per_patch: (np * (near_total + npat * np)) as f64 / nf,
        t_init: cache.t_init,
        s_init: n as f64 / cache.t_init.max(1e-12),
        t_lp,
        s_lp: t_lp.map(|t| n as f64 / t.max(1e-12)),
        a_max,
        a_avg,
        q_min: cache.far.iter().map(|f| f.q).min().unwrap_or(0),
        q_max: cache.far.iter().map(|f| f.q).max().unwrap_or(0),
        unconverged_orders: cache.far.iter().filter(|f| !f.converged).count(),
        unconverged_near: cache.nears.iter().map(|b| b.unconverged.len()).sum(),
        cache_reuse: cache.cache_stats.reuse_factor(),
    }
}

/// Writes `x,y,z,Re,Im` rows.
pub fn write_potential_csv(mut w: impl Write, points: &[Vec3], values: &[C64]) -> Result<()> {
    if points.len() != values.len() {
        return Err(Error::Argument("one value per point required".into()));
    }
    writeln!(w, "x,y,z,Re,Im")?;
    for (x, v) in points.iter().zip(values) {
        writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", x.x, x.y, x.z, v.re, v.im)?;
    }
    Ok(())
}
