//! Batch drivers behind the `surfquad` binary.
//!
//! Every subcommand writes machine-readable output only: meshes as KPATCH,
//! potentials and tables as CSV, metrics and reports as JSON.

use crate::eval::{
    direct_accelerator, metrics, precompute_with, write_potential_csv, FarAccelerator, PrecomputeOptions, Treecode,
};
use crate::geometry::{gen_sphere, gen_stellarator, import_flat_tri, load_kpatch, save_kpatch, SurfaceMesh};
use crate::kernels::KernelSpec;
use crate::quadrature::{default_eta, NearParams, Target};
use crate::solver::{
    exterior_sources, greens_identity_error, interior_sources, point_source_field, solve_dirichlet_cfie,
};
use crate::{Error, Result, Vec3, C64};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "surfquad", version, about = "Layer potentials on high-order triangulated surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for random source placement.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or import a mesh and write it as KPATCH.
    Geom(GeomArgs),
    /// Build the correction blocks and report cache statistics.
    Precompute(PrecomputeArgs),
    /// Evaluate a layer potential at surface nodes or off-surface targets.
    Eval(EvalArgs),
    /// Solve the exterior Dirichlet problem for interior point-source data.
    Solve(SolveArgs),
    /// Error tables over orders and refinements.
    Converge(ConvergeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Shape {
    Sphere,
    Stellarator,
}

#[derive(Debug, Clone, Args)]
pub struct MeshArgs {
    #[arg(long, value_enum, default_value_t = Shape::Sphere)]
    pub shape: Shape,
    /// Refinement level: 8·4^r sphere patches, stellarator grid scaled by 2^r.
    #[arg(long, default_value_t = 0)]
    pub refine: usize,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Stellarator cells in the poloidal direction at refine 0.
    #[arg(long, default_value_t = 4)]
    pub nu: usize,
    /// Stellarator cells in the toroidal direction at refine 0.
    #[arg(long, default_value_t = 16)]
    pub nv: usize,
    /// Read the mesh from a file (`.kpatch`, anything else is a flat triangle mesh).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
}

impl MeshArgs {
    pub fn build(&self) -> Result<SurfaceMesh> {
        if let Some(path) = &self.mesh {
            return if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("kpatch")) {
                load_kpatch(path)
            } else {
                import_flat_tri(path, self.order)
            };
        }
        build_shape(self.shape, self.refine, self.order, self.nu, self.nv)
    }
}

fn build_shape(shape: Shape, refine: usize, order: usize, nu: usize, nv: usize) -> Result<SurfaceMesh> {
    match shape {
        Shape::Sphere => gen_sphere(refine, order),
        Shape::Stellarator => gen_stellarator(nu << refine, nv << refine, order),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Accel {
    Direct,
    Tree,
}

#[derive(Debug, Clone, Args)]
pub struct QuadArgs {
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Near-field multiplier (default from the order).
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 1.25)]
    pub eta1: f64,
    #[arg(long, value_enum, default_value_t = Accel::Direct)]
    pub accel: Accel,
    /// Treecode accuracy (default: eps).
    #[arg(long)]
    pub fmm_eps: Option<f64>,
}

impl QuadArgs {
    pub fn params(&self, p: usize) -> Result<NearParams> {
        let mut q = NearParams::new(p, self.eps);
        q.eta = self.eta.unwrap_or_else(|| default_eta(p));
        q.eta1 = self.eta1;
        q.validate()?;
        Ok(q)
    }

    pub fn accelerator(&self) -> Result<Box<dyn FarAccelerator>> {
        Ok(match self.accel {
            Accel::Direct => Box::new(direct_accelerator()),
            Accel::Tree => Box::new(Treecode::for_accuracy(self.fmm_eps.unwrap_or(self.eps))?),
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TargetArgs {
    /// Off-surface points, one `x y z` per line.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Square lattice, e.g. `--slice normal=z offset=0 n=101 extent=2`.
    #[arg(long, num_args = 1..)]
    pub slice: Vec<String>,
}

impl TargetArgs {
    pub fn points(&self, mesh: &SurfaceMesh) -> Result<Vec<Vec3>> {
        let mut pts = Vec::new();
        if let Some(path) = &self.targets {
            pts.extend(read_points(&std::fs::read_to_string(path)?)?);
        }
        if !self.slice.is_empty() {
            pts.extend(Slice::parse(&self.slice, mesh)?.points());
        }
        Ok(pts)
    }
}

/// Planar lattice of `n × n` points on `[-extent, extent]²` at `offset` along `normal`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub normal: usize,
    pub offset: f64,
    pub n: usize,
    pub extent: f64,
}

impl Slice {
    pub fn parse(tokens: &[String], mesh: &SurfaceMesh) -> Result<Self> {
        let bound = mesh.nodes().iter().map(|n| n.x.abs().max()).fold(0.0, f64::max);
        let mut s = Slice {
            normal: 2,
            offset: 0.0,
            n: 51,
            extent: 1.5 * bound,
        };
        for tok in tokens.iter().flat_map(|t| t.split([',', ' '])).filter(|t| !t.is_empty()) {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("slice token {tok:?} is not key=value")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Argument(format!("slice {key}: {e}"));
            match key {
                "normal" => {
                    s.normal = match val {
                        "x" => 0,
                        "y" => 1,
                        "z" => 2,
                        _ => return Err(bad(&"expected x, y or z")),
                    }
                }
                "offset" => s.offset = val.parse().map_err(|e| bad(&e))?,
                "n" => s.n = val.parse().map_err(|e| bad(&e))?,
                "extent" => s.extent = val.parse().map_err(|e| bad(&e))?,
                _ => return Err(bad(&"unknown key")),
            }
        }
        if s.n < 2 || !(s.extent > 0.0) {
            return Err(Error::Argument("slice needs n >= 2 and extent > 0".into()));
        }
        Ok(s)
    }

    pub fn points(&self) -> Vec<Vec3> {
        let (a, b) = ((self.normal + 1) % 3, (self.normal + 2) % 3);
        let step = 2.0 * self.extent / (self.n - 1) as f64;
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                let mut x = Vec3::zeros();
                x[self.normal] = self.offset;
                x[a] = -self.extent + i as f64 * step;
                x[b] = -self.extent + j as f64 * step;
                out.push(x);
            }
        }
        out
    }
}

fn read_points(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split([',', ' ', '\t'])
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if v.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 coordinates, found {}", v.len()),
            });
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

/// Density values from a `x,y,z,Re,Im` CSV as written by `solve`.
fn read_density(text: &str) -> Result<Vec<C64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        };
        if cols.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected x,y,z,Re,Im".into(),
            });
        }
        out.push(C64::new(parse(cols[3])?, parse(cols[4])?));
    }
    Ok(out)
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct GeomArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// KPATCH output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Geometry summary as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct GeomStats {
    patches: usize,
    order: usize,
    nodes: usize,
    area: f64,
    volume: f64,
    min_jacobian: f64,
    max_radius: f64,
    aspect_max: f64,
    aspect_avg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kernel {
    Single,
    Double,
    Adjoint,
    Cfie,
}

impl Kernel {
    fn spec(self, k: C64) -> KernelSpec {
        match self {
            Kernel::Single => KernelSpec::single(k),
            Kernel::Double => KernelSpec::double(k),
            Kernel::Adjoint => KernelSpec::adjoint_double(k),
            Kernel::Cfie => KernelSpec::cfie(k),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PrecomputeArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[command(flatten)]
    pub quad: QuadArgs,
    #[command(flatten)]
    pub targets: TargetArgs,
    #[arg(long, value_enum, default_value_t = Kernel::Single)]
    pub kernel: Kernel,
    /// Wavenumber, real part (0 selects Laplace).
    #[arg(long, default_value_t = 0.0)]
    pub k: f64,
    #[arg(long, default_value_t = 0.0)]
    pub k_im: f64,
    /// Binary dump of the correction blocks; reused when it matches.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Disable reuse of adaptive sub-triangle samples.
    #[arg(long)]
    pub no_cache: bool,
    /// Output file: statistics JSON for `precompute`, values CSV for `eval` (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Density {
    One,
    Smooth,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: PrecomputeArgs,
    #[arg(long, value_enum, default_value_t = Density::One)]
    pub density: Density,
    /// Density from a `x,y,z,Re,Im` CSV, overriding `--density`.
    #[arg(long)]
    pub density_file: Option<PathBuf>,
    /// Metrics JSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[command(flatten)]
    pub quad: QuadArgs,
    #[command(flatten)]
    pub targets: TargetArgs,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long, default_value_t = 0.0)]
    pub k_im: f64,
    /// Interior point sources generating the boundary data.
    #[arg(long, default_value_t = 6)]
    pub sources: usize,
    /// Exterior check points used for the error report.
    #[arg(long, default_value_t = 10)]
    pub checks: usize,
    #[arg(long, default_value_t = 200)]
    pub maxit: usize,
    /// Density CSV.
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    /// Field at the requested targets as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report JSON (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Relative L² error of Green's identity on the surface.
    Greens,
    /// Relative L∞ error of the combined-field solve at exterior points.
    Cfie,
}

#[derive(Debug, Clone, Args)]
pub struct ConvergeArgs {
    #[arg(long, value_enum, default_value_t = Shape::Sphere)]
    pub shape: Shape,
    #[arg(long, value_delimiter = ',', default_value = "3,4")]
    pub orders: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub refines: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub nu: usize,
    #[arg(long, default_value_t = 16)]
    pub nv: usize,
    #[arg(long, default_value_t = 5e-7)]
    pub eps: f64,
    #[arg(long, default_value_t = 1.25)]
    pub eta1: f64,
    #[arg(long, value_enum, default_value_t = Accel::Direct)]
    pub accel: Accel,
    #[arg(long)]
    pub fmm_eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = Study::Greens)]
    pub study: Study,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long, default_value_t = 0.0)]
    pub k_im: f64,
    #[arg(long, default_value_t = 200)]
    pub maxit: usize,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match &cli.command {
        Command::Geom(a) => cmd_geom(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Solve(a) => cmd_solve(a, cli.seed),
        Command::Converge(a) => cmd_converge(a, cli.seed),
    }
}

pub fn cmd_geom(a: &GeomArgs) -> Result<()> {
    let mesh = a.mesh.build()?;
    match &a.out {
        Some(p) => save_kpatch(&mesh, p)?,
        None => {
            let mut w = sink(&None)?;
            w.write_all(crate::geometry::format_kpatch(&mesh).as_bytes())?;
        }
    }
    if let Some(p) = &a.stats {
        let (aspect_max, aspect_avg) = mesh.aspect_stats();
        let stats = GeomStats {
            patches: mesh.num_patches(),
            order: mesh.order(),
            nodes: mesh.len(),
            area: mesh.area(),
            volume: mesh.signed_volume(),
            min_jacobian: mesh.min_jacobian(),
            max_radius: mesh.max_radius(),
            aspect_max,
            aspect_avg,
        };
        write_json(p, &stats)?;
    }
    Ok(())
}

fn kernel_wavenumber(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[derive(Debug, Serialize)]
struct PrecomputeReport {
    metrics: crate::eval::Metrics,
    cache: crate::quadrature::CacheStats,
    near_pairs: usize,
    dump: Option<String>,
}

pub fn cmd_precompute(a: &PrecomputeArgs) -> Result<()> {
    let mesh = a.mesh.build()?;
    let params = a.quad.params(mesh.order())?;
    let targets: Vec<Target> = a.targets.points(&mesh)?.into_iter().map(Target::point).collect();
    let spec = a.kernel.spec(kernel_wavenumber(a.k, a.k_im));
    let opts = PrecomputeOptions {
        cache: !a.no_cache,
        dump: a.dump.clone(),
        ..Default::default()
    };
    let cache = precompute_with(&mesh, &[spec], params, &targets, &opts)?;
    let report = PrecomputeReport {
        metrics: metrics(&cache, None),
        cache: cache.cache_stats,
        near_pairs: cache.near_list.total(),
        dump: a.dump.as_ref().map(|p| p.display().to_string()),
    };
    let mut w = sink(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let r = &a.run;
    let mesh = r.mesh.build()?;
    let params = r.quad.params(mesh.order())?;
    let extra = r.targets.points(&mesh)?;
    let targets: Vec<Target> = extra.iter().copied().map(Target::point).collect();
    let spec = r.kernel.spec(kernel_wavenumber(r.k, r.k_im));
    let opts = PrecomputeOptions {
        cache: !r.no_cache,
        dump: r.dump.clone(),
        ..Default::default()
    };
    let cache = precompute_with(&mesh, &[spec], params, &targets, &opts)?;
    let sigma = match &a.density_file {
        Some(p) => read_density(&std::fs::read_to_string(p)?)?,
        None => mesh
            .nodes()
            .iter()
            .map(|n| match a.density {
                Density::One => C64::new(1.0, 0.0),
                Density::Smooth => C64::new(1.0 + n.x.x, n.x.y * n.x.z),
            })
            .collect(),
    };
    let acc = r.quad.accelerator()?;
    let t0 = Instant::now();
    let pot = cache.apply(&sigma, 0, acc.as_ref())?;
    let t_lp = t0.elapsed().as_secs_f64();
    let mut w = sink(&r.out)?;
    if extra.is_empty() {
        let pts: Vec<Vec3> = mesh.nodes().iter().map(|n| n.x).collect();
        write_potential_csv(&mut w, &pts, pot.surface())?;
    } else {
        write_potential_csv(&mut w, &extra, pot.off_surface())?;
    }
    w.flush()?;
    if let Some(p) = &a.metrics {
        write_json(p, &metrics(&cache, Some(t_lp)))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SolveReport {
    k: [f64; 2],
    converged: bool,
    iterations: usize,
    residuals: Vec<f64>,
    eps_a: f64,
    sources: Vec<[f64; 3]>,
    t_solve: f64,
    metrics: crate::eval::Metrics,
}

/// Relative L∞ error `max |u - u*| / max |u*|`.
fn relative_linf(u: &[C64], exact: &[C64]) -> f64 {
    let num = u.iter().zip(exact).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let den = exact.iter().map(|b| b.norm()).fold(0.0, f64::max);
    num / den
}

struct CfieRun {
    eps_a: f64,
    field: Vec<C64>,
    report: SolveReport,
    sigma: Vec<C64>,
}

#[allow(clippy::too_many_arguments)]
fn run_cfie(
    mesh: &SurfaceMesh,
    k: C64,
    params: NearParams,
    acc: &dyn FarAccelerator,
    sources: &[Vec3],
    checks: &[Vec3],
    extra: &[Vec3],
    maxit: usize,
) -> Result<CfieRun> {
    let f: Vec<C64> = mesh
        .nodes()
        .iter()
        .map(|n| point_source_field(k, sources, &n.x))
        .collect::<Result<_>>()?;
    let mut all = checks.to_vec();
    all.extend_from_slice(extra);
    let t0 = Instant::now();
    let sol = solve_dirichlet_cfie(mesh, k, &f, params, &all, acc, maxit)?;
    let t_solve = t0.elapsed().as_secs_f64();
    let u = sol.field_at_registered(acc)?;
    let exact: Vec<C64> = checks
        .iter()
        .map(|x| point_source_field(k, sources, x))
        .collect::<Result<_>>()?;
    let eps_a = relative_linf(&u[..checks.len()], &exact);
    let report = SolveReport {
        k: [k.re, k.im],
        converged: sol.gmres.converged,
        iterations: sol.gmres.iterations,
        residuals: sol.gmres.residuals.clone(),
        eps_a,
        sources: sources.iter().map(|s| [s.x, s.y, s.z]).collect(),
        t_solve,
        metrics: metrics(&sol.cache, None),
    };
    Ok(CfieRun {
        eps_a,
        field: u[checks.len()..].to_vec(),
        report,
        sigma: sol.sigma,
    })
}

pub fn cmd_solve(a: &SolveArgs, seed: u64) -> Result<()> {
    let mesh = a.mesh.build()?;
    let params = a.quad.params(mesh.order())?;
    let acc = a.quad.accelerator()?;
    let k = kernel_wavenumber(a.k, a.k_im);
    let sources = interior_sources(&mesh, a.sources, seed)?;
    let checks = exterior_sources(&mesh, a.checks, seed.wrapping_add(1));
    let extra = a.targets.points(&mesh)?;
    let run = run_cfie(&mesh, k, params, acc.as_ref(), &sources, &checks, &extra, a.maxit)?;
    if let Some(p) = &a.sigma {
        let pts: Vec<Vec3> = mesh.nodes().iter().map(|n| n.x).collect();
        write_potential_csv(std::io::BufWriter::new(std::fs::File::create(p)?), &pts, &run.sigma)?;
    }
    if !extra.is_empty() || a.out.is_some() {
        let mut w = sink(&a.out)?;
        write_potential_csv(&mut w, &extra, &run.field)?;
        w.flush()?;
    }
    let converged = run.report.converged;
    match &a.report {
        Some(p) => write_json(p, &run.report)?,
        None => {
            let mut w = sink(&None)?;
            serde_json::to_writer_pretty(&mut w, &run.report)?;
            writeln!(w)?;
        }
    }
    if !converged {
        return Err(Error::Validation(format!(
            "GMRES did not reach {:e} in {} iterations",
            params.eps, a.maxit
        )));
    }
    Ok(())
}

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeRow {
    pub order: usize,
    pub refine: usize,
    pub h: f64,
    pub n: usize,
    pub error: f64,
    /// Observed order against the previous refinement of the same `p`.
    pub rate: Option<f64>,
}

/// Errors over `orders × refines`; sources are placed once on the coarsest mesh.
pub fn convergence_table(a: &ConvergeArgs, seed: u64) -> Result<Vec<ConvergeRow>> {
    let k = kernel_wavenumber(a.k, a.k_im);
    let acc: Box<dyn FarAccelerator> = match a.accel {
        Accel::Direct => Box::new(direct_accelerator()),
        Accel::Tree => Box::new(Treecode::for_accuracy(a.fmm_eps.unwrap_or(a.eps))?),
    };
    let mut refines = a.refines.clone();
    refines.sort_unstable();
    refines.dedup();
    let coarse = build_shape(a.shape, refines.first().copied().unwrap_or(0), 3, a.nu, a.nv)?;
    let ext = exterior_sources(&coarse, 1, seed);
    let (inner, checks) = match a.study {
        Study::Greens => (Vec::new(), Vec::new()),
        Study::Cfie => (
            interior_sources(&coarse, 6, seed)?,
            exterior_sources(&coarse, 10, seed.wrapping_add(1)),
        ),
    };
    let mut rows = Vec::new();
    for &p in &a.orders {
        let mut prev: Option<(f64, f64)> = None;
        for &r in &refines {
            let mesh = build_shape(a.shape, r, p, a.nu, a.nv)?;
            let mut params = NearParams::new(p, a.eps);
            params.eta1 = a.eta1;
            params.validate()?;
            let error = match a.study {
                Study::Greens => greens_identity_error(&mesh, k, &ext, params, acc.as_ref())?,
                Study::Cfie => run_cfie(&mesh, k, params, acc.as_ref(), &inner, &checks, &[], a.maxit)?.eps_a,
            };
            let h = (mesh.area() / mesh.num_patches() as f64).sqrt();
            let rate = prev.map(|(h0, e0)| (e0 / error).ln() / (h0 / h).ln());
            log::info!("p={p} refine={r} N={} error={error:.3e}", mesh.len());
            rows.push(ConvergeRow {
                order: p,
                refine: r,
                h,
                n: mesh.len(),
                error,
                rate,
            });
            prev = Some((h, error));
        }
    }
    Ok(rows)
}

/// Least-squares slope of `log error` against `log h`.
pub fn fitted_order(rows: &[ConvergeRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.h.ln(), r.error.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn write_convergence_csv(mut w: impl Write, rows: &[ConvergeRow]) -> Result<()> {
    writeln!(w, "p,refine,h,N,error,order")?;
    for r in rows {
        let rate = r.rate.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(w, "{},{},{:.16e},{},{:.16e},{}", r.order, r.refine, r.h, r.n, r.error, rate)?;
    }
    Ok(())
}

pub fn cmd_converge(a: &ConvergeArgs, seed: u64) -> Result<()> {
    let rows = convergence_table(a, seed)?;
    let mut w = sink(&a.out)?;
    write_convergence_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

/// Machine-readable failure report.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
}

impl ErrorReport {
    pub fn new(e: &Error) -> Self {
        let error = match e {
            Error::Domain(_) => "domain",
            Error::Geometry(_) => "geometry",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Quadrature(_) => "quadrature",
            Error::Argument(_) => "argument",
            Error::Unsupported(_) => "unsupported",
            Error::Tree(_) => "tree",
            Error::Internal(_) => "internal",
            Error::Singular(_) => "singular",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        };
        Self {
            error,
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("surfquad").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn slice_lattice() {
        let mesh = gen_sphere(0, 3).unwrap();
        let toks: Vec<String> = ["normal=x", "offset=0.5", "n=3", "extent=2"].iter().map(|s| s.to_string()).collect();
        let s = Slice::parse(&toks, &mesh).unwrap();
        let pts = s.points();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().all(|p| p.x == 0.5));
        assert_eq!(pts[0], Vec3::new(0.5, -2.0, -2.0));
        assert_eq!(pts[8], Vec3::new(0.5, 2.0, 2.0));
        assert!(Slice::parse(&["normal=w".to_string()], &mesh).is_err());
        assert!(Slice::parse(&["n".to_string()], &mesh).is_err());
    }

    #[test]
    fn slice_flag_takes_several_tokens() {
        let cli = parse(&["eval", "--slice", "normal=z", "offset=0", "n=5", "--eps", "1e-3"]);
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.run.targets.slice.len(), 3);
                assert_eq!(a.run.quad.eps, 1e-3);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn geom_sphere_has_32_patches() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.kpatch");
        let cli = parse(&["geom", "--shape", "sphere", "--refine", "1", "--order", "4", "--out", out.to_str().unwrap()]);
        run(&cli).unwrap();
        let mesh = load_kpatch(&out).unwrap();
        assert_eq!(mesh.num_patches(), 32);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("KPATCH 32 4"));
    }

    #[test]
    fn point_and_density_readers() {
        let pts = read_points("# c\n1 2 3\n\n4,5,6\n").unwrap();
        assert_eq!(pts, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
        assert!(read_points("1 2\n").is_err());
        let d = read_density("x,y,z,Re,Im\n0,0,0,1.5,-2\n").unwrap();
        assert_eq!(d, vec![C64::new(1.5, -2.0)]);
    }

    #[test]
    fn bad_eta_is_argument_error() {
        let cli = parse(&["precompute", "--eta", "0.5"]);
        assert!(matches!(run(&cli), Err(Error::Argument(_))));
    }

    #[test]
    fn fitted_order_of_exact_power() {
        let rows: Vec<ConvergeRow> = (0..3)
            .map(|i| {
                let h = 0.5f64.powi(i);
                ConvergeRow {
                    order: 3,
                    refine: i as usize,
                    h,
                    n: 1,
                    error: 2.0 * h.powi(3),
                    rate: None,
                }
            })
            .collect();
        assert!((fitted_order(&rows) - 3.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("p,refine,h,N,error,order\n3,0,"));
    }
}
