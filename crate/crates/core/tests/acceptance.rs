//! Acceptance criteria, run serially so timings are not disturbed.
//! Each criterion prints one PASS/FAIL line; the process fails if any fails.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use surfquad::basis::{gauss_legendre, KoornwinderBasis, UVPoint};
use surfquad::cli::{convergence_table, Accel, ConvergeArgs, Shape, Study};
use surfquad::eval::{
    direct_accelerator, metrics, precompute, relative_l2, FarAccelerator, FieldKind, SourceSet, Treecode,
};
use surfquad::geometry::{flat_mesh, gen_sphere, gen_stellarator, SurfaceMesh};
use surfquad::kernels::KernelSpec;
use surfquad::octree::{build_near_lists, OctTree};
use surfquad::quadrature::{near_matrix, self_matrix, NearParams, PatchQuad, Target};
use surfquad::solver::{interior_sources, point_source_field, solve_dirichlet_cfie};
use surfquad::{Vec3, C64};

type Outcome = (bool, String);

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn basis_suite() -> Outcome {
    let t0 = Instant::now();
    let mut gram = 0.0f64;
    let mut exact = 0.0f64;
    let mut interp = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in 1..=10 {
        let basis = KoornwinderBasis::new(p);
        let n = basis.count();
        // collapsed tensor Gauss rule, exact for the degree 2p - 2 products
        let (x, w) = gauss_legendre(p + 2);
        let mut g = vec![0.0; n * n];
        for (xi, wi) in x.iter().zip(&w) {
            for (eta, we) in x.iter().zip(&w) {
                let pt = UVPoint::new(xi * (1.0 - eta), *eta);
                let k = basis.eval(pt).unwrap();
                let wt = wi * we * (1.0 - eta);
                for a in 0..n {
                    for b in 0..n {
                        g[a * n + b] += wt * k[a] * k[b];
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                let want = if a == b { 1.0 } else { 0.0 };
                gram = gram.max((g[a * n + b] - want).abs());
            }
        }
        // interpolation of a random polynomial of degree < p
        let set = lib().nodes(p).unwrap();
        let poly = random_polynomial(p, &mut rng);
        let vals: Vec<f64> = set.nodes.iter().map(|x| eval_polynomial(&poly, *x)).collect();
        let coeffs = set.coeffs_from_values(&vals);
        for _ in 0..50 {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let pt = if u + v <= 1.0 { UVPoint::new(u, v) } else { UVPoint::new(1.0 - u, 1.0 - v) };
            let k = basis.eval(pt).unwrap();
            let got: f64 = k.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            interp = interp.max((got - eval_polynomial(&poly, pt)).abs());
        }
    }
    for q in 1..=20 {
        let rule = lib().quadrature(q).unwrap();
        for a in 0..q as u32 {
            for b in 0..(q as u32 - a) {
                let got = rule.integrate(|x| x.u.powi(a as i32) * x.v.powi(b as i32));
                exact = exact.max((got - monomial_integral(a, b)).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        gram < 1e-12 && exact < 1e-12 && interp < 1e-11 && secs < 10.0,
        format!("gram {gram:.1e}, rule exactness {exact:.1e}, interpolation {interp:.1e}, {secs:.1}s"),
    )
}

fn gauss_identity() -> Outcome {
    let (p, eps) = (4, 1e-6);
    let mesh = gen_sphere(2, p).unwrap();
    let centre = [Target::point(Vec3::zeros())];
    let cache = precompute(&mesh, &[KernelSpec::laplace_double()], NearParams::new(p, eps), &centre).unwrap();
    let v = cache.apply(&vec![C64::new(1.0, 0.0); mesh.len()], 0, &direct_accelerator()).unwrap().off_surface()[0];
    let err = (v + 1.0).norm();
    // C = 1 with h the largest patch diameter
    let h = 2.0 * mesh.max_radius();
    let bound = eps.max(h.powi(p as i32));
    (err <= bound, format!("D[1](0) = {:.8}, error {err:.2e}, bound {bound:.2e}", v.re))
}

fn sphere_single_layer() -> Outcome {
    let (p, eps) = (4, 1e-7);
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for r in 1..=3 {
        let mesh = gen_sphere(r, p).unwrap();
        let cache = precompute(&mesh, &[KernelSpec::laplace_single()], NearParams::new(p, eps), &[]).unwrap();
        let pot = cache.apply(&vec![C64::new(1.0, 0.0); mesh.len()], 0, &direct_accelerator()).unwrap();
        errs.push(pot.surface().iter().map(|v| (v - 1.0).norm()).fold(0.0, f64::max));
        hs.push((mesh.area() / mesh.num_patches() as f64).sqrt());
    }
    let order = fitted_slope(&hs, &errs);
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    (
        decreasing && order >= p as f64,
        format!("max errors {}, observed order {order:.2} (want >= {p})", sci(&errs)),
    )
}

fn greens_convergence() -> Outcome {
    let t0 = Instant::now();
    let eps = 5e-7;
    let mut ok = true;
    let mut msg = Vec::new();
    // p = 3 reaches its asymptotic rate one level later than p = 4
    for (p, refines) in [(3usize, vec![2usize, 3, 4]), (4, vec![1, 2, 3])] {
        let args = ConvergeArgs {
            shape: Shape::Sphere,
            orders: vec![p],
            refines,
            nu: 4,
            nv: 16,
            eps,
            eta1: 1.25,
            accel: Accel::Direct,
            fmm_eps: None,
            study: Study::Greens,
            k: 1.0,
            k_im: 0.0,
            maxit: 200,
            out: None,
        };
        let rows = convergence_table(&args, 0).unwrap();
        let before_floor: Vec<_> = rows.iter().filter(|r| r.error > 10.0 * eps).cloned().collect();
        let order = surfquad::cli::fitted_order(&before_floor);
        let want = p as f64 - 1.0;
        ok &= before_floor.len() >= 2 && (order - want).abs() <= 0.5;
        let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
        msg.push(format!("p={p}: errors {}, order {order:.2} (want {want}±0.5)", sci(&errs)));
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    msg.push(format!("{secs:.0}s"));
    (ok, msg.join("; "))
}

fn cfie_solve() -> Outcome {
    let t0 = Instant::now();
    let (p, eps) = (4, 5e-7);
    let k = C64::new(1.0, 0.0);
    let mesh = gen_sphere(3, p).unwrap();
    let src = interior_sources(&mesh, 1, 3).unwrap();
    let f: Vec<C64> = mesh.nodes().iter().map(|n| point_source_field(k, &src, &n.x).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ext: Vec<Vec3> = (0..10).map(|_| (1.5 + rng.gen::<f64>()) * random_unit(&mut rng)).collect();
    let sol = solve_dirichlet_cfie(&mesh, k, &f, NearParams::new(p, eps), &ext, &direct_accelerator(), 100).unwrap();
    let u = sol.field_at_registered(&direct_accelerator()).unwrap();
    let exact: Vec<C64> = ext.iter().map(|x| point_source_field(k, &src, x).unwrap()).collect();
    let err = relative_max(&u, &exact);
    let res = *sol.gmres.residuals.last().unwrap();
    let its = sol.gmres.iterations;
    let secs = t0.elapsed().as_secs_f64();
    (
        err <= 1e-4 && res <= eps && its <= 60 && secs < 600.0,
        format!("exterior error {err:.2e}, residual {res:.1e} after {its} iterations, {secs:.0}s"),
    )
}

fn octahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let v = vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
    let f = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
    (v, f)
}

fn dual_path() -> Outcome {
    let (v, f) = octahedron();
    let meshes: Vec<(&str, SurfaceMesh, usize)> = vec![
        ("sphere p3", gen_sphere(1, 3).unwrap(), 3),
        ("sphere p5", gen_sphere(0, 5).unwrap(), 5),
        ("stellarator", gen_stellarator(3, 8, 3).unwrap(), 3),
        ("flat octahedron", flat_mesh(&v, &f, 4, lib()).unwrap(), 4),
    ];
    let mut worst = 0.0f64;
    for (_, mesh, p) in &meshes {
        let bound = mesh.nodes().iter().map(|n| n.x.norm()).fold(0.0, f64::max);
        let extra: Vec<Target> = [0.3, 0.97, 1.03, 2.0]
            .iter()
            .map(|s| Target::point(mesh.nodes()[0].x * *s + Vec3::new(0.0, 0.01, 0.0) * bound))
            .collect();
        for k in [C64::new(0.0, 0.0), C64::new(1.0, 0.2)] {
            let kernels = [KernelSpec::single(k), KernelSpec::double(k), KernelSpec::adjoint_double(k), KernelSpec::cfie(k)];
            let cache = precompute(mesh, &kernels, NearParams::new(*p, 1e-6), &extra).unwrap();
            let sigma: Vec<C64> = mesh.nodes().iter().map(|n| C64::new(n.x.x + 0.5, n.x.y * n.x.z)).collect();
            for kk in 0..kernels.len() {
                let a = cache.apply(&sigma, kk, &direct_accelerator()).unwrap();
                let b = cache.apply_skip_near(&sigma, kk, &direct_accelerator()).unwrap();
                worst = worst.max(relative_l2(&a.values, &b.values));
            }
        }
    }
    let names: Vec<&str> = meshes.iter().map(|m| m.0).collect();
    (worst <= 1e-12, format!("worst relative difference {worst:.1e} over {names:?}"))
}

fn oracle_equivalence() -> Outcome {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut oracle_worst = 0.0f64;
    for case in 0..20 {
        let p = 3 + case % 3;
        let scale = 0.3 + 1.2 * rng.gen::<f64>();
        let patch = random_patch(p, scale, &mut rng);
        let kr = if rng.gen::<bool>() { 0.0 } else { 0.5 + 1.5 * rng.gen::<f64>() };
        let k = C64::new(kr, 0.0);
        let kernel = match case % 4 {
            0 => KernelSpec::single(k),
            1 => KernelSpec::double(k),
            2 => KernelSpec::adjoint_double(k),
            _ => KernelSpec::cfie(k),
        };
        let kernels = [kernel];
        let poly = random_polynomial(p, &mut rng);
        let set = lib().nodes(p).unwrap();
        let sigma: Vec<f64> = set.nodes.iter().map(|x| eval_polynomial(&poly, *x)).collect();
        let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        let params = NearParams::new(p, eps);
        let density = |x: UVPoint| eval_polynomial(&poly, x);
        let (got, (want, oerr)) = if case % 2 == 0 {
            let i = rng.gen_range(0..set.nodes.len());
            let sm = self_matrix(&patch, &kernels, params, lib()).unwrap();
            let jet = patch.chart_eval(set.nodes[i]).unwrap();
            let t = Target::new(jet.x, jet.normal);
            let got: C64 = (0..sigma.len()).map(|l| sm.mats[0][(i, l)] * sigma[l]).sum();
            (got, polar_oracle_checked(&patch, set.nodes[i], &t, &kernel, density, f64::INFINITY))
        } else {
            let uv = loop {
                let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v < 0.95 && u > 0.02 && v > 0.02 {
                    break UVPoint::new(u, v);
                }
            };
            let jet = patch.chart_eval(uv).unwrap();
            let h = scale * 10f64.powf(-3.0 + 2.5 * rng.gen::<f64>());
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let t = Target::new(jet.x + side * h * jet.normal, random_unit(&mut rng));
            let mut pq = PatchQuad::new(&patch, &kernels, params, lib()).unwrap();
            let (m, _) = pq.near_moments(&t).unwrap();
            let rows = pq.rows_from_moments(&m);
            let got: C64 = rows.iter().zip(&sigma).map(|(a, s)| a * s).sum();
            (got, polar_oracle_checked(&patch, uv, &t, &kernel, density, 0.5 * h / jet.jac.sqrt()))
        };
        worst = worst.max((got - want).norm() / (eps * norm));
        oracle_worst = oracle_worst.max(oerr / (eps / 100.0 * norm));
    }
    (
        worst <= 1.0 && oracle_worst <= 1.0,
        format!("worst |error| / (eps ||sigma||) = {worst:.2e}, oracle self-check {oracle_worst:.2e} of eps/100"),
    )
}

fn accelerator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let make = |n: usize, rng: &mut ChaCha8Rng, dipoles: bool| SourceSet {
        points: random_points_in_cube(n, rng),
        normals: (0..n).map(|_| random_unit(rng)).collect(),
        charges: (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect(),
        dipoles: (0..n)
            .map(|_| if dipoles { C64::new(rng.gen::<f64>() - 0.5, 0.0) } else { C64::new(0.0, 0.0) })
            .collect(),
        groups: vec![0; n],
    };
    let fmm_eps = 1e-6;
    let tree = Treecode::for_accuracy(fmm_eps).unwrap();
    let src = make(10_000, &mut rng, true);
    let targets: Vec<Target> = random_points_in_cube(2000, &mut rng)
        .into_iter()
        .map(|x| Target::new(x, random_unit(&mut rng)))
        .collect();
    let mut worst = 0.0f64;
    for (k, kind, s) in [
        (C64::new(0.0, 0.0), FieldKind::Potential, &src),
        (C64::new(2.0, 0.0), FieldKind::Potential, &src),
        (C64::new(2.0, 0.0), FieldKind::NormalDerivative, &make(10_000, &mut rng, false)),
    ] {
        let a = tree.evaluate(k, s, &targets, kind).unwrap();
        let b = direct_accelerator().evaluate(k, s, &targets, kind).unwrap();
        worst = worst.max(relative_l2(&a, &b));
    }
    // cost growth as N doubles twice, sources = targets
    let timing_tree = Treecode::for_accuracy(1e-3).unwrap();
    let mut times = Vec::new();
    for n in [5_000, 10_000, 20_000] {
        let s = make(n, &mut rng, false);
        let t: Vec<Target> = s.points.iter().map(|x| Target::point(*x)).collect();
        let k = C64::new(0.0, 0.0);
        timing_tree.evaluate(k, &make(500, &mut rng, false), &t[..500], FieldKind::Potential).unwrap();
        let t0 = Instant::now();
        timing_tree.evaluate(k, &s, &t, FieldKind::Potential).unwrap();
        let tt = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        direct_accelerator().evaluate(k, &s, &t, FieldKind::Potential).unwrap();
        times.push((tt, t0.elapsed().as_secs_f64()));
    }
    let tree_growth = times[2].0 / times[0].0;
    let direct_growth = times[2].1 / times[0].1;
    (
        worst <= 10.0 * fmm_eps && tree_growth < direct_growth,
        format!(
            "relative l2 {worst:.1e} (limit {:.0e}); N 5k->20k: treecode x{tree_growth:.1}, direct x{direct_growth:.1}",
            10.0 * fmm_eps
        ),
    )
}

fn tree_properties() -> Outcome {
    const DIRS: [f64; 3] = [-1.0, 0.0, 1.0];
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n_c = rng.gen_range(1..80);
        let n_t = rng.gen_range(0..600);
        let s = rng.gen_range(1..16);
        let mut cents = random_points_in_cube(n_c, &mut rng);
        for c in cents.iter_mut().take(n_c / 3) {
            *c = Vec3::repeat(0.3) + 1e-3 * *c;
        }
        let reach: Vec<f64> = (0..n_c).map(|_| 0.5 * rng.gen::<f64>().powi(4)).collect();
        let targets = random_points_in_cube(n_t, &mut rng);
        let owner: Vec<Option<usize>> = (0..n_t).map(|t| if t % 5 == 0 { Some(t % n_c) } else { None }).collect();
        let tree = OctTree::build(&cents, &reach, &targets, s).unwrap();
        let held: usize = tree.boxes.iter().map(|b| b.centroids.len() + b.targets.len() + b.tethered.len()).sum();
        let partition = held == n_c + n_t
            && tree.target_box.iter().enumerate().all(|(t, &b)| tree.boxes[b].is_leaf() && tree.boxes[b].targets.contains(&t));
        let balanced = tree.balance_violations().is_empty();
        let root = &tree.boxes[0];
        let tethers = tree.tethers.iter().all(|rec| {
            let holder = &tree.boxes[rec.box_id];
            DIRS.iter().all(|&dx| {
                DIRS.iter().all(|&dy| {
                    DIRS.iter().all(|&dz| {
                        let probe = cents[rec.patch] + reach[rec.patch] * Vec3::new(dx, dy, dz);
                        let x = Vec3::from_fn(|i, _| probe[i].clamp(root.center[i] - root.half, root.center[i] + root.half));
                        holder.colleagues.iter().any(|&k| {
                            let b = &tree.boxes[k];
                            (0..3).all(|i| (x[i] - b.center[i]).abs() <= b.half * (1.0 + 1e-12))
                        })
                    })
                })
            })
        });
        let oracle: Vec<Vec<usize>> = (0..n_c)
            .map(|j| {
                (0..n_t)
                    .filter(|&t| owner[t] != Some(j) && (targets[t] - cents[j]).norm() < reach[j])
                    .collect()
            })
            .collect();
        let lists = build_near_lists(&tree, &owner).lists == oracle;
        if !(partition && balanced && tethers && lists) {
            failures.push(seed);
        }
    }
    (failures.is_empty(), format!("100 instances, failing seeds {failures:?}"))
}

fn cache_correctness() -> Outcome {
    let p = 4;
    let patch = patch_from_map(p, |x| {
        let (u, v) = (x.u, x.v);
        Vec3::new(u + 0.1 * v * v, v + 0.05 * u * v, 0.3 * u * u - 0.2 * v * v + 0.1 * u * v)
    });
    let kernels = [KernelSpec::laplace_single(), KernelSpec::double(C64::new(1.0, 0.0))];
    let params = NearParams::new(p, 1e-8);
    let jet = patch.chart_eval(UVPoint::new(0.3, 0.3)).unwrap();
    let targets: Vec<(usize, Target)> = (0..16)
        .map(|i| {
            let off = Vec3::new(0.002 * (i % 4) as f64, -0.002 * (i / 4) as f64, 0.0);
            (i, Target::point(jet.x + 0.01 * jet.normal + off))
        })
        .collect();
    let (on, s_on) = near_matrix(&patch, &targets, &kernels, params, lib(), true).unwrap();
    let (off, _) = near_matrix(&patch, &targets, &kernels, params, lib(), false).unwrap();
    let reuse = s_on.reuse_factor();
    (on == off && reuse >= 2.0, format!("bitwise identical: {}, reuse x{reuse:.2}", on == off))
}

fn metric_trends() -> Outcome {
    let mesh = gen_stellarator(6, 24, 4).unwrap();
    let kernels = [KernelSpec::laplace_single()];
    // warm the rule library so the first timing is not inflated
    precompute(&mesh, &kernels, NearParams::new(4, 5e-7), &[]).unwrap();
    let mut rows = Vec::new();
    for eps in [5e-3, 5e-4, 5e-7] {
        let cache = precompute(&mesh, &kernels, NearParams::new(4, eps), &[]).unwrap();
        let m = metrics(&cache, None);
        rows.push((eps, m.alpha, m.s_init));
    }
    let ok = rows.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].2 <= w[0].2);
    let desc: Vec<String> = rows.iter().map(|(e, a, s)| format!("eps {e:.0e}: alpha {a:.2}, s_init {s:.0}")).collect();
    (ok, desc.join("; "))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("basis suite", basis_suite),
        ("gauss identity", gauss_identity),
        ("sphere single layer", sphere_single_layer),
        ("greens identity convergence", greens_convergence),
        ("cfie scattering solve", cfie_solve),
        ("dual path equivalence", dual_path),
        ("oracle equivalence", oracle_equivalence),
        ("accelerator", accelerator),
        ("tree properties", tree_properties),
        ("cache correctness", cache_correctness),
        ("metric trends", metric_trends),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match std::panic::catch_unwind(run) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<28} {} ({:.1}s) {detail}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
