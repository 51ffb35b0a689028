//! A target just above an oversampled source of a tiny patch: the
//! subtract-and-add path adds and removes a huge spurious term, the skip path
//! never forms it.

mod common;

use common::*;
use surfquad::basis::UVPoint;
use surfquad::eval::{direct_accelerator, precompute};
use surfquad::geometry::flat_mesh;
use surfquad::kernels::KernelSpec;
use surfquad::quadrature::{NearParams, Target};
use surfquad::{Vec3, C64};

#[test]
fn skip_path_survives_a_target_next_to_a_source() {
    let s = 1e-6;
    let verts = [Vec3::zeros(), Vec3::new(s, 0.0, 0.0), Vec3::new(0.0, s, 0.0)];
    let mesh = flat_mesh(&verts, &[[0, 1, 2]], 4, lib()).unwrap();
    let ker = KernelSpec::laplace_single();
    let eps = 1e-8;
    let mut cache = precompute(&mesh, &[ker], NearParams::new(4, eps), &[]).unwrap();
    let node = cache.src_points[cache.over[0].start + 1];
    let offset = 1e-4 * s;
    let t = Target::point(node + Vec3::new(0.0, 0.0, offset));
    assert_ne!(t.x, node);
    let ids = cache.extend_targets(&[t]).unwrap();
    let sigma = vec![C64::new(1.0, 0.0); mesh.len()];
    let sub = cache.apply(&sigma, 0, &direct_accelerator()).unwrap().values[ids.start];
    let skip = cache.apply_skip_near(&sigma, 0, &direct_accelerator()).unwrap().values[ids.start];

    let uv = UVPoint::new(node.x / s, node.y / s);
    assert!((mesh.patches()[0].point(uv) - node).norm() < 1e-12 * s);
    let want = polar_oracle(&mesh.patches()[0], uv, &t, &ker, |_| 1.0, 16, 0.5 * offset / s);

    let skip_err = (skip - want).norm() / want.norm();
    let sub_err = (sub - want).norm() / want.norm();
    println!("relative error: skip path {skip_err:.2e}, subtract path {sub_err:.2e}");
    assert!(skip_err <= eps, "skip path error {skip_err:.2e}");
    // the spurious term w / (4π offset) is added and removed again; the
    // subtract path loses about log10(spurious / value) digits to it
    let w = cache.src_weights[cache.over[0].start + 1];
    let spurious = w / (4.0 * std::f64::consts::PI * offset);
    println!("spurious term {:.2e} times the potential", spurious / want.norm());
    assert!(spurious > 10.0 * want.norm());
    assert!((sub - want).norm() <= 8.0 * f64::EPSILON * spurious + eps * want.norm());
}
