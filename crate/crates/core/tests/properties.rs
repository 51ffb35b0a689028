mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use surfquad::eval::{direct_accelerator, precompute, relative_l2, FarAccelerator, FieldKind, QuadCache, SourceSet, Treecode};
use surfquad::geometry::{gen_sphere, SurfaceMesh};
use surfquad::kernels::KernelSpec;
use surfquad::quadrature::{NearParams, Target};
use surfquad::{Vec3, C64};

fn mesh() -> &'static SurfaceMesh {
    static MESH: OnceLock<SurfaceMesh> = OnceLock::new();
    MESH.get_or_init(|| gen_sphere(1, 3).unwrap())
}

fn cache() -> &'static QuadCache<'static> {
    static CACHE: OnceLock<QuadCache<'static>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let k = C64::new(1.5, 0.1);
        let kernels = [
            KernelSpec::laplace_single(),
            KernelSpec::double(k),
            KernelSpec::adjoint_double(k),
            KernelSpec::cfie(k),
        ];
        let extra = [Target::point(Vec3::new(0.0, 0.2, 1.02)), Target::point(Vec3::new(0.1, 0.1, 0.1))];
        precompute(mesh(), &kernels, NearParams::new(3, 1e-5), &extra).unwrap()
    })
}

fn random_density(seed: u64, n: usize) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn both_paths_agree(seed in any::<u64>(), kernel in 0usize..4) {
        let c = cache();
        let sigma = random_density(seed, c.n_nodes());
        let a = c.apply(&sigma, kernel, &direct_accelerator()).unwrap();
        let b = c.apply_skip_near(&sigma, kernel, &direct_accelerator()).unwrap();
        prop_assert!(relative_l2(&a.values, &b.values) <= 1e-12);
    }

    #[test]
    fn apply_is_linear(seed in any::<u64>(), kernel in 0usize..4, alpha in -2.0f64..2.0) {
        let c = cache();
        let s1 = random_density(seed, c.n_nodes());
        let s2 = random_density(seed ^ 0x5555, c.n_nodes());
        let combo: Vec<C64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let a = c.apply(&s1, kernel, &direct_accelerator()).unwrap();
        let b = c.apply(&s2, kernel, &direct_accelerator()).unwrap();
        let ab = c.apply(&combo, kernel, &direct_accelerator()).unwrap();
        let sum: Vec<C64> = a.values.iter().zip(&b.values).map(|(x, y)| x + alpha * y).collect();
        prop_assert!(relative_l2(&ab.values, &sum) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn treecode_meets_its_accuracy(seed in any::<u64>(), n in 500usize..3000, kr in 0.0f64..3.0, tight in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = if tight { 1e-6 } else { 1e-3 };
        let src = SourceSet {
            points: random_points_in_cube(n, &mut rng),
            normals: (0..n).map(|_| random_unit(&mut rng)).collect(),
            charges: (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect(),
            dipoles: (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, 0.0)).collect(),
            groups: vec![0; n],
        };
        let targets: Vec<Target> = random_points_in_cube(300, &mut rng).into_iter().map(Target::point).collect();
        let k = C64::new(kr, 0.0);
        let tree = Treecode::for_accuracy(eps).unwrap();
        let a = tree.evaluate(k, &src, &targets, FieldKind::Potential).unwrap();
        let b = direct_accelerator().evaluate(k, &src, &targets, FieldKind::Potential).unwrap();
        prop_assert!(relative_l2(&a, &b) <= 10.0 * eps, "{}", relative_l2(&a, &b));
    }
}
