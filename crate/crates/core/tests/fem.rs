use nalgebra::Matrix3;
use nd_core::fem::{neo_hookean_pk2, strain_energy_from_c, BoundaryConditions, MaterialParams, SimState, TledSolver};
use nd_core::mesh::{generate_primitive_mesh, PrimitiveKind, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

fn random_gradient(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    loop {
        let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.4..0.4));
        if (0.5..=1.5).contains(&f.determinant()) {
            return f;
        }
    }
}

#[test]
fn pk2_is_twice_the_energy_gradient_in_c() {
    let mat = MaterialParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f = random_gradient(&mut rng);
        let c = f.transpose() * f;
        let s = neo_hookean_pk2(&f, &mat).unwrap();
        let h = 1e-6;
        let fd = Matrix3::from_fn(|i, j| {
            let mut p = c;
            p[(i, j)] += h;
            let mut m = c;
            m[(i, j)] -= h;
            2.0 * (strain_energy_from_c(&p, &mat).unwrap() - strain_energy_from_c(&m, &mat).unwrap()) / (2.0 * h)
        });
        let rel = (s - fd).norm() / s.norm();
        worst = worst.max(rel);
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

/// Dynamic relaxation of a cube under a small uniaxial stretch. Both end
/// faces carry the homogeneous linear-elastic displacement; the rest of the
/// mesh is free.
pub fn uniaxial_stretch_error(strain: f64) -> (f64, usize) {
    let l = 10.0;
    let mesh = generate_primitive_mesh(PrimitiveKind::Box, 4, [l, l, l]).unwrap();
    let mat = MaterialParams {
        damping_alpha: 600.0,
        ..MaterialParams::default()
    };
    let nu = mat.poisson_nu;
    let (lo, hi) = mesh.bounding_box();
    let exact = |p: &Vec3| Vec3::new(strain * (p.x - lo.x), -nu * strain * (p.y - lo.y), -nu * strain * (p.z - lo.z));
    let prescribed: BTreeMap<u32, Vec3> = mesh
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.x - lo.x).abs() < 1e-9 || (p.x - hi.x).abs() < 1e-9)
        .map(|(i, p)| (i as u32, exact(p)))
        .collect();
    let bc = BoundaryConditions::new(BTreeSet::new(), prescribed).unwrap();
    let mut solver = TledSolver::new(&mesh, mat).unwrap();
    let dt = 0.5 * solver.critical_timestep();
    let mut state = SimState::at_rest(mesh.n_vertices());
    let mut steps = 0;
    for k in 0..200_000 {
        solver.step(&mut state, &bc, dt).unwrap();
        steps = k + 1;
        let change = state
            .u_curr
            .iter()
            .zip(&state.u_prev)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if k > 100 && change < 1e-12 * strain * l {
            break;
        }
    }
    let e = mat.young_e * strain;
    let target = Matrix3::from_diagonal(&Vec3::new(e, 0.0, 0.0));
    let mut worst: f64 = 0.0;
    for t in 0..mesh.tets.len() {
        let f = solver.ed.deformation_gradient(&mesh, &state.u_curr, t);
        let s = neo_hookean_pk2(&f, &mat).unwrap();
        worst = worst.max((s - target).norm() / e);
    }
    (worst, steps)
}

#[test]
fn small_uniaxial_stretch_matches_linear_elasticity() {
    let (err, steps) = uniaxial_stretch_error(1e-4);
    println!("relative stress error {err:e} after {steps} steps");
    assert!(err < 0.01, "relative stress error {err}");
}
