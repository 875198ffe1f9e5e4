#![allow(dead_code)]

use nd_core::dataset::{CoordTransform, NormStats, SiteDescriptor, SparseField, Step, Trajectory};
use nd_surrogate::eval::EvalGeometry;
use nd_surrogate::model::{Geometry, ModelConfig, Surrogate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub struct Fixture {
    pub rest: Vec<[f64; 3]>,
    pub coord: CoordTransform,
    pub geometry: Arc<Geometry>,
    pub eval: EvalGeometry,
    pub trajectories: Vec<Trajectory>,
}

/// Random node cloud with toy damped dynamics driven by a push on a few
/// nodes: `u_t = 0.6 u_{t-1} + c_t` plus a smoothed neighbour term.
pub fn fixture(n_nodes: usize, n_traj: usize, n_steps: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest: Vec<[f64; 3]> = (0..n_nodes)
        .map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..80.0), rng.gen_range(0.0..50.0)])
        .collect();
    let coord = CoordTransform {
        origin: [0.0; 3],
        scale: 2.0,
    };
    let scaled: Vec<[f64; 3]> = rest.iter().map(|p| p.map(|x| x * coord.scale)).collect();
    let geometry = Arc::new(Geometry::new(scaled, ModelConfig::tiny().d_embed));
    let mut trajectories = Vec::new();
    for t in 0..n_traj {
        let site: Vec<u32> = (0..4).map(|i| ((t * 7 + i * 3) % n_nodes) as u32).collect();
        let dir: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mut u = vec![[0.0f32; 3]; n_nodes];
        let mut steps = vec![Step {
            u: u.clone(),
            c: SparseField::default(),
        }];
        for s in 1..n_steps {
            let mag = (s as f32 / n_steps as f32 * 3.0).min(1.5);
            let c = SparseField {
                nodes: site.clone(),
                values: site.iter().map(|_| dir.map(|d| d * mag)).collect(),
            };
            let dense = c.to_dense(n_nodes);
            let mean: [f32; 3] = std::array::from_fn(|k| u.iter().map(|v| v[k]).sum::<f32>() / n_nodes as f32);
            for (i, v) in u.iter_mut().enumerate() {
                for k in 0..3 {
                    v[k] = 0.6 * v[k] + dense[i][k] + 0.2 * mean[k];
                }
            }
            steps.push(Step { u: u.clone(), c });
        }
        trajectories.push(Trajectory {
            n_nodes,
            dt: 0.05,
            scheme_id: 1 + (t as u32 % 3),
            seed: t as u64,
            site: SiteDescriptor {
                seed_face: 0,
                faces: vec![0],
                nodes: site,
            },
            steps,
        });
    }
    Fixture {
        eval: EvalGeometry::new(rest.clone(), coord),
        rest,
        coord,
        geometry,
        trajectories,
    }
}

pub fn tiny_model(seed: u64) -> Surrogate {
    Surrogate::new(
        ModelConfig {
            init_seed: seed,
            ..ModelConfig::tiny()
        },
        NormStats {
            mean: [0.1, 0.0, -0.1],
            std: [0.9, 1.1, 1.0],
        },
    )
    .unwrap()
}
