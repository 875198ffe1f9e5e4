//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Long-running artefacts (desk dataset, trained runs) are cached
//! under the cargo target tmp dir and reused on later runs.

use nalgebra::Matrix3;
use nd_cli::experiments;
use nd_cli::workbench::{generate, Dataset, GenerateArgs, Workbench};
use nd_core::dataset::{
    decode_trajectory, denormalize, encode_trajectory, normalize, read_trajectory, scale_coordinates,
    write_trajectory, DatasetManifest, NormStats, Trajectory,
};
use nd_core::fem::{
    neo_hookean_pk2, strain_energy_from_c, BoundaryConditions, MaterialParams, SimState, SolverConfig, TledSolver,
};
use nd_core::mesh::io::{read_mesh, MeshSidecar};
use nd_core::mesh::{generate_primitive_mesh, grow_collision_site, MeshSpec, PrimitiveKind, Vec3, MAX_SITE_FACES};
use nd_core::scenario::{default_scheme_library, SimulationScheme};
use nd_serve::{MeshEntry, Pick, Registry, Service, ServiceConfig, StepRequest};
use nd_surrogate::checkpoint::{sha256_hex, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use nd_surrogate::eval::{err_max, hausdorff_local, mse, to_f64};
use nd_surrogate::experiment::{experiment_tf_vs_stf, experiment_window_sweep, CachedRunner, TfVsStfReport};
use nd_surrogate::model::{DropPath, Geometry, ModelConfig, Supernodes, Surrogate};
use nd_surrogate::tape::{Mat, Var};
use nd_surrogate::train::{stf_rollout_loss, tf_schedule, FixedForcing, ForcingSource, KeyedForcing, RolloutWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

macro_rules! fail {
    ($($t:tt)*) => { |e| format!("{}: {e}", format!($($t)*)) };
}

// 1 ------------------------------------------------------------------------

fn stress_energy() -> Outcome {
    const TOL: f64 = 1e-6;
    let t0 = Instant::now();
    let mat = MaterialParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.4..0.4));
        if !(0.5..=1.5).contains(&f.determinant()) {
            continue;
        }
        n += 1;
        let c = f.transpose() * f;
        let s = neo_hookean_pk2(&f, &mat).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let fd = Matrix3::from_fn(|i, j| {
            let (mut p, mut m) = (c, c);
            p[(i, j)] += h;
            m[(i, j)] -= h;
            (strain_energy_from_c(&p, &mat).unwrap() - strain_energy_from_c(&m, &mat).unwrap()) / h
        });
        worst = worst.max((s - fd).norm() / s.norm());
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < TOL && secs < 10.0,
        format!("worst relative error {worst:.2e} over 100 gradients (tol {TOL:e}), {secs:.2} s"),
    )
}

// 2 ------------------------------------------------------------------------

fn small_strain() -> Outcome {
    const STRAIN: f64 = 1e-4;
    const TOL: f64 = 0.01;
    let t0 = Instant::now();
    let l = 10.0;
    let mesh = generate_primitive_mesh(PrimitiveKind::Box, 4, [l, l, l]).map_err(|e| e.to_string())?;
    let mat = MaterialParams {
        damping_alpha: 600.0,
        ..MaterialParams::default()
    };
    let nu = mat.poisson_nu;
    let (lo, hi) = mesh.bounding_box();
    let exact = |p: &Vec3| Vec3::new(STRAIN * (p.x - lo.x), -nu * STRAIN * (p.y - lo.y), -nu * STRAIN * (p.z - lo.z));
    let ends: BTreeMap<u32, Vec3> = mesh
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.x - lo.x).abs() < 1e-9 || (p.x - hi.x).abs() < 1e-9)
        .map(|(i, p)| (i as u32, exact(p)))
        .collect();
    let n_free = mesh.n_vertices() - ends.len();
    let bc = BoundaryConditions::new(BTreeSet::new(), ends).map_err(|e| e.to_string())?;
    let mut solver = TledSolver::new(&mesh, mat).map_err(|e| e.to_string())?;
    let dt = 0.5 * solver.critical_timestep();
    let mut state = SimState::at_rest(mesh.n_vertices());
    let mut steps = 0;
    while steps < 200_000 {
        solver.step(&mut state, &bc, dt).map_err(|e| e.to_string())?;
        steps += 1;
        let change = state
            .u_curr
            .iter()
            .zip(&state.u_prev)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if steps > 100 && change < 1e-12 * STRAIN * l {
            break;
        }
    }
    let e = mat.young_e * STRAIN;
    let target = Matrix3::from_diagonal(&Vec3::new(e, 0.0, 0.0));
    let worst = (0..mesh.tets.len())
        .map(|t| {
            let f = solver.ed.deformation_gradient(&mesh, &state.u_curr, t);
            (neo_hookean_pk2(&f, &mat).unwrap() - target).norm() / e
        })
        .fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < TOL && secs < 120.0,
        format!(
            "cube {} nodes ({n_free} free), max element stress error {:.3}% of E·ε (tol 1%) after {steps} relaxation steps, {secs:.1} s",
            mesh.n_vertices(),
            worst * 100.0
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn stability() -> Outcome {
    let spec = MeshSpec::desk();
    let bench = Workbench::from_spec(&spec).map_err(|e| e.to_string())?;
    let mesh = &bench.mesh;
    let seed = *bench.domain.face_ids.iter().nth(bench.domain.len() / 2).unwrap();
    let site: Vec<u32> = bench.surface.faces[seed as usize].to_vec();
    let mut solver = TledSolver::new(mesh, MaterialParams::default()).map_err(|e| e.to_string())?;
    let dt_crit = solver.critical_timestep();
    let push = 5.0;
    let bc_at = |k: usize| {
        let v = Vec3::new(0.0, 0.0, -push * (k as f64 / 1000.0).min(1.0));
        BoundaryConditions::new(bench.fixed.clone(), site.iter().map(|&n| (n, v)).collect()).unwrap()
    };
    let mut state = SimState::at_rest(mesh.n_vertices());
    for k in 0..10_000 {
        solver
            .step(&mut state, &bc_at(k + 1), 0.5 * dt_crit)
            .map_err(fail!("0.5·dt_crit step {k}"))?;
    }
    let umax = state.u_curr.iter().map(|u| u.norm()).fold(0.0, f64::max);
    let mut state = SimState::at_rest(mesh.n_vertices());
    let mut diverged_at = None;
    for k in 0..1000 {
        if solver.step(&mut state, &bc_at(k + 1), 4.0 * dt_crit).is_err_and(|e| e.is_divergence()) {
            diverged_at = Some(k + 1);
            break;
        }
    }
    check(
        umax <= push + 1e-9 && diverged_at.is_some(),
        format!(
            "K={} dt_crit={dt_crit:.3e} s: 10^4 steps at 0.5·dt_crit, max |u| {umax:.3} mm (push {push} mm); 4·dt_crit diverged at step {diverged_at:?}",
            mesh.n_vertices()
        ),
    )
}

// 4 ------------------------------------------------------------------------

struct SmallData {
    bench: Workbench,
    trajectories: Vec<Trajectory>,
}

fn small_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<u8>), String> {
    let bench = small_bench()?;
    let mut schemes: Vec<SimulationScheme> = default_scheme_library().into_iter().take(2).collect();
    for s in &mut schemes {
        s.n_collision_faces = s.n_collision_faces.min(6);
        s.max_displacement = s.max_displacement.min(3.0);
    }
    let args = GenerateArgs {
        n_per_scheme: 1,
        master_seed: 21,
        n_test: 1,
        n_val: 0,
        workers: 1,
    };
    let _ = std::fs::remove_dir_all(dir);
    let m = generate(&bench, &schemes, &args, dir).map_err(|e| e.to_string())?;
    let mut all = std::fs::read(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    for e in &m.entries {
        all.extend(std::fs::read(dir.join(&e.file)).map_err(|e| e.to_string())?);
    }
    all.extend(std::fs::read(dir.join(&m.mesh_file)).map_err(|e| e.to_string())?);
    Ok((m, all))
}

fn small_bench() -> Result<Workbench, String> {
    Workbench::from_spec(&MeshSpec::new(PrimitiveKind::Box, 4, [40.0, 40.0, 20.0])).map_err(|e| e.to_string())
}

fn dataset_pipeline(out: &mut Option<SmallData>) -> Outcome {
    let reference = SolverConfig {
        dt: 1e-4,
        output_every: 500,
        total_time: 8.0,
        ..SolverConfig::default()
    };
    let n_ref = reference.n_snapshots();
    let a = work_dir().join("small-a");
    let b = work_dir().join("small-b");
    let (ma, bytes_a) = small_dataset(&a)?;
    let (_, bytes_b) = small_dataset(&b)?;
    let identical = bytes_a == bytes_b;
    let lens: BTreeSet<usize> = ma.entries.iter().map(|e| e.n_steps).collect();

    let bench = Workbench::from_spec(&MeshSpec::desk()).map_err(|e| e.to_string())?;
    let faces: Vec<u32> = bench.domain.face_ids.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..1000 {
        let seed = faces[rng.gen_range(0..faces.len())];
        let n = rng.gen_range(1..=MAX_SITE_FACES);
        let site = grow_collision_site(&bench.domain, &bench.surface, seed as usize, n, &mut rng)
            .map_err(|e| e.to_string())?;
        let set: BTreeSet<u32> = site.faces.iter().copied().collect();
        let mut seen = BTreeSet::from([seed]);
        let mut stack = vec![seed];
        while let Some(f) = stack.pop() {
            for &g in &bench.surface.adjacency[f as usize] {
                if set.contains(&g) && seen.insert(g) {
                    stack.push(g);
                }
            }
        }
        let ok = seen == set && set.len() <= MAX_SITE_FACES && set.iter().all(|f| bench.domain.contains(*f));
        bad += usize::from(!ok);
    }
    let trajectories = ma
        .entries
        .iter()
        .map(|e| read_trajectory(&a.join(&e.file)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    *out = Some(SmallData {
        bench: small_bench()?,
        trajectories,
    });
    check(
        n_ref == 160 && lens == BTreeSet::from([160]) && identical && bad == 0,
        format!(
            "T=8 s, dt=0.1 ms, every 500 → {n_ref} snapshots; generated lengths {lens:?}; repeat generation byte-identical: {identical}; {bad}/1000 random sites violate invariants"
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn tiny_model(seed: u64, stats: NormStats) -> Surrogate {
    Surrogate::new(
        ModelConfig {
            init_seed: seed,
            ..ModelConfig::tiny()
        },
        stats,
    )
    .unwrap()
}

fn small_geometry(small: &SmallData, d_embed: usize) -> Arc<Geometry> {
    let (scaled, _) = scale_coordinates(&small.bench.mesh.vertices).unwrap();
    Arc::new(Geometry::new(scaled.iter().map(|v| [v.x, v.y, v.z]).collect(), d_embed))
}

fn differentiability(small: &SmallData) -> Outcome {
    const TOL: f64 = 1e-3;
    let t0 = Instant::now();
    let stats = nd_core::dataset::compute_norm_stats(&small.trajectories).map_err(|e| e.to_string())?;
    let model = tiny_model(3, stats);
    let geo = small_geometry(small, model.config.d_embed);
    let sn = Supernodes::sample(&geo, &model.config, &mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
    let traj = &small.trajectories[0];
    let (ut, c, target) = (
        to_f64(&traj.steps[40].u),
        to_f64(&traj.steps[41].c.to_dense(traj.n_nodes)),
        model.normalize_u(&to_f64(&traj.steps[41].u)),
    );
    let loss_of = |m: &Surrogate| {
        let mut ctx = m.ctx(false);
        let u = ctx.tape.constant(m.normalize_u(&ut));
        let cc = ctx.tape.constant(m.normalize_c(&c));
        let y = ctx.step(&geo, &sn, u, cc, &mut DropPath::off());
        let t = ctx.tape.constant(target.clone());
        let l = ctx.tape.mse(y, t);
        ctx.tape.value(l).data[0]
    };
    let mut ctx = model.ctx(true);
    let u = ctx.tape.constant(model.normalize_u(&ut));
    let cc = ctx.tape.constant(model.normalize_c(&c));
    let y = ctx.step(&geo, &sn, u, cc, &mut DropPath::off());
    let t = ctx.tape.constant(target.clone());
    let l = ctx.tape.mse(y, t);
    let grads = ctx.tape.backward(l);
    let bound = ctx.bound_params().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_block = String::new();
    let mut checked_blocks = 0;
    let mut silent = Vec::new();
    for (pi, var) in bound.iter().enumerate() {
        let g = var.and_then(|v| grads.get(v)).ok_or(format!("{} has no gradient", model.params.names[pi]))?;
        let n = g.data.len();
        let mut any = false;
        let peak = (0..n).max_by(|&a, &b| g.data[a].abs().total_cmp(&g.data[b].abs())).unwrap();
        for e in [0, n / 3, n / 2, n - 1, peak] {
            let mut plus = model.clone();
            plus.params.values[pi].data[e] += h;
            let mut minus = model.clone();
            minus.params.values[pi].data[e] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = g.data[e];
            let scale = an.abs().max(fd.abs());
            if scale < 1e-8 {
                continue;
            }
            any = true;
            let rel = (an - fd).abs() / scale;
            if rel > worst {
                worst = rel;
                worst_block = model.params.names[pi].clone();
            }
        }
        checked_blocks += usize::from(any);
        if !any {
            silent.push(model.params.names[pi].clone());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < TOL && checked_blocks + silent.len() == bound.len() && secs < 300.0,
        format!(
            "tiny config, {checked_blocks}/{} parameter blocks checked, worst relative error {worst:.2e} ({worst_block}) (tol {TOL:e}), {secs:.1} s; zero in both routes (key biases cancel in softmax): {silent:?}",
            bound.len()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn composed_loss(model: &Surrogate, geo: &Geometry, sn: &Supernodes, w: &RolloutWindow, ground_truth_inputs: &[bool]) -> f64 {
    let t = w.trajectory;
    let mut ctx = model.ctx(false);
    let mut prev: Option<Var> = None;
    let mut total = 0.0;
    for i in 1..w.len {
        let input = if i == 1 || ground_truth_inputs[i - 2] {
            ctx.tape.constant(model.normalize_u(&to_f64(&t.steps[w.start + i - 1].u)))
        } else {
            prev.unwrap()
        };
        let c = ctx.tape.constant(model.normalize_c(&to_f64(&t.steps[w.start + i].c.to_dense(t.n_nodes))));
        let pred = ctx.step(geo, sn, input, c, &mut DropPath::off());
        let target: Mat = model.normalize_u(&to_f64(&t.steps[w.start + i].u));
        let p = ctx.tape.value(pred);
        let s: f64 = p.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum();
        total += s / p.rows as f64;
        prev = Some(pred);
    }
    total / (w.len - 1) as f64
}

fn stf_degeneracy(small: &SmallData) -> Outcome {
    const TOL: f64 = 1e-12;
    let stats = nd_core::dataset::compute_norm_stats(&small.trajectories).map_err(|e| e.to_string())?;
    let model = tiny_model(8, stats);
    let geo = small_geometry(small, model.config.d_embed);
    let sn = Supernodes::sample(&geo, &model.config, &mut ChaCha8Rng::seed_from_u64(2)).map_err(|e| e.to_string())?;
    let loss = |w: &RolloutWindow, f: &mut dyn ForcingSource| {
        let mut ctx = model.ctx(false);
        let l = stf_rollout_loss(&mut ctx, &geo, &sn, w, f, &mut DropPath::off());
        ctx.tape.value(l).data[0]
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst_tf: f64 = 0.0;
    let mut worst_ar: f64 = 0.0;
    let traj = &small.trajectories[0];
    for start in [0, 30, 60, 90, 120, 150] {
        let w = RolloutWindow::new(traj, start, 2).map_err(|e| e.to_string())?;
        let a = loss(&w, &mut KeyedForcing { p: 1.0, seed: 1, epoch: 0, window: start });
        worst_tf = worst_tf.max(rel(a, composed_loss(&model, &geo, &sn, &w, &[])));
        for s in [3, 5, 8] {
            let w = RolloutWindow::new(traj, start.min(traj.steps.len() - s), s).map_err(|e| e.to_string())?;
            let a = loss(&w, &mut KeyedForcing { p: 0.0, seed: 1, epoch: 3, window: start });
            worst_ar = worst_ar.max(rel(a, composed_loss(&model, &geo, &sn, &w, &vec![false; s - 2])));
        }
    }
    let w = RolloutWindow::new(traj, 50, 5).map_err(|e| e.to_string())?;
    let pattern = vec![true, false, true];
    let mixed = rel(loss(&w, &mut FixedForcing(pattern.clone())), composed_loss(&model, &geo, &sn, &w, &pattern));
    let sched: Vec<f64> = [0, 9, 45].iter().map(|&n| tf_schedule(n, 45)).collect();
    check(
        worst_tf <= TOL && worst_ar <= TOL && mixed <= TOL && sched == [1.0, 0.8, 0.0],
        format!(
            "p=1,S=2 vs teacher-forced {worst_tf:.1e}; p=0 vs autoregressive (S=3,5,8) {worst_ar:.1e}; mixed pattern {mixed:.1e} (tol {TOL:e}); schedule at n=0,9,45: {sched:?}"
        ),
    )
}

// 7, 8 --------------------------------------------------------------------

fn desk_dataset() -> Result<Dataset, String> {
    let dir = work_dir().join("desk-data");
    let expected = experiments::DATA_PER_SCHEME * default_scheme_library().len();
    if let Ok(m) = DatasetManifest::load(&dir) {
        if m.master_seed == experiments::DATA_SEED && m.entries.len() + m.excluded.len() == expected {
            if let Ok(ds) = Dataset::load(&dir) {
                return Ok(ds);
            }
        }
    }
    eprintln!("generating the desk dataset in {} (single core: about 20 minutes)", dir.display());
    let _ = std::fs::remove_dir_all(&dir);
    let bench = Workbench::from_spec(&MeshSpec::desk()).map_err(|e| e.to_string())?;
    let args = GenerateArgs {
        n_per_scheme: experiments::DATA_PER_SCHEME,
        master_seed: experiments::DATA_SEED,
        n_test: experiments::DATA_TEST,
        n_val: experiments::DATA_VAL,
        workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    generate(&bench, &default_scheme_library(), &args, &dir).map_err(|e| e.to_string())?;
    Dataset::load(&dir).map_err(|e| e.to_string())
}

fn runner(ds: &Dataset) -> CachedRunner {
    CachedRunner {
        dir: work_dir().join("runs"),
        data_key: ds.key(),
    }
}

fn report_dir() -> PathBuf {
    let d = work_dir().join("report");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tf_vs_stf(ds: &Dataset, out: &mut Option<TfVsStfReport>) -> Outcome {
    const NEED: usize = 8;
    let t0 = Instant::now();
    let n = ds.train.len() + ds.validation.len() + ds.test.len();
    let k = ds.manifest.n_nodes;
    if n < 40 || !(1000..=3000).contains(&k) {
        return Err(format!("dataset has {n} trajectories and K={k}"));
    }
    let init = experiments::initial_model(ds, experiments::model_config()).map_err(|e| e.to_string())?;
    let d = ds.train_data(init.config.d_embed);
    let report = experiment_tf_vs_stf(&mut runner(ds), &init, &experiments::train_config(), &d, &experiments::test_set(ds))
        .map_err(|e| e.to_string())?;
    let dir = report_dir();
    std::fs::write(dir.join("tf_vs_stf.json"), serde_json::to_vec_pretty(&report).unwrap()).unwrap();
    std::fs::write(dir.join("tf_vs_stf.csv"), report.to_csv()).unwrap();
    std::fs::write(dir.join("tf_vs_stf_curves.csv"), report.curves_csv()).unwrap();
    let (tf, stf) = (&report.teacher_forced, &report.stochastic);
    let detail = format!(
        "{n} trajectories, K={k}: TF MSE {:.3} mm², max {:.2} mm; STF MSE {:.3} mm², max {:.2} mm; STF lower on both for {}/{} test trajectories (need {NEED}; MSE alone {}); reference TF {:.2}/{:.2} mm vs STF {:.2}/{:.2} mm; {:.0} s",
        tf.mse.mean,
        tf.max_error.mean,
        stf.mse.mean,
        stf.max_error.mean,
        report.stf_better_both,
        report.rows.len(),
        report.stf_better_mse,
        report.reference.tf_mse,
        report.reference.tf_max_mm,
        report.reference.stf_mse,
        report.reference.stf_max_mm,
        t0.elapsed().as_secs_f64()
    );
    let ok = report.stf_better_both >= NEED && report.rows.len() == experiments::DATA_TEST;
    *out = Some(report);
    check(ok, detail)
}

fn window_sweep(ds: &Dataset) -> Outcome {
    let t0 = Instant::now();
    let init = experiments::initial_model(ds, experiments::model_config()).map_err(|e| e.to_string())?;
    let d = ds.train_data(init.config.d_embed);
    let report = experiment_window_sweep(
        &mut runner(ds),
        &init,
        &experiments::train_config(),
        &experiments::SWEEP_WINDOWS,
        &d,
        &experiments::test_set(ds),
    )
    .map_err(|e| e.to_string())?;
    let dir = report_dir();
    std::fs::write(dir.join("window_sweep.json"), serde_json::to_vec_pretty(&report).unwrap()).unwrap();
    std::fs::write(dir.join("window_sweep.csv"), report.to_csv()).unwrap();
    let s2 = report.row(2).ok_or("no S=2 row")?.mse.mean;
    let beaten = report.rows.iter().any(|r| r.window >= 3 && r.mse.mean < s2);
    let norms_logged = report.rows.iter().all(|r| r.max_grad_norm.is_finite() && r.max_grad_norm > 0.0);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("S={} MSE {:.3} |g|max {:.2}", r.window, r.mse.mean, r.max_grad_norm))
        .collect();
    check(
        report.rows.len() == experiments::SWEEP_WINDOWS.len() && beaten && norms_logged,
        format!(
            "{}; best S={}; {:.0} s",
            rows.join(", "),
            report.best_window,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn brute_hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let d = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_local: f64 = 0.0;
    let mut worst_global: f64 = 0.0;
    let mut compared = 0;
    let cloud = |rng: &mut ChaCha8Rng, n: usize, spread: f64| -> Vec<[f64; 3]> {
        (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-spread..spread))).collect()
    };
    for _ in 0..200 {
        let spread = rng.gen_range(5.0..100.0);
        let (na, nb) = (rng.gen_range(1..400), rng.gen_range(1..400));
        let a = cloud(&mut rng, na, spread);
        let b = cloud(&mut rng, nb, spread);
        let center: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-spread..spread) * 0.3);
        let r = rng.gen_range(0.5..1.5) * spread;
        let inside = |s: &[[f64; 3]]| -> Vec<[f64; 3]> {
            s.iter()
                .filter(|p| (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>() <= r * r)
                .copied()
                .collect()
        };
        let (fa, fb) = (inside(&a), inside(&b));
        if !fa.is_empty() && !fb.is_empty() {
            let got = hausdorff_local(&a, &b, &center, r).map_err(|e| e.to_string())?;
            worst_local = worst_local.max((got - brute_hausdorff(&fa, &fb)).abs());
            compared += 1;
        }
        let global = hausdorff_local(&a, &b, &center, f64::INFINITY).map_err(|e| e.to_string())?;
        worst_global = worst_global.max((global - brute_hausdorff(&a, &b)).abs());
    }
    let mut worst_pointwise: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..500);
        let u = cloud(&mut rng, n, 15.0);
        let v = cloud(&mut rng, n, 15.0);
        let mut s = 0.0;
        let mut m: f64 = 0.0;
        for i in 0..n {
            for k in 0..3 {
                let d = u[i][k] - v[i][k];
                s += d * d;
                m = m.max(d.abs());
            }
        }
        let naive = s / n as f64;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        worst_pointwise = worst_pointwise
            .max(rel(mse(&u, &v).unwrap(), naive))
            .max(rel(err_max(&u, &v).unwrap(), m));
    }
    check(
        worst_local <= 1e-9 && worst_global <= 1e-9 && worst_pointwise <= 1e-12 && compared >= 150,
        format!(
            "local Hausdorff vs brute force on {compared} cloud pairs: {worst_local:.1e} (tol 1e-9); r=∞ vs global: {worst_global:.1e}; MSE/err_max vs naive loops: {worst_pointwise:.1e} relative (tol 1e-12)"
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn serving(trained: Option<Surrogate>) -> Outcome {
    const LIMIT_MS: f64 = 50.0;
    let spec = MeshSpec {
        resolution: 19,
        ..MeshSpec::desk()
    };
    let bench = Workbench::from_spec(&spec).map_err(|e| e.to_string())?;
    let mut sidecar: MeshSidecar = bench.sidecar.clone();
    sidecar.collision_domain = Some(bench.domain.face_ids.iter().copied().collect());
    let entry = MeshEntry::new("k2000", bench.mesh.clone(), sidecar).map_err(|e| e.to_string())?;
    let face = *entry.domain.face_ids.iter().nth(entry.domain.len() / 2).unwrap();
    let source = if trained.is_some() { "trained STF desk model" } else { "untrained desk model" };
    let model = match trained {
        Some(m) => m,
        None => Surrogate::new(experiments::model_config(), NormStats::identity()).map_err(|e| e.to_string())?,
    };
    let mut reg = Registry::default();
    reg.add_mesh(entry);
    reg.add_model("desk", model, serde_json::Value::Null);
    let service = Arc::new(Service::new(reg, ServiceConfig::default()));
    let info = service.create_session("k2000", "desk").map_err(|e| e.to_string())?;

    let pick = |depth: f64| {
        StepRequest::pick(Pick {
            face,
            bary: [1.0 / 3.0; 3],
            depth_mm: depth,
            dir: [0.0, 0.0, -1.0],
            n_faces: 20,
        })
    };
    // Rest drift: zero collision from rest.
    let mut drift: f64 = 0.0;
    for _ in 0..20 {
        let f = service.step_blocking(&info.id, StepRequest::release()).map_err(|e| e.to_string())?;
        drift = drift.max(f.u.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() as f64).fold(0.0, f64::max));
    }
    service.reset_blocking(&info.id).map_err(|e| e.to_string())?;
    let mut lat = Vec::new();
    for i in 0..500 {
        let phase = i % 60;
        let req = if phase < 20 {
            pick(phase as f64 * 0.25)
        } else if phase < 40 {
            pick(5.0)
        } else {
            StepRequest::release()
        };
        let f = service.step_blocking(&info.id, req).map_err(|e| e.to_string())?;
        if !(f.latency_ms > 0.0) {
            return Err(format!("step {} reported latency {}", f.step, f.latency_ms));
        }
        lat.push(f.latency_ms as f64);
    }
    lat.sort_by(f64::total_cmp);
    let median = 0.5 * (lat[249] + lat[250]);

    // Concurrent clients, two sharing a session.
    let shared = service.create_session("k2000", "desk").map_err(|e| e.to_string())?.id;
    let solo = service.create_session("k2000", "desk").map_err(|e| e.to_string())?.id;
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let s = service.clone();
            let id = if t < 3 { shared.clone() } else { solo.clone() };
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                let mut seen = Vec::new();
                for _ in 0..25 {
                    let req = match rng.gen_range(0..3) {
                        0 => StepRequest::release(),
                        1 => StepRequest::pick(Pick {
                            face,
                            bary: [1.0, 0.0, 0.0],
                            depth_mm: rng.gen_range(0.0..15.0),
                            dir: [0.0, 0.0, -1.0],
                            n_faces: rng.gen_range(1..40),
                        }),
                        _ => StepRequest::raw(vec![rng.gen_range(0..1000)], [0.0, 2.0, 0.0]),
                    };
                    seen.push(s.step_blocking(&id, req).unwrap().step);
                }
                (id, seen)
            })
        })
        .collect();
    let mut ordered = true;
    let mut shared_all = Vec::new();
    for h in handles {
        let (id, seen) = h.join().map_err(|_| "client thread panicked".to_string())?;
        ordered &= seen.windows(2).all(|w| w[0] < w[1]);
        if id == shared {
            shared_all.extend(seen);
        } else {
            ordered &= seen == (1..=25).collect::<Vec<u32>>();
        }
    }
    shared_all.sort_unstable();
    let no_interleave = shared_all == (1..=75).collect::<Vec<u32>>();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    check(
        median < LIMIT_MS && ordered && no_interleave,
        format!(
            "{source}, K={}, {cores} core(s): median {median:.2} ms, p95 {:.2} ms over 500 steps (limit {LIMIT_MS} ms); rest drift over 20 zero-collision steps {drift:.3} mm; concurrent fuzz ordered: {ordered}, shared-session counters contiguous: {no_interleave}",
            info.n_nodes,
            lat[475]
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn normalization_io(small: &SmallData) -> Outcome {
    let dir = work_dir().join("io");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let t = &small.trajectories[0];
    write_trajectory(&dir.join("t.ndtraj"), t).map_err(|e| e.to_string())?;
    let back = read_trajectory(&dir.join("t.ndtraj")).map_err(|e| e.to_string())?;
    let traj_ok = &back == t
        && encode_trajectory(&back).unwrap() == std::fs::read(dir.join("t.ndtraj")).unwrap()
        && decode_trajectory(&encode_trajectory(t).unwrap()).unwrap() == *t;

    small.bench.save(&dir.join("m.ndmesh")).map_err(|e| e.to_string())?;
    let (mesh, sidecar) = read_mesh(&dir.join("m.ndmesh")).map_err(|e| e.to_string())?;
    let mesh_ok = mesh.vertices == small.bench.mesh.vertices && mesh.tets == small.bench.mesh.tets && sidecar == Some(small.bench.sidecar.clone());

    let ck = Checkpoint {
        model: tiny_model(2, NormStats::identity()),
        coord_transform: None,
        meta: serde_json::json!({"k": 1}),
    };
    let mut rounded = ck.clone();
    nd_surrogate::checkpoint::round_to_f32(&mut rounded.model.params);
    save_checkpoint(&dir.join("c.ndckpt"), &rounded).map_err(|e| e.to_string())?;
    let ck_back = load_checkpoint(&dir.join("c.ndckpt")).map_err(|e| e.to_string())?;
    let ck_ok = ck_back == rounded && encode_checkpoint(&ck_back) == encode_checkpoint(&decode_checkpoint(&encode_checkpoint(&rounded)).unwrap());

    let stats = nd_core::dataset::compute_norm_stats(&small.trajectories).map_err(|e| e.to_string())?;
    let mut worst_norm: f64 = 0.0;
    for traj in &small.trajectories {
        for s in &traj.steps {
            let back = denormalize(&normalize(&s.u, &stats), &stats);
            for (a, b) in s.u.iter().zip(&back) {
                for k in 0..3 {
                    worst_norm = worst_norm.max((a[k] - b[k]).abs() as f64);
                }
            }
        }
    }
    let (scaled, tf) = scale_coordinates(&small.bench.mesh.vertices).map_err(|e| e.to_string())?;
    let in_box = scaled.iter().all(|q| q.iter().all(|&x| (-1e-9..=200.0 + 1e-9).contains(&x)));
    let worst_inv = small
        .bench
        .mesh
        .vertices
        .iter()
        .zip(&scaled)
        .map(|(p, q)| (tf.invert(q) - p).amax())
        .fold(0.0, f64::max);
    check(
        traj_ok && mesh_ok && ck_ok && worst_norm < 1e-5 && in_box && worst_inv < 1e-6,
        format!(
            "bitwise round trips: trajectory {traj_ok}, mesh+sidecar {mesh_ok}, checkpoint {ck_ok}; normalise/denormalise max error {worst_norm:.2e} mm (tol 1e-5); scaled into [0,200]³: {in_box}, inverse error {worst_inv:.1e} mm (tol 1e-6)"
        ),
    )
}

/// The cached STF checkpoint whose digest matches the report.
fn trained_stf(hash: &str) -> Option<Surrogate> {
    std::fs::read_dir(work_dir().join("runs")).ok()?.flatten().find_map(|e| {
        let bytes = std::fs::read(e.path().join("best.ndckpt")).ok()?;
        (sha256_hex(&bytes) == hash).then(|| decode_checkpoint(&bytes).ok().map(|c| c.model))?
    })
}

/// Criterion numbers given on the command line restrict the run; others
/// (such as libtest flags forwarded by cargo) are ignored.
fn selection() -> BTreeSet<u32> {
    let picked: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=11).collect()
    } else {
        picked
    }
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    std::fs::create_dir_all(work_dir()).unwrap();
    let want = selection();
    let on = |id: u32| want.contains(&id);
    let mut failures = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !want.contains(&id) {
            return;
        }
        match run() {
            Ok(d) => println!("[PASS] {id:>2} {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("[FAIL] {id:>2} {name}: {d}")
            }
        }
    };
    report(1, "stress-energy consistency", &mut stress_energy);
    report(2, "small-strain consistency", &mut small_strain);
    report(3, "explicit stability", &mut stability);
    let mut small = None;
    if [4, 5, 6, 11].into_iter().any(on) {
        let outcome = dataset_pipeline(&mut small);
        report(4, "dataset pipeline", &mut || outcome.clone());
    }
    let missing = || Err("small dataset unavailable".to_string());
    report(5, "surrogate differentiability", &mut || small.as_ref().map_or_else(missing, differentiability));
    report(6, "STF degeneracy", &mut || small.as_ref().map_or_else(missing, stf_degeneracy));
    let mut trained = None;
    if [7, 8, 10].into_iter().any(on) {
        match desk_dataset() {
            Ok(ds) => {
                let mut tf_report = None;
                report(7, "TF vs STF", &mut || tf_vs_stf(&ds, &mut tf_report));
                report(8, "window sweep", &mut || window_sweep(&ds));
                trained = tf_report.and_then(|r| trained_stf(&r.stochastic.best_hash));
            }
            Err(e) => {
                report(7, "TF vs STF", &mut || Err(format!("desk dataset: {e}")));
                report(8, "window sweep", &mut || Err(format!("desk dataset: {e}")));
            }
        }
    }
    report(9, "metric oracles", &mut metric_oracles);
    report(10, "serving", &mut || serving(trained.take()));
    report(11, "normalisation and IO", &mut || small.as_ref().map_or_else(missing, normalization_io));
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
