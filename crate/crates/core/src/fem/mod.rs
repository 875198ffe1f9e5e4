//! Total Lagrangian explicit dynamics on linear tets.
//!
//! Unit table:
//!
//! | quantity      | unit  |
//! |---------------|-------|
//! | length, u     | mm    |
//! | time          | s     |
//! | stress, E, μ  | Pa    |
//! | density       | kg/m³ |
//! | nodal mass    | kg    |
//! | nodal force   | N     |
//!
//! so a nodal force is `P[Pa] · A[mm²] · 1e-6` and an acceleration is
//! `f[N] / m[kg] · 1e3` in mm/s².
//!
//! Time integration is central differences with mass-proportional damping
//! `M ü + α M u̇ + f_int(u) = 0`:
//!
//! ```text
//! u⁺ = (dt² a + 2u − (1 − α dt/2) u⁻) / (1 + α dt/2),   a = −f_int / m
//! ```
//!
//! after which prescribed nodes are set to their boundary value and fixed
//! nodes to zero.

mod material;

pub use material::{neo_hookean_pk2, strain_energy, strain_energy_from_c, MaterialParams};

use crate::mesh::{TetMesh, Vec3};
use material::pk2_unchecked;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

const AREA_MM2_TO_M2: f64 = 1e-6;
const VOLUME_MM3_TO_M3: f64 = 1e-9;
const ACCEL_M_TO_MM: f64 = 1e3;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid material parameters {0:?}")]
    InvalidMaterial(MaterialParams),
    #[error("element {element:?} inverted (det F = {det})")]
    ElementInversion { element: Option<usize>, det: f64 },
    #[error("non-finite displacement at step {step}")]
    NonFinite { step: u64 },
    #[error("reference tet {0} is inverted or degenerate")]
    InvertedReference(usize),
    #[error("time step {dt} s exceeds {safety} x critical step {dt_crit} s")]
    TimestepTooLarge { dt: f64, dt_crit: f64, safety: f64 },
    #[error("invalid solver setting: {0}")]
    InvalidConfig(String),
    #[error("node {0} is both fixed and prescribed")]
    ConflictingBoundary(u32),
    #[error("state has {got} nodes, mesh has {expected}")]
    SizeMismatch { expected: usize, got: usize },
}

impl FemError {
    /// True for the failures that signal an unstable integration.
    pub fn is_divergence(&self) -> bool {
        matches!(self, FemError::ElementInversion { .. } | FemError::NonFinite { .. })
    }
}

/// Reference-configuration quantities computed once per mesh.
#[derive(Debug, Clone)]
pub struct ElementData {
    /// Gradients of the four linear shape functions (1/mm), one row per node.
    pub shape_gradients: Vec<[Vector3<f64>; 4]>,
    /// Reference volumes (mm³).
    pub volumes: Vec<f64>,
    /// Lumped nodal masses (kg).
    pub masses: Vec<f64>,
    /// Minimum altitude of each tet (mm).
    pub min_altitudes: Vec<f64>,
}

pub fn precompute(mesh: &TetMesh, mat: &MaterialParams) -> Result<ElementData, FemError> {
    mat.validate()?;
    let n_tets = mesh.tets.len();
    let mut shape_gradients = Vec::with_capacity(n_tets);
    let mut volumes = Vec::with_capacity(n_tets);
    let mut min_altitudes = Vec::with_capacity(n_tets);
    let mut masses = vec![0.0; mesh.n_vertices()];
    for (t, tet) in mesh.tets.iter().enumerate() {
        let [x0, x1, x2, x3] = tet.map(|i| mesh.vertices[i as usize]);
        let edges = Matrix3::from_columns(&[x1 - x0, x2 - x0, x3 - x0]);
        let det = edges.determinant();
        let volume = det / 6.0;
        if !(volume > 0.0) {
            return Err(FemError::InvertedReference(t));
        }
        let inv = edges.try_inverse().ok_or(FemError::InvertedReference(t))?;
        // rows of inv are the gradients of N1..N3; N0 = 1 - N1 - N2 - N3
        let g1 = inv.row(0).transpose();
        let g2 = inv.row(1).transpose();
        let g3 = inv.row(2).transpose();
        let g0 = -(g1 + g2 + g3);
        let grads = [g0, g1, g2, g3];
        // altitude over the face opposite node a is 1 / |∇N_a|
        let h = grads.iter().map(|g| 1.0 / g.norm()).fold(f64::INFINITY, f64::min);
        shape_gradients.push(grads);
        volumes.push(volume);
        min_altitudes.push(h);
        let m = mat.density_rho * volume * VOLUME_MM3_TO_M3 / 4.0;
        for &i in tet {
            masses[i as usize] += m;
        }
    }
    Ok(ElementData {
        shape_gradients,
        volumes,
        masses,
        min_altitudes,
    })
}

impl ElementData {
    pub fn deformation_gradient(&self, mesh: &TetMesh, u: &[Vec3], t: usize) -> Matrix3<f64> {
        let mut f = Matrix3::identity();
        for (a, &node) in mesh.tets[t].iter().enumerate() {
            f += u[node as usize] * self.shape_gradients[t][a].transpose();
        }
        f
    }
}

/// Largest stable step estimate: min over tets of altitude / wave speed.
pub fn critical_timestep(ed: &ElementData, mat: &MaterialParams, _mesh: &TetMesh) -> f64 {
    let c = mat.wave_speed();
    ed.min_altitudes.iter().fold(f64::INFINITY, |acc, h| acc.min(h / c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u_curr: Vec<Vec3>,
    pub u_prev: Vec<Vec3>,
    pub time: f64,
    pub step: u64,
}

impl SimState {
    pub fn at_rest(n_nodes: usize) -> Self {
        Self {
            u_curr: vec![Vec3::zeros(); n_nodes],
            u_prev: vec![Vec3::zeros(); n_nodes],
            time: 0.0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryConditions {
    pub fixed_nodes: BTreeSet<u32>,
    pub prescribed: BTreeMap<u32, Vec3>,
}

impl BoundaryConditions {
    pub fn new(fixed_nodes: BTreeSet<u32>, prescribed: BTreeMap<u32, Vec3>) -> Result<Self, FemError> {
        if let Some(&n) = prescribed.keys().find(|n| fixed_nodes.contains(n)) {
            return Err(FemError::ConflictingBoundary(n));
        }
        Ok(Self {
            fixed_nodes,
            prescribed,
        })
    }

    fn apply(&self, u: &mut [Vec3]) {
        for &n in &self.fixed_nodes {
            u[n as usize] = Vec3::zeros();
        }
        for (&n, v) in &self.prescribed {
            u[n as usize] = *v;
        }
    }
}

/// Internal nodal forces (N) for displacement `u`. Elements are visited in
/// index order so the scatter is reproducible.
pub fn internal_forces(
    u: &[Vec3],
    mesh: &TetMesh,
    ed: &ElementData,
    mat: &MaterialParams,
) -> Result<Vec<Vec3>, FemError> {
    let mut out = vec![Vec3::zeros(); mesh.n_vertices()];
    accumulate_forces(u, mesh, ed, mat.shear_mu(), mat.bulk_kappa(), &mut out)?;
    Ok(out)
}

fn accumulate_forces(
    u: &[Vec3],
    mesh: &TetMesh,
    ed: &ElementData,
    mu: f64,
    kappa: f64,
    out: &mut [Vec3],
) -> Result<(), FemError> {
    for f in out.iter_mut() {
        *f = Vec3::zeros();
    }
    for (t, tet) in mesh.tets.iter().enumerate() {
        let grads = &ed.shape_gradients[t];
        let mut f = Matrix3::identity();
        for a in 0..4 {
            f += u[tet[a] as usize] * grads[a].transpose();
        }
        let j = f.determinant();
        if !(j > 0.0) {
            return Err(FemError::ElementInversion {
                element: Some(t),
                det: j,
            });
        }
        let s = pk2_unchecked(&f, j, mu, kappa).ok_or(FemError::ElementInversion {
            element: Some(t),
            det: j,
        })?;
        let p = f * s * (ed.volumes[t] * AREA_MM2_TO_M2);
        for a in 0..4 {
            out[tet[a] as usize] += p * grads[a];
        }
    }
    Ok(())
}

/// Total strain energy (J).
pub fn strain_energy_total(
    u: &[Vec3],
    mesh: &TetMesh,
    ed: &ElementData,
    mat: &MaterialParams,
) -> Result<f64, FemError> {
    let mut total = 0.0;
    for t in 0..mesh.tets.len() {
        let f = ed.deformation_gradient(mesh, u, t);
        let w = strain_energy(&f, mat).map_err(|_| FemError::ElementInversion {
            element: Some(t),
            det: f.determinant(),
        })?;
        total += w * ed.volumes[t] * VOLUME_MM3_TO_M3;
    }
    Ok(total)
}

/// Kinetic energy (J) for nodal velocities in mm/s.
pub fn kinetic_energy(v: &[Vec3], ed: &ElementData) -> f64 {
    v.iter()
        .zip(&ed.masses)
        .map(|(v, m)| 0.5 * m * (v * 1e-3).norm_squared())
        .sum()
}

/// Explicit solver holding the mesh, its precomputed data and a force buffer.
pub struct TledSolver<'a> {
    pub mesh: &'a TetMesh,
    pub ed: ElementData,
    pub mat: MaterialParams,
    forces: Vec<Vec3>,
}

impl<'a> TledSolver<'a> {
    pub fn new(mesh: &'a TetMesh, mat: MaterialParams) -> Result<Self, FemError> {
        let ed = precompute(mesh, &mat)?;
        Ok(Self {
            mesh,
            forces: vec![Vec3::zeros(); mesh.n_vertices()],
            ed,
            mat,
        })
    }

    pub fn critical_timestep(&self) -> f64 {
        critical_timestep(&self.ed, &self.mat, self.mesh)
    }

    /// Advances `state` by one step of length `dt`, applying `bc` to the new
    /// displacement.
    pub fn step(&mut self, state: &mut SimState, bc: &BoundaryConditions, dt: f64) -> Result<(), FemError> {
        if !(dt > 0.0) {
            return Err(FemError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        let n = self.mesh.n_vertices();
        if state.u_curr.len() != n || state.u_prev.len() != n {
            return Err(FemError::SizeMismatch {
                expected: n,
                got: state.u_curr.len(),
            });
        }
        accumulate_forces(
            &state.u_curr,
            self.mesh,
            &self.ed,
            self.mat.shear_mu(),
            self.mat.bulk_kappa(),
            &mut self.forces,
        )?;
        let half_damp = 0.5 * self.mat.damping_alpha * dt;
        let keep = 1.0 - half_damp;
        let inv_den = 1.0 / (1.0 + half_damp);
        let dt2 = dt * dt;
        let step = state.step + 1;
        for i in 0..n {
            let a = self.forces[i] * (-ACCEL_M_TO_MM / self.ed.masses[i]);
            let next = (a * dt2 + state.u_curr[i] * 2.0 - state.u_prev[i] * keep) * inv_den;
            state.u_prev[i] = state.u_curr[i];
            state.u_curr[i] = next;
        }
        bc.apply(&mut state.u_curr);
        if state.u_curr.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(FemError::NonFinite { step });
        }
        state.step = step;
        state.time = step as f64 * dt;
        Ok(())
    }
}

/// Free-function form of [`TledSolver::step`]; allocates a force buffer.
pub fn step_explicit(
    state: &SimState,
    bc: &BoundaryConditions,
    dt: f64,
    mesh: &TetMesh,
    mat: &MaterialParams,
) -> Result<SimState, FemError> {
    let mut solver = TledSolver::new(mesh, *mat)?;
    let mut next = state.clone();
    solver.step(&mut next, bc, dt)?;
    Ok(next)
}

/// Solver settings, serialised as the solver config document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub material: MaterialParams,
    /// Integration step (s).
    pub dt: f64,
    pub output_every: usize,
    /// Simulated duration (s).
    pub total_time: f64,
    /// Largest allowed `dt / dt_crit`.
    #[serde(default = "default_safety")]
    pub safety: f64,
}

fn default_safety() -> f64 {
    0.5
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            material: MaterialParams::default(),
            dt: 1e-4,
            output_every: 500,
            total_time: 8.0,
            safety: 0.5,
        }
    }
}

impl SolverConfig {
    /// Number of snapshots a run produces: `⌊T / (dt · output_every)⌋`.
    pub fn n_snapshots(&self) -> usize {
        let interval = self.dt * self.output_every as f64;
        (self.total_time / interval + 1e-9).floor() as usize
    }

    /// Time between snapshots (s).
    pub fn output_interval(&self) -> f64 {
        self.dt * self.output_every as f64
    }

    /// Largest safe step that divides `output_interval` evenly, keeping the
    /// snapshot spacing fixed.
    pub fn with_stable_dt(mut self, dt_crit: f64, output_interval: f64) -> Self {
        let max_dt = self.safety * dt_crit;
        let n = (output_interval / max_dt).ceil().max(1.0) as usize;
        self.output_every = n;
        self.dt = output_interval / n as f64;
        self
    }
}

/// Runs a simulation from rest and returns the displacement at every
/// `output_every`-th step, starting with the initial state at `t = 0`.
/// `bc_at(t)` gives the boundary conditions in force at time `t`.
pub fn run_sequence<F>(
    mesh: &TetMesh,
    config: &SolverConfig,
    mut bc_at: F,
) -> Result<Vec<Vec<Vec3>>, FemError>
where
    F: FnMut(f64) -> BoundaryConditions,
{
    if config.output_every < 1 {
        return Err(FemError::InvalidConfig("output_every must be >= 1".into()));
    }
    let mut solver = TledSolver::new(mesh, config.material)?;
    let dt_crit = solver.critical_timestep();
    if !(config.dt > 0.0) || config.dt > config.safety * dt_crit * (1.0 + 1e-12) {
        return Err(FemError::TimestepTooLarge {
            dt: config.dt,
            dt_crit,
            safety: config.safety,
        });
    }
    let n_out = config.n_snapshots();
    let mut state = SimState::at_rest(mesh.n_vertices());
    bc_at(0.0).apply(&mut state.u_curr);
    state.u_prev.clone_from(&state.u_curr);
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        if k > 0 {
            for _ in 0..config.output_every {
                let t_next = (state.step + 1) as f64 * config.dt;
                let bc = bc_at(t_next);
                solver.step(&mut state, &bc, config.dt)?;
            }
        }
        out.push(state.u_curr.clone());
    }
    Ok(out)
}
