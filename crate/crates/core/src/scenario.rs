//! Instrument-interaction scenarios and dataset generation.
//!
//! A scheme prescribes a uniform collision vector on every node of a
//! collision site:
//!
//! ```text
//! v(t) = p(t) · d_max · R(n, θ(t)) · R(a, φ(t)) · n
//! ```
//!
//! with `n` the seed-face normal, `a` the seed face's first edge projected
//! onto the plane normal to `n`, and `p` the push factor in `[0, 1]`.

use crate::dataset::{
    assign_splits, compute_norm_stats, hex, scale_coordinates, splitmix64, write_trajectory,
    DatasetError, DatasetManifest, ExcludedSimulation, ManifestEntry, SiteDescriptor, SparseField,
    Split, Step, Trajectory,
};
use crate::fem::{run_sequence, BoundaryConditions, FemError, SolverConfig};
use crate::mesh::{grow_collision_site, CollisionDomain, CollisionSite, MeshError, SurfaceMesh, TetMesh, Vec3};
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Slack on segment boundaries and time range checks.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("time {t} outside [0, {total}]")]
    TimeOutOfRange { t: f64, total: f64 },
    #[error("invalid scheme {id}: {reason}")]
    InvalidScheme { id: u32, reason: String },
    #[error("invalid push trajectory: {0}")]
    InvalidPush(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentShape {
    RampSmooth,
    Hold,
    ReleaseToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushSegment {
    pub start: f64,
    pub end: f64,
    pub shape: SegmentShape,
    pub start_value: f64,
    pub end_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushTrajectory {
    pub segments: Vec<PushSegment>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl PushTrajectory {
    pub fn total_time(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    /// Start of the first release segment, if any.
    pub fn release_time(&self) -> Option<f64> {
        self.segments
            .iter()
            .find(|s| s.shape == SegmentShape::ReleaseToZero)
            .map(|s| s.start)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidPush(m));
        let Some(first) = self.segments.first() else {
            return bad("no segments".into());
        };
        if first.start.abs() > TIME_EPS {
            return bad(format!("starts at {} instead of 0", first.start));
        }
        let mut released = false;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.end > s.start) {
                return bad(format!("segment {i} has non-positive length"));
            }
            if ![s.start_value, s.end_value].iter().all(|v| (0.0..=1.0).contains(v)) {
                return bad(format!("segment {i} leaves [0, 1]"));
            }
            match s.shape {
                SegmentShape::Hold if s.start_value != s.end_value => {
                    return bad(format!("hold segment {i} changes value"));
                }
                SegmentShape::ReleaseToZero if s.start_value != 0.0 || s.end_value != 0.0 => {
                    return bad(format!("release segment {i} must be zero"));
                }
                _ => {}
            }
            if released && s.shape != SegmentShape::ReleaseToZero {
                return bad(format!("segment {i} follows a release"));
            }
            released |= s.shape == SegmentShape::ReleaseToZero;
            if i > 0 {
                let prev = &self.segments[i - 1];
                if (s.start - prev.end).abs() > TIME_EPS {
                    return bad(format!("gap before segment {i}"));
                }
                if s.shape != SegmentShape::ReleaseToZero && s.start_value != prev.end_value {
                    return bad(format!("jump before segment {i}"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<f64, ScenarioError> {
        let total = self.total_time();
        if !(t >= -TIME_EPS && t <= total + TIME_EPS) {
            return Err(ScenarioError::TimeOutOfRange { t, total });
        }
        let seg = self
            .segments
            .iter()
            .find(|s| t < s.end)
            .unwrap_or_else(|| self.segments.last().unwrap());
        Ok(match seg.shape {
            SegmentShape::Hold => seg.start_value,
            SegmentShape::ReleaseToZero => 0.0,
            SegmentShape::RampSmooth => {
                let x = (t - seg.start) / (seg.end - seg.start);
                seg.start_value + (seg.end_value - seg.start_value) * smoothstep(x)
            }
        })
    }
}

/// Parametric angle as a function of time (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum AngleForm {
    Constant { value: f64 },
    /// Linear from `v0` at `t0` to `v1` at `t1`, held constant outside.
    Linear { t0: f64, t1: f64, v0: f64, v1: f64 },
    Sinusoid { offset: f64, amplitude: f64, freq_hz: f64, phase: f64 },
}

impl AngleForm {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            AngleForm::Constant { value } => value,
            AngleForm::Linear { t0, t1, v0, v1 } => {
                let x = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                v0 + (v1 - v0) * x
            }
            AngleForm::Sinusoid {
                offset,
                amplitude,
                freq_hz,
                phase,
            } => offset + amplitude * (2.0 * PI * freq_hz * t + phase).sin(),
        }
    }

    /// Upper bound on `|value|` over all t.
    pub fn max_abs(&self) -> f64 {
        match *self {
            AngleForm::Constant { value } => value.abs(),
            AngleForm::Linear { v0, v1, .. } => v0.abs().max(v1.abs()),
            AngleForm::Sinusoid { offset, amplitude, .. } => offset.abs() + amplitude.abs(),
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            AngleForm::Constant { value } => value.is_finite(),
            AngleForm::Linear { t0, t1, v0, v1 } => t1 > t0 && [t0, t1, v0, v1].iter().all(|v| v.is_finite()),
            AngleForm::Sinusoid {
                offset,
                amplitude,
                freq_hz,
                phase,
            } => [offset, amplitude, freq_hz, phase].iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleTrajectory {
    /// Tilt away from the normal.
    pub phi: AngleForm,
    /// Rotation about the normal.
    pub theta: AngleForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScheme {
    pub id: u32,
    pub name: String,
    /// mm
    pub max_displacement: f64,
    pub n_collision_faces: usize,
    pub push: PushTrajectory,
    pub angles: AngleTrajectory,
    /// s
    pub total_time: f64,
    pub release_time: Option<f64>,
}

impl SimulationScheme {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |reason: String| {
            Err(ScenarioError::InvalidScheme {
                id: self.id,
                reason,
            })
        };
        self.push.validate()?;
        if (self.push.total_time() - self.total_time).abs() > TIME_EPS {
            return bad("push trajectory does not span the scheme duration".into());
        }
        if self.push.release_time() != self.release_time {
            return bad("release time disagrees with the push trajectory".into());
        }
        if !(self.max_displacement > 0.0 && self.max_displacement.is_finite()) {
            return bad("max displacement must be positive".into());
        }
        if !(1..=crate::mesh::MAX_SITE_FACES).contains(&self.n_collision_faces) {
            return bad(format!("{} collision faces", self.n_collision_faces));
        }
        if !self.angles.phi.is_valid() || !self.angles.theta.is_valid() {
            return bad("non-finite angle coefficients".into());
        }
        if self.angles.phi.max_abs() > PI / 2.0 {
            return bad("|phi| may exceed pi/2".into());
        }
        Ok(())
    }

    pub fn push_factor(&self, t: f64) -> Result<f64, ScenarioError> {
        self.push.eval(t)
    }

    /// True while the site is constrained at time `t`.
    pub fn in_contact(&self, t: f64) -> Result<bool, ScenarioError> {
        let released = self.release_time.is_some_and(|r| t >= r - TIME_EPS);
        Ok(!released && self.push_factor(t)? > 0.0)
    }
}

/// Unit normal and tilt axis of a collision site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame {
    pub normal: Vec3,
    pub tilt_axis: Vec3,
}

impl ContactFrame {
    pub fn new(surface: &SurfaceMesh, site: &CollisionSite) -> Result<Self, MeshError> {
        let n = site.normal();
        let [p0, p1, _] = surface.face_points(site.seed_face as usize);
        let e = p1 - p0;
        let a = e - n * n.dot(&e);
        if !(a.norm() > 0.0) {
            return Err(MeshError::DegenerateFace {
                face: site.seed_face as usize,
                area: 0.0,
            });
        }
        Ok(Self {
            normal: n,
            tilt_axis: a.normalize(),
        })
    }

    /// `R(n, θ) · R(a, φ) · n`, a unit vector at angle φ from the normal.
    pub fn direction(&self, phi: f64, theta: f64) -> Vec3 {
        let tilt = Rotation3::from_axis_angle(&Unit::new_unchecked(self.tilt_axis), phi);
        let spin = Rotation3::from_axis_angle(&Unit::new_unchecked(self.normal), theta);
        spin * (tilt * self.normal)
    }
}

pub fn collision_vector(scheme: &SimulationScheme, frame: &ContactFrame, t: f64) -> Result<Vec3, ScenarioError> {
    let p = scheme.push_factor(t)?;
    let dir = frame.direction(scheme.angles.phi.eval(t), scheme.angles.theta.eval(t));
    Ok(dir * (p * scheme.max_displacement))
}

/// Collision field over the site nodes (mm). Nonzero only while in contact.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionField {
    pub site_nodes: Vec<u32>,
    pub values: BTreeMap<u32, Vec3>,
}

impl CollisionField {
    pub fn to_sparse(&self) -> SparseField {
        SparseField {
            nodes: self.values.keys().copied().collect(),
            values: self
                .values
                .values()
                .map(|v| [v.x as f32, v.y as f32, v.z as f32])
                .collect(),
        }
    }

    pub fn to_dense(&self, n_nodes: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); n_nodes];
        for (&n, v) in &self.values {
            out[n as usize] = *v;
        }
        out
    }
}

/// Boundary conditions and collision field at time `t`.
pub fn scheme_to_bc(
    scheme: &SimulationScheme,
    site: &CollisionSite,
    frame: &ContactFrame,
    fixed_nodes: &BTreeSet<u32>,
    t: f64,
) -> Result<(BoundaryConditions, CollisionField), ScenarioError> {
    let mut values = BTreeMap::new();
    if scheme.in_contact(t)? {
        let v = collision_vector(scheme, frame, t)?;
        for &n in &site.nodes {
            if !fixed_nodes.contains(&n) {
                values.insert(n, v);
            }
        }
    }
    let bc = BoundaryConditions::new(fixed_nodes.clone(), values.clone())?;
    Ok((
        bc,
        CollisionField {
            site_nodes: site.nodes.clone(),
            values,
        },
    ))
}

fn ramp(start: f64, end: f64, from: f64, to: f64) -> PushSegment {
    PushSegment {
        start,
        end,
        shape: SegmentShape::RampSmooth,
        start_value: from,
        end_value: to,
    }
}

fn hold(start: f64, end: f64, value: f64) -> PushSegment {
    PushSegment {
        start,
        end,
        shape: SegmentShape::Hold,
        start_value: value,
        end_value: value,
    }
}

fn release(start: f64, end: f64) -> PushSegment {
    PushSegment {
        start,
        end,
        shape: SegmentShape::ReleaseToZero,
        start_value: 0.0,
        end_value: 0.0,
    }
}

/// The five default schemes. Scheme 3 tilts by π/8, sweeps θ through a full
/// turn and releases at 6.5 s; the others vary push shape and direction.
pub fn default_scheme_library() -> Vec<SimulationScheme> {
    const T: f64 = 8.0;
    let zero = AngleForm::Constant { value: 0.0 };
    vec![
        SimulationScheme {
            id: 1,
            name: "press-hold-release".into(),
            max_displacement: 12.0,
            n_collision_faces: 50,
            push: PushTrajectory {
                segments: vec![ramp(0.0, 2.5, 0.0, 1.0), hold(2.5, 5.0, 1.0), release(5.0, T)],
            },
            angles: AngleTrajectory { phi: zero, theta: zero },
            total_time: T,
            release_time: Some(5.0),
        },
        SimulationScheme {
            id: 2,
            name: "oscillating-direction".into(),
            max_displacement: 10.0,
            n_collision_faces: 25,
            push: PushTrajectory {
                segments: vec![ramp(0.0, 3.0, 0.0, 1.0), hold(3.0, T, 1.0)],
            },
            angles: AngleTrajectory {
                phi: AngleForm::Constant { value: PI / 10.0 },
                theta: AngleForm::Sinusoid {
                    offset: 0.0,
                    amplitude: PI / 2.0,
                    freq_hz: 0.25,
                    phase: 0.0,
                },
            },
            total_time: T,
            release_time: None,
        },
        SimulationScheme {
            id: 3,
            name: "tilted-sweep-release".into(),
            max_displacement: 13.0,
            n_collision_faces: 75,
            push: PushTrajectory {
                segments: vec![ramp(0.0, 2.0, 0.0, 1.0), hold(2.0, 6.5, 1.0), release(6.5, T)],
            },
            angles: AngleTrajectory {
                phi: AngleForm::Constant { value: PI / 8.0 },
                theta: AngleForm::Linear {
                    t0: 0.0,
                    t1: 6.5,
                    v0: 0.0,
                    v1: 2.0 * PI,
                },
            },
            total_time: T,
            release_time: Some(6.5),
        },
        SimulationScheme {
            id: 4,
            name: "two-peak".into(),
            max_displacement: 15.0,
            n_collision_faces: 100,
            push: PushTrajectory {
                segments: vec![
                    ramp(0.0, 1.5, 0.0, 1.0),
                    ramp(1.5, 3.0, 1.0, 0.3),
                    ramp(3.0, 4.5, 0.3, 1.0),
                    hold(4.5, 6.0, 1.0),
                    release(6.0, T),
                ],
            },
            angles: AngleTrajectory {
                phi: AngleForm::Linear {
                    t0: 0.0,
                    t1: 6.0,
                    v0: 0.0,
                    v1: PI / 6.0,
                },
                theta: zero,
            },
            total_time: T,
            release_time: Some(6.0),
        },
        SimulationScheme {
            id: 5,
            name: "late-short-press".into(),
            max_displacement: 11.0,
            n_collision_faces: 40,
            push: PushTrajectory {
                segments: vec![
                    hold(0.0, 4.0, 0.0),
                    ramp(4.0, 5.0, 0.0, 1.0),
                    hold(5.0, 6.0, 1.0),
                    release(6.0, T),
                ],
            },
            angles: AngleTrajectory {
                phi: AngleForm::Constant { value: PI / 12.0 },
                theta: AngleForm::Constant { value: PI / 3.0 },
            },
            total_time: T,
            release_time: Some(6.0),
        },
    ]
}

pub fn load_scheme_library(path: &Path) -> Result<Vec<SimulationScheme>, ScenarioError> {
    let schemes: Vec<SimulationScheme> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for s in &schemes {
        s.validate()?;
    }
    Ok(schemes)
}

/// Seed of simulation `index` of scheme `scheme_id`:
/// `splitmix64(master ^ splitmix64((scheme_id << 32) | index))`.
pub fn simulation_seed(master_seed: u64, scheme_id: u32, index: u32) -> u64 {
    splitmix64(master_seed ^ splitmix64(((scheme_id as u64) << 32) | index as u64))
}

/// Everything a single simulation needs besides its scheme and seed.
pub struct SimulationSetup<'a> {
    pub mesh: &'a TetMesh,
    pub surface: &'a SurfaceMesh,
    pub domain: &'a CollisionDomain,
    pub fixed_nodes: &'a BTreeSet<u32>,
    pub solver: SolverConfig,
}

/// Samples a collision site from `seed` and runs the scheme to completion.
pub fn simulate(setup: &SimulationSetup, scheme: &SimulationScheme, seed: u64) -> Result<Trajectory, ScenarioError> {
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let faces: Vec<u32> = setup.domain.face_ids.iter().copied().collect();
    let seed_face = faces[rng.gen_range(0..faces.len())] as usize;
    let site = grow_collision_site(setup.domain, setup.surface, seed_face, scheme.n_collision_faces, &mut rng)?;
    let frame = ContactFrame::new(setup.surface, &site)?;
    let cfg = SolverConfig {
        total_time: scheme.total_time,
        ..setup.solver
    };
    let mut bc_error = None;
    let u = run_sequence(setup.mesh, &cfg, |t| {
        let t = t.min(scheme.total_time);
        match scheme_to_bc(scheme, &site, &frame, setup.fixed_nodes, t) {
            Ok((bc, _)) => bc,
            Err(e) => {
                bc_error.get_or_insert(e);
                BoundaryConditions::default()
            }
        }
    })?;
    if let Some(e) = bc_error {
        return Err(e);
    }
    let interval = cfg.output_interval();
    let steps = u
        .into_iter()
        .enumerate()
        .map(|(k, field)| {
            let t = k as f64 * interval;
            let (_, c) = scheme_to_bc(scheme, &site, &frame, setup.fixed_nodes, t)?;
            Ok(Step {
                u: field.iter().map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect(),
                c: c.to_sparse(),
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    Ok(Trajectory {
        n_nodes: setup.mesh.n_vertices(),
        dt: interval,
        scheme_id: scheme.id,
        seed,
        site: SiteDescriptor {
            seed_face: site.seed_face,
            faces: site.faces,
            nodes: site.nodes,
        },
        steps,
    })
}

pub struct GenerateOptions<'a> {
    pub n_per_scheme: usize,
    pub master_seed: u64,
    pub n_test: usize,
    pub n_val: usize,
    /// Written next to the trajectories and referenced by the manifest.
    pub mesh_bytes: &'a [u8],
    pub workers: usize,
}

/// Runs `n_per_scheme` simulations per scheme into `out_dir`. Diverged
/// simulations are logged and listed as excluded in the manifest.
pub fn generate_dataset(
    schemes: &[SimulationScheme],
    setup: &SimulationSetup,
    opts: &GenerateOptions,
    out_dir: &Path,
) -> Result<DatasetManifest, ScenarioError> {
    if opts.n_per_scheme < 1 {
        return Err(ScenarioError::InvalidScheme {
            id: 0,
            reason: "n_per_scheme must be at least 1".into(),
        });
    }
    for s in schemes {
        s.validate()?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mesh_file = "mesh.ndmesh";
    std::fs::write(out_dir.join(mesh_file), opts.mesh_bytes)?;

    let jobs: Vec<(usize, u32, u64)> = schemes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            (0..opts.n_per_scheme as u32).map(move |i| (si, i, simulation_seed(opts.master_seed, s.id, i)))
        })
        .collect();
    let results = run_jobs(&jobs, opts.workers.max(1), |&(si, i, seed)| {
        let scheme = &schemes[si];
        let res = simulate(setup, scheme, seed).and_then(|traj| {
            let file = format!("s{}_{:03}.ndtraj", scheme.id, i);
            let sha = write_trajectory(&out_dir.join(&file), &traj)?;
            Ok(ManifestEntry {
                file,
                sha256: sha,
                scheme_id: scheme.id,
                seed,
                n_steps: traj.steps.len(),
                n_site_faces: traj.site.faces.len(),
                split: Split::Train,
            })
        });
        log::info!("scheme {} simulation {} done", scheme.id, i);
        res
    });

    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for (&(si, _, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(e) => entries.push(e),
            Err(ScenarioError::Fem(e)) if e.is_divergence() => {
                log::warn!("scheme {} seed {seed:#x} diverged: {e}", schemes[si].id);
                excluded.push(ExcludedSimulation {
                    scheme_id: schemes[si].id,
                    seed,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    assign_splits(&mut entries, opts.n_test, opts.n_val)?;
    let (_, coord_transform) = scale_coordinates(&setup.mesh.vertices)?;
    let mut manifest = DatasetManifest {
        format: "NDTRAJ1".into(),
        version: crate::dataset::TRAJ_VERSION,
        master_seed: opts.master_seed,
        mesh_file: mesh_file.into(),
        mesh_sha256: hex(&Sha256::digest(opts.mesh_bytes)),
        n_nodes: setup.mesh.n_vertices(),
        dt: setup.solver.output_interval(),
        solver: serde_json::to_value(setup.solver)?,
        schemes: serde_json::to_value(schemes)?,
        entries,
        excluded,
        norm_stats: None,
        coord_transform,
    };
    if manifest.entries_in(Split::Train).next().is_some() {
        let train = manifest.load_split(out_dir, Split::Train)?;
        manifest.norm_stats = Some(compute_norm_stats(&train)?);
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Maps `f` over `jobs` on `workers` threads, returning results in job order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{extract_surface, seed_normal};

    fn scheme(id: u32) -> SimulationScheme {
        default_scheme_library().into_iter().find(|s| s.id == id).unwrap()
    }

    fn flat_frame() -> (SurfaceMesh, CollisionSite, ContactFrame) {
        let v = vec![Vec3::zeros(), Vec3::new(1.0, 0.5, 0.0), Vec3::y()];
        let surface = SurfaceMesh::new(v, vec![[0, 1, 2]]).unwrap();
        let n = seed_normal(&surface, 0).unwrap();
        let site = CollisionSite {
            seed_face: 0,
            faces: vec![0],
            nodes: vec![0, 1, 2],
            seed_normal: [n.x, n.y, n.z],
        };
        let frame = ContactFrame::new(&surface, &site).unwrap();
        (surface, site, frame)
    }

    #[test]
    fn library_is_valid() {
        let lib = default_scheme_library();
        assert_eq!(lib.len(), 5);
        for s in &lib {
            s.validate().unwrap();
            assert!((10.0..=15.0).contains(&s.max_displacement));
            assert!((25..=100).contains(&s.n_collision_faces));
            assert_eq!(s.total_time, 8.0);
            assert_eq!(s.push_factor(0.0).unwrap(), 0.0);
            let cfg = SolverConfig::default();
            assert_eq!(cfg.n_snapshots(), 160);
        }
        let s3 = scheme(3);
        assert_eq!(s3.release_time, Some(6.5));
        assert_eq!(s3.angles.phi.eval(3.0), PI / 8.0);
        assert_eq!(s3.max_displacement, 13.0);
    }

    #[test]
    fn push_factor_pieces() {
        let s3 = scheme(3);
        assert_eq!(s3.push_factor(4.0).unwrap(), 1.0);
        assert_eq!(s3.push_factor(6.5).unwrap(), 0.0);
        assert_eq!(s3.push_factor(7.9).unwrap(), 0.0);
        assert_eq!(s3.push_factor(8.0).unwrap(), 0.0);
        assert!((s3.push_factor(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(s3.push_factor(-0.1).is_err());
        assert!(s3.push_factor(8.1).is_err());
    }

    #[test]
    fn invalid_push_rejected() {
        let mut p = scheme(1).push;
        p.segments[1].start = 2.6;
        assert!(p.validate().is_err());
        let mut p = scheme(1).push;
        p.segments[0].end_value = 1.2;
        assert!(p.validate().is_err());
        let mut s = scheme(3);
        s.release_time = Some(6.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn collision_vector_geometry() {
        let (_, _, frame) = flat_frame();
        let mut s = scheme(1);
        s.max_displacement = 13.0;
        let v = collision_vector(&s, &frame, 3.0).unwrap();
        assert!((v - frame.normal * 13.0).norm() < 1e-12);
        assert!(frame.tilt_axis.dot(&frame.normal).abs() < 1e-15);

        let v3 = collision_vector(&scheme(3), &frame, 4.0).unwrap();
        assert!((v3.norm() - 13.0).abs() < 1e-9);
        let angle = (v3.dot(&frame.normal) / v3.norm()).acos();
        assert!((angle - PI / 8.0).abs() < 1e-9);
    }

    #[test]
    fn theta_spins_about_the_normal() {
        let (_, _, frame) = flat_frame();
        let base = frame.direction(0.0, 0.0);
        assert!((frame.direction(0.0, 1.3) - base).norm() < 1e-15);
        let a = frame.direction(0.4, 0.0);
        let b = frame.direction(0.4, PI);
        // half a turn mirrors the tilt
        assert!(((a + b) / 2.0 - frame.normal * 0.4f64.cos()).norm() < 1e-12);
    }

    #[test]
    fn bc_follows_contact() {
        let (_, site, frame) = flat_frame();
        let fixed = BTreeSet::from([2u32]);
        let s3 = scheme(3);
        let (bc, c) = scheme_to_bc(&s3, &site, &frame, &fixed, 0.0).unwrap();
        assert!(bc.prescribed.is_empty() && c.values.is_empty());
        let (bc, c) = scheme_to_bc(&s3, &site, &frame, &fixed, 4.0).unwrap();
        assert_eq!(bc.prescribed.len(), 2);
        let v: Vec<_> = bc.prescribed.values().collect();
        assert_eq!(v[0], v[1]);
        assert_eq!(c.values, bc.prescribed);
        let (bc, c) = scheme_to_bc(&s3, &site, &frame, &fixed, 7.0).unwrap();
        assert!(bc.prescribed.is_empty() && c.to_dense(3).iter().all(|v| *v == Vec3::zeros()));
        assert_eq!(bc.fixed_nodes, fixed);
    }

    #[test]
    fn scheme_json_round_trip() {
        let lib = default_scheme_library();
        let text = serde_json::to_string(&lib).unwrap();
        let back: Vec<SimulationScheme> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lib);
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = BTreeSet::new();
        for s in 1..=5 {
            for i in 0..100 {
                assert!(seen.insert(simulation_seed(42, s, i)));
            }
        }
        assert_ne!(simulation_seed(1, 1, 0), simulation_seed(2, 1, 0));
    }

    #[test]
    fn small_dataset_is_deterministic() {
        use crate::mesh::generate_primitive_mesh;
        use crate::mesh::PrimitiveKind;
        let mesh = generate_primitive_mesh(PrimitiveKind::Box, 4, [40.0, 40.0, 20.0]).unwrap();
        let surface = extract_surface(&mesh).unwrap();
        let spec = crate::mesh::MeshSpec::new(PrimitiveKind::Box, 4, [40.0, 40.0, 20.0]);
        let domain = spec.collision_domain(&surface).unwrap();
        let fixed: BTreeSet<u32> = spec.fixed_nodes(&mesh).into_iter().collect();
        let mat = crate::fem::MaterialParams::default();
        let dt_crit = crate::fem::TledSolver::new(&mesh, mat).unwrap().critical_timestep();
        let solver = SolverConfig::default().with_stable_dt(dt_crit, 0.25);
        let setup = SimulationSetup {
            mesh: &mesh,
            surface: &surface,
            domain: &domain,
            fixed_nodes: &fixed,
            solver,
        };
        let mut schemes = vec![scheme(1), scheme(5)];
        for s in &mut schemes {
            s.n_collision_faces = 4;
            s.max_displacement = 3.0;
        }
        let opts = GenerateOptions {
            n_per_scheme: 1,
            master_seed: 7,
            n_test: 1,
            n_val: 0,
            mesh_bytes: b"mesh",
            workers: 2,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&schemes, &setup, &opts, a.path()).unwrap();
        let mb = generate_dataset(&schemes, &setup, &opts, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.entries.len(), 2);
        for e in &ma.entries {
            assert_eq!(e.n_steps, 32);
            let x = std::fs::read(a.path().join(&e.file)).unwrap();
            let y = std::fs::read(b.path().join(&e.file)).unwrap();
            assert_eq!(x, y);
        }
    }
}
