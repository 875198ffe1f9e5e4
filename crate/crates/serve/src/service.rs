//! Sessions, the single model worker and collision-field construction.

use crate::protocol::{Pick, RawCollision, StepFrame, StepRequest, MAX_DEPTH_MM};
use nd_core::dataset::scale_coordinates;
use nd_core::mesh::io::{encode_mesh, MeshSidecar};
use nd_core::mesh::{extract_surface, grow_collision_site, CollisionDomain, MeshError, SurfaceMesh, TetMesh, Vec3};
use nd_core::scenario::CollisionField;
use nd_surrogate::model::{Geometry, ModelError, Stepper, Supernodes, Surrogate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;
use thiserror::Error;
use tokio::sync::oneshot;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("unknown mesh {0:?}")]
    UnknownMesh(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("face {face} is outside the collision domain {domain:?}")]
    OutsideDomain { face: u32, domain: Vec<u32> },
    #[error("session is poisoned by a non-finite prediction; reset it")]
    Poisoned,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("service is shutting down")]
    Shutdown,
}

/// A servable mesh with its collision domain and scaled node coordinates.
pub struct MeshEntry {
    pub id: String,
    pub mesh: TetMesh,
    pub surface: SurfaceMesh,
    pub domain: CollisionDomain,
    pub sidecar: MeshSidecar,
    /// Binary mesh file contents.
    pub bytes: Vec<u8>,
    pub coords: Vec<[f64; 3]>,
}

impl MeshEntry {
    /// The domain comes from the sidecar's face list, else its mesh spec.
    pub fn new(id: impl Into<String>, mesh: TetMesh, sidecar: MeshSidecar) -> Result<Self, ServeError> {
        let surface = extract_surface(&mesh)?;
        let domain = match (&sidecar.collision_domain, &sidecar.spec) {
            (Some(faces), _) => CollisionDomain::new(&surface, faces.iter().copied())?,
            (None, Some(spec)) => spec.collision_domain(&surface)?,
            (None, None) => {
                return Err(ServeError::InvalidRequest(
                    "mesh sidecar defines no collision domain".into(),
                ))
            }
        };
        let (scaled, _) = scale_coordinates(&mesh.vertices)
            .map_err(|e| ServeError::InvalidRequest(format!("cannot scale mesh: {e}")))?;
        Ok(Self {
            id: id.into(),
            bytes: encode_mesh(&mesh),
            coords: scaled.iter().map(|v| [v.x, v.y, v.z]).collect(),
            mesh,
            surface,
            domain,
            sidecar,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_vertices()
    }
}

pub struct ModelEntry {
    pub id: String,
    pub model: Arc<Surrogate>,
    pub meta: serde_json::Value,
}

#[derive(Default)]
pub struct Registry {
    meshes: BTreeMap<String, Arc<MeshEntry>>,
    models: BTreeMap<String, Arc<ModelEntry>>,
}

impl Registry {
    pub fn add_mesh(&mut self, entry: MeshEntry) {
        self.meshes.insert(entry.id.clone(), Arc::new(entry));
    }

    pub fn add_model(&mut self, id: impl Into<String>, model: Surrogate, meta: serde_json::Value) {
        let id = id.into();
        self.models.insert(
            id.clone(),
            Arc::new(ModelEntry {
                id,
                model: Arc::new(model),
                meta,
            }),
        );
    }

    pub fn mesh(&self, id: &str) -> Result<&Arc<MeshEntry>, ServeError> {
        self.meshes.get(id).ok_or_else(|| ServeError::UnknownMesh(id.into()))
    }

    pub fn model(&self, id: &str) -> Result<&Arc<ModelEntry>, ServeError> {
        self.models.get(id).ok_or_else(|| ServeError::UnknownModel(id.into()))
    }

    pub fn meshes(&self) -> impl Iterator<Item = &Arc<MeshEntry>> {
        self.meshes.values()
    }

    pub fn models(&self) -> impl Iterator<Item = &Arc<ModelEntry>> {
        self.models.values()
    }
}

/// Validates a pick and builds its collision field: a site of `n_faces`
/// grown around the picked face, every site node displaced by
/// `depth_mm · dir / ‖dir‖`.
pub fn pick_to_collision(mesh: &MeshEntry, pick: &Pick, rng: &mut ChaCha8Rng) -> Result<CollisionField, ServeError> {
    let bad = |m: String| Err(ServeError::InvalidRequest(m));
    if !pick.depth_mm.is_finite() || !(0.0..=MAX_DEPTH_MM).contains(&pick.depth_mm) {
        return bad(format!("depth {} mm outside [0, {MAX_DEPTH_MM}]", pick.depth_mm));
    }
    let dir = Vec3::from(pick.dir);
    let norm = dir.norm();
    if !norm.is_finite() || norm == 0.0 {
        return bad("direction must be finite and nonzero".into());
    }
    let sum: f64 = pick.bary.iter().sum();
    if pick.bary.iter().any(|b| !b.is_finite() || *b < -1e-9) || (sum - 1.0).abs() > 1e-6 {
        return bad(format!("barycentric point {:?} is not on the face", pick.bary));
    }
    if !mesh.domain.contains(pick.face) {
        return Err(ServeError::OutsideDomain {
            face: pick.face,
            domain: mesh.domain.face_ids.iter().copied().collect(),
        });
    }
    let site = grow_collision_site(&mesh.domain, &mesh.surface, pick.face as usize, pick.n_faces, rng)?;
    let v = dir * (pick.depth_mm / norm);
    Ok(CollisionField {
        values: site.nodes.iter().map(|&n| (n, v)).collect(),
        site_nodes: site.nodes,
    })
}

fn raw_to_collision(mesh: &MeshEntry, raw: &RawCollision) -> Result<CollisionField, ServeError> {
    let v = Vec3::from(raw.vec);
    if !v.iter().all(|x| x.is_finite()) || v.norm() > MAX_DEPTH_MM {
        return Err(ServeError::InvalidRequest(format!(
            "collision vector must be finite with norm at most {MAX_DEPTH_MM} mm"
        )));
    }
    if let Some(n) = raw.nodes.iter().find(|&&n| n as usize >= mesh.n_nodes()) {
        return Err(ServeError::InvalidRequest(format!("node {n} out of range")));
    }
    let mut site_nodes = raw.nodes.clone();
    site_nodes.sort_unstable();
    site_nodes.dedup();
    Ok(CollisionField {
        values: site_nodes.iter().map(|&n| (n, v)).collect(),
        site_nodes,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    /// Seeds supernode sampling and site growth per session.
    pub seed: u64,
    /// Number of recent step latencies kept per session.
    pub latency_window: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latency_window: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub step: u32,
    pub poisoned: bool,
    /// Over the recent window; `None` before the first step.
    pub median_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub window: usize,
    /// Frame encoding time of the most recent streamed step, not included
    /// in the step latencies.
    pub serialize_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub mesh: String,
    pub model: String,
    pub n_nodes: usize,
    pub supernodes: Vec<u32>,
}

struct Session {
    mesh: Arc<MeshEntry>,
    stepper: Stepper,
    u: Vec<[f64; 3]>,
    c: Vec<[f64; 3]>,
    step: u32,
    poisoned: bool,
    rng_seed: u64,
    rng: ChaCha8Rng,
    latencies: VecDeque<f64>,
    window: usize,
    serialize_ms: Option<f64>,
}

impl Session {
    fn reset(&mut self) {
        self.u.iter_mut().for_each(|v| *v = [0.0; 3]);
        self.step = 0;
        self.poisoned = false;
        self.rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        self.latencies.clear();
        self.serialize_ms = None;
    }

    fn advance(&mut self, req: &StepRequest) -> Result<StepFrame, ServeError> {
        if self.poisoned {
            return Err(ServeError::Poisoned);
        }
        let field = match (&req.pick, &req.raw) {
            (Some(_), Some(_)) => return Err(ServeError::InvalidRequest("give either pick or raw".into())),
            (Some(p), None) => Some(pick_to_collision(&self.mesh, p, &mut self.rng)?),
            (None, Some(r)) => Some(raw_to_collision(&self.mesh, r)?),
            (None, None) => None,
        };
        self.c.iter_mut().for_each(|v| *v = [0.0; 3]);
        if let Some(f) = field {
            for (&n, v) in &f.values {
                self.c[n as usize] = [v.x, v.y, v.z];
            }
        }
        let t0 = Instant::now();
        let out = self.stepper.step(&self.u, &self.c);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        match out {
            Ok(next) => self.u = next,
            Err(ModelError::NonFinite) => {
                self.poisoned = true;
                return Err(ServeError::Poisoned);
            }
            Err(e) => return Err(e.into()),
        }
        self.step += 1;
        if self.latencies.len() == self.window {
            self.latencies.pop_front();
        }
        self.latencies.push_back(ms);
        Ok(StepFrame {
            step: self.step,
            latency_ms: ms as f32,
            u: self.field(),
        })
    }

    fn field(&self) -> Vec<[f32; 3]> {
        self.u.iter().map(|v| v.map(|x| x as f32)).collect()
    }

    fn stats(&self) -> SessionStats {
        let n = self.latencies.len();
        let (median, mean, max) = if n == 0 {
            (None, None, None)
        } else {
            let mut s: Vec<f64> = self.latencies.iter().copied().collect();
            s.sort_by(f64::total_cmp);
            let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
            (Some(median), Some(s.iter().sum::<f64>() / n as f64), s.last().copied())
        };
        SessionStats {
            step: self.step,
            poisoned: self.poisoned,
            median_ms: median,
            mean_ms: mean,
            max_ms: max,
            window: n,
            serialize_ms: self.serialize_ms,
        }
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// Owns the sessions and one worker thread that runs every session
/// operation in submission order.
pub struct Service {
    registry: Registry,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    geometries: Mutex<HashMap<(String, usize), Arc<Geometry>>>,
    next_id: AtomicU64,
    jobs: Mutex<Option<mpsc::Sender<Job>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Service {
    pub fn new(registry: Registry, config: ServiceConfig) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = std::thread::Builder::new()
            .name("nd-serve-worker".into())
            .spawn(move || {
                for job in rx {
                    job();
                }
            })
            .expect("spawn worker thread");
        Self {
            registry,
            config: ServiceConfig {
                latency_window: config.latency_window.max(1),
                ..config
            },
            sessions: Mutex::new(HashMap::new()),
            geometries: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            jobs: Mutex::new(Some(tx)),
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn geometry(&self, mesh: &MeshEntry, d_embed: usize) -> Arc<Geometry> {
        let mut cache = self.geometries.lock().unwrap();
        cache
            .entry((mesh.id.clone(), d_embed))
            .or_insert_with(|| Arc::new(Geometry::new(mesh.coords.clone(), d_embed)))
            .clone()
    }

    /// Opens a session at rest with its own frozen supernodes.
    pub fn create_session(&self, mesh_id: &str, model_id: &str) -> Result<SessionInfo, ServeError> {
        let mesh = self.registry.mesh(mesh_id)?.clone();
        let model = self.registry.model(model_id)?.clone();
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{n}");
        let mut rng = ChaCha8Rng::seed_from_u64(nd_core::dataset::splitmix64(self.config.seed ^ n));
        let geo = self.geometry(&mesh, model.model.config.d_embed);
        let sn = Supernodes::sample(&geo, &model.model.config, &mut rng)?;
        let info = SessionInfo {
            id: id.clone(),
            mesh: mesh.id.clone(),
            model: model.id.clone(),
            n_nodes: mesh.n_nodes(),
            supernodes: sn.indices.clone(),
        };
        let rng_seed = nd_core::dataset::splitmix64(self.config.seed ^ n ^ 0x5151);
        let k = mesh.n_nodes();
        let session = Session {
            stepper: Stepper::new(model.model.clone(), geo, Arc::new(sn)),
            mesh,
            u: vec![[0.0; 3]; k],
            c: vec![[0.0; 3]; k],
            step: 0,
            poisoned: false,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            latencies: VecDeque::with_capacity(self.config.latency_window),
            window: self.config.latency_window,
            serialize_ms: None,
        };
        self.sessions
            .lock()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(info)
    }

    pub fn close_session(&self, id: &str) -> Result<(), ServeError> {
        self.sessions
            .lock()
            .unwrap()
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ServeError::UnknownSession(id.into()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServeError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServeError::UnknownSession(id.into()))
    }

    /// Queues `f` on the worker behind every earlier submission.
    fn submit<R: Send + 'static>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<R, ServeError> + Send + 'static,
    ) -> Result<oneshot::Receiver<Result<R, ServeError>>, ServeError> {
        let session = self.session(id)?;
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move || {
            let mut s = session.lock().unwrap();
            let _ = tx.send(f(&mut s));
        });
        let jobs = self.jobs.lock().unwrap();
        jobs.as_ref()
            .ok_or(ServeError::Shutdown)?
            .send(job)
            .map_err(|_| ServeError::Shutdown)?;
        Ok(rx)
    }

    pub async fn step(&self, id: &str, req: StepRequest) -> Result<StepFrame, ServeError> {
        self.submit(id, move |s| s.advance(&req))?
            .await
            .map_err(|_| ServeError::Shutdown)?
    }

    /// As [`Service::step`], for callers outside an async runtime.
    pub fn step_blocking(&self, id: &str, req: StepRequest) -> Result<StepFrame, ServeError> {
        self.submit(id, move |s| s.advance(&req))?
            .blocking_recv()
            .map_err(|_| ServeError::Shutdown)?
    }

    pub async fn reset(&self, id: &str) -> Result<(), ServeError> {
        self.submit(id, |s| {
            s.reset();
            Ok(())
        })?
        .await
        .map_err(|_| ServeError::Shutdown)?
    }

    pub fn reset_blocking(&self, id: &str) -> Result<(), ServeError> {
        self.submit(id, |s| {
            s.reset();
            Ok(())
        })?
        .blocking_recv()
        .map_err(|_| ServeError::Shutdown)?
    }

    /// Current field and step counter, read outside the worker queue.
    pub fn snapshot(&self, id: &str) -> Result<(u32, Vec<[f32; 3]>), ServeError> {
        let s = self.session(id)?;
        let s = s.lock().unwrap();
        Ok((s.step, s.field()))
    }

    pub fn note_serialization(&self, id: &str, ms: f64) {
        if let Ok(s) = self.session(id) {
            s.lock().unwrap().serialize_ms = Some(ms);
        }
    }

    pub fn stats(&self, id: &str) -> Result<SessionStats, ServeError> {
        Ok(self.session(id)?.lock().unwrap().stats())
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.jobs.lock().unwrap().take();
        if let Some(w) = self.worker.lock().unwrap().take() {
            let _ = w.join();
        }
    }
}
