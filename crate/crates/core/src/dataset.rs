//! Trajectory files, dataset manifests, normalisation and coordinate scaling.
//!
//! `NDTRAJ1` layout, little-endian:
//!
//! | bytes        | content                                           |
//! |--------------|---------------------------------------------------|
//! | 7 + 1        | magic `NDTRAJ1`, version (1)                      |
//! | 4, 4         | u32 node count K, u32 step count                  |
//! | 8            | f64 snapshot interval Δt (s)                      |
//! | 4, 8         | u32 scheme id, u64 simulation seed                |
//! | 4            | u32 seed face                                     |
//! | 4 + 4·F      | u32 site face count, site faces                   |
//! | 4 + 4·N      | u32 site node count, site nodes                   |
//! | per step     | K × 3 f32 displacement, then u32 count, count u32 |
//! |              | node ids and count × 3 f32 collision vectors      |
//! | 32           | SHA-256 of everything before it                   |

use crate::binio::{put_f32, put_f64, put_u32, put_u64, Reader, Truncated};
use crate::mesh::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRAJ_MAGIC: &[u8; 7] = b"NDTRAJ1";
pub const TRAJ_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Side length of the cube coordinates are scaled into.
pub const COORD_BOX: f64 = 200.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a trajectory file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("file truncated at byte {offset} (wanted {wanted} more)")]
    Truncated { offset: usize, wanted: usize },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("axis {axis} has zero variance")]
    ZeroStd { axis: usize },
    #[error("no samples")]
    Empty,
    #[error("degenerate bounding box")]
    DegenerateBox,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<Truncated> for DatasetError {
    fn from(t: Truncated) -> Self {
        DatasetError::Truncated {
            offset: t.offset,
            wanted: t.wanted,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sparse collision field: nonzero vectors at the listed nodes only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseField {
    pub nodes: Vec<u32>,
    pub values: Vec<[f32; 3]>,
}

impl SparseField {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn to_dense(&self, n_nodes: usize) -> Vec<[f32; 3]> {
        let mut out = vec![[0.0; 3]; n_nodes];
        for (&n, v) in self.nodes.iter().zip(&self.values) {
            out[n as usize] = *v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub u: Vec<[f32; 3]>,
    pub c: SparseField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDescriptor {
    pub seed_face: u32,
    pub faces: Vec<u32>,
    pub nodes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_nodes: usize,
    /// Snapshot interval (s).
    pub dt: f64,
    pub scheme_id: u32,
    pub seed: u64,
    pub site: SiteDescriptor,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.u.len() != self.n_nodes {
                return Err(DatasetError::Inconsistent(format!(
                    "step {i} has {} nodes, expected {}",
                    s.u.len(),
                    self.n_nodes
                )));
            }
            if s.c.nodes.len() != s.c.values.len()
                || s.c.nodes.iter().any(|&n| n as usize >= self.n_nodes)
            {
                return Err(DatasetError::Inconsistent(format!("step {i} has a bad collision block")));
            }
        }
        Ok(())
    }

    pub fn max_displacement(&self) -> f32 {
        self.steps
            .iter()
            .flat_map(|s| s.u.iter())
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f32::max)
    }
}

/// Exact encoded size of a trajectory in bytes.
pub fn encoded_size(traj: &Trajectory) -> usize {
    let header = 8 + 4 + 4 + 8 + 4 + 8 + 4 + 4 + 4 * traj.site.faces.len() + 4 + 4 * traj.site.nodes.len();
    let steps: usize = traj
        .steps
        .iter()
        .map(|s| 12 * traj.n_nodes + 4 + 16 * s.c.nodes.len())
        .sum();
    header + steps + 32
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>, DatasetError> {
    traj.validate()?;
    let mut buf = Vec::with_capacity(encoded_size(traj));
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.push(TRAJ_VERSION);
    put_u32(&mut buf, traj.n_nodes as u32);
    put_u32(&mut buf, traj.steps.len() as u32);
    put_f64(&mut buf, traj.dt);
    put_u32(&mut buf, traj.scheme_id);
    put_u64(&mut buf, traj.seed);
    put_u32(&mut buf, traj.site.seed_face);
    put_u32(&mut buf, traj.site.faces.len() as u32);
    for &f in &traj.site.faces {
        put_u32(&mut buf, f);
    }
    put_u32(&mut buf, traj.site.nodes.len() as u32);
    for &n in &traj.site.nodes {
        put_u32(&mut buf, n);
    }
    for step in &traj.steps {
        for v in &step.u {
            for &x in v {
                put_f32(&mut buf, x);
            }
        }
        put_u32(&mut buf, step.c.nodes.len() as u32);
        for &n in &step.c.nodes {
            put_u32(&mut buf, n);
        }
        for v in &step.c.values {
            for &x in v {
                put_f32(&mut buf, x);
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn read_u32s(r: &mut Reader, n: usize) -> Result<Vec<u32>, DatasetError> {
    (0..n).map(|_| r.u32().map_err(Into::into)).collect()
}

fn read_vec3s(r: &mut Reader, n: usize) -> Result<Vec<[f32; 3]>, DatasetError> {
    let raw = r.bytes(12 * n)?;
    Ok(raw
        .chunks_exact(12)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
                f32::from_le_bytes(c[8..12].try_into().unwrap()),
            ]
        })
        .collect())
}

pub fn decode_trajectory(data: &[u8]) -> Result<Trajectory, DatasetError> {
    if data.len() < 8 {
        return Err(DatasetError::Truncated {
            offset: 0,
            wanted: 8,
        });
    }
    if &data[..7] != TRAJ_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    if data[7] != TRAJ_VERSION {
        return Err(DatasetError::UnsupportedVersion(data[7]));
    }
    if data.len() < 8 + 32 {
        return Err(DatasetError::Truncated {
            offset: data.len(),
            wanted: 8 + 32 - data.len(),
        });
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let mut r = Reader::new(&body[8..]);
    let n_nodes = r.u32()? as usize;
    let n_steps = r.u32()? as usize;
    let dt = r.f64()?;
    let scheme_id = r.u32()?;
    let seed = r.u64()?;
    let seed_face = r.u32()?;
    let n_faces = r.u32()? as usize;
    let faces = read_u32s(&mut r, n_faces)?;
    let n_site = r.u32()? as usize;
    let nodes = read_u32s(&mut r, n_site)?;
    // a short body is reported as truncation before the checksum is blamed
    let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
    for _ in 0..n_steps {
        let u = read_vec3s(&mut r, n_nodes)?;
        let count = r.u32()? as usize;
        let ids = read_u32s(&mut r, count)?;
        let values = read_vec3s(&mut r, count)?;
        steps.push(Step {
            u,
            c: SparseField { nodes: ids, values },
        });
    }
    if r.remaining() != 0 {
        return Err(DatasetError::Inconsistent(format!("{} trailing bytes", r.remaining())));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(DatasetError::ChecksumMismatch);
    }
    let traj = Trajectory {
        n_nodes,
        dt,
        scheme_id,
        seed,
        site: SiteDescriptor {
            seed_face,
            faces,
            nodes,
        },
        steps,
    };
    traj.validate()?;
    Ok(traj)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<String, DatasetError> {
    let bytes = encode_trajectory(traj)?;
    let sha = hex(&Sha256::digest(&bytes));
    std::fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(sha)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_trajectory(&bytes)
}

pub fn sha256_file(path: &Path) -> Result<String, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-axis mean and population standard deviation of displacements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        match (0..3).find(|&a| !(self.std[a] > 0.0) || !self.std[a].is_finite()) {
            Some(axis) => Err(DatasetError::ZeroStd { axis }),
            None => Ok(()),
        }
    }
}

/// Moments over every (trajectory, step, node) displacement sample.
pub fn compute_norm_stats<'a, I>(trajectories: I) -> Result<NormStats, DatasetError>
where
    I: IntoIterator<Item = &'a Trajectory> + Clone,
{
    let samples = || {
        trajectories
            .clone()
            .into_iter()
            .flat_map(|t| t.steps.iter().flat_map(|s| s.u.iter()))
    };
    stats_from_samples(samples)
}

/// Same as [`compute_norm_stats`] for a bare list of fields.
pub fn norm_stats_of_fields(fields: &[Vec<[f32; 3]>]) -> Result<NormStats, DatasetError> {
    stats_from_samples(|| fields.iter().flatten())
}

fn stats_from_samples<'a, F, It>(samples: F) -> Result<NormStats, DatasetError>
where
    F: Fn() -> It,
    It: Iterator<Item = &'a [f32; 3]>,
{
    let mut n = 0usize;
    let mut sum = [0.0f64; 3];
    for v in samples() {
        n += 1;
        for a in 0..3 {
            sum[a] += v[a] as f64;
        }
    }
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let mean = sum.map(|s| s / n as f64);
    let mut sq = [0.0f64; 3];
    for v in samples() {
        for a in 0..3 {
            let d = v[a] as f64 - mean[a];
            sq[a] += d * d;
        }
    }
    let stats = NormStats {
        mean,
        std: sq.map(|s| (s / n as f64).sqrt()),
    };
    stats.validate()?;
    Ok(stats)
}

pub fn normalize(u: &[[f32; 3]], stats: &NormStats) -> Vec<[f32; 3]> {
    u.iter()
        .map(|v| std::array::from_fn(|a| ((v[a] as f64 - stats.mean[a]) / stats.std[a]) as f32))
        .collect()
}

pub fn denormalize(u: &[[f32; 3]], stats: &NormStats) -> Vec<[f32; 3]> {
    u.iter()
        .map(|v| std::array::from_fn(|a| (v[a] as f64 * stats.std[a] + stats.mean[a]) as f32))
        .collect()
}

/// Isotropic map `x' = (x - origin) · scale` taking the tight bounding box
/// into `[0, 200]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordTransform {
    pub origin: [f64; 3],
    pub scale: f64,
}

impl CoordTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.origin)) * self.scale
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        q / self.scale + Vec3::from(self.origin)
    }

    /// Converts a length in scaled units to mm.
    pub fn to_mm(&self, length: f64) -> f64 {
        length / self.scale
    }
}

pub fn scale_coordinates(vertices: &[Vec3]) -> Result<(Vec<Vec3>, CoordTransform), DatasetError> {
    if vertices.is_empty() {
        return Err(DatasetError::Empty);
    }
    let (lo, hi) = crate::mesh::bounding_box(vertices);
    let extent = (hi - lo).max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(DatasetError::DegenerateBox);
    }
    let tf = CoordTransform {
        origin: [lo.x, lo.y, lo.z],
        scale: COORD_BOX / extent,
    };
    Ok((vertices.iter().map(|p| tf.apply(p)).collect(), tf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub scheme_id: u32,
    pub seed: u64,
    pub n_steps: usize,
    pub n_site_faces: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSimulation {
    pub scheme_id: u32,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u8,
    pub master_seed: u64,
    pub mesh_file: String,
    pub mesh_sha256: String,
    pub n_nodes: usize,
    /// Snapshot interval (s).
    pub dt: f64,
    pub solver: serde_json::Value,
    pub schemes: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub excluded: Vec<ExcludedSimulation>,
    pub norm_stats: Option<NormStats>,
    pub coord_transform: CoordTransform,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads the trajectories of one split, verifying each file checksum.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Trajectory>, DatasetError> {
        self.entries_in(split)
            .map(|e| {
                let path = dir.join(&e.file);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                if hex(&Sha256::digest(&bytes)) != e.sha256 {
                    return Err(DatasetError::ChecksumMismatch);
                }
                decode_trajectory(&bytes)
            })
            .collect()
    }

    /// Recomputes normalisation statistics from the training split.
    pub fn refresh_norm_stats(&mut self, dir: &Path) -> Result<NormStats, DatasetError> {
        let train = self.load_split(dir, Split::Train)?;
        let stats = compute_norm_stats(&train)?;
        self.norm_stats = Some(stats);
        Ok(stats)
    }
}

/// SplitMix64 finaliser; used for seed splitting and split assignment.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Assigns splits by ranking entries on a hash of their seed: the first
/// `n_test` go to test, the next `n_val` to validation, the rest to train.
/// File order does not matter.
pub fn assign_splits(entries: &mut [ManifestEntry], n_test: usize, n_val: usize) -> Result<(), DatasetError> {
    if n_test + n_val > entries.len() {
        return Err(DatasetError::Inconsistent(format!(
            "cannot hold out {} of {} trajectories",
            n_test + n_val,
            entries.len()
        )));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| (splitmix64(entries[i].seed ^ 0x5EED_5B17), entries[i].seed, i));
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Validation
        } else {
            Split::Train
        };
    }
    Ok(())
}
