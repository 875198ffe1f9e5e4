//! `NDMESH1` binary mesh files and their JSON sidecar.
//!
//! Layout, all little-endian:
//!
//! | bytes            | content                                    |
//! |------------------|--------------------------------------------|
//! | 7                | magic `NDMESH1`                            |
//! | 1                | format version (1)                         |
//! | 4 × 3            | u32 vertex, tet and surface-face counts    |
//! | 12 × V           | f32 vertex triples (mm)                    |
//! | 16 × T           | u32 tet index quadruples                   |
//! | 12 × F           | u32 surface-face index triples             |
//! | 4 × F            | u32 owning tet of each surface face        |
//!
//! The sidecar carries units, provenance and optional domain data.

use super::{MeshError, MeshSpec, TetMesh, Vec3};
use crate::binio::{put_f32, put_u32, Reader};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MESH_MAGIC: &[u8; 7] = b"NDMESH1";
pub const MESH_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSidecar {
    pub format: String,
    pub version: u8,
    pub units: String,
    pub n_vertices: usize,
    pub n_tets: usize,
    pub n_surface_faces: usize,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MeshSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collision_domain: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_nodes: Option<Vec<u32>>,
}

impl MeshSidecar {
    pub fn for_mesh(mesh: &TetMesh, provenance: impl Into<String>) -> Self {
        Self {
            format: String::from_utf8_lossy(MESH_MAGIC).into_owned(),
            version: MESH_VERSION,
            units: "mm".into(),
            n_vertices: mesh.n_vertices(),
            n_tets: mesh.tets.len(),
            n_surface_faces: mesh.surface_faces.len(),
            provenance: provenance.into(),
            spec: None,
            collision_domain: None,
            fixed_nodes: None,
        }
    }
}

pub fn encode_mesh(mesh: &TetMesh) -> Vec<u8> {
    let mut buf = Vec::with_capacity(
        20 + 12 * mesh.n_vertices() + 16 * mesh.tets.len() + 16 * mesh.surface_faces.len(),
    );
    buf.extend_from_slice(MESH_MAGIC);
    buf.push(MESH_VERSION);
    put_u32(&mut buf, mesh.n_vertices() as u32);
    put_u32(&mut buf, mesh.tets.len() as u32);
    put_u32(&mut buf, mesh.surface_faces.len() as u32);
    for v in &mesh.vertices {
        for c in v.iter() {
            put_f32(&mut buf, *c as f32);
        }
    }
    for t in &mesh.tets {
        for &i in t {
            put_u32(&mut buf, i);
        }
    }
    for f in &mesh.surface_faces {
        for &i in f {
            put_u32(&mut buf, i);
        }
    }
    for &o in &mesh.face_owner {
        put_u32(&mut buf, o);
    }
    buf
}

fn truncated(t: crate::binio::Truncated) -> MeshError {
    MeshError::Format(format!("truncated at byte {} (wanted {} more)", t.offset, t.wanted))
}

/// Decodes a mesh, re-validating orientation and checking that the stored
/// boundary matches the one implied by the tets.
pub fn decode_mesh(data: &[u8]) -> Result<TetMesh, MeshError> {
    let mut r = Reader::new(data);
    let magic = r.bytes(7).map_err(truncated)?;
    if magic != MESH_MAGIC {
        return Err(MeshError::Format("bad magic".into()));
    }
    let version = r.u8().map_err(truncated)?;
    if version != MESH_VERSION {
        return Err(MeshError::Format(format!("unsupported version {version}")));
    }
    let nv = r.u32().map_err(truncated)? as usize;
    let nt = r.u32().map_err(truncated)? as usize;
    let nf = r.u32().map_err(truncated)? as usize;
    let need = 12 * nv + 16 * nt + 16 * nf;
    if r.remaining() != need {
        return Err(MeshError::Format(format!(
            "payload is {} bytes, header implies {need}",
            r.remaining()
        )));
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = r.f32().map_err(truncated)? as f64;
        let y = r.f32().map_err(truncated)? as f64;
        let z = r.f32().map_err(truncated)? as f64;
        vertices.push(Vec3::new(x, y, z));
    }
    let mut tets = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut t = [0u32; 4];
        for slot in &mut t {
            *slot = r.u32().map_err(truncated)?;
        }
        tets.push(t);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut f = [0u32; 3];
        for slot in &mut f {
            *slot = r.u32().map_err(truncated)?;
        }
        faces.push(f);
    }
    let mut owners = Vec::with_capacity(nf);
    for _ in 0..nf {
        owners.push(r.u32().map_err(truncated)?);
    }
    let mesh = TetMesh::new(vertices, tets)?;
    if mesh.surface_faces != faces || mesh.face_owner != owners {
        return Err(MeshError::Format("stored surface does not match the tets".into()));
    }
    Ok(mesh)
}

/// Writes `<path>` (binary) and `<path>.json` (sidecar).
pub fn write_mesh(path: &Path, mesh: &TetMesh, sidecar: &MeshSidecar) -> Result<(), MeshError> {
    std::fs::write(path, encode_mesh(mesh))?;
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| MeshError::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<(TetMesh, Option<MeshSidecar>), MeshError> {
    let mesh = decode_mesh(&std::fs::read(path)?)?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let text = std::fs::read_to_string(side)?;
        Some(serde_json::from_str(&text).map_err(|e| MeshError::Format(e.to_string()))?)
    } else {
        None
    };
    Ok((mesh, sidecar))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
