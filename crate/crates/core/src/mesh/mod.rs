//! Tetrahedral and surface meshes.
//!
//! Vertex indices are global: a [`SurfaceMesh`] keeps the full vertex array of
//! the [`TetMesh`] it was extracted from, so surface-face node ids are directly
//! FEM node ids.

mod generate;
pub mod io;
mod site;

pub use generate::{generate_primitive_mesh, MeshSpec, PrimitiveKind};
pub use site::{grow_collision_site, seed_normal, CollisionDomain, CollisionSite, MAX_SITE_FACES};

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Faces with an area below this are rejected when a mesh is built.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("extent must be strictly positive, got {0:?}")]
    InvalidExtent([f64; 3]),
    #[error("resolution must be at least 1")]
    InvalidResolution,
    #[error("tet {tet} references vertex {index} but the mesh has {n_vertices} vertices")]
    IndexOutOfRange {
        tet: usize,
        index: u32,
        n_vertices: usize,
    },
    #[error("tet {tet} has non-positive signed volume {volume}")]
    InvertedTet { tet: usize, volume: f64 },
    #[error("tet {tet} has minimum dihedral angle {angle_deg:.3} deg below the floor {floor_deg} deg")]
    PoorQuality {
        tet: usize,
        angle_deg: f64,
        floor_deg: f64,
    },
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("surface edge ({0}, {1}) is shared by more than two faces")]
    NonManifoldEdge(u32, u32),
    #[error("face {face} is not part of the collision domain ({domain_size} faces)")]
    SeedOutsideDomain { face: usize, domain_size: usize },
    #[error("face index {face} out of range ({n_faces} faces)")]
    FaceOutOfRange { face: usize, n_faces: usize },
    #[error("site size must be in 1..={max}, got {requested}")]
    InvalidSiteSize { requested: usize, max: usize },
    #[error("collision domain is empty or not edge-connected")]
    InvalidDomain,
    #[error("mesh file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Local vertex triples of the four faces of a positively oriented tet,
/// ordered so that the right-hand normal points outward.
pub(crate) const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[u32; 4]>,
    pub surface_faces: Vec<[u32; 3]>,
    /// Owning tet of each surface face.
    pub face_owner: Vec<u32>,
}

pub fn signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

/// Smallest interior dihedral angle of a tet, in degrees.
pub fn min_dihedral_deg(p: [&Vec3; 4]) -> f64 {
    // outward face normals
    let centroid = (p[0] + p[1] + p[2] + p[3]) / 4.0;
    let mut normals = [Vec3::zeros(); 4];
    for (f, tri) in TET_FACES.iter().enumerate() {
        let (a, b, c) = (p[tri[0]], p[tri[1]], p[tri[2]]);
        let mut n = (b - a).cross(&(c - a));
        if n.dot(&(a - centroid)) < 0.0 {
            n = -n;
        }
        let len = n.norm();
        normals[f] = if len > 0.0 { n / len } else { n };
    }
    let mut min_angle = f64::INFINITY;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let c = (-normals[i].dot(&normals[j])).clamp(-1.0, 1.0);
            min_angle = min_angle.min(c.acos().to_degrees());
        }
    }
    min_angle
}

impl TetMesh {
    /// Builds a mesh from vertices and tets, validating indices and
    /// orientation and extracting the boundary faces.
    pub fn new(vertices: Vec<Vec3>, tets: Vec<[u32; 4]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        for (t, tet) in tets.iter().enumerate() {
            for &i in tet {
                if i as usize >= n {
                    return Err(MeshError::IndexOutOfRange {
                        tet: t,
                        index: i,
                        n_vertices: n,
                    });
                }
            }
            let [a, b, c, d] = tet.map(|i| &vertices[i as usize]);
            let volume = signed_volume(a, b, c, d);
            if volume <= 0.0 {
                return Err(MeshError::InvertedTet { tet: t, volume });
            }
        }
        let (surface_faces, face_owner) = boundary_faces(&tets);
        let mesh = Self {
            vertices,
            tets,
            surface_faces,
            face_owner,
        };
        for f in 0..mesh.surface_faces.len() {
            let area = mesh.face_area(f);
            if area < MIN_FACE_AREA {
                return Err(MeshError::DegenerateFace { face: f, area });
            }
        }
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn tet_points(&self, t: usize) -> [&Vec3; 4] {
        self.tets[t].map(|i| &self.vertices[i as usize])
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tet_points(t);
        signed_volume(a, b, c, d)
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.surface_faces[f].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Rejects meshes with a tet whose smallest dihedral angle is below `floor_deg`.
    pub fn check_quality(&self, floor_deg: f64) -> Result<f64, MeshError> {
        let mut worst = f64::INFINITY;
        for t in 0..self.tets.len() {
            let angle = min_dihedral_deg(self.tet_points(t));
            if angle < floor_deg {
                return Err(MeshError::PoorQuality {
                    tet: t,
                    angle_deg: angle,
                    floor_deg,
                });
            }
            worst = worst.min(angle);
        }
        Ok(worst)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    /// Applies `f` to every vertex. Fails if the map inverts a tet.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Result<Self, MeshError> {
        Self::new(self.vertices.iter().map(f).collect(), self.tets.clone())
    }
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Faces that appear in exactly one tet, ordered by (owning tet, local face).
fn boundary_faces(tets: &[[u32; 4]]) -> (Vec<[u32; 3]>, Vec<u32>) {
    let mut keyed: Vec<([u32; 3], u32, u8)> = Vec::with_capacity(tets.len() * 4);
    for (t, tet) in tets.iter().enumerate() {
        for (lf, tri) in TET_FACES.iter().enumerate() {
            let mut key = [tet[tri[0]], tet[tri[1]], tet[tri[2]]];
            key.sort_unstable();
            keyed.push((key, t as u32, lf as u8));
        }
    }
    keyed.sort_unstable();
    let mut singles: Vec<(u32, u8)> = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let mut j = i + 1;
        while j < keyed.len() && keyed[j].0 == keyed[i].0 {
            j += 1;
        }
        if j - i == 1 {
            singles.push((keyed[i].1, keyed[i].2));
        }
        i = j;
    }
    singles.sort_unstable();
    let faces = singles
        .iter()
        .map(|&(t, lf)| {
            let tri = TET_FACES[lf as usize];
            let tet = tets[t as usize];
            [tet[tri[0]], tet[tri[1]], tet[tri[2]]]
        })
        .collect();
    let owners = singles.iter().map(|&(t, _)| t).collect();
    (faces, owners)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Edge-neighbouring faces of each face, sorted ascending.
    pub adjacency: Vec<Vec<u32>>,
}

impl SurfaceMesh {
    /// Builds a surface mesh, computing edge adjacency. Rejects degenerate
    /// faces and edges shared by more than two faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mut edges: Vec<((u32, u32), u32)> = Vec::with_capacity(faces.len() * 3);
        for (f, tri) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.push(((a.min(b), a.max(b)), f as u32));
            }
        }
        edges.sort_unstable();
        let mut adjacency = vec![Vec::new(); faces.len()];
        let mut i = 0;
        while i < edges.len() {
            let mut j = i + 1;
            while j < edges.len() && edges[j].0 == edges[i].0 {
                j += 1;
            }
            if j - i > 2 {
                let (a, b) = edges[i].0;
                return Err(MeshError::NonManifoldEdge(a, b));
            }
            if j - i == 2 {
                let (f, g) = (edges[i].1, edges[i + 1].1);
                adjacency[f as usize].push(g);
                adjacency[g as usize].push(f);
            }
            i = j;
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        let surface = Self {
            vertices,
            faces,
            adjacency,
        };
        for f in 0..surface.faces.len() {
            let area = surface.face_area(f);
            if !(area >= MIN_FACE_AREA) {
                return Err(MeshError::DegenerateFace { face: f, area });
            }
        }
        Ok(surface)
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_points(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// Right-hand (unnormalised) normal of face `f`; its length is twice the area.
    pub fn face_normal_raw(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.face_points(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_normal_raw(f).norm()
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.face_points(f);
        (a + b + c) / 3.0
    }
}

/// Boundary of a tet mesh with outward orientation.
pub fn extract_surface(mesh: &TetMesh) -> Result<SurfaceMesh, MeshError> {
    SurfaceMesh::new(mesh.vertices.clone(), mesh.surface_faces.clone())
}
