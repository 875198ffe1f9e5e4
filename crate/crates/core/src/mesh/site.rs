//! Collision domains and iterative collision-site growth.

use super::{MeshError, SurfaceMesh, Vec3, MIN_FACE_AREA};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};

/// Upper bound on the number of faces in a collision site.
pub const MAX_SITE_FACES: usize = 100;

/// Surface faces where instrument contact may occur.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionDomain {
    pub face_ids: BTreeSet<u32>,
}

impl CollisionDomain {
    /// Validates that `faces` is a nonempty, edge-connected subset of `surface`.
    pub fn new(surface: &SurfaceMesh, faces: impl IntoIterator<Item = u32>) -> Result<Self, MeshError> {
        let face_ids: BTreeSet<u32> = faces.into_iter().collect();
        if face_ids.is_empty() {
            return Err(MeshError::InvalidDomain);
        }
        if let Some(&f) = face_ids.iter().find(|&&f| f as usize >= surface.n_faces()) {
            return Err(MeshError::FaceOutOfRange {
                face: f as usize,
                n_faces: surface.n_faces(),
            });
        }
        let start = *face_ids.iter().next().unwrap();
        if flood_fill(surface, &face_ids, start).len() != face_ids.len() {
            return Err(MeshError::InvalidDomain);
        }
        Ok(Self { face_ids })
    }

    /// Largest edge-connected component of `candidates` (ties go to the
    /// component containing the smallest face id).
    pub fn largest_component(surface: &SurfaceMesh, candidates: &[u32]) -> Result<Self, MeshError> {
        let pool: BTreeSet<u32> = candidates.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut best: BTreeSet<u32> = BTreeSet::new();
        for &f in &pool {
            if seen.contains(&f) {
                continue;
            }
            let comp = flood_fill(surface, &pool, f);
            seen.extend(comp.iter().copied());
            if comp.len() > best.len() {
                best = comp;
            }
        }
        Self::new(surface, best)
    }

    pub fn len(&self) -> usize {
        self.face_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face_ids.is_empty()
    }

    pub fn contains(&self, face: u32) -> bool {
        self.face_ids.contains(&face)
    }
}

/// Faces of `within` reachable from `start` through shared edges.
pub(crate) fn flood_fill(surface: &SurfaceMesh, within: &BTreeSet<u32>, start: u32) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    if !within.contains(&start) {
        return out;
    }
    let mut stack = vec![start];
    out.insert(start);
    while let Some(f) = stack.pop() {
        for &g in &surface.adjacency[f as usize] {
            if within.contains(&g) && out.insert(g) {
                stack.push(g);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSite {
    pub seed_face: u32,
    /// Faces in growth order; the first entry is the seed.
    pub faces: Vec<u32>,
    /// Sorted vertex ids touched by the faces.
    pub nodes: Vec<u32>,
    pub seed_normal: [f64; 3],
}

impl CollisionSite {
    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.seed_normal)
    }

    /// Rest-configuration centroid of the site nodes.
    pub fn centroid(&self, vertices: &[Vec3]) -> Vec3 {
        let sum: Vec3 = self.nodes.iter().map(|&v| vertices[v as usize]).sum();
        sum / self.nodes.len() as f64
    }
}

/// Unit outward normal of a surface face.
pub fn seed_normal(surface: &SurfaceMesh, face: usize) -> Result<Vec3, MeshError> {
    if face >= surface.n_faces() {
        return Err(MeshError::FaceOutOfRange {
            face,
            n_faces: surface.n_faces(),
        });
    }
    let n = surface.face_normal_raw(face);
    let area = 0.5 * n.norm();
    if !(area >= MIN_FACE_AREA) {
        return Err(MeshError::DegenerateFace { face, area });
    }
    Ok(n / n.norm())
}

/// Grows a site breadth-first from `seed_face`, shuffling each face's
/// unvisited domain neighbours before they join the frontier. Stops at
/// `n_faces` or when the reachable part of the domain is exhausted.
pub fn grow_collision_site<R: Rng + ?Sized>(
    domain: &CollisionDomain,
    surface: &SurfaceMesh,
    seed_face: usize,
    n_faces: usize,
    rng: &mut R,
) -> Result<CollisionSite, MeshError> {
    if !(1..=MAX_SITE_FACES).contains(&n_faces) {
        return Err(MeshError::InvalidSiteSize {
            requested: n_faces,
            max: MAX_SITE_FACES,
        });
    }
    if seed_face >= surface.n_faces() || !domain.contains(seed_face as u32) {
        return Err(MeshError::SeedOutsideDomain {
            face: seed_face,
            domain_size: domain.len(),
        });
    }
    let seed = seed_face as u32;
    let mut faces = vec![seed];
    let mut visited = BTreeSet::from([seed]);
    let mut frontier = VecDeque::from([seed]);
    'grow: while let Some(f) = frontier.pop_front() {
        let mut next: Vec<u32> = surface.adjacency[f as usize]
            .iter()
            .copied()
            .filter(|g| domain.contains(*g) && !visited.contains(g))
            .collect();
        next.shuffle(rng);
        for g in next {
            if faces.len() >= n_faces {
                break 'grow;
            }
            visited.insert(g);
            faces.push(g);
            frontier.push_back(g);
        }
        if faces.len() >= n_faces {
            break;
        }
    }
    let nodes: BTreeSet<u32> = faces
        .iter()
        .flat_map(|&f| surface.faces[f as usize])
        .collect();
    let n = seed_normal(surface, seed_face)?;
    Ok(CollisionSite {
        seed_face: seed,
        faces,
        nodes: nodes.into_iter().collect(),
        seed_normal: [n.x, n.y, n.z],
    })
}
