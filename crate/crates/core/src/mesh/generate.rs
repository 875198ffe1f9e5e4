//! Procedural tet meshes built from a voxel grid.
//!
//! Every grid cell is split into five tets, alternating the split with the
//! cell parity so that neighbouring cells share face diagonals. Curved
//! shapes keep the cells whose centre lies inside the implicit shape, after
//! which boundary vertices are pulled onto the implicit surface as far as the
//! quality floor allows.

use super::{min_dihedral_deg, signed_volume, CollisionDomain, MeshError, SurfaceMesh, TetMesh, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Box,
    Ellipsoid,
    HemisphereWithFissure,
}

/// Parameters of a procedural mesh. `resolution` is the number of grid cells
/// along the longest extent; `extent` is the bounding box size in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub kind: PrimitiveKind,
    pub resolution: usize,
    pub extent: [f64; 3],
}

/// Quality floor for snapped boundary vertices, degrees.
const SNAP_FLOOR_DEG: f64 = 12.0;
/// Minimum tet altitude after snapping, as a fraction of the grid spacing.
/// Keeps the explicit critical step within a small factor of the unsnapped grid.
const SNAP_FLOOR_ALTITUDE: f64 = 0.35;
/// Depth of the fissure groove as a fraction of the normalised dome radius.
const GROOVE_DEPTH: f64 = 0.3;

pub fn generate_primitive_mesh(
    kind: PrimitiveKind,
    resolution: usize,
    extent: [f64; 3],
) -> Result<TetMesh, MeshError> {
    MeshSpec {
        kind,
        resolution,
        extent,
    }
    .generate()
}

struct Grid {
    n: [usize; 3],
    h: [f64; 3],
}

impl Grid {
    fn vertex_id(&self, i: usize, j: usize, k: usize) -> usize {
        (k * (self.n[1] + 1) + j) * (self.n[0] + 1) + i
    }

    fn vertex_pos(&self, id: usize) -> Vec3 {
        let nx = self.n[0] + 1;
        let ny = self.n[1] + 1;
        let i = id % nx;
        let j = (id / nx) % ny;
        let k = id / (nx * ny);
        Vec3::new(
            i as f64 * self.h[0],
            j as f64 * self.h[1],
            k as f64 * self.h[2],
        )
    }

    fn vertex_coords(&self, id: usize) -> [usize; 3] {
        let nx = self.n[0] + 1;
        let ny = self.n[1] + 1;
        [id % nx, (id / nx) % ny, id / (nx * ny)]
    }

    fn cell_id(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            (i as f64 + 0.5) * self.h[0],
            (j as f64 + 0.5) * self.h[1],
            (k as f64 + 0.5) * self.h[2],
        )
    }

    fn n_cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }
}

impl MeshSpec {
    pub fn new(kind: PrimitiveKind, resolution: usize, extent: [f64; 3]) -> Self {
        Self {
            kind,
            resolution,
            extent,
        }
    }

    /// Desk-scale hemisphere used by the default pipeline.
    pub fn desk() -> Self {
        Self::new(PrimitiveKind::HemisphereWithFissure, 16, [120.0, 100.0, 60.0])
    }

    fn validate(&self) -> Result<(), MeshError> {
        if self.resolution < 1 {
            return Err(MeshError::InvalidResolution);
        }
        if self.extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(MeshError::InvalidExtent(self.extent));
        }
        Ok(())
    }

    fn grid(&self) -> Grid {
        let max_e = self.extent.iter().cloned().fold(0.0, f64::max);
        let target = max_e / self.resolution as f64;
        let mut n = [0usize; 3];
        for a in 0..3 {
            n[a] = ((self.extent[a] / target).round() as usize).max(1);
        }
        if self.kind == PrimitiveKind::HemisphereWithFissure && n[0] % 2 == 1 {
            n[0] += 1;
        }
        let h = [
            self.extent[0] / n[0] as f64,
            self.extent[1] / n[1] as f64,
            self.extent[2] / n[2] as f64,
        ];
        Grid { n, h }
    }

    fn center(&self) -> Vec3 {
        match self.kind {
            PrimitiveKind::HemisphereWithFissure => {
                Vec3::new(self.extent[0] / 2.0, self.extent[1] / 2.0, 0.0)
            }
            _ => Vec3::new(self.extent[0], self.extent[1], self.extent[2]) / 2.0,
        }
    }

    fn semi_axes(&self) -> Vec3 {
        match self.kind {
            PrimitiveKind::HemisphereWithFissure => {
                Vec3::new(self.extent[0] / 2.0, self.extent[1] / 2.0, self.extent[2])
            }
            _ => Vec3::new(self.extent[0], self.extent[1], self.extent[2]) / 2.0,
        }
    }

    fn normalized_radius(&self, p: &Vec3) -> f64 {
        (p - self.center()).component_div(&self.semi_axes()).norm()
    }

    fn groove_half_width(&self) -> f64 {
        self.grid().h[0]
    }

    fn in_groove(&self, p: &Vec3) -> bool {
        (p.x - self.center().x).abs() < self.groove_half_width()
            && self.normalized_radius(p) > 1.0 - GROOVE_DEPTH
    }

    fn cell_inside(&self, p: &Vec3) -> bool {
        match self.kind {
            PrimitiveKind::Box => true,
            PrimitiveKind::Ellipsoid => self.normalized_radius(p) <= 1.0,
            PrimitiveKind::HemisphereWithFissure => {
                p.z >= 0.0 && self.normalized_radius(p) <= 1.0 && !self.in_groove(p)
            }
        }
    }

    /// Approximate signed distance to the shape boundary (negative inside).
    /// `on_base` drops the base plane so base vertices only slide in-plane.
    fn level(&self, p: &Vec3, on_base: bool) -> f64 {
        let axes = self.semi_axes();
        let min_axis = axes.min();
        let ell = (self.normalized_radius(p) - 1.0) * min_axis;
        match self.kind {
            PrimitiveKind::Box => 0.0,
            PrimitiveKind::Ellipsoid => ell,
            PrimitiveKind::HemisphereWithFissure => {
                let wall = (p.x - self.center().x).abs() - self.groove_half_width();
                let shell = ((1.0 - GROOVE_DEPTH) - self.normalized_radius(p)) * min_axis;
                let groove = wall.max(shell);
                let mut phi = ell.max(-groove);
                if !on_base {
                    phi = phi.max(-p.z);
                }
                phi
            }
        }
    }

    pub fn generate(&self) -> Result<TetMesh, MeshError> {
        self.validate()?;
        let grid = self.grid();
        let mut occupied = vec![false; grid.n_cells()];
        for k in 0..grid.n[2] {
            for j in 0..grid.n[1] {
                for i in 0..grid.n[0] {
                    occupied[grid.cell_id(i, j, k)] = self.cell_inside(&grid.cell_center(i, j, k));
                }
            }
        }
        // add cells until the boundary is edge-manifold
        let mut guard = 0;
        let (mut mesh, map) = loop {
            let (mesh, map) = build_cells(&grid, &occupied)?;
            match SurfaceMesh::new(mesh.vertices.clone(), mesh.surface_faces.clone()) {
                Ok(_) => break (mesh, map),
                Err(MeshError::NonManifoldEdge(a, b)) if guard < 10_000 => {
                    guard += 1;
                    fill_around_edge(&grid, &mut occupied, map[a as usize], map[b as usize]);
                }
                Err(e) => return Err(e),
            }
        };
        if self.kind != PrimitiveKind::Box {
            self.snap_boundary(&grid, &mut mesh, &map);
        }
        let mesh = TetMesh::new(mesh.vertices, mesh.tets)?;
        SurfaceMesh::new(mesh.vertices.clone(), mesh.surface_faces.clone())?;
        Ok(mesh)
    }

    fn snap_boundary(&self, grid: &Grid, mesh: &mut TetMesh, map: &[usize]) {
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
        for (t, tet) in mesh.tets.iter().enumerate() {
            for &v in tet {
                incident[v as usize].push(t);
            }
        }
        let boundary: BTreeSet<u32> = mesh.surface_faces.iter().flatten().copied().collect();
        let h_min = grid.h.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_move = 0.6 * h_min;
        let eps = 1e-4 * h_min;
        let min_alt = SNAP_FLOOR_ALTITUDE * h_min;
        for _pass in 0..3 {
            for &v in &boundary {
                let v = v as usize;
                let on_base = self.kind == PrimitiveKind::HemisphereWithFissure
                    && grid.vertex_coords(map[v])[2] == 0;
                let start = mesh.vertices[v];
                let mut p = start;
                for _ in 0..6 {
                    let phi = self.level(&p, on_base);
                    let mut g = Vec3::zeros();
                    for a in 0..3 {
                        let mut e = Vec3::zeros();
                        e[a] = eps;
                        g[a] = (self.level(&(p + e), on_base) - self.level(&(p - e), on_base))
                            / (2.0 * eps);
                    }
                    if on_base {
                        g.z = 0.0;
                    }
                    let g2 = g.norm_squared();
                    if g2 < 1e-12 || phi.abs() < 1e-9 {
                        break;
                    }
                    p -= g * (phi / g2);
                }
                let mut delta = p - start;
                if delta.norm() > max_move {
                    delta *= max_move / delta.norm();
                }
                for frac in [1.0, 0.5, 0.25, 0.125] {
                    let cand = start + delta * frac;
                    mesh.vertices[v] = cand;
                    let ok = incident[v].iter().all(|&t| {
                        let [a, b, c, d] = mesh.tets[t].map(|i| &mesh.vertices[i as usize]);
                        signed_volume(a, b, c, d) > 0.0
                            && min_dihedral_deg([a, b, c, d]) >= SNAP_FLOOR_DEG
                            && min_altitude([a, b, c, d]) >= min_alt
                    });
                    if ok {
                        break;
                    }
                    mesh.vertices[v] = start;
                }
            }
        }
    }

    /// Default collision domain: the faces lining the fissure for the
    /// hemisphere, the upward-facing faces otherwise. Always the largest
    /// edge-connected component of the candidate faces.
    pub fn collision_domain(&self, surface: &SurfaceMesh) -> Result<CollisionDomain, MeshError> {
        let grid = self.grid();
        let candidates: Vec<u32> = (0..surface.n_faces())
            .filter(|&f| {
                let c = surface.face_centroid(f);
                let n = surface.face_normal_raw(f).normalize();
                match self.kind {
                    PrimitiveKind::HemisphereWithFissure => {
                        (c.x - self.center().x).abs() <= self.groove_half_width() + 1.5 * grid.h[0]
                            && c.z > 0.25 * self.extent[2]
                            && n.z > -0.5
                    }
                    _ => n.z > 0.5,
                }
            })
            .map(|f| f as u32)
            .collect();
        CollisionDomain::largest_component(surface, &candidates)
    }

    /// Default fixed-node set (the anchored region of the shape).
    pub fn fixed_nodes(&self, mesh: &TetMesh) -> Vec<u32> {
        let (lo, hi) = mesh.bounding_box();
        let tol = match self.kind {
            PrimitiveKind::Ellipsoid => 0.15 * (hi.z - lo.z),
            _ => 1e-9 * (1.0 + (hi.z - lo.z)),
        };
        (0..mesh.n_vertices() as u32)
            .filter(|&v| mesh.vertices[v as usize].z <= lo.z + tol)
            .collect()
    }
}

fn min_altitude(p: [&Vec3; 4]) -> f64 {
    let vol6 = signed_volume(p[0], p[1], p[2], p[3]).abs() * 6.0;
    let faces = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];
    faces
        .iter()
        .map(|[i, j, k]| {
            let twice_area = (p[*j] - p[*i]).cross(&(p[*k] - p[*i])).norm();
            vol6 / twice_area
        })
        .fold(f64::INFINITY, f64::min)
}

/// Builds tets for the occupied cells. Returns the compacted mesh and the map
/// from compacted vertex id to grid vertex id.
fn build_cells(grid: &Grid, occupied: &[bool]) -> Result<(TetMesh, Vec<usize>), MeshError> {
    const EVEN: [[usize; 3]; 4] = [[0, 0, 0], [1, 1, 0], [1, 0, 1], [0, 1, 1]];
    const ODD: [[usize; 3]; 4] = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]];
    let mut raw_tets: Vec<[usize; 4]> = Vec::new();
    for k in 0..grid.n[2] {
        for j in 0..grid.n[1] {
            for i in 0..grid.n[0] {
                if !occupied[grid.cell_id(i, j, k)] {
                    continue;
                }
                let (center, corners) = if (i + j + k) % 2 == 0 {
                    (EVEN, ODD)
                } else {
                    (ODD, EVEN)
                };
                let id = |c: [usize; 3]| grid.vertex_id(i + c[0], j + c[1], k + c[2]);
                raw_tets.push(center.map(id));
                for c in corners {
                    let mut tet = [id(c); 4];
                    let mut slot = 1;
                    for a in 0..3 {
                        let mut nb = c;
                        nb[a] = 1 - nb[a];
                        tet[slot] = id(nb);
                        slot += 1;
                    }
                    raw_tets.push(tet);
                }
            }
        }
    }
    let mut used: Vec<usize> = raw_tets.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let n_grid = (grid.n[0] + 1) * (grid.n[1] + 1) * (grid.n[2] + 1);
    let mut remap = vec![u32::MAX; n_grid];
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new as u32;
    }
    let vertices: Vec<Vec3> = used.iter().map(|&g| grid.vertex_pos(g)).collect();
    let tets = raw_tets
        .into_iter()
        .map(|t| {
            let mut tet = t.map(|g| remap[g]);
            let [a, b, c, d] = tet.map(|i| &vertices[i as usize]);
            if signed_volume(a, b, c, d) < 0.0 {
                tet.swap(2, 3);
            }
            tet
        })
        .collect();
    Ok((TetMesh::new(vertices, tets)?, used))
}

fn fill_around_edge(grid: &Grid, occupied: &mut [bool], a: usize, b: usize) {
    let ca = grid.vertex_coords(a);
    let cb = grid.vertex_coords(b);
    let axis = (0..3).find(|&d| ca[d] != cb[d]).unwrap_or(0);
    let base: [usize; 3] = [ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].min(cb[2])];
    let others: Vec<usize> = (0..3).filter(|&d| d != axis).collect();
    for du in [0isize, -1] {
        for dv in [0isize, -1] {
            let mut c = [base[0] as isize, base[1] as isize, base[2] as isize];
            c[others[0]] += du;
            c[others[1]] += dv;
            if (0..3).all(|d| c[d] >= 0 && (c[d] as usize) < grid.n[d]) {
                occupied[grid.cell_id(c[0] as usize, c[1] as usize, c[2] as usize)] = true;
            }
        }
    }
}
