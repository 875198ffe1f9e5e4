//! Mesh, boundary sets and datasets as the commands consume them.

use anyhow::{bail, Context, Result};
use nd_core::dataset::{CoordTransform, DatasetManifest, NormStats, Split, Trajectory};
use nd_core::fem::{SolverConfig, TledSolver};
use nd_core::mesh::io::{decode_mesh, encode_mesh, read_mesh, write_mesh, MeshSidecar};
use nd_core::mesh::{extract_surface, CollisionDomain, MeshSpec, SurfaceMesh, TetMesh};
use nd_core::scenario::{generate_dataset, GenerateOptions, SimulationScheme, SimulationSetup};
use nd_surrogate::eval::EvalGeometry;
use nd_surrogate::model::Geometry;
use nd_surrogate::train::TrainData;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Snapshot interval of generated data (s).
pub const OUTPUT_INTERVAL: f64 = 0.05;

/// A mesh with its surface, collision domain and anchored nodes.
pub struct Workbench {
    pub mesh: TetMesh,
    pub surface: SurfaceMesh,
    pub domain: CollisionDomain,
    pub fixed: BTreeSet<u32>,
    pub sidecar: MeshSidecar,
}

impl Workbench {
    /// Generates the mesh and stores the vertices at file precision so the
    /// in-memory mesh equals what a reader of the saved file sees.
    pub fn from_spec(spec: &MeshSpec) -> Result<Self> {
        let mesh = decode_mesh(&encode_mesh(&spec.generate()?))?;
        let surface = extract_surface(&mesh)?;
        let domain = spec.collision_domain(&surface)?;
        let fixed: BTreeSet<u32> = spec.fixed_nodes(&mesh).into_iter().collect();
        let mut sidecar = MeshSidecar::for_mesh(&mesh, format!("procedural {:?}", spec.kind));
        sidecar.spec = Some(*spec);
        sidecar.collision_domain = Some(domain.face_ids.iter().copied().collect());
        sidecar.fixed_nodes = Some(fixed.iter().copied().collect());
        Ok(Self {
            mesh,
            surface,
            domain,
            fixed,
            sidecar,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mesh, sidecar) = read_mesh(path).with_context(|| format!("reading {}", path.display()))?;
        let sidecar = sidecar.with_context(|| format!("{} has no JSON sidecar", path.display()))?;
        let surface = extract_surface(&mesh)?;
        let (domain, fixed) = match (&sidecar.collision_domain, &sidecar.fixed_nodes, &sidecar.spec) {
            (Some(d), Some(f), _) => (CollisionDomain::new(&surface, d.iter().copied())?, f.iter().copied().collect()),
            (_, _, Some(spec)) => (
                spec.collision_domain(&surface)?,
                spec.fixed_nodes(&mesh).into_iter().collect(),
            ),
            _ => bail!("sidecar lists neither a collision domain nor a mesh spec"),
        };
        Ok(Self {
            mesh,
            surface,
            domain,
            fixed,
            sidecar,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_mesh(path, &self.mesh, &self.sidecar)?;
        Ok(())
    }

    /// Default solver settings with a stable step for this mesh.
    pub fn solver_config(&self) -> Result<SolverConfig> {
        let base = SolverConfig::default();
        let dt_crit = TledSolver::new(&self.mesh, base.material)?.critical_timestep();
        Ok(base.with_stable_dt(dt_crit, OUTPUT_INTERVAL))
    }

    pub fn setup(&self, solver: SolverConfig) -> SimulationSetup<'_> {
        SimulationSetup {
            mesh: &self.mesh,
            surface: &self.surface,
            domain: &self.domain,
            fixed_nodes: &self.fixed,
            solver,
        }
    }
}

pub struct GenerateArgs {
    pub n_per_scheme: usize,
    pub master_seed: u64,
    pub n_test: usize,
    pub n_val: usize,
    pub workers: usize,
}

/// Simulates a dataset into `out` and copies the mesh sidecar next to it.
pub fn generate(bench: &Workbench, schemes: &[SimulationScheme], args: &GenerateArgs, out: &Path) -> Result<DatasetManifest> {
    let solver = bench.solver_config()?;
    let bytes = encode_mesh(&bench.mesh);
    let opts = GenerateOptions {
        n_per_scheme: args.n_per_scheme,
        master_seed: args.master_seed,
        n_test: args.n_test,
        n_val: args.n_val,
        mesh_bytes: &bytes,
        workers: args.workers,
    };
    let manifest = generate_dataset(schemes, &bench.setup(solver), &opts, out)?;
    bench.save(&out.join(&manifest.mesh_file))?;
    Ok(manifest)
}

/// A dataset directory loaded for training and evaluation.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub bench: Workbench,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub test_names: Vec<String>,
    pub eval_geometry: EvalGeometry,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let bench = Workbench::load(&dir.join(&manifest.mesh_file))?;
        if bench.mesh.n_vertices() != manifest.n_nodes {
            bail!("mesh has {} nodes, manifest {}", bench.mesh.n_vertices(), manifest.n_nodes);
        }
        let train = manifest.load_split(dir, Split::Train)?;
        let validation = manifest.load_split(dir, Split::Validation)?;
        let test = manifest.load_split(dir, Split::Test)?;
        let test_names = manifest.entries_in(Split::Test).map(|e| e.file.clone()).collect();
        let rest = bench.mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        let eval_geometry = EvalGeometry::new(rest, manifest.coord_transform);
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            bench,
            train,
            validation,
            test,
            test_names,
            eval_geometry,
        })
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        self.manifest.norm_stats.context("manifest has no normalisation statistics")
    }

    pub fn coord(&self) -> CoordTransform {
        self.manifest.coord_transform
    }

    /// Node coordinates in the scaled frame with their encoding.
    pub fn geometry(&self, d_embed: usize) -> Arc<Geometry> {
        let c = self.coord();
        let coords = self
            .bench
            .mesh
            .vertices
            .iter()
            .map(|v| {
                let q = c.apply(v);
                [q.x, q.y, q.z]
            })
            .collect();
        Arc::new(Geometry::new(coords, d_embed))
    }

    pub fn train_data(&self, d_embed: usize) -> TrainData<'_> {
        TrainData {
            geometry: self.geometry(d_embed),
            eval_geometry: &self.eval_geometry,
            coord: self.coord(),
            train: &self.train,
            validation: &self.validation,
        }
    }

    /// Digest identifying the dataset contents.
    pub fn key(&self) -> String {
        let mut s = self.manifest.mesh_sha256.clone();
        for e in &self.manifest.entries {
            s.push_str(&e.sha256);
        }
        s
    }
}
