#![allow(dead_code)]

use nd_core::dataset::NormStats;
use nd_core::mesh::io::{decode_mesh, encode_mesh, MeshSidecar};
use nd_core::mesh::{MeshSpec, PrimitiveKind};
use nd_serve::{MeshEntry, Registry, Service, ServiceConfig};
use nd_surrogate::model::{ModelConfig, Surrogate};

pub fn mesh_entry(id: &str, spec: MeshSpec) -> MeshEntry {
    let mesh = decode_mesh(&encode_mesh(&spec.generate().unwrap())).unwrap();
    let mut sidecar = MeshSidecar::for_mesh(&mesh, "test");
    sidecar.spec = Some(spec);
    MeshEntry::new(id, mesh, sidecar).unwrap()
}

pub fn small_spec() -> MeshSpec {
    MeshSpec::new(PrimitiveKind::HemisphereWithFissure, 6, [60.0, 50.0, 30.0])
}

pub fn tiny(seed: u64) -> Surrogate {
    Surrogate::new(
        ModelConfig {
            init_seed: seed,
            ..ModelConfig::tiny()
        },
        NormStats {
            mean: [0.0; 3],
            std: [2.0, 2.0, 2.0],
        },
    )
    .unwrap()
}

/// A tiny model that overflows whenever the collision input is nonzero.
pub fn fragile() -> Surrogate {
    let mut m = tiny(5);
    let w = m.params.get_mut("embed.w").unwrap();
    let cols = w.cols;
    w.data[3 * cols..6 * cols].iter_mut().for_each(|x| *x = f64::MAX);
    m
}

pub fn service() -> Service {
    let mut reg = Registry::default();
    reg.add_mesh(mesh_entry("small", small_spec()));
    reg.add_model("tiny", tiny(1), serde_json::json!({}));
    reg.add_model("fragile", fragile(), serde_json::json!({}));
    Service::new(reg, ServiceConfig { seed: 3, ..Default::default() })
}
