//! Wire formats. Control frames are JSON text; field frames are binary.

use serde::{Deserialize, Serialize};

/// Largest accepted push depth (mm).
pub const MAX_DEPTH_MM: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub face: u32,
    pub bary: [f64; 3],
    pub depth_mm: f64,
    pub dir: [f64; 3],
    pub n_faces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCollision {
    pub nodes: Vec<u32>,
    /// Displacement imposed on every listed node (mm).
    pub vec: [f64; 3],
}

/// Collision state for the next step. No variant means no contact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pick: Option<Pick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawCollision>,
}

impl StepRequest {
    pub fn pick(p: Pick) -> Self {
        Self { pick: Some(p), raw: None }
    }

    pub fn raw(nodes: Vec<u32>, vec: [f64; 3]) -> Self {
        Self {
            pick: None,
            raw: Some(RawCollision { nodes, vec }),
        }
    }

    pub fn release() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Step(StepRequest),
    Reset,
    Stats,
}

/// Server text frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Error { message: String, poisoned: bool },
    Reset { step: u32 },
    Stats(crate::service::SessionStats),
}

/// One step result: `u32` counter, `f32` latency, `f32[K×3]` field, all
/// little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFrame {
    pub step: u32,
    pub latency_ms: f32,
    pub u: Vec<[f32; 3]>,
}

impl StepFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + 12 * self.u.len());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.latency_ms.to_le_bytes());
        for v in &self.u {
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() < 8 || (b.len() - 8) % 12 != 0 {
            return None;
        }
        let f = |i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u = (8..b.len())
            .step_by(12)
            .map(|i| [f(i), f(i + 4), f(i + 8)])
            .collect();
        Some(Self {
            step: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            latency_ms: f(4),
            u,
        })
    }
}
