//! Stateful step service: sessions hold a displacement field, clients send
//! collision requests and receive the next field.

pub mod http;
pub mod protocol;
pub mod service;

pub use protocol::{ClientMessage, Pick, RawCollision, StepFrame, StepRequest};
pub use service::{MeshEntry, ModelEntry, Registry, ServeError, Service, ServiceConfig, SessionInfo};
