//! Multi-server mutual authentication and key agreement built only from
//! SHA-256, XOR and concatenation, together with the tooling around it: file
//! persistence, a deterministic adversarial network simulator, scripted
//! attack scenarios, cost accounting and a small TCP service.

pub mod crypto;
pub mod protocol;
pub mod netsim;
pub mod registry;
pub mod attacks;
pub mod metrics;
pub mod wire;
pub mod service;
