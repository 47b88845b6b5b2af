//! Contrastive multi-document question generation.
//!
//! Given a *positive* document set and a semantically close *negative* set,
//! the goal is a single question that is specific to the positive set: frozen
//! per-document language models propose next-token distributions, a trainable
//! coordinator merges them contrastively (down-weighting tokens the negative
//! set also predicts), and the coordinator is optimized with policy-gradient
//! rewards from a retrieval ranker plus a contrastive KL regularizer.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`) via
//! [`scalar::Real`]; the aliases below fix the default double-precision
//! instantiation used by the CLI and the test suites.

pub mod checkpoint;
pub mod coordinator;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod ranker;
pub mod report;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod textmetrics;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default scalar precision for the shipped binaries and tests.
pub type Scalar = f64;

/// Generator weights at default precision.
pub type Generator = generator::GeneratorParams<Scalar>;
/// Coordinator weights at default precision.
pub type Coordinator = coordinator::CoordinatorParams<Scalar>;
/// Full decode trace at default precision.
pub type Trace = coordinator::DecodeTrace<Scalar>;
/// Optimizer at default precision.
pub type Optimizer = nn::AdamW<Scalar>;
