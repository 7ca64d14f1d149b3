//! Deterministic CPU inference engine for masked-diffusion transformers.
//!
//! The engine decodes a fixed-length masked sequence with a toy
//! bidirectional transformer and compares KV-cache refresh policies:
//! recompute-everything, fixed-interval refresh, block-wise caching, and an
//! adaptive policy that watches the attention rows of the most-attended
//! tokens and refreshes deeper layers when those rows drift. A benchmark
//! harness counts QKV projection work and emits byte-stable reports, and a
//! validation lab numerically checks the inequalities the adaptive policy
//! leans on.

pub mod cache;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod policy;
pub mod report;
pub mod rng;
pub mod theory;
pub mod trace;

pub use error::{EdlmError, Result};
