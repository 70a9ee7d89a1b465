//! Point-cloud attribution toolkit.
//!
//! Trains a small point-cloud classifier on synthetic shapes, learns an
//! attention-bottleneck explainer that assigns each point a critical score,
//! and evaluates it against pooling-, gradient-, and query-based baselines
//! with point-drop attacks. Everything runs deterministically on a CPU from
//! a single seed.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod shapes;
pub mod graph;
pub mod model;
pub mod report;
pub mod rng;
pub mod stoch;
pub mod tensor;
