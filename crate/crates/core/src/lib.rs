//! Active-learning query engine for oriented object detection.
//!
//! Object-level queries are scored by mixed uncertainty (image-level
//! confidence times object entropy) and drawn under class-balanced budgets.

pub mod balancing;
pub mod cli;
pub mod baselines;
pub mod datamodel;
pub mod geometry;
pub mod harness;
pub mod ingest;
pub mod partial_loss;
pub mod sampler;
pub mod scoring;
pub mod surrogate;
pub mod synthgen;
