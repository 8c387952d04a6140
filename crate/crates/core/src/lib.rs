//! Context-Aware Self-Adaptation (CASA) for domain generalization, at desk scale.
//!
//! The pipeline trains one small classifier per meta-source domain combination,
//! then learns a single shared feature-modulation adapter that conditions on the
//! mini-batch feature mean, and finally ensembles the adapted models on an
//! unseen test domain. Everything runs on a self-contained f64 tensor engine
//! with reverse-mode differentiation, so gradients are checkable against finite
//! differences and every run is bit-reproducible from its seed.
//!
//! Module map:
//! - [`autodiff`]: dense tensors, the compute graph, backward, gradient checking
//! - [`datasets`]: synthetic multi-domain generators, CSV persistence, splits
//! - [`models`]: MLP feature extractor/classifier and the CaFiLM adapter
//! - [`meta_tasks`]: meta-source/meta-target enumeration and construction
//! - [`training`]: Adam, stage-1 ERM and stage-2 adapter training
//! - [`inference`]: batched context-aware prediction and the averaging ensemble
//! - [`harness`]: config-driven experiments, ablations, checkpoints, reports

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod inference;
pub mod meta_tasks;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{CasaError, Result};
