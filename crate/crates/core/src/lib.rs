//! Federated-learning simulation core.
//!
//! Building blocks for deterministic, seedable FL experiments: a dual-form
//! projection QP with an exhaustive oracle, from-scratch MLP classifiers,
//! dataset loading and Dirichlet partitioning, the gradient-memory
//! server/worker machinery, and the baseline strategy lattice.

pub mod data;
pub mod flcore;
pub mod model;
pub mod qp;
pub mod rng;
pub mod strategies;
pub mod vecops;
