//! Hyperparameter transfer toolkit: scaling rules, SDE-derived batch and
//! horizon rules, per-module multipliers, search orchestration and
//! learning-rate schedule enumeration.

pub mod per_module;
pub mod scaling;
pub mod schedule;
pub mod sde;
pub mod search;
