//! Deterministic simulator for clustered federated learning under data
//! drift.

pub mod ablation;
pub mod clustering;
pub mod config;
pub mod drift;
pub mod engine;
pub mod error;
pub mod models;
pub mod representations;
pub mod rng;
pub mod selection;
pub mod simulation;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
