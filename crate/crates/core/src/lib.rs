//! Ontology-masked multi-task variational autoencoder.
//!
//! Sites feed genes and genes feed pathways through linear layers whose
//! weights are gated by fixed adjacency masks. The pathway layer is the
//! latent bottleneck of a VAE and is shared by one small classifier per
//! binary phenotype task.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod ontology;
pub mod report;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
