//! Camera-network trajectory recovery.

pub mod baselines;
pub mod clusterer;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod embeddings;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod recovery;
pub mod roadnet;
pub mod synthgen;

pub use error::{Error, Result};
