//! Rating-matrix completion with a graph autoencoder over per-rating-level
//! bipartite subgraphs, with inductive inference for unseen users and items.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod heuristics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
