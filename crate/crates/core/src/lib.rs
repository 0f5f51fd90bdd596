//! Explainable few-shot classification: a convolutional backbone, a
//! pattern extractor that attends to a small set of learned visual
//! patterns, and a pairwise matcher that scores query images against
//! support categories. Everything runs on a small reverse-mode autodiff
//! engine over `f64` tensors.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod params;
pub mod pattern;
pub mod rng;
pub mod tensor;
pub mod train;

pub use backbone::{Backbone, BackboneConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use matcher::Matcher;
pub use model::Mtunet;
pub use params::ParamStore;
pub use pattern::{PatternExtractor, PeConfig};
pub use rng::Pcg32;
pub use tensor::Tensor;
