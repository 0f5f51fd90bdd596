//! Datasets, episodic sampling, augmentation, synthetic data and evaluation.

pub mod augment;
pub mod dataset;
pub mod episode;
pub mod eval;
pub mod synth;

pub use augment::{augment, hflip, AugmentConfig};
pub use dataset::{Category, Dataset, Split};
pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use eval::{evaluate, EpisodeClassifier, EvalReport, NearestCentroid};
pub use synth::{generate_synthetic, SynthConfig};
