//! Cycle-consistency regularisation for text-guided cross-domain few-shot
//! classification on frozen vision-language features.
//!
//! An episode bundle holds class text embeddings, support images as sets of
//! patch features with augmented views, and query images as global features.
//! A residual MLP transforms support patches and a linear adapter transforms
//! global features. Training minimises support cross-entropy plus two cycle
//! losses: text to image to text, and image to text to image.

pub mod cycle;
pub mod episode;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod synth;
pub mod trainer;
pub mod transform;

pub use cycle::{evaluate, total_loss, CycleConfig, LossBreakdown, Retrieval, TitMode};
pub use episode::{load_bundle, save_bundle, Episode, EpisodeBundle};
pub use error::{Error, Result};
pub use linalg::FeatureMatrix;
pub use metrics::{alignment_scores, classify, episode_accuracy};
pub use synth::{gen_synthetic, SynthSpec};
pub use trainer::{run_benchmark, train_episode, TrainConfig, TrainHistory};
pub use transform::{init_params, ModelParams};
