//! Everything around the numerical core: binary and text file formats,
//! synthetic corpora, the ablation and robustness protocols and the command
//! line interface.

pub mod cli;
pub mod corpus;
pub mod experiments;
pub mod formats;
pub mod synth;

pub use corpus::{Corpus, DetectionSource, Scene, Split};
pub use experiments::{ExperimentConfig, ModelSpec};
