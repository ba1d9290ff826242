//! Neural granular sound synthesis.
//!
//! Audio is cut into overlapping grains, each grain is mapped to a Gaussian
//! posterior in a learned latent space, and a decoder turns latent points back
//! into grains (by spectrally shaping uniform noise) that are overlap-added into
//! a waveform. A recurrent sequence model on top of the grain latents gives a
//! single embedding per grain trajectory for one-shot sampling and morphing.

pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod dsp;
mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthesis;
pub mod synthetic;
pub mod temporal;
pub mod training;

pub use checkpoint::{CheckpointConfig, GranularModel};
pub use corpus::{CorpusManifest, GrainConfig, GrainSequence};
pub use dsp::SpectralLossConfig;
pub use error::{Error, Result};
pub use model::{ConditionLabel, DecoderVariant, GaussianParams, LatentSeries, ModelConfig};
pub use temporal::SequenceEmbedding;
pub use training::{EvalReport, TrainConfig};
