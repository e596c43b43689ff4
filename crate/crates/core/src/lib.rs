//! Hard prompt inversion for conditional latent diffusion models.
//!
//! Given a target image, the inversion engine searches for a sequence of
//! vocabulary tokens whose conditioning makes the diffusion model's denoising
//! loss on that image small. The continuous prompt embedding is optimized with
//! L-BFGS while gradients are always taken at its nearest-neighbour projection
//! onto the vocabulary, and only the conditioning-sensitive (noisy) end of the
//! timestep range is sampled.

pub mod backend;
pub mod encoder;
pub mod error;
pub mod inversion;
pub mod io;
pub mod probe;
pub mod rng;
pub mod testbed;
pub mod vocab;

pub use backend::{BackendManifest, DiffusionBackend, LatentImage, NoiseSchedule, PixelImage, ToyBackend};
pub use encoder::{EncoderParams, TextEncoder, ToyEncoder};
pub use error::{Error, Result};
pub use vocab::{EmbeddingTable, Lexicon, Metric, Projection, PromptState, Vocabulary};
pub use inversion::{
    evaluate_prompt, invert, invert_negative, EvalGrid, InversionConfig, InversionResult, Optimizer,
};
pub use probe::{loss_curve, range_sweep, LossCurve, RangeSweepEntry};
