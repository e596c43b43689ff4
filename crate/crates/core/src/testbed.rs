//! Seeded toy instances: vocabulary, embeddings, encoder, backend and targets.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendManifest, DiffusionBackend, LatentImage, PixelImage, ToyBackend};
use crate::encoder::{EncoderParams, TextEncoder, ToyEncoder};
use crate::error::Result;
use crate::io;
use crate::rng;
use crate::vocab::{EmbeddingTable, Lexicon, Vocabulary};

const WORDS: [&str; 64] = [
    "red", "green", "blue", "yellow", "house", "tree", "river", "mountain", "cat", "dog", "bird",
    "boat", "sky", "city", "forest", "beach", "night", "sunset", "snow", "flower", "bridge",
    "road", "castle", "ocean", "desert", "garden", "window", "lamp", "horse", "train", "cloud",
    "storm", "painting", "photo", "sketch", "golden", "dark", "bright", "old", "tiny", "giant",
    "wooden", "stone", "glass", "misty", "rainy", "autumn", "winter", "spring", "summer",
    "portrait", "street", "market", "harbor", "valley", "lake", "field", "moon", "star", "fire",
    "ice", "shadow", "light", "dream",
];

/// Word list of `size` entries; extra entries past the built-in words are `w<i>`.
pub fn toy_words(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| WORDS.get(i).map_or_else(|| format!("w{i}"), |w| w.to_string()))
        .collect()
}

/// Sizes and seed of a toy problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub context_dim: usize,
    pub max_len: usize,
    pub backend: BackendManifest,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            seed: 0,
            vocab_size: 16,
            dim: 4,
            context_dim: 4,
            max_len: 16,
            backend: BackendManifest::toy(0),
        }
    }
}

impl ToySpec {
    pub fn with_seed(seed: u64) -> Self {
        ToySpec {
            seed,
            backend: BackendManifest::toy(seed),
            ..ToySpec::default()
        }
    }

    /// Oracle benchmark instance: a context wide enough that the two-token
    /// prompt is identifiable from the pooled conditioning.
    pub fn benchmark(seed: u64) -> Self {
        ToySpec {
            context_dim: 16,
            ..ToySpec::with_seed(seed)
        }
    }
}

/// A complete toy model.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub lexicon: Lexicon,
    pub encoder: ToyEncoder,
    pub backend: ToyBackend,
}

impl ToyModel {
    pub fn new(spec: &ToySpec) -> Result<Self> {
        let vocab = Vocabulary::new(toy_words(spec.vocab_size), [])?;
        let mut r = rng::rng_from(&[rng::stream::PARAMS, 0x0045_4d42, spec.seed]);
        let mut vectors = rng::standard_normal(&mut r, (spec.vocab_size, spec.dim));
        io::round_to_f32(&mut vectors);
        let lexicon = Lexicon::new(vocab, EmbeddingTable::new(vectors)?)?;
        let encoder = ToyEncoder::new(EncoderParams::seeded(spec.seed, spec.dim, spec.context_dim, spec.max_len)?)?;
        let backend = ToyBackend::from_manifest(&spec.backend, encoder.context_dim())?;
        Ok(ToyModel {
            lexicon,
            encoder,
            backend,
        })
    }

    /// Smooth synthetic picture whose colour gradients are set by `seed`.
    pub fn synthetic_image(&self, seed: u64) -> Result<PixelImage> {
        let [h, w, _] = self.backend.pixel_shape();
        let mut r = rng::rng_from(&[rng::stream::PARAMS, 0x0049_4d47, seed]);
        let coef: Array3<f64> = rng::standard_normal(&mut r, (3, 3, 1));
        let img = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
            let (u, v) = (x as f64 / (w - 1).max(1) as f64, y as f64 / (h - 1).max(1) as f64);
            let raw = 0.5 + 0.25 * (coef[[ch, 0, 0]] * (u - 0.5) * 2.0 + coef[[ch, 1, 0]] * (v - 0.5) * 2.0)
                + 0.1 * coef[[ch, 2, 0]];
            raw.clamp(0.0, 1.0)
        });
        PixelImage::new(img)
    }

    /// Latent of [`synthetic_image`](Self::synthetic_image).
    pub fn synthetic_target(&self, seed: u64) -> Result<LatentImage> {
        self.backend.encode_image(&self.synthetic_image(seed)?)
    }

    /// Latent for which `ids` minimizes the expected loss over `[t_low, t_high]`.
    pub fn planted_target(&self, ids: &[usize], t_low: usize, t_high: usize) -> Result<LatentImage> {
        let rows = self.lexicon.embed(ids)?;
        let cond = self.encoder.encode(&rows.view())?;
        self.backend.render(&cond.view(), t_low, t_high)
    }

    /// Seeded random prompt of `len` tokens and its planted target over `[t_low, T]`.
    pub fn planted_instance(&self, len: usize, t_low: usize, seed: u64) -> Result<(Vec<usize>, LatentImage)> {
        let mut r = rng::rng_from(&[rng::stream::PARAMS, 0x0050_4c54, seed]);
        let size = self.lexicon.vocab().len();
        let ids: Vec<usize> = (0..len).map(|_| r.gen_range(0..size)).collect();
        let target = self.planted_target(&ids, t_low, self.backend.timesteps())?;
        Ok((ids, target))
    }

    /// Latent sampled from the model conditioned on `ids`.
    pub fn generate(&self, ids: &[usize], steps: usize, seed: u64) -> Result<LatentImage> {
        let rows = self.lexicon.embed(ids)?;
        let cond = self.encoder.encode(&rows.view())?;
        self.backend.sample(&cond.view(), steps, seed)
    }
}
