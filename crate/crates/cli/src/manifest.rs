//! Run manifest: where the model files live and how to run the inversion.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use promptinv::{
    BackendManifest, DiffusionBackend, EmbeddingTable, EncoderParams, InversionConfig, Lexicon, TextEncoder,
    ToyEncoder, Vocabulary,
};

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub backend: PathBuf,
    pub vocab: PathBuf,
    pub embeddings: PathBuf,
    pub encoder: PathBuf,
    #[serde(default)]
    pub config: InversionConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

pub struct Model {
    pub backend: Box<dyn DiffusionBackend>,
    pub encoder: ToyEncoder,
    pub lexicon: Lexicon,
    pub config: InversionConfig,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn open(path: &Path) -> Result<Model> {
        let (m, base) = RunManifest::load(path)?;
        let resolve = |p: &Path| base.join(p);

        let vocab_path = resolve(&m.vocab);
        let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("reading vocabulary {}", vocab_path.display()))?;
        let table_path = resolve(&m.embeddings);
        let table = EmbeddingTable::load(&table_path)
            .with_context(|| format!("reading embedding table {}", table_path.display()))?;
        let lexicon = Lexicon::new(vocab, table)?;

        let enc_path = resolve(&m.encoder);
        let params =
            EncoderParams::load(&enc_path).with_context(|| format!("reading encoder {}", enc_path.display()))?;
        let encoder = ToyEncoder::new(params)?;

        let backend_path = resolve(&m.backend);
        let backend_manifest = BackendManifest::load(&backend_path)
            .with_context(|| format!("reading backend manifest {}", backend_path.display()))?;
        let backend = backend_manifest
            .build(encoder.context_dim())
            .with_context(|| format!("building backend from {}", backend_path.display()))?;

        Ok(Model {
            backend,
            encoder,
            lexicon,
            config: m.config,
            out: resolve(&m.out),
        })
    }
}
