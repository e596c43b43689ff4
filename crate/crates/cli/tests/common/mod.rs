#![allow(dead_code)]

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptinv::io::read_tensor;
use promptinv::{
    BackendManifest, DiffusionBackend, EmbeddingTable, EncoderParams, LatentImage, Lexicon, TextEncoder, ToyEncoder,
    Vocabulary,
};
use serde_json::Value;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_promptinv"));
    cmd.env_remove("PROMPTINV_LOG");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning promptinv")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a toy model into `dir/model` and returns the manifest path.
pub fn init_toy(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let model = dir.join("model");
    let seed = seed.to_string();
    let mut args = vec!["init-toy", "--out", model.to_str().unwrap(), "--seed", &seed];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "init-toy failed: {}", stderr(&out));
    model.join("manifest.json")
}

pub fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

pub fn schema_errors(schema: &str, instance: &Value) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let compiled = jsonschema::JSONSchema::compile(&read_json(&path)).expect("schema compiles");
    let errors = match compiled.validate(instance) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    errors
}

pub struct Loaded {
    pub backend: Box<dyn DiffusionBackend>,
    pub encoder: ToyEncoder,
    pub lexicon: Lexicon,
}

/// Loads the files written by `init-toy` through the library directly.
pub fn load_model(manifest: &Path) -> Loaded {
    let dir = manifest.parent().unwrap();
    let vocab = Vocabulary::load(&dir.join("vocab.txt")).unwrap();
    let table = EmbeddingTable::load(&dir.join("embeddings.bin")).unwrap();
    let lexicon = Lexicon::new(vocab, table).unwrap();
    let encoder = ToyEncoder::new(EncoderParams::load(&dir.join("encoder.bin")).unwrap()).unwrap();
    let backend = BackendManifest::load(&dir.join("backend.json"))
        .unwrap()
        .build(encoder.context_dim())
        .unwrap();
    Loaded {
        backend,
        encoder,
        lexicon,
    }
}

pub fn load_latent(path: &Path) -> LatentImage {
    let t = read_tensor(&mut BufReader::new(File::open(path).unwrap())).unwrap();
    LatentImage::new(t.into_dimensionality().unwrap()).unwrap()
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
