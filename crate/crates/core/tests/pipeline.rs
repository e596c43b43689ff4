use proptest::prelude::*;
use tempfile::tempdir;

use promptinv::inversion::GridSpec;
use promptinv::testbed::{ToyModel, ToySpec};
use promptinv::{
    evaluate_prompt, invert, BackendManifest, DiffusionBackend, EmbeddingTable, EncoderParams, EvalGrid,
    InversionConfig, Lexicon, TextEncoder, ToyEncoder, Vocabulary,
};

fn benchmark_config(seed: u64) -> InversionConfig {
    InversionConfig {
        prompt_length: 2,
        noise_samples_per_step: 16,
        seed,
        ..InversionConfig::default()
    }
}

#[test]
fn saved_model_files_reload_to_the_same_losses() {
    let spec = ToySpec::benchmark(4);
    let m = ToyModel::new(&spec).unwrap();
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("vocab.txt"), m.lexicon.vocab().to_text()).unwrap();
    m.lexicon.table().save(&d.join("emb.bin")).unwrap();
    m.encoder.params().save(&d.join("enc.bin")).unwrap();
    std::fs::write(d.join("backend.json"), serde_json::to_string(&spec.backend).unwrap()).unwrap();

    let lexicon = Lexicon::new(
        Vocabulary::load(&d.join("vocab.txt")).unwrap(),
        EmbeddingTable::load(&d.join("emb.bin")).unwrap(),
    )
    .unwrap();
    let encoder = ToyEncoder::new(EncoderParams::load(&d.join("enc.bin")).unwrap()).unwrap();
    let backend = BackendManifest::load(&d.join("backend.json"))
        .unwrap()
        .build(encoder.context_dim())
        .unwrap();

    let (ids, x) = m.planted_instance(2, 500, 4).unwrap();
    let grid = EvalGrid::from_spec(&GridSpec::default(), 1000).unwrap();
    let before = evaluate_prompt(&m.backend, &m.encoder, &m.lexicon, &ids, &x, &grid).unwrap();
    let after = evaluate_prompt(backend.as_ref(), &encoder, &lexicon, &ids, &x, &grid).unwrap();
    assert_eq!(before, after);
}

#[test]
fn planted_prompt_is_recovered_on_an_easy_instance() {
    let m = ToyModel::new(&ToySpec::benchmark(1)).unwrap();
    let (ids, x) = m.planted_instance(2, 500, 1).unwrap();
    let r = invert(&m.backend, &m.encoder, &m.lexicon, &x, &benchmark_config(1)).unwrap();
    let grid = EvalGrid::from_spec(&GridSpec::default(), m.backend.timesteps()).unwrap();
    let planted = evaluate_prompt(&m.backend, &m.encoder, &m.lexicon, &ids, &x, &grid).unwrap();
    assert!(r.final_loss_estimate <= 1.05 * planted, "{} vs {planted}", r.final_loss_estimate);
    assert_eq!(r.prompt, m.lexicon.detokenize(&r.token_ids).unwrap());
    assert_eq!(r.loss_trace.len(), 200);
}

#[test]
fn inversion_is_identical_across_threads() {
    let m = ToyModel::new(&ToySpec::benchmark(2)).unwrap();
    let (_, x) = m.planted_instance(2, 500, 2).unwrap();
    let cfg = InversionConfig {
        steps: 30,
        ..benchmark_config(2)
    };
    let here = invert(&m.backend, &m.encoder, &m.lexicon, &x, &cfg).unwrap();
    let there = std::thread::scope(|s| {
        s.spawn(|| invert(&m.backend, &m.encoder, &m.lexicon, &x, &cfg).unwrap())
            .join()
            .unwrap()
    });
    assert_eq!(here, there);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detokenize_then_tokenize_is_identity(ids in proptest::collection::vec(0usize..16, 1..8)) {
        let m = ToyModel::new(&ToySpec::default()).unwrap();
        let text = m.lexicon.detokenize(&ids).unwrap();
        prop_assert_eq!(m.lexicon.tokenize(&text).unwrap(), ids);
    }

    #[test]
    fn grid_loss_is_non_negative(a in 0usize..16, b in 0usize..16, seed in 0u64..4) {
        let m = ToyModel::new(&ToySpec::with_seed(seed)).unwrap();
        let x = m.synthetic_target(seed).unwrap();
        let grid = EvalGrid::uniform(1, 1000, 4, 2).unwrap();
        let loss = evaluate_prompt(&m.backend, &m.encoder, &m.lexicon, &[a, b], &x, &grid).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }
}
