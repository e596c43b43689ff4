mod common;

use std::path::Path;

use common::*;
use promptinv::inversion::GridSpec;
use promptinv::probe::curve_grid;
use promptinv::{evaluate_prompt, loss_curve, EvalGrid};
use serde_json::json;
use tempfile::tempdir;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn invert(manifest: &Path, target: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["invert", "--manifest", p(manifest), p(target), "--out", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn invert_writes_valid_result_and_trace() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 1, &[]);
    let target = manifest.with_file_name("target.tensor");
    let out = dir.path().join("out");
    let res = invert(&manifest, &target, &out, &["--steps", "7"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let result = read_json(&out.join("result.json"));
    assert_eq!(schema_errors("result.schema.json", &result), Vec::<String>::new());
    assert_eq!(stdout(&res).trim(), result["prompt"].as_str().unwrap());
    assert_eq!(result["config"]["steps"], 7);
    assert_eq!(result["token_ids"].as_array().unwrap().len(), 2);

    let rows = csv_rows(&out.join("trace.csv"));
    assert_eq!(rows[0], ["iter", "t", "loss"]);
    assert_eq!(rows.len(), 8);
}

#[test]
fn flags_override_the_manifest() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 2, &[]);
    let target = manifest.with_file_name("target.tensor");
    let out = dir.path().join("out");
    let res = invert(
        &manifest,
        &target,
        &out,
        &[
            "--steps", "3", "--seed", "9", "--length", "3", "--lr", "0.05", "--metric", "cosine", "--optimizer", "adam",
            "--t-start", "600", "--t-end", "900", "--noise-samples", "2",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let r = read_json(&out.join("result.json"));
    let c = &r["config"];
    assert_eq!(
        (c["steps"].clone(), c["seed"].clone(), c["prompt_length"].clone(), r["seed"].clone()),
        (json!(3), json!(9), json!(3), json!(9))
    );
    assert_eq!(c["learning_rate"], 0.05);
    assert_eq!(c["metric"], "cosine");
    assert_eq!(c["optimizer"], "adam");
    assert_eq!((c["t_start"].clone(), c["t_end"].clone()), (json!(600), json!(900)));
    assert_eq!(c["noise_samples_per_step"], 2);
    assert_eq!(r["token_ids"].as_array().unwrap().len(), 3);
}

#[test]
fn default_output_directory_is_relative_to_the_manifest() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let target = manifest.with_file_name("target.tensor");
    let res = run(&["invert", "--manifest", p(&manifest), p(&target), "--steps", "2"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(manifest.with_file_name("out").join("result.json").is_file());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 4, &[]);
    let target = manifest.with_file_name("target.tensor");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = invert(&manifest, &target, out, &["--steps", "25"]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    for f in ["result.json", "trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn init_toy_is_deterministic_and_schema_valid() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    let m1 = init_toy(d1.path(), 5, &[]);
    let m2 = init_toy(d2.path(), 5, &[]);
    for f in ["manifest.json", "backend.json", "vocab.txt", "embeddings.bin", "encoder.bin", "target.tensor", "target.png"] {
        assert_eq!(std::fs::read(m1.with_file_name(f)).unwrap(), std::fs::read(m2.with_file_name(f)).unwrap(), "{f}");
    }
    assert!(schema_errors("manifest.schema.json", &read_json(&m1)).is_empty());
    assert!(schema_errors("backend.schema.json", &read_json(&m1.with_file_name("backend.json"))).is_empty());

    let d3 = tempdir().unwrap();
    let m3 = init_toy(d3.path(), 5, &["--adapter"]);
    let backend = read_json(&m3.with_file_name("backend.json"));
    assert_eq!(backend["type"], "adapter");
    assert!(schema_errors("backend.schema.json", &backend).is_empty());
}

#[test]
fn schemas_reject_malformed_documents() {
    assert!(!schema_errors("result.schema.json", &json!({"prompt": "a"})).is_empty());
    assert!(!schema_errors("manifest.schema.json", &json!({"backend": "b.json", "vocab": "v", "embeddings": "e", "encoder": "x", "extra": 1})).is_empty());
    assert!(!schema_errors("backend.schema.json", &json!({"type": "adapter"})).is_empty());
    assert!(!schema_errors("backend.schema.json", &json!({"type": "toy", "latent_shape": [4, 4]})).is_empty());
}

#[test]
fn adapter_backend_matches_in_process() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    let inproc = init_toy(d1.path(), 6, &[]);
    let adapter = init_toy(d2.path(), 6, &["--adapter"]);
    let target = inproc.with_file_name("target.tensor");
    let (a, b) = (d1.path().join("out"), d2.path().join("out"));
    assert_eq!(code(&invert(&inproc, &target, &a, &["--steps", "10"])), 0);
    let res = invert(&adapter, &target, &b, &["--steps", "10"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(std::fs::read(a.join("result.json")).unwrap(), std::fs::read(b.join("result.json")).unwrap());
}

#[test]
fn png_targets_are_accepted() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 7, &[]);
    let res = invert(&manifest, &manifest.with_file_name("target.png"), &dir.path().join("out"), &["--steps", "5"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn missing_vocabulary_exits_2_naming_the_path() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let vocab = manifest.with_file_name("vocab.txt");
    std::fs::remove_file(&vocab).unwrap();
    let res = invert(&manifest, &manifest.with_file_name("target.tensor"), &dir.path().join("out"), &[]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains(p(&vocab)), "{}", stderr(&res));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let target = manifest.with_file_name("target.tensor");
    let out = dir.path().join("out");
    for extra in [
        &["--t-start", "5000"][..],
        &["--t-start", "800", "--t-end", "600"],
        &["--metric", "manhattan"],
        &["--optimizer", "sgd"],
        &["--lr", "-1"],
        &["--length", "0"],
        &["--bogus"],
    ] {
        let res = invert(&manifest, &target, &out, extra);
        assert_eq!(code(&res), 2, "{extra:?}: {}", stderr(&res));
        assert!(!stderr(&res).is_empty());
    }
    assert_eq!(code(&invert(&manifest, &dir.path().join("nope.tensor"), &out, &[])), 2);
    std::fs::write(dir.path().join("bad.json"), "{\"backend\": 1}").unwrap();
    assert_eq!(code(&invert(&dir.path().join("bad.json"), &target, &out, &[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn non_finite_target_exits_3() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let mut bytes = std::fs::read(manifest.with_file_name("target.tensor")).unwrap();
    // Header: rank then three dims, all u64.
    bytes[32..36].copy_from_slice(&f32::NAN.to_le_bytes());
    let bad = dir.path().join("nan.tensor");
    std::fs::write(&bad, bytes).unwrap();
    let res = invert(&manifest, &bad, &dir.path().join("out"), &[]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
}

#[test]
fn invert_neg_with_identical_images_returns_the_initialization() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 8, &[]);
    let target = manifest.with_file_name("target.tensor");
    let init = dir.path().join("init");
    assert_eq!(code(&invert(&manifest, &target, &init, &["--steps", "0"])), 0);
    let neg = dir.path().join("neg");
    let res = run(&["invert-neg", "--manifest", p(&manifest), p(&target), p(&target), "--out", p(&neg)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let r = read_json(&neg.join("result.json"));
    assert_eq!(r["token_ids"], read_json(&init.join("result.json"))["token_ids"]);
    assert_eq!(r["final_loss_estimate"], 0.0);
    assert_eq!(r["target_loss"], r["negative_loss"]);
    assert!(schema_errors("result.schema.json", &r).is_empty());
}

#[test]
fn invert_neg_is_deterministic() {
    let dir = tempdir().unwrap();
    let m = init_toy(dir.path(), 9, &[]);
    let gen = dir.path().join("gen");
    assert_eq!(code(&run(&["generate", "--manifest", p(&m), "--prompt", "cat dog", "--out", p(&gen)])), 0);
    let target = m.with_file_name("target.tensor");
    let negative = gen.join("generated.tensor");
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for out in &outs {
        let res = run(&["invert-neg", "--manifest", p(&m), p(&target), p(&negative), "--out", p(out), "--steps", "20"]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    assert_eq!(std::fs::read(outs[0].join("result.json")).unwrap(), std::fs::read(outs[1].join("result.json")).unwrap());
    assert_eq!(std::fs::read(outs[0].join("trace.csv")).unwrap(), std::fs::read(outs[1].join("trace.csv")).unwrap());
}

#[test]
fn probe_matches_library_curves() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 3, &[]);
    let target = manifest.with_file_name("target.tensor");
    let out = dir.path().join("probe");
    let res = run(&[
        "probe", "--manifest", p(&manifest), p(&target), "--prompt", "cat dog", "--prompt", "red",
        "--stride", "125", "--samples", "3", "--plot", "--out", p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(out.join("curves.svg").is_file());

    let m = load_model(&manifest);
    let x = load_latent(&target);
    let seed = read_json(&manifest)["config"]["seed"].as_u64().unwrap();
    for (i, prompt) in ["cat dog", "red"].iter().enumerate() {
        let ids = m.lexicon.tokenize(prompt).unwrap();
        let grid = curve_grid(1000, 125);
        let curve = loss_curve(m.backend.as_ref(), &m.encoder, &m.lexicon, &x, &ids, &grid, 3, seed).unwrap();
        let rows = csv_rows(&out.join(format!("curve_{i}.csv")));
        assert_eq!(rows[0], ["t", "mean_loss"]);
        assert_eq!(rows.len() - 1, curve.points.len());
        for (row, point) in rows[1..].iter().zip(&curve.points) {
            assert_eq!(row[0].parse::<usize>().unwrap(), point.t);
            assert_eq!(row[1].parse::<f64>().unwrap(), point.mean_loss);
        }
    }
}

#[test]
fn probe_unknown_word_exits_2() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let target = manifest.with_file_name("target.tensor");
    let res = run(&["probe", "--manifest", p(&manifest), p(&target), "--prompt", "cat xylophone"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("xylophone"));
}

#[test]
fn sweep_writes_one_row_and_result_per_range() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let target = manifest.with_file_name("target.tensor");
    let out = dir.path().join("sweep");
    let res = run(&[
        "sweep", "--manifest", p(&manifest), p(&target), "--range", "1-300", "--range", "300:700", "--range",
        "700-1000", "--steps", "10", "--out", p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows[0], ["t_low", "t_high", "final_loss_estimate", "prompt"]);
    assert_eq!(rows.len(), 4);
    for (row, (lo, hi)) in rows[1..].iter().zip([(1, 300), (300, 700), (700, 1000)]) {
        assert_eq!((row[0].parse::<usize>().unwrap(), row[1].parse::<usize>().unwrap()), (lo, hi));
        let r = read_json(&out.join(format!("range_{lo}_{hi}.json")));
        assert!(schema_errors("result.schema.json", &r).is_empty());
        assert_eq!((r["config"]["t_start"].clone(), r["config"]["t_end"].clone()), (json!(lo), json!(hi)));
        assert_eq!(row[3], r["prompt"].as_str().unwrap());
    }

    let single = dir.path().join("single");
    let res = run(&["sweep", "--manifest", p(&manifest), p(&target), "--range", "500-1000", "--steps", "5", "--out", p(&single)]);
    assert_eq!(code(&res), 0);
    assert_eq!(csv_rows(&single.join("sweep.csv")).len(), 2);
}

#[test]
fn malformed_ranges_exit_2() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let target = manifest.with_file_name("target.tensor");
    for range in ["5x", "700-300", "0-10", "1-2000", "-"] {
        let res = run(&["sweep", "--manifest", p(&manifest), p(&target), "--range", range, "--out", p(dir.path())]);
        assert_eq!(code(&res), 2, "{range}");
    }
}

fn fake_result(dir: &Path, name: &str, prompt: &str, ids: &[usize]) -> std::path::PathBuf {
    let path = dir.join(name);
    let value = json!({
        "prompt": prompt,
        "token_ids": ids,
        "final_loss_estimate": 1.0,
        "seed": 0,
        "config": {},
    });
    std::fs::write(&path, value.to_string()).unwrap();
    path
}

#[test]
fn compose_concatenates_in_argument_order() {
    let dir = tempdir().unwrap();
    let a = fake_result(dir.path(), "a.json", "a b", &[0, 1]);
    let c = fake_result(dir.path(), "c.json", "c d", &[2, 3]);
    let out = dir.path().join("composed.txt");
    let res = run(&["compose", p(&a), p(&c), "--output", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(std::fs::read_to_string(&out).unwrap().trim_end(), "a b c d");
    assert_eq!(stdout(&res).trim_end(), "a b c d");

    let res = run(&["compose", p(&a), "--output", p(&out)]);
    assert_eq!(code(&res), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap().trim_end(), "a b");
}

#[test]
fn compose_round_trips_through_the_tokenizer() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 11, &[]);
    let target = manifest.with_file_name("target.tensor");
    let mut results = Vec::new();
    for (i, range) in ["1-500", "500-1000"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}"));
        let res = invert(&manifest, &target, &out, &["--steps", "15", "--t-start", &range[..range.find('-').unwrap()], "--t-end", &range[range.find('-').unwrap() + 1..]]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        results.push(out.join("result.json"));
    }
    let composed = dir.path().join("composed.txt");
    assert_eq!(code(&run(&["compose", p(&results[0]), p(&results[1]), "--output", p(&composed)])), 0);

    let m = load_model(&manifest);
    let ids = m.lexicon.tokenize(std::fs::read_to_string(&composed).unwrap().trim_end()).unwrap();
    let expected: Vec<usize> = results
        .iter()
        .flat_map(|r| {
            read_json(r)["token_ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap() as usize)
                .collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(ids, expected);
}

#[test]
fn compose_unreadable_input_exits_2() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("c.txt");
    assert_eq!(code(&run(&["compose", p(&dir.path().join("missing.json")), "--output", p(&out)])), 2);
    std::fs::write(dir.path().join("junk.json"), "not json").unwrap();
    assert_eq!(code(&run(&["compose", p(&dir.path().join("junk.json")), "--output", p(&out)])), 2);
}

#[test]
fn generate_is_reproducible_and_rejects_unknown_words() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 0, &[]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&["generate", "--manifest", p(&manifest), "--prompt", "cat boat", "--seed", "4", "--steps", "20", "--out", p(out)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    for f in ["generated.png", "generated.tensor"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let res = run(&["generate", "--manifest", p(&manifest), "--prompt", "cat spaceship", "--out", p(&a)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn generate_then_invert_recovers_a_prompt_at_least_as_good() {
    let dir = tempdir().unwrap();
    let manifest = init_toy(dir.path(), 2, &[]);
    let gen = dir.path().join("gen");
    let prompt = "tree river";
    let res = run(&["generate", "--manifest", p(&manifest), "--prompt", prompt, "--seed", "1", "--out", p(&gen)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let latent = gen.join("generated.tensor");
    let out = dir.path().join("inv");
    let res = invert(&manifest, &latent, &out, &[]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let m = load_model(&manifest);
    let x = load_latent(&latent);
    let grid = EvalGrid::from_spec(&GridSpec::default(), 1000).unwrap();
    let ids = m.lexicon.tokenize(prompt).unwrap();
    let reference = evaluate_prompt(m.backend.as_ref(), &m.encoder, &m.lexicon, &ids, &x, &grid).unwrap();
    let found = read_json(&out.join("result.json"))["final_loss_estimate"].as_f64().unwrap();
    assert!(found <= 1.05 * reference, "found {found}, generating prompt {reference}");
}
