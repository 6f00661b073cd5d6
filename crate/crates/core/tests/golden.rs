use circuitscope::golden::*;
use circuitscope::oracle;
use circuitscope::synthetic::*;
use circuitscope::{Error, Model, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixture whose logits come from the f64 reference forward.
fn reference_fixture(model: &Model, n: usize) -> GoldenFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prompts = (0..n)
        .map(|i| {
            let tokens = random_tokens(&mut rng, model.vocab_size(), 3 + i % 7);
            let run = oracle::forward(model, &tokens);
            GoldenPrompt {
                name: format!("p{i}"),
                lang: Some(if i % 2 == 0 { "en" } else { "zh" }.into()),
                logits: run.logits.last().unwrap().iter().map(|v| *v as f32).collect(),
                tokens,
            }
        })
        .collect();
    GoldenFixture { model_id: "tiny".into(), prompts }
}

#[test]
fn engine_matches_reference_fixture() {
    for cfg in [tiny_config(), tiny_alibi_config()] {
        let model = random_model(&cfg, 3).unwrap();
        let fixture = reference_fixture(&model, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("golden.json");
        std::fs::write(&path, serde_json::to_vec(&fixture).unwrap()).unwrap();
        let loaded = GoldenFixture::load(&path).unwrap();
        assert_eq!(loaded, fixture);
        let report = check_golden(&model, &loaded).unwrap();
        assert!(report.passed, "{}", report.max_abs_diff);
        assert_eq!(report.per_prompt.len(), 20);
    }
}

#[test]
fn perturbed_fixture_is_caught() {
    let model = random_model(&tiny_config(), 4).unwrap();
    let mut fixture = reference_fixture(&model, 10);
    fixture.prompts[6].logits[13] += 0.01;
    let report = check_golden(&model, &fixture).unwrap();
    assert!(!report.passed);
    let worst = report.per_prompt.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(worst.0, "p6");
}

#[test]
fn malformed_fixtures_rejected() {
    let model = random_model(&tiny_config(), 4).unwrap();
    let empty = GoldenFixture { model_id: "x".into(), prompts: vec![] };
    assert!(matches!(check_golden(&model, &empty), Err(Error::InvalidArgument(_))));
    let mut short = reference_fixture(&model, 2);
    short.prompts[1].logits.pop();
    assert!(matches!(check_golden(&model, &short), Err(Error::DimensionMismatch(_))));
    let missing = GoldenFixture::load("/nonexistent/golden.json").unwrap_err();
    assert!(missing.to_string().contains("/nonexistent/golden.json"));
}

#[test]
fn vocab_sidecar_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.json");
    std::fs::write(&path, r#"{"id_to_token": {"0": "<s>", "5": " went"}, "special_ids": [0]}"#).unwrap();
    let v = Vocab::load(&path).unwrap();
    assert_eq!(v.display(5), " went");
    assert!(v.check(50).is_ok());
}
