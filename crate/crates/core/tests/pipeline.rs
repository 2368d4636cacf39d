use glclef::corpus::{generate_synthetic, Corpus, SyntheticSpec};
use glclef::encoder::SluModel;
use glclef::metrics::zero_shot_report;
use glclef::trainer::{fit, ModelSettings, TrainConfig};

fn spec() -> SyntheticSpec {
    serde_json::from_str(
        r#"{"languages": 3, "intents": 3, "slot_types": 4, "templates": 6,
            "train": 64, "dev": 16, "test": 24, "seed": 11}"#,
    )
    .unwrap()
}

fn config(data: &glclef::corpus::SyntheticData) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.01,
        queue_capacity: 8,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    cfg.switch.languages = data.targets().iter().map(|l| l.lang.clone()).collect();
    cfg
}

const MODEL: ModelSettings = ModelSettings {
    embed_dim: 10,
    hidden_dim: 6,
};

#[test]
fn contrastive_fit_is_reproducible_and_round_trips() {
    let data = generate_synthetic(&spec()).unwrap();
    let src = data.source();
    let cfg = config(&data);
    let (model, record) = fit(&src.train, &src.dev, &data.lexicon, MODEL, &cfg).unwrap();
    let (again, record2) = fit(&src.train, &src.dev, &data.lexicon, MODEL, &cfg).unwrap();
    assert_eq!(record, record2);
    assert_eq!(model.params, again.params);

    assert_eq!(record.epochs.len(), 3);
    for e in &record.epochs {
        assert!(e.total.is_finite());
        assert!(e.loss.as_array().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    let best = record
        .epochs
        .iter()
        .map(|e| e.dev.overall_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(record.selected_value, best);
    let first_best = record.epochs.iter().find(|e| e.dev.overall_acc == best).unwrap();
    assert_eq!(record.selected_epoch, first_best.epoch);

    let tests: Vec<(String, Corpus)> = data
        .targets()
        .iter()
        .map(|l| (l.lang.clone(), l.test.clone()))
        .collect();
    let report = zero_shot_report(&model, &tests).unwrap();
    assert_eq!(report.languages.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = SluModel::load(&path).unwrap();
    assert_eq!(zero_shot_report(&loaded, &tests).unwrap(), report);
}

#[test]
fn different_seeds_give_different_models() {
    let data = generate_synthetic(&spec()).unwrap();
    let src = data.source();
    let mut cfg = config(&data);
    cfg.epochs = 1;
    let (a, _) = fit(&src.train, &src.dev, &data.lexicon, MODEL, &cfg).unwrap();
    cfg.seed = 5;
    let (b, _) = fit(&src.train, &src.dev, &data.lexicon, MODEL, &cfg).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn fit_rejects_empty_dev() {
    let data = generate_synthetic(&spec()).unwrap();
    let src = data.source();
    let err = fit(&src.train, &Corpus::default(), &data.lexicon, MODEL, &config(&data));
    assert!(err.is_err());
}
