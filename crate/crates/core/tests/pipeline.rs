mod common;

use common::{determinism_checks, protocol_checks, synthetic, tiny_run};
use dagnet::eval::{evaluate, EvalConfig, OraclePredictor};
use dagnet::scene::DatasetKind;
use dagnet::train::{load_model, prepare_all, train_run, validation_loss, EpochRecord};

#[test]
fn one_epoch_writes_a_reloadable_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(DatasetKind::Synthetic);
    cfg.obs = 4;
    cfg.pred = 4;
    let scenes = cfg.load_scenes().unwrap();
    let train = &scenes[..1];
    let art = train_run(&cfg, train, &[], dir.path()).unwrap();
    assert!(art.checkpoint.exists());
    let log = std::fs::read_to_string(&art.log).unwrap();
    let records: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].epoch, 0);
    assert!(records[0].val_loss.is_none());

    let (model, store) = load_model(&art.checkpoint).unwrap();
    assert_eq!(model.config, cfg.model_config());
    let prepared = prepare_all(&model, train).unwrap();
    let reloaded = validation_loss(&model, &store, &prepared).unwrap();
    let trained = validation_loss(&art.model, &art.outcome.best, &prepared).unwrap();
    assert_eq!(reloaded.to_bits(), trained.to_bits());
}

#[test]
fn oracle_predictor_scores_zero() {
    let scenes = synthetic(5, 3, 12, 2);
    let cfg = EvalConfig {
        splits: vec![(4, 8), (6, 6)],
        seed: 0,
    };
    let report = evaluate(&OraclePredictor, "oracle", &scenes, DatasetKind::Synthetic, &cfg).unwrap();
    for s in &report.splits {
        assert_eq!((s.ade, s.fde), (0.0, 0.0));
        assert_eq!(s.n_scenes, 5);
        assert_eq!(s.n_agents, 15);
    }
}

#[test]
fn short_scenes_are_skipped() {
    let mut scenes = synthetic(2, 3, 12, 3);
    scenes.push(synthetic(1, 3, 6, 4).remove(0));
    let report = evaluate(
        &OraclePredictor,
        "oracle",
        &scenes,
        DatasetKind::Synthetic,
        &EvalConfig::single(4, 8, 0),
    )
    .unwrap();
    assert_eq!(report.n_scenes, 2);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for (what, ok) in determinism_checks(dir.path()) {
        assert!(ok, "{what}");
    }
}

#[test]
fn standard_protocols_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    for (what, ok) in protocol_checks(dir.path()) {
        assert!(ok, "{what}");
    }
}

#[test]
fn rendered_plot_is_well_formed_svg() {
    use dagnet::model::{Model, ModelVariant, RolloutOptions};
    use rand::SeedableRng;

    let scene = synthetic(1, 3, 10, 5).remove(0);
    let (model, store) = Model::init(common::small_config(ModelVariant::Dagnet, 3, 4), 6).unwrap();
    let rollout = model
        .rollout(
            &store,
            &scene,
            &RolloutOptions::deterministic(4, 6),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
    let grid = dagnet::grid::SceneGrid::new(scene.extent, 3, 4).unwrap();
    let svg = dagnet::plot::render_svg(&scene, &rollout, 4, Some(&grid)).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let count = |class: &str| {
        doc.descendants()
            .filter(|n| n.attribute("class") == Some(class))
            .count()
    };
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(count("observed"), 3);
    assert_eq!(count("prediction"), 3);
    assert_eq!(count("truth"), 3);
    assert_eq!(count("grid"), 1);
}
