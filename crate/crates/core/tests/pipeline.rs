use predilect::ablation::test_split;
use predilect::engine::{fine_tune_probe, train, Checkpoint, ProbeConfig, TrainConfig};
use predilect::inference::{evaluate, exemplar_prototypes};
use predilect::metrics::accuracy;
use predilect::verifier::{noise_sweep, NoiseSweepConfig};
use predilect::world::WorldConfig;

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        warmup_epochs: 5,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn default_sweep_means_do_not_rise_with_noise() {
    let report = noise_sweep(&NoiseSweepConfig::default()).unwrap();
    assert!(report.non_increasing_within(2.0), "{}", report.table());
    let first = &report.rows[0];
    let last = report.rows.last().unwrap();
    assert!(first.mean_tau > last.mean_tau);
    assert!(first.exact_fraction >= last.exact_fraction);
    // Rank agreement is not exact even without noise.
    assert!(first.exact_fraction < 1.0);
}

#[test]
fn checkpoint_file_serves_zero_shot_after_reload() {
    let world = WorldConfig::default().build().unwrap();
    let outcome = train(&world, &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, outcome.checkpoint);

    let test = test_split(&world, 80, 9).unwrap();
    let protos = exemplar_prototypes(&loaded.model, &world).unwrap();
    let eval = evaluate(&loaded.model, &protos, &test).unwrap();
    assert!(eval.accuracy >= 1.5 / world.num_classes() as f64, "accuracy {}", eval.accuracy);
    assert_eq!(eval.per_class_auroc.len(), world.num_classes());
}

#[test]
fn linear_probe_on_trained_features_beats_chance() {
    let world = WorldConfig::default().build().unwrap();
    let model = train(&world, &quick()).unwrap().checkpoint.model;
    let labelled = |seed| -> Vec<_> {
        test_split(&world, 80, seed).unwrap().into_iter().map(|s| (s.fundus_raw, s.class_id)).collect()
    };
    let (fit, held) = (labelled(1), labelled(2));
    let head = fine_tune_probe(&model, &fit, world.num_classes(), &ProbeConfig::default()).unwrap();
    let raws: Vec<_> = held.iter().map(|(m, _)| m).collect();
    let features = predilect::engine::fundus_features(&model, &raws).unwrap();
    let truth: Vec<usize> = held.iter().map(|(_, c)| *c).collect();
    let acc = accuracy(&head.predict(&features).unwrap(), &truth).unwrap();
    assert!(acc >= 1.5 / world.num_classes() as f64, "probe accuracy {acc}");
}
