use gelflex::datapipe::fit_normalizer;
use gelflex::experiments::*;
use gelflex::kinematics::{AngleVector, FingerGeometry};
use gelflex::models::{Batch, SizeArch};
use gelflex::synthgen::{generate_dataset, load_dataset, save_dataset, DatasetKind, SceneConfig, Split};
use proptest::prelude::*;

fn quick(schedule: TrainSchedule) -> TrainSchedule {
    TrainSchedule { epochs: 2, ..schedule }
}

#[test]
fn dataset_survives_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(DatasetKind::ProprioDouble, 30, 4, &SceneConfig::default()).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.images, ds.images);
}

#[test]
fn splits_are_disjoint_stratified_and_seeded() {
    let ds = generate_dataset(DatasetKind::Size, 800, 9, &SceneConfig::default()).unwrap();
    let (train, test) = (ds.indices(Split::Train), ds.indices(Split::Test));
    assert_eq!(train.len() + test.len(), 800);
    assert!(train.iter().all(|i| !test.contains(i)));
    assert_eq!(test.len(), 80);
    // 90/10 inside each of the eight classes
    let mut per_class = [0usize; 8];
    for &i in &test {
        let s = &ds.manifest.samples[i];
        per_class[s.shape.unwrap().index() * 4 + s.size.unwrap()] += 1;
    }
    assert_eq!(per_class, [10; 8]);
    let again = generate_dataset(DatasetKind::Size, 800, 9, &SceneConfig::default()).unwrap();
    assert_eq!(again.indices(Split::Test), test);
}

#[test]
fn normalizer_sees_only_training_angles() {
    let ds = generate_dataset(DatasetKind::ProprioSingle, 60, 2, &SceneConfig::default()).unwrap();
    let task = ProprioTask::new(&ds).unwrap();
    let train: Vec<AngleVector> = ds.indices(Split::Train).iter().map(|&i| *ds.angles(i)).collect();
    assert_eq!(task.stats, fit_normalizer(&train).unwrap());
    let test: Vec<AngleVector> = ds.indices(Split::Test).iter().map(|&i| *ds.angles(i)).collect();
    let z: Vec<f64> = test.iter().map(|a| task.stats.to_z(a)[0]).collect();
    assert!(z.iter().sum::<f64>().abs() > 1e-9, "test mean should not be exactly zero");
}

#[test]
fn recalibration_refuses_test_samples() {
    let ds = generate_dataset(DatasetKind::ProprioSingle, 40, 2, &SceneConfig::default()).unwrap();
    let task = ProprioTask::new(&ds).unwrap();
    let spec = gelflex::models::build_proprio_cnn(1, &ds.manifest.cfg).unwrap();
    let mut model = gelflex::models::Model::<f32>::init(&spec, 0).unwrap();
    let test = ds.indices(Split::Test);
    assert!(matches!(recalibrate_batchnorm(&mut model, &task, &test, 8), Err(ExperimentError::Leakage(_))));
    assert!(ensure_train_only(&task, &ds.indices(Split::Train)).is_ok());
}

#[test]
fn checkpoint_reloads_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(DatasetKind::Tactile, 40, 1, &SceneConfig::default()).unwrap();
    let trained = train_tactile(&ds, &quick(TrainSchedule::tactile(1)), "h").unwrap();
    let path = dir.path().join("m.ckpt");
    trained.save(&path).unwrap();
    let (mut model, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.task, TaskKind::Tactile);
    assert_eq!(meta.config_hash, "h");
    let x = ds.images[0].clone().reshape(&[1, 1, 32, 32]).unwrap();
    let a = trained.model.clone().predict(&Batch { x: x.clone(), labels: None }).unwrap();
    let b = model.predict(&Batch { x, labels: None }).unwrap();
    assert_eq!(a, b);
    let report = evaluate_checkpoint(&model, &meta, &ds, Split::Test, &FingerGeometry::default(), None).unwrap();
    assert_eq!(report.classifier, trained.report.classifier);
}

#[test]
fn size_checkpoint_on_predicted_angles_needs_the_proprio_model() {
    let cfg = SceneConfig::default();
    let pds = generate_dataset(DatasetKind::ProprioSingle, 40, 3, &cfg).unwrap();
    let run = ProprioRun {
        schedule: TrainSchedule { epochs: 1, ..TrainSchedule::proprio(3) },
        augment: Default::default(),
        geometry: FingerGeometry::default(),
    };
    let p = train_proprio(&pds, &run, "h").unwrap();
    let stats = p.meta.stats.clone().unwrap();
    let sds = generate_dataset(DatasetKind::Size, 80, 3, &cfg).unwrap();
    let angles = predicted_size_angles(&sds, &p.model, &stats).unwrap();
    assert_eq!(angles.len(), 80);
    let s = train_size(&sds, SizeArch::Incorporator, angles, AngleSource::Predicted, &quick(TrainSchedule::size(3)), "h")
        .unwrap();
    let geom = FingerGeometry::default();
    assert!(evaluate_checkpoint(&s.model, &s.meta, &sds, Split::Test, &geom, None).is_err());
    let r = evaluate_checkpoint(&s.model, &s.meta, &sds, Split::Test, &geom, Some((&p.model, &stats))).unwrap();
    assert_eq!(r.classifier, s.report.classifier);
}

#[test]
fn gain_perturbation_touches_only_the_chosen_split() {
    let ds = generate_dataset(DatasetKind::ProprioSingle, 30, 6, &SceneConfig::default()).unwrap();
    let p = gain_perturbed(&ds, Split::Test, (0.7, 1.3), 1);
    for i in ds.indices(Split::Train) {
        assert_eq!(p.images[i], ds.images[i]);
    }
    let changed = ds.indices(Split::Test).iter().filter(|&&i| p.images[i] != ds.images[i]).count();
    assert!(changed > 0);
    assert!(p.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    assert_eq!(ProprioTask::new(&p).unwrap().stats, ProprioTask::new(&ds).unwrap().stats);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learning_rate_stays_between_endpoints(epochs in 1usize..80, lo in 1e-6f64..1e-3, ratio in 1.0f64..100.0) {
        let s = TrainSchedule { epochs, lr_init: lo * ratio, lr_final: lo, batch_size: 8, seed: 0 };
        let mut prev = f64::INFINITY;
        for e in 0..epochs {
            let lr = s.lr_at(e);
            prop_assert!(lr <= s.lr_init && lr >= s.lr_final);
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(s.lr_at(0), s.lr_init);
        if epochs > 1 {
            prop_assert_eq!(s.lr_at(epochs - 1), s.lr_final);
        }
    }

    #[test]
    fn classifier_metrics_are_consistent(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = classifier_metrics(&pred, &truth, 4).unwrap();
        let total: usize = m.confusion.iter().flatten().sum();
        prop_assert_eq!(total, truth.len());
        let diag: usize = (0..4).map(|k| m.confusion[k][k]).sum();
        prop_assert!((m.accuracy - diag as f64 / truth.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn perfect_angle_predictions_score_fully(seed in 0u64..1000) {
        let mut rng = gelflex::nn::Rng::new(seed);
        let truth: Vec<AngleVector> =
            (0..5).map(|_| std::array::from_fn(|_| rng.uniform_range(0.0, 120.0))).collect();
        let m = proprio_metrics(&truth, &truth, &FingerGeometry::default()).unwrap();
        prop_assert_eq!(m.within_1deg, 1.0);
        prop_assert_eq!(m.mean_accumulative_mm, 0.0);
    }
}
