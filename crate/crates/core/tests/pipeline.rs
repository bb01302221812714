use dvps::datamodel::Stage;
use dvps::metrics::MetricReport;
use dvps::pipeline::{
    generate_dataset, infer_dataset, load_dataset, load_eval_pairs, save_dataset, save_predictions,
    DatasetConfig, InferConfig, Models,
};
use dvps::synth::SceneConfig;
use dvps::Error;

fn small(noise: f64, num_videos: usize) -> DatasetConfig {
    DatasetConfig {
        num_videos,
        seed: 11,
        scene: SceneConfig {
            num_frames: 6,
            height: 32,
            width: 32,
            noise,
            ..SceneConfig::default()
        },
    }
}

fn prematch(scales: Vec<f64>) -> InferConfig {
    InferConfig {
        stage: Stage::Prematch,
        scales,
        ..InferConfig::default()
    }
}

#[test]
fn dataset_round_trip() {
    let (manifest, samples) = generate_dataset(&small(0.3, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &manifest, &samples).unwrap();
    let (m2, s2) = load_dataset(dir.path()).unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(s2.len(), 3);
    for (a, b) in samples.iter().zip(&s2) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.queries.len(), b.queries.len());
        for (x, y) in a.queries.iter().zip(&b.queries) {
            assert!(x.embeddings.max_abs_diff(&y.embeddings) < 1e-6);
        }
    }
}

#[test]
fn generation_is_seeded() {
    let (_, a) = generate_dataset(&small(0.3, 2)).unwrap();
    let (_, b) = generate_dataset(&small(0.3, 2)).unwrap();
    assert_eq!(a[1].gt, b[1].gt);
    assert_eq!(a[1].queries, b[1].queries);
    let (_, c) = generate_dataset(&DatasetConfig {
        seed: 12,
        ..small(0.3, 2)
    })
    .unwrap();
    assert_ne!(a[1].gt, c[1].gt);
}

#[test]
fn noiseless_prematch_is_perfect_at_any_scale_set() {
    let (manifest, samples) = generate_dataset(&small(0.0, 3)).unwrap();
    let k = manifest.num_thing_classes();
    for scales in [vec![1.0], vec![1.0, 0.75, 1.25]] {
        let preds =
            infer_dataset(&samples, &Models::default(), k, &prematch(scales.clone())).unwrap();
        let pairs: Vec<_> = preds
            .into_iter()
            .zip(&samples)
            .map(|((n, p), s)| (n, p, s.gt.clone()))
            .collect();
        let r = MetricReport::evaluate(&pairs).unwrap();
        assert_eq!(r.association_accuracy, 1.0, "{scales:?}");
        if scales.len() == 1 {
            assert_eq!(r.vpq_mean, 100.0);
        } else {
            assert!(r.vpq_mean > 90.0, "{}", r.vpq_mean);
        }
    }
}

#[test]
fn trained_stages_require_checkpoints() {
    let (manifest, samples) = generate_dataset(&small(0.3, 1)).unwrap();
    for stage in [Stage::Tracker, Stage::Refiner] {
        let cfg = InferConfig {
            stage,
            ..InferConfig::default()
        };
        let e = infer_dataset(
            &samples,
            &Models::default(),
            manifest.num_thing_classes(),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Missing(_)), "{e}");
    }
    let e = infer_dataset(&samples, &Models::default(), 3, &prematch(vec![0.0])).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn evaluation_pairs_must_cover_the_same_videos() {
    let (manifest, samples) = generate_dataset(&small(0.3, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    save_dataset(&gt, &manifest, &samples).unwrap();
    let preds = infer_dataset(
        &samples[..1],
        &Models::default(),
        manifest.num_thing_classes(),
        &prematch(vec![1.0]),
    )
    .unwrap();
    let pred = dir.path().join("pred");
    save_predictions(&pred, &preds).unwrap();
    let e = load_eval_pairs(&pred, &gt).unwrap_err();
    assert!(matches!(e, Error::Integrity(_)), "{e}");
    assert!(e.to_string().contains("video_0001"), "{e}");
}

#[test]
fn corrupted_files_are_reported() {
    let (manifest, samples) = generate_dataset(&small(0.3, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &manifest, &samples).unwrap();
    let q = dir
        .path()
        .join("video_0000")
        .join(dvps::pipeline::QUERIES_FILE);
    let bytes = std::fs::read(&q).unwrap();
    std::fs::write(&q, &bytes[..bytes.len() / 2]).unwrap();
    let e = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(e, Error::Truncated { .. }), "{e}");
    std::fs::write(&q, b"not a dump").unwrap();
    let e = load_dataset(dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}
