//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train on a 200-video corpus and take roughly a quarter
//! of an hour on one core.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dvps::datamodel::Stage;
use dvps::losses::{train_refiner, train_tracker, TrainConfig, TrainState};
use dvps::metrics::{round1, vpq_mean, MetricReport, VPQ_WINDOWS};
use dvps::model::{
    init_refiner, init_tracker, warm_start_heads, ParamStore, RefinerConfig, TrackerConfig,
};
use dvps::pipeline::{
    generate_dataset, infer_dataset, DatasetConfig, InferConfig, Models, VideoSample,
};
use dvps::selfcheck::{gradient_suite, hungarian_suite, identity_suite, SuiteResult};
use dvps::synth::SceneConfig;

const BIN: &str = env!("CARGO_BIN_EXE_dvps");

// criterion 6
const TRAIN_VIDEOS: usize = 200;
const HELD_OUT_VIDEOS: usize = 40;
const HELD_OUT_SEED: u64 = 1000;
const NOISE: f64 = 0.3;
const TRACKER_ITERS: usize = 2000;
const MIN_AA_GAIN: f64 = 0.05;
const TRAINING_BUDGET: Duration = Duration::from_secs(15 * 60);
// criterion 7
const REFINER_SEEDS: u64 = 5;
const REFINER_ITERS: usize = 300;
// runtime budgets
const HUNGARIAN_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const NOISELESS_BUDGET: Duration = Duration::from_secs(30);

/// Criteria expected to fail, with the reason. The harness checks that they
/// still fail so the list cannot go stale.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    1,
    "the mean of 52.1, 51.5, 51.2, 51.1 is 51.475, which rounds to 51.5 at one decimal",
)];

struct Outcome {
    id: u32,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, passed: bool, detail: String) -> Outcome {
    println!(
        "criterion {id}: {} | {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    Outcome { id, passed, detail }
}

fn suite_detail(s: &SuiteResult, elapsed: Duration) -> String {
    let mut d = format!(
        "{} cases, max error {:.2e}, {:.1}s",
        s.cases,
        s.max_error,
        elapsed.as_secs_f64()
    );
    for f in s.failures.iter().take(5) {
        d.push_str("; ");
        d.push_str(f);
    }
    d
}

fn table_arithmetic() -> Outcome {
    let rows = [
        ([52.1, 51.5, 51.2, 51.1], 51.4),
        ([54.7, 54.1, 53.3, 52.8], 53.7),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (scores, printed) in rows {
        let per_k: BTreeMap<usize, f64> = VPQ_WINDOWS.iter().copied().zip(scores).collect();
        let got = round1(vpq_mean(&per_k).unwrap());
        passed &= got == printed;
        parts.push(format!("{scores:?} -> {got:.1} (table {printed:.1})"));
    }
    outcome(1, passed, parts.join(", "))
}

fn timed_suite(id: u32, budget: Duration, run: impl FnOnce() -> SuiteResult) -> Outcome {
    let start = Instant::now();
    let s = run();
    let elapsed = start.elapsed();
    outcome(id, s.passed && elapsed < budget, suite_detail(&s, elapsed))
}

fn evaluate(samples: &[VideoSample], models: &Models, k: usize, stage: Stage) -> MetricReport {
    let cfg = InferConfig {
        stage,
        ..InferConfig::default()
    };
    let preds = infer_dataset(samples, models, k, &cfg).unwrap();
    let pairs: Vec<_> = preds
        .into_iter()
        .zip(samples)
        .map(|((name, p), s)| (name, p, s.gt.clone()))
        .collect();
    MetricReport::evaluate(&pairs).unwrap()
}

fn noiseless_prematch() -> Outcome {
    let start = Instant::now();
    let cfg = DatasetConfig {
        num_videos: 10,
        seed: 0,
        scene: SceneConfig {
            num_frames: 16,
            height: 64,
            width: 64,
            noise: 0.0,
            ..SceneConfig::default()
        },
    };
    let (m, samples) = generate_dataset(&cfg).unwrap();
    let r = evaluate(
        &samples,
        &Models::default(),
        m.num_thing_classes(),
        Stage::Prematch,
    );
    let elapsed = start.elapsed();
    let perfect =
        r.association_accuracy == 1.0 && VPQ_WINDOWS.iter().all(|k| r.vpq_per_k[k] == 100.0);
    outcome(
        5,
        perfect && elapsed < NOISELESS_BUDGET,
        format!(
            "AA {:.4}, VPQ_k {:?}, {:.1}s",
            r.association_accuracy,
            r.vpq_per_k,
            elapsed.as_secs_f64()
        ),
    )
}

struct Trained {
    train: Vec<VideoSample>,
    held_out: Vec<VideoSample>,
    num_thing_classes: usize,
    tracker: (ParamStore, TrackerConfig),
}

fn corpus(num_videos: usize, seed: u64) -> (usize, Vec<VideoSample>) {
    let cfg = DatasetConfig {
        num_videos,
        seed,
        scene: SceneConfig {
            noise: NOISE,
            ..SceneConfig::default()
        },
    };
    let (m, s) = generate_dataset(&cfg).unwrap();
    (m.num_thing_classes(), s)
}

fn training_efficacy() -> (Outcome, Trained) {
    let start = Instant::now();
    let (k, train) = corpus(TRAIN_VIDEOS, 0);
    let (_, held_out) = corpus(HELD_OUT_VIDEOS, HELD_OUT_SEED);
    let tcfg = TrackerConfig::default();
    let cfg = TrainConfig {
        max_iter: TRACKER_ITERS,
        seed: 0,
        ..TrainConfig::tracker()
    };
    let state = TrainState::new(init_tracker(&tcfg, 0).unwrap(), &cfg);
    let out = train_tracker(&cfg, &tcfg, &train, state, None, &mut |_, _| Ok(())).unwrap();
    let models = Models {
        tracker: Some((out.state.params.clone(), tcfg.clone())),
        refiner: None,
    };
    let base = evaluate(&held_out, &models, k, Stage::Prematch).association_accuracy;
    let tracked = evaluate(&held_out, &models, k, Stage::Tracker).association_accuracy;
    let elapsed = start.elapsed();
    let gain = tracked - base;
    let o = outcome(
        6,
        gain >= MIN_AA_GAIN && elapsed < TRAINING_BUDGET,
        format!(
            "held-out AA prematch {base:.4}, tracker {tracked:.4}, gain {:+.1} points (need {:+.1}), {:.0}s",
            100.0 * gain,
            100.0 * MIN_AA_GAIN,
            elapsed.as_secs_f64()
        ),
    );
    let trained = Trained {
        train,
        held_out,
        num_thing_classes: k,
        tracker: (out.state.params, tcfg),
    };
    (o, trained)
}

fn vpq_gap(r: &MetricReport) -> f64 {
    r.vpq_per_k[&1] - r.vpq_per_k[&6]
}

fn stability(t: &Trained) -> Outcome {
    let tracker_only = Models {
        tracker: Some(t.tracker.clone()),
        refiner: None,
    };
    let tracker_gap = vpq_gap(&evaluate(
        &t.held_out,
        &tracker_only,
        t.num_thing_classes,
        Stage::Tracker,
    ));
    let rcfg = RefinerConfig::default();
    let gaps: Vec<f64> = (0..REFINER_SEEDS)
        .map(|seed| {
            let cfg = TrainConfig {
                max_iter: REFINER_ITERS,
                seed,
                ..TrainConfig::refiner()
            };
            let mut init = init_refiner(&rcfg, seed).unwrap();
            warm_start_heads(&mut init, &t.tracker.0).unwrap();
            let state = TrainState::new(init, &cfg);
            let out = train_refiner(
                &cfg,
                &rcfg,
                (&t.tracker.0, &t.tracker.1),
                &t.train,
                state,
                None,
                &mut |_, _| Ok(()),
            )
            .unwrap();
            let models = Models {
                tracker: Some(t.tracker.clone()),
                refiner: Some((out.state.params, rcfg.clone())),
            };
            vpq_gap(&evaluate(
                &t.held_out,
                &models,
                t.num_thing_classes,
                Stage::Refiner,
            ))
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(
        7,
        mean <= tracker_gap,
        format!(
            "VPQ1-VPQ6 tracker {tracker_gap:.2}, refiner {mean:.2} (seeds {})",
            gaps.iter()
                .map(|g| format!("{g:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--set", "num_videos=3",
    "--set", "scene.num_frames=6",
    "--set", "scene.height=32",
    "--set", "scene.width=32",
    "--set", "train_tracker.max_iter=6",
    "--set", "train_tracker.batch_size=2",
    "--set", "train_refiner.max_iter=4",
    "--set", "train_refiner.batch_size=2",
];

fn dvps(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("DVPS_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out.stdout)
    } else {
        Err(format!(
            "dvps {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` except logs, by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().is_some_and(|n| n != "run.log") {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs every subcommand once under `root`; returns the selfcheck report.
fn full_run(root: &Path, before_refiner: &mut dyn FnMut(&Path)) -> Result<Vec<u8>, String> {
    let with = |args: &[&str]| {
        let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        v.extend(TINY.iter().map(|s| s.to_string()));
        v
    };
    let run = |v: Vec<String>| dvps(&v.iter().map(String::as_str).collect::<Vec<_>>());
    let (data, tr, rf) = (
        root.join("data"),
        root.join("tracker"),
        root.join("refiner"),
    );
    run(with(&["gen-data", "--out", p(&data)]))?;
    run(with(&[
        "train-tracker",
        "--data",
        p(&data),
        "--out",
        p(&tr),
    ]))?;
    before_refiner(root);
    let tck = tr.join("tracker.ckpt");
    run(with(&[
        "train-refiner",
        "--data",
        p(&data),
        "--tracker",
        p(&tck),
        "--out",
        p(&rf),
    ]))?;
    let rck = rf.join("refiner.ckpt");
    for (stage, ck_flag, ck) in [
        ("prematch", "--tracker", &tck),
        ("tracker", "--tracker", &tck),
        ("refiner", "--refiner", &rck),
    ] {
        let pred = root.join(format!("pred_{stage}"));
        run(with(&[
            "infer",
            "--data",
            p(&data),
            "--out",
            p(&pred),
            "--stage",
            stage,
            ck_flag,
            p(ck),
        ]))?;
        let ev = root.join(format!("eval_{stage}"));
        dvps(&[
            "eval",
            "--pred",
            p(&pred),
            "--gt",
            p(&data),
            "--out",
            p(&ev),
        ])?;
    }
    let scaled = root.join("pred_scales");
    run(with(&[
        "infer",
        "--data",
        p(&data),
        "--out",
        p(&scaled),
        "--stage",
        "refiner",
        "--refiner",
        p(&rck),
        "--scales",
        "1.0,0.75",
    ]))?;
    let viz = root.join("viz");
    let pv = root.join("pred_refiner/video_0001");
    dvps(&[
        "viz",
        "--video",
        p(&pv),
        "--gt",
        p(&data.join("video_0001")),
        "--out",
        p(&viz),
    ])?;
    dvps(&["selfcheck"])
}

fn frozen_stage_contract(dir: &Path) -> Outcome {
    let root = dir.join("frozen");
    let mut frozen = None;
    let result = full_run(&root, &mut |root| {
        frozen = Some((
            snapshot(&root.join("data")),
            snapshot(&root.join("tracker")),
        ));
    });
    if let Err(e) = result {
        return outcome(8, false, e);
    }
    let (data_before, tracker_before) = frozen.unwrap();
    let data_same = snapshot(&root.join("data")) == data_before;
    let tracker_same = snapshot(&root.join("tracker")) == tracker_before;
    // the refiner checkpoint carries the frozen tracker tensors unchanged
    let t = dvps::model::load_checkpoint(&root.join("tracker/tracker.ckpt")).unwrap();
    let r = dvps::model::load_checkpoint(&root.join("refiner/refiner.ckpt")).unwrap();
    let tracker_params = t.tensors.with_prefix("tracker.");
    let bundled = r.tensors.with_prefix("tracker.");
    let bundle_same = tracker_params == bundled && !bundled.is_empty();
    outcome(
        8,
        data_same && tracker_same && bundle_same,
        format!(
            "data unchanged {data_same}, tracker checkpoint unchanged {tracker_same}, bundled tracker identical {bundle_same} ({} files)",
            data_before.len() + tracker_before.len()
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let mut snaps = Vec::new();
    for i in 0..2 {
        let root = dir.join(format!("run{i}"));
        match full_run(&root, &mut |_| {}) {
            Ok(selfcheck) => snaps.push((snapshot(&root), selfcheck)),
            Err(e) => return outcome(9, false, e),
        }
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    let differing: Vec<String> =
        a.0.iter()
            .filter(|(k, v)| b.0.get(*k) != Some(v))
            .map(|(k, _)| k.display().to_string())
            .collect();
    let same = differing.is_empty() && a.0.len() == b.0.len() && a.1 == b.1;
    outcome(
        9,
        same,
        format!(
            "{} artifacts compared across two runs, {} differ{}",
            a.0.len(),
            differing.len(),
            differing
                .first()
                .map(|d| format!(" (first: {d})"))
                .unwrap_or_default()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = vec![
        table_arithmetic(),
        timed_suite(2, HUNGARIAN_BUDGET, || hungarian_suite(false)),
        timed_suite(3, GRADIENT_BUDGET, || gradient_suite(false)),
        timed_suite(4, Duration::MAX, identity_suite),
        noiseless_prematch(),
    ];
    let (c6, trained) = training_efficacy();
    results.push(c6);
    results.push(stability(&trained));
    drop(trained);
    results.push(frozen_stage_contract(dir.path()));
    results.push(determinism(dir.path()));

    let mut problems = Vec::new();
    for r in &results {
        match KNOWN_FAILURES.iter().find(|(id, _)| *id == r.id) {
            Some((_, why)) if r.passed => problems.push(format!(
                "criterion {} now passes; remove it from KNOWN_FAILURES ({why})",
                r.id
            )),
            Some((_, why)) => println!("criterion {}: known failure: {why}", r.id),
            None if !r.passed => problems.push(format!("criterion {}: {}", r.id, r.detail)),
            None => {}
        }
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    assert!(problems.is_empty(), "{}", problems.join("\n"));
}
