//! Built-in verification suites: gradients, the assignment solver, metric
//! identities and exact-identity properties of the models.

use std::fmt::Write as _;

use serde::Serialize;

use crate::datamodel::{IdMap, PanopticVideo, Stage};
use crate::error::Result;
use crate::losses::{loss_refiner_on, loss_tracker_on, LossWeights};
use crate::matcher::{brute_force, ground_truth_tracks, hungarian, hungarian_padded};
use crate::metrics::{association_accuracy, round1, stq, vpq_k, vpq_mean, VPQ_WINDOWS};
use crate::model::refiner::{temporal_decoder_block, temporal_weighting, RefinerVars};
use crate::model::tracker::{rca, td_block, TrackerVars};
use crate::model::{init_refiner, init_tracker, RefinerConfig, TrackerConfig};
use crate::numerics::{
    check_gradients, check_gradients_many, conv1d_temporal, feed_forward, layer_norm, linear,
    multi_head_attention, AttentionVars, Tape, Tensor, Var, LAYER_NORM_EPS,
};
use crate::pipeline::{stage_outputs, Models};
use crate::rng::{self, Rng};
use crate::synth::{generate_clip, segmenter_stub, SceneConfig};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const HUNGARIAN_TRIALS: usize = 200;

/// Deliberate faults for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Checks a function whose tape drops one gradient path.
    Gradient,
    /// Corrupts each solver result before comparing with brute force.
    Hungarian,
    /// Scores a prediction that differs from the ground truth in one pixel.
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed error (meaning depends on the suite).
    pub max_error: f64,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let _ = writeln!(
                s,
                "{:<12} {}  cases {:>5}  max error {:.3e}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.cases,
                r.max_error
            );
            for f in &r.failures {
                let _ = writeln!(s, "  {f}");
            }
        }
        s
    }
}

#[derive(Default)]
struct Suite {
    cases: usize,
    max_error: f64,
    failures: Vec<String>,
}

impl Suite {
    fn record(&mut self, name: &str, err: f64, tol: f64) {
        self.cases += 1;
        self.max_error = self.max_error.max(err);
        if !(err <= tol) {
            self.failures
                .push(format!("{name}: error {err:.3e} above {tol:.0e}"));
        }
    }

    fn check(&mut self, name: &str, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures.push(name.to_string());
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<f64>, tol: f64) {
        match f() {
            Ok(e) => self.record(name, e, tol),
            Err(e) => {
                self.cases += 1;
                self.failures.push(format!("{name}: {e}"));
            }
        }
    }

    fn finish(self, name: &str) -> SuiteResult {
        SuiteResult {
            name: name.into(),
            passed: self.failures.is_empty(),
            cases: self.cases,
            max_error: self.max_error,
            failures: self.failures,
        }
    }
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

fn weighted_sum(t: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng::stream(seed, "selfcheck.weights"));
    t.sum(t.mul(y, t.constant(w)?)?)
}

type Unary = fn(&Tape, Var) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Unary)> {
    vec![
        ("neg", vec![3, 4], |t, x| t.neg(x)),
        ("scale", vec![3, 4], |t, x| t.scale(x, -1.7)),
        ("add_scalar", vec![3, 4], |t, x| t.add_scalar(x, 0.3)),
        ("relu", vec![3, 4], |t, x| t.relu(x)),
        ("sigmoid", vec![3, 4], |t, x| t.sigmoid(x)),
        ("exp", vec![3, 4], |t, x| t.exp(x)),
        ("log", vec![3, 4], |t, x| {
            t.log(t.add_scalar(t.mul(x, x)?, 0.5)?)
        }),
        ("softplus", vec![3, 4], |t, x| t.softplus(x)),
        ("softmax", vec![3, 5], |t, x| t.softmax(x, 1)),
        ("softmax_axis0", vec![3, 5], |t, x| t.softmax(x, 0)),
        ("log_softmax", vec![3, 5], |t, x| t.log_softmax(x, 1)),
        ("normalize_rows", vec![3, 5], |t, x| {
            t.normalize_rows(x, LAYER_NORM_EPS)
        }),
        ("sum", vec![3, 4], |t, x| t.sum(x)),
        ("mean", vec![3, 4], |t, x| t.mean(x)),
        ("sum_axis", vec![3, 4], |t, x| t.sum_axis(x, 0)),
        ("transpose", vec![3, 4], |t, x| t.transpose(x)),
        ("reshape", vec![3, 4], |t, x| t.reshape(x, &[2, 6])),
        ("slice_cols", vec![3, 5], |t, x| t.slice_cols(x, 1, 4)),
        ("slice_rows", vec![4, 3], |t, x| t.slice_rows(x, 1, 3)),
        ("concat_cols", vec![3, 2], |t, x| {
            let y = t.exp(x)?;
            t.concat_cols(&[x, y])
        }),
        ("concat_rows", vec![2, 3], |t, x| {
            let y = t.sigmoid(x)?;
            t.concat_rows(&[y, x])
        }),
        ("gather_rows", vec![4, 3], |t, x| {
            t.gather_rows(x, &[3, 0, 0, 2])
        }),
        ("pick", vec![4, 3], |t, x| t.pick(x, &[2, 0, 1, 1])),
        ("mul_self", vec![3, 4], |t, x| t.mul(x, x)),
        ("div", vec![3, 4], |t, x| {
            let d = t.add_scalar(t.mul(x, x)?, 1.0)?;
            t.div(x, d)
        }),
        ("sub", vec![3, 4], |t, x| t.sub(t.exp(x)?, x)),
        ("matmul", vec![3, 3], |t, x| t.matmul(x, t.transpose(x)?)),
    ]
}

pub fn gradient_suite(fault: bool) -> SuiteResult {
    let mut s = Suite::default();
    let mut r = rng::stream(0, "selfcheck.gradients");
    for (i, (name, shape, f)) in primitive_cases().into_iter().enumerate() {
        let x = randn(&shape, &mut r);
        let seed = i as u64;
        s.run(
            name,
            || check_gradients(|t, x| weighted_sum(t, f(t, x)?, seed), &x, GRAD_EPS),
            GRAD_TOL,
        );
    }
    let binary: Vec<(&str, Vec<Tensor>, fn(&Tape, &[Var]) -> Result<Var>)> = vec![
        (
            "add_row",
            vec![randn(&[3, 4], &mut r), randn(&[4], &mut r)],
            |t, v| t.add_row(v[0], v[1]),
        ),
        (
            "mul_row",
            vec![randn(&[3, 4], &mut r), randn(&[4], &mut r)],
            |t, v| t.mul_row(v[0], v[1]),
        ),
        (
            "linear",
            vec![
                randn(&[3, 4], &mut r),
                randn(&[4, 2], &mut r),
                randn(&[2], &mut r),
            ],
            |t, v| linear(t, v[0], v[1], v[2]),
        ),
        (
            "layer_norm",
            vec![
                randn(&[3, 5], &mut r),
                randn(&[5], &mut r),
                randn(&[5], &mut r),
            ],
            |t, v| layer_norm(t, v[0], v[1], v[2], LAYER_NORM_EPS),
        ),
        (
            "conv1d",
            vec![
                randn(&[5, 3], &mut r),
                randn(&[3, 3, 2], &mut r),
                randn(&[2], &mut r),
            ],
            |t, v| conv1d_temporal(t, v[0], v[1], v[2]),
        ),
        (
            "feed_forward",
            vec![
                randn(&[3, 4], &mut r),
                randn(&[4, 6], &mut r),
                randn(&[6], &mut r),
                randn(&[6, 4], &mut r),
                randn(&[4], &mut r),
            ],
            |t, v| feed_forward(t, v[0], v[1], v[2], v[3], v[4]),
        ),
    ];
    for (i, (name, inputs, f)) in binary.into_iter().enumerate() {
        let seed = 100 + i as u64;
        s.run(
            name,
            || check_gradients_many(|t, v| weighted_sum(t, f(t, v)?, seed), &inputs, GRAD_EPS),
            GRAD_TOL,
        );
    }
    let mut attn: Vec<Tensor> = vec![randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)];
    for _ in 0..4 {
        attn.push(Tensor::randn([4, 4], 0.5, &mut r));
        attn.push(randn(&[4], &mut r));
    }
    s.run(
        "multi_head_attention",
        || {
            check_gradients_many(
                |t, v| {
                    let p = AttentionVars {
                        wq: v[2],
                        bq: v[3],
                        wk: v[4],
                        bk: v[5],
                        wv: v[6],
                        bv: v[7],
                        wo: v[8],
                        bo: v[9],
                    };
                    weighted_sum(t, multi_head_attention(t, v[0], v[1], v[1], &p, 2)?, 200)
                },
                &attn,
                GRAD_EPS,
            )
        },
        GRAD_TOL,
    );
    s.run("td_block", || td_block_check(&mut r), GRAD_TOL);
    s.run("decoder_block", || decoder_block_check(&mut r), GRAD_TOL);
    s.run("temporal_weighting", || weighting_check(&mut r), GRAD_TOL);
    s.run("loss_tracker", || loss_check(false), GRAD_TOL);
    s.run("loss_refiner", || loss_check(true), GRAD_TOL);
    if fault {
        let x = randn(&[3, 4], &mut r);
        s.run(
            "detached_path",
            || {
                check_gradients(
                    |t, x| {
                        let v = t.value(x).clone();
                        let copy = t.constant(v)?;
                        t.sum(t.mul(x, copy)?)
                    },
                    &x,
                    GRAD_EPS,
                )
            },
            GRAD_TOL,
        );
    }
    s.finish("gradients")
}

fn small_tracker() -> TrackerConfig {
    TrackerConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        mask_dim: 4,
        num_classes: 3,
        ..TrackerConfig::default()
    }
}

fn small_refiner() -> RefinerConfig {
    RefinerConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        kernel: 3,
        mask_dim: 4,
        num_classes: 3,
    }
}

fn td_block_check(r: &mut Rng) -> Result<f64> {
    let cfg = small_tracker();
    let params = init_tracker(&cfg, 1)?;
    let mut inputs = vec![randn(&[4, 8], r), randn(&[4, 8], r), randn(&[4, 8], r)];
    inputs.push(params.get("tracker.block0.rca.q.w")?.clone());
    inputs.push(params.get("tracker.block0.ffn.fc1.w")?.clone());
    check_gradients_many(
        |t, v| {
            let b = params.bind(t, false)?;
            let mut vars = TrackerVars::from_bound(&b, &cfg)?;
            vars.blocks[0].rca.wq = v[3];
            vars.blocks[0].ffn.w1 = v[4];
            let y = td_block(t, v[0], v[1], v[2], &vars.blocks[0], cfg.heads)?;
            weighted_sum(t, y, 300)
        },
        &inputs,
        GRAD_EPS,
    )
}

fn randomized_refiner(cfg: &RefinerConfig, r: &mut Rng) -> Result<crate::model::ParamStore> {
    let mut p = init_refiner(cfg, 2)?;
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        let shape = p.get(&n)?.shape().to_vec();
        p.insert(n, Tensor::randn(shape, 0.3, r));
    }
    Ok(p)
}

fn decoder_block_check(r: &mut Rng) -> Result<f64> {
    let cfg = small_refiner();
    let params = randomized_refiner(&cfg, r)?;
    let (slots, frames) = (3, 4);
    let mut inputs = vec![randn(&[slots * frames, 8], r)];
    inputs.push(params.get("refiner.block0.conv.w")?.clone());
    inputs.push(params.get("refiner.block0.attn.k.w")?.clone());
    check_gradients_many(
        |t, v| {
            let b = params.bind(t, false)?;
            let mut vars = RefinerVars::from_bound(&b, &cfg)?;
            vars.blocks[0].conv_w = v[1];
            vars.blocks[0].attn.wk = v[2];
            let y = temporal_decoder_block(t, v[0], slots, frames, &vars.blocks[0], cfg.heads)?;
            weighted_sum(t, y, 301)
        },
        &inputs,
        GRAD_EPS,
    )
}

fn weighting_check(r: &mut Rng) -> Result<f64> {
    let inputs = vec![randn(&[12, 5], r), randn(&[5, 1], r), randn(&[1], r)];
    check_gradients_many(
        |t, v| weighted_sum(t, temporal_weighting(t, v[0], 3, 4, v[1], v[2])?, 302),
        &inputs,
        GRAD_EPS,
    )
}

/// Scene with three frames of 8x8 pixels and at most four segments.
pub fn tiny_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        num_frames: 3,
        height: 8,
        width: 8,
        min_things: 1,
        max_things: 1,
        stuff_regions: 1,
        distractors: 0,
        query_dim: 16,
        feature_dim: 4,
        appear_prob: 0.0,
        disappear_prob: 0.0,
        seed,
        ..SceneConfig::default()
    }
}

fn loss_check(refiner: bool) -> Result<f64> {
    let scene = tiny_scene(5);
    let (clip, gt) = generate_clip(&scene)?;
    let gts = ground_truth_tracks(&gt);
    let (frames, n, k1) = (3, 4, scene.num_classes() + 1);
    let mut r = rng::stream(6, "selfcheck.loss");
    let cost = Tensor::randn([gts.len(), n], 1.0, &mut r);
    let sigma = hungarian_padded(&cost)?;
    let mut inputs: Vec<Tensor> = (0..frames)
        .map(|_| Tensor::randn([n, scene.feature_dim], 0.7, &mut r))
        .collect();
    let class_count = if refiner { 1 } else { frames };
    inputs.extend((0..class_count).map(|_| Tensor::randn([n, k1], 1.0, &mut r)));
    let w = LossWeights::default();
    check_gradients_many(
        |t, v| {
            let palette = clip.palette_on(t)?;
            let masks = (0..frames)
                .map(|f| clip.mask_logits_on(t, palette, f, v[f]))
                .collect::<Result<Vec<_>>>()?;
            if refiner {
                loss_refiner_on(t, v[frames], &masks, &gts, &sigma, &w)
            } else {
                loss_tracker_on(t, &v[frames..], &masks, &gts, &sigma, &w)
            }
        },
        &inputs,
        GRAD_EPS,
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn permutation_count_at(cost: &Tensor, best: f64) -> usize {
    let n = cost.shape()[0];
    permutations(n)
        .into_iter()
        .filter(|p| {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.at(&[i, j])).sum();
            (c - best).abs() <= 1e-9 * (1.0 + best.abs())
        })
        .count()
}

pub fn hungarian_suite(fault: bool) -> SuiteResult {
    let mut s = Suite::default();
    for n in 2..=7 {
        let mut r = rng::indexed_stream(0, "selfcheck.hungarian", n as u64);
        for trial in 0..HUNGARIAN_TRIALS {
            // every fourth matrix is small-integer valued so that ties occur
            let cost = if trial % 4 == 3 {
                Tensor::randn([n, n], 1.0, &mut r).map(|v| (v * 1.5).round())
            } else {
                Tensor::randn([n, n], 1.0, &mut r)
            };
            let mut got = match hungarian(&cost) {
                Ok(a) => a,
                Err(e) => {
                    s.check(&format!("n={n} trial {trial}: {e}"), false);
                    continue;
                }
            };
            if fault {
                got.perm.swap(0, 1);
                got.cost = got
                    .perm
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| cost.at(&[i, j]))
                    .sum();
            }
            let want = brute_force(&cost);
            let err = (got.cost - want.cost).abs();
            s.record(&format!("n={n} trial {trial} cost"), err, 0.0);
            if permutation_count_at(&cost, want.cost) == 1 {
                s.check(
                    &format!("n={n} trial {trial}: unique optimum differs"),
                    got.perm == want.perm,
                );
            }
        }
    }
    s.finish("hungarian")
}

pub fn metric_suite(fault: bool) -> SuiteResult {
    let mut s = Suite::default();
    for seed in 0..3 {
        let scene = SceneConfig {
            num_frames: 7,
            height: 16,
            width: 16,
            seed,
            ..SceneConfig::default()
        };
        let gt = match generate_clip(&scene) {
            Ok((_, gt)) => gt,
            Err(e) => {
                s.check(&format!("scene {seed}: {e}"), false);
                continue;
            }
        };
        let pred = if fault { perturbed(&gt) } else { gt.clone() };
        for k in VPQ_WINDOWS {
            match vpq_k(&pred, &gt, k) {
                Ok(v) => s.record(
                    &format!("scene {seed} VPQ{k} of ground truth"),
                    (v - 100.0).abs(),
                    0.0,
                ),
                Err(e) => s.check(&format!("scene {seed} VPQ{k}: {e}"), false),
            }
        }
        s.run(
            &format!("scene {seed} STQ"),
            || Ok((stq(&pred, &gt)? - 1.0).abs()),
            0.0,
        );
        s.run(
            &format!("scene {seed} association accuracy"),
            || Ok((association_accuracy(&pred, &gt)? - 1.0).abs()),
            0.0,
        );
    }
    for (values, want) in [
        ([52.1, 51.5, 51.2, 51.1], 51.5),
        ([54.7, 54.1, 53.3, 52.8], 53.7),
    ] {
        let per_k = VPQ_WINDOWS.iter().copied().zip(values).collect();
        s.run(
            &format!("vpq_mean {values:?}"),
            || Ok((round1(vpq_mean(&per_k)?) - want).abs()),
            1e-9,
        );
    }
    s.finish("metrics")
}

fn perturbed(gt: &PanopticVideo) -> PanopticVideo {
    let mut frames: Vec<IdMap> = gt.frames().to_vec();
    let ids = &mut frames[0].ids;
    let other = ids
        .iter()
        .copied()
        .find(|&i| i != ids[0])
        .unwrap_or(ids[0] + 1);
    ids[0] = other;
    PanopticVideo::new(frames, gt.tracks().clone()).unwrap_or_else(|_| gt.clone())
}

pub fn identity_suite() -> SuiteResult {
    let mut s = Suite::default();
    let mut r = rng::stream(0, "selfcheck.identities");
    s.run(
        "rca with zero output projection",
        || {
            let t = Tape::new();
            let id = t.constant(randn(&[4, 8], &mut r))?;
            let q = t.constant(randn(&[4, 8], &mut r))?;
            let kv = t.constant(randn(&[5, 8], &mut r))?;
            let mut w = Vec::new();
            for shape in [[8, 8], [8, 8], [8, 8]] {
                w.push(t.constant(Tensor::randn(shape, 0.5, &mut r))?);
                w.push(t.constant(randn(&[8], &mut r))?);
            }
            let p = AttentionVars {
                wq: w[0],
                bq: w[1],
                wk: w[2],
                bk: w[3],
                wv: w[4],
                bv: w[5],
                wo: t.constant(Tensor::zeros([8, 8]))?,
                bo: t.constant(Tensor::zeros([8]))?,
            };
            let out = rca(&t, id, q, kv, kv, &p, 2)?;
            let exact = *t.value(out) == *t.value(id);
            Ok(if exact { 0.0 } else { 1.0 })
        },
        0.0,
    );
    s.run(
        "temporal weighting of one frame",
        || {
            let t = Tape::new();
            let x = t.constant(randn(&[3, 6], &mut r))?;
            let w = t.constant(randn(&[6, 1], &mut r))?;
            let b = t.constant(randn(&[1], &mut r))?;
            let out = temporal_weighting(&t, x, 3, 1, w, b)?;
            let exact = *t.value(out) == *t.value(x);
            Ok(if exact { 0.0 } else { 1.0 })
        },
        0.0,
    );
    s.run(
        "softmax rows sum to one",
        || {
            let t = Tape::new();
            let x = t.constant(Tensor::randn([16, 9], 5.0, &mut r))?;
            let p = t.softmax(x, 1)?;
            let v = t.value(p);
            Ok((0..16)
                .map(|i| (v.row(i).iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max))
        },
        1e-12,
    );
    s.run(
        "refiner class logits are frame invariant",
        || {
            let scene = SceneConfig {
                num_frames: 5,
                ..tiny_scene(3)
            };
            let (_, gt) = generate_clip(&scene)?;
            let stub = segmenter_stub(&gt, &scene)?;
            let tcfg = TrackerConfig {
                dim: 16,
                num_classes: scene.num_classes(),
                ..small_tracker()
            };
            let rcfg = RefinerConfig {
                dim: 16,
                num_classes: scene.num_classes(),
                ..small_refiner()
            };
            let models = Models {
                tracker: Some((init_tracker(&tcfg, 4)?, tcfg)),
                refiner: Some((randomized_refiner(&rcfg, &mut r)?, rcfg)),
            };
            let out = stage_outputs(&stub.frames, Stage::Refiner, &models)?;
            let first = &out[0].1;
            Ok(if out.iter().all(|(_, c)| c == first) {
                0.0
            } else {
                1.0
            })
        },
        0.0,
    );
    s.finish("identities")
}

/// Runs every suite; `fault` deliberately breaks one of them.
pub fn run_selfcheck(fault: Option<Fault>) -> SelfcheckReport {
    let suites = vec![
        gradient_suite(fault == Some(Fault::Gradient)),
        hungarian_suite(fault == Some(Fault::Hungarian)),
        metric_suite(fault == Some(Fault::Metric)),
        identity_suite(),
    ];
    SelfcheckReport { suites }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_scene_fits_four_queries() {
        for seed in 0..20 {
            let (_, gt) = generate_clip(&tiny_scene(seed)).unwrap();
            assert!(ground_truth_tracks(&gt).len() <= 4);
        }
    }

    #[test]
    fn clean_run_passes() {
        let report = run_selfcheck(None);
        assert!(report.passed(), "{}", report.to_text());
    }

    #[test]
    fn faults_are_detected() {
        assert!(!gradient_suite(true).passed);
        assert!(!hungarian_suite(true).passed);
        assert!(!metric_suite(true).passed);
    }
}
