//! Seed-deterministic training loops of the tracker and the refiner.
//!
//! Iteration `i` draws its batch from the stream `("train.batch", i)`, so a
//! run resumed from a checkpoint continues exactly as an uninterrupted one.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::{loss_refiner_on, loss_tracker_on, LossWeights};
use crate::datamodel::VideoClip;
use crate::error::{Error, Result};
use crate::matcher::{
    ground_truth_tracks, match_refiner, match_tracker, prematch_chain, uses_own_predictions,
    Assignment, ClipPredictions, GroundTruthTrack, MatchWeights,
};
use crate::model::params::{Checkpoint, CheckpointMeta};
use crate::model::refiner::{refiner_forward_on, RefinerVars};
use crate::model::tracker::{tracker_forward, tracker_forward_on, TrackerVars};
use crate::model::{ParamStore, RefinerConfig, TrackerConfig};
use crate::numerics::nn::eager;
use crate::numerics::{Tape, Tensor, Var};
use crate::pipeline::VideoSample;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub batch_size: usize,
    /// Consecutive frames per training clip.
    pub clip_len: usize,
    pub lr: f64,
    pub decay_factor: f64,
    /// Fraction of `max_iter` after which the learning rate is decayed.
    pub decay_at: f64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub matching: MatchWeights,
    /// Range of the random resize factor applied to each clip.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Side of a random square crop; 0 disables cropping.
    pub crop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tracker()
    }
}

impl TrainConfig {
    pub fn tracker() -> Self {
        Self {
            max_iter: 2000,
            batch_size: 8,
            clip_len: 5,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_at: 0.7,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            matching: MatchWeights::default(),
            min_scale: 0.75,
            max_scale: 1.25,
            crop: 0,
            seed: 0,
        }
    }

    pub fn refiner() -> Self {
        Self {
            clip_len: 21,
            ..Self::tracker()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clip_len == 0 || self.batch_size == 0 {
            return bad("clip_len and batch_size must be positive".into());
        }
        if !(self.decay_at > 0.0 && self.decay_at < 1.0) {
            return bad(format!("decay_at must lie in (0,1), got {}", self.decay_at));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.grad_clip > 0.0) {
            return bad("lr must be finite and non-negative, grad_clip positive".into());
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale.is_finite())
        {
            return bad(format!(
                "scale range [{}, {}] is invalid",
                self.min_scale, self.max_scale
            ));
        }
        Ok(())
    }

    /// Learning rate of iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter as f64 >= self.decay_at * self.max_iter as f64 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Parameters, optimizer state and the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(cfg.optimizer, &params);
        Self {
            params,
            opt,
            iteration: 0,
        }
    }

    /// Checkpoint with the trained parameters, optimizer moments under
    /// `adam.m.` / `adam.v.` and any `extra` (frozen) tensors.
    pub fn to_checkpoint(
        &self,
        stage: &str,
        config: serde_json::Value,
        extra: &ParamStore,
    ) -> Checkpoint {
        let mut tensors = extra.clone();
        tensors.extend(self.params.clone());
        for (k, v) in self.opt.m.iter() {
            tensors.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in self.opt.v.iter() {
            tensors.insert(format!("adam.v.{k}"), v.clone());
        }
        Checkpoint {
            meta: CheckpointMeta {
                stage: stage.into(),
                iteration: self.iteration,
                adam_step: self.opt.step,
                config,
            },
            tensors,
        }
    }

    /// Restores the parameters under `prefix` and their optimizer moments.
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, cfg: &TrainConfig) -> Result<Self> {
        let params = ck.tensors.with_prefix(&format!("{prefix}."));
        if params.is_empty() {
            return Err(Error::Missing(format!("{prefix} parameters in checkpoint")));
        }
        let mut opt = AdamW::new(cfg.optimizer, &params);
        for (k, _) in params.iter() {
            for (store, ns) in [(&mut opt.m, "adam.m"), (&mut opt.v, "adam.v")] {
                let t = ck.tensors.get(&format!("{ns}.{k}"))?;
                store.insert(k.clone(), t.clone());
            }
        }
        opt.step = ck.meta.adam_step;
        Ok(Self {
            params,
            opt,
            iteration: ck.meta.iteration,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub losses: Vec<LossRecord>,
}

/// One training clip: which frames of which video, and its augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub video: usize,
    pub start: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `(top, left, side)` of a square crop of the resized clip.
    pub crop: Option<(usize, usize, usize)>,
}

pub fn sample_batch(cfg: &TrainConfig, data: &[VideoSample], iter: usize) -> Vec<ClipSpec> {
    let mut r = rng::indexed_stream(cfg.seed, "train.batch", iter as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let video = r.random_range(0..data.len());
            let v = &data[video];
            let t = v.gt.num_frames();
            let len = cfg.clip_len.min(t);
            let start = r.random_range(0..=t - len);
            let s = if cfg.max_scale > cfg.min_scale {
                r.random_range(cfg.min_scale..=cfg.max_scale)
            } else {
                cfg.min_scale
            };
            let height = ((v.gt.height() as f64 * s).round() as usize).max(1);
            let width = ((v.gt.width() as f64 * s).round() as usize).max(1);
            let crop = (cfg.crop > 0 && cfg.crop <= height && cfg.crop <= width).then(|| {
                let top = r.random_range(0..=height - cfg.crop);
                let left = r.random_range(0..=width - cfg.crop);
                (top, left, cfg.crop)
            });
            ClipSpec {
                video,
                start,
                len,
                height,
                width,
                crop,
            }
        })
        .collect()
}

struct PreparedClip {
    frames: Vec<crate::datamodel::FrameQueries>,
    clip: VideoClip,
    gts: Vec<GroundTruthTrack>,
}

fn prepare(data: &[VideoSample], spec: &ClipSpec) -> Result<PreparedClip> {
    let v = &data[spec.video];
    let (s, e) = (spec.start, spec.start + spec.len);
    let pre = prematch_chain(&v.queries[s..e])?;
    let mut clip = v.clip.slice(s, e).resized(spec.height, spec.width);
    let mut gt = v.gt.slice(s, e).resized(spec.height, spec.width);
    if let Some((top, left, side)) = spec.crop {
        clip = clip.cropped(top, left, side, side);
        gt = gt.cropped(top, left, side, side);
    }
    Ok(PreparedClip {
        frames: pre.frames,
        clip,
        gts: ground_truth_tracks(&gt),
    })
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    eager::softmax(x, 1)
}

fn assignment(
    gts: &[GroundTruthTrack],
    f: impl FnOnce() -> Result<Assignment>,
) -> Result<Assignment> {
    if gts.is_empty() {
        Ok(Assignment {
            perm: vec![],
            cost: 0.0,
        })
    } else {
        f()
    }
}

fn values(t: &Tape, vs: &[Var]) -> Vec<Tensor> {
    vs.iter().map(|&v| t.value(v).clone()).collect()
}

fn tracker_step(
    params: &ParamStore,
    tcfg: &TrackerConfig,
    cfg: &TrainConfig,
    data: &[VideoSample],
    spec: &ClipSpec,
    iter: usize,
) -> Result<(f64, ParamStore)> {
    let c = prepare(data, spec)?;
    let t = Tape::new();
    let bound = params.bind(&t, true)?;
    let vars = TrackerVars::from_bound(&bound, tcfg)?;
    let inputs = c
        .frames
        .iter()
        .map(|f| t.constant(f.embeddings.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = tracker_forward_on(&t, &vars, tcfg, &inputs)?;
    let palette = c.clip.palette_on(&t)?;
    let mask_logits = out
        .mask_embeddings
        .iter()
        .enumerate()
        .map(|(f, &m)| c.clip.mask_logits_on(&t, palette, f, m))
        .collect::<Result<Vec<_>>>()?;
    let sigma = assignment(&c.gts, || {
        let preds = if uses_own_predictions(iter, cfg.max_iter) {
            ClipPredictions {
                class_probs: values(&t, &out.class_logits)
                    .iter()
                    .map(softmax_rows)
                    .collect::<Result<_>>()?,
                mask_logits: values(&t, &mask_logits),
            }
        } else {
            upstream_predictions(&c.frames, &c.clip)?
        };
        match_tracker(&preds, &preds, &c.gts, iter, cfg.max_iter, &cfg.matching)
    })?;
    let loss = loss_tracker_on(
        &t,
        &out.class_logits,
        &mask_logits,
        &c.gts,
        &sigma,
        &cfg.loss,
    )?;
    let value = t.value(loss).item();
    let mut g = t.backward(loss)?;
    Ok((value, bound.gradients(&t, &mut g)))
}

/// Segmenter predictions of pre-matched frames.
fn upstream_predictions(
    frames: &[crate::datamodel::FrameQueries],
    clip: &VideoClip,
) -> Result<ClipPredictions> {
    Ok(ClipPredictions {
        class_probs: frames
            .iter()
            .map(|f| softmax_rows(&f.class_logits))
            .collect::<Result<_>>()?,
        mask_logits: frames
            .iter()
            .enumerate()
            .map(|(i, f)| clip.mask_logits(i, &f.mask_embeddings))
            .collect::<Result<_>>()?,
    })
}

fn refiner_step(
    params: &ParamStore,
    rcfg: &RefinerConfig,
    tracker: (&ParamStore, &TrackerConfig),
    cfg: &TrainConfig,
    data: &[VideoSample],
    spec: &ClipSpec,
    iter: usize,
) -> Result<(f64, ParamStore)> {
    let c = prepare(data, spec)?;
    let seq = crate::datamodel::TrackedQuerySequence::from_frames(
        &c.frames
            .iter()
            .map(|f| f.embeddings.clone())
            .collect::<Vec<_>>(),
        crate::datamodel::Stage::Prematch,
    )?;
    let tr = tracker_forward(tracker.0, tracker.1, &seq)?;
    let t = Tape::new();
    let bound = params.bind(&t, true)?;
    let vars = RefinerVars::from_bound(&bound, rcfg)?;
    let inputs = (0..tr.sequence.num_frames())
        .map(|f| t.constant(tr.sequence.frame(f)))
        .collect::<Result<Vec<_>>>()?;
    let out = refiner_forward_on(&t, &vars, rcfg, &inputs)?;
    let palette = c.clip.palette_on(&t)?;
    let mask_logits = out
        .mask_embeddings
        .iter()
        .enumerate()
        .map(|(f, &m)| c.clip.mask_logits_on(&t, palette, f, m))
        .collect::<Result<Vec<_>>>()?;
    let sigma = assignment(&c.gts, || {
        let preds = if uses_own_predictions(iter, cfg.max_iter) {
            let probs = softmax_rows(&t.value(out.class_logits))?;
            ClipPredictions {
                class_probs: vec![probs; mask_logits.len()],
                mask_logits: values(&t, &mask_logits),
            }
        } else {
            ClipPredictions {
                class_probs: tr
                    .class_logits
                    .iter()
                    .map(softmax_rows)
                    .collect::<Result<_>>()?,
                mask_logits: tr
                    .mask_embeddings
                    .iter()
                    .enumerate()
                    .map(|(f, m)| c.clip.mask_logits(f, m))
                    .collect::<Result<_>>()?,
            }
        };
        match_refiner(&preds, &preds, &c.gts, iter, cfg.max_iter, &cfg.matching)
    })?;
    let loss = loss_refiner_on(
        &t,
        out.class_logits,
        &mask_logits,
        &c.gts,
        &sigma,
        &cfg.loss,
    )?;
    let value = t.value(loss).item();
    let mut g = t.backward(loss)?;
    let grads = bound.gradients(&t, &mut g);
    if let Some(name) = grads.names().find(|n| !n.starts_with("refiner.")) {
        return Err(Error::Integrity(format!(
            "refiner step produced a gradient for {name}"
        )));
    }
    Ok((value, grads))
}

fn divergence(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            iter,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn run<F>(
    cfg: &TrainConfig,
    data: &[VideoSample],
    mut state: TrainState,
    stop_after: Option<usize>,
    on_record: &mut dyn FnMut(&LossRecord, &TrainState) -> Result<()>,
    step: F,
) -> Result<TrainOutcome>
where
    F: Fn(&ParamStore, &ClipSpec, usize) -> Result<(f64, ParamStore)> + Sync,
{
    cfg.validate()?;
    if data.is_empty() && state.iteration < cfg.max_iter {
        return Err(Error::Invalid("no training videos".into()));
    }
    let end = stop_after.map_or(cfg.max_iter, |s| s.min(cfg.max_iter));
    let mut losses = Vec::new();
    while state.iteration < end {
        let iter = state.iteration;
        let specs = sample_batch(cfg, data, iter);
        let params = &state.params;
        let results: Vec<(f64, ParamStore)> = specs
            .par_iter()
            .map(|s| step(params, s, iter))
            .collect::<Result<_>>()
            .map_err(|e| divergence(iter, e))?;
        let b = results.len() as f64;
        let mut loss = 0.0;
        let mut grads = ParamStore::new();
        for (l, g) in results {
            loss += l;
            for (name, t) in g.iter() {
                match grads.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, v)| *a += v),
                    None => grads.insert(name.clone(), t.clone()),
                }
            }
        }
        loss /= b;
        let names: Vec<String> = grads.names().cloned().collect();
        for n in &names {
            grads
                .get_mut(n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v /= b);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter,
                detail: format!("loss is {loss}"),
            });
        }
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence {
                iter,
                detail: format!("gradient of {name} is not finite"),
            });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(iter);
        state.opt.update(&mut state.params, &grads, lr)?;
        state.iteration += 1;
        let rec = LossRecord { iter, loss, lr };
        log::debug!("iter {iter} loss {loss:.5} lr {lr:e}");
        on_record(&rec, &state)?;
        losses.push(rec);
    }
    Ok(TrainOutcome { state, losses })
}

/// Trains the tracker from `state` up to `max_iter` (or `stop_after`
/// iterations in total). `on_record` sees every iteration's loss.
pub fn train_tracker(
    cfg: &TrainConfig,
    tcfg: &TrackerConfig,
    data: &[VideoSample],
    state: TrainState,
    stop_after: Option<usize>,
    on_record: &mut dyn FnMut(&LossRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    run(cfg, data, state, stop_after, on_record, |p, s, i| {
        tracker_step(p, tcfg, cfg, data, s, i)
    })
}

/// Trains the refiner on outputs of a frozen tracker.
pub fn train_refiner(
    cfg: &TrainConfig,
    rcfg: &RefinerConfig,
    tracker: (&ParamStore, &TrackerConfig),
    data: &[VideoSample],
    state: TrainState,
    stop_after: Option<usize>,
    on_record: &mut dyn FnMut(&LossRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    rcfg.validate()?;
    run(cfg, data, state, stop_after, on_record, |p, s, i| {
        refiner_step(p, rcfg, tracker, cfg, data, s, i)
    })
}

/// Loss curve as CSV with header `iter,loss,lr`.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iter,loss,lr\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.lr));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_refiner, init_tracker, RcaBinding};
    use crate::synth::{generate_clip, segmenter_stub, SceneConfig};

    pub(crate) fn tiny_data(n: usize) -> (SceneConfig, Vec<VideoSample>) {
        let base = SceneConfig {
            num_frames: 6,
            height: 12,
            width: 12,
            min_things: 1,
            max_things: 2,
            query_dim: 16,
            feature_dim: 8,
            distractors: 1,
            ..SceneConfig::default()
        };
        let data = (0..n)
            .map(|i| {
                let cfg = SceneConfig {
                    seed: i as u64,
                    ..base.clone()
                };
                let (clip, gt) = generate_clip(&cfg).unwrap();
                let stub = segmenter_stub(&gt, &cfg).unwrap();
                VideoSample {
                    name: format!("v{i}"),
                    queries: stub.frames,
                    clip,
                    gt,
                }
            })
            .collect();
        (base, data)
    }

    fn tiny_tracker(scene: &SceneConfig) -> TrackerConfig {
        TrackerConfig {
            layers: 1,
            dim: scene.query_dim,
            heads: 2,
            ffn_dim: 16,
            mask_dim: scene.feature_dim,
            num_classes: scene.num_classes(),
            binding: RcaBinding::NoisyIdentity,
        }
    }

    fn tiny_train(max_iter: usize) -> TrainConfig {
        TrainConfig {
            max_iter,
            batch_size: 2,
            clip_len: 3,
            ..TrainConfig::tracker()
        }
    }

    fn no_log() -> impl FnMut(&LossRecord, &TrainState) -> Result<()> {
        |_, _| Ok(())
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (scene, data) = tiny_data(2);
        let tcfg = tiny_tracker(&scene);
        let init = init_tracker(&tcfg, 1).unwrap();
        let cfg = tiny_train(0);
        let out = train_tracker(
            &cfg,
            &tcfg,
            &data,
            TrainState::new(init.clone(), &cfg),
            None,
            &mut no_log(),
        )
        .unwrap();
        assert_eq!(out.state.params, init);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (scene, data) = tiny_data(3);
        let tcfg = tiny_tracker(&scene);
        let cfg = tiny_train(6);
        let init = init_tracker(&tcfg, 2).unwrap();
        let a = train_tracker(
            &cfg,
            &tcfg,
            &data,
            TrainState::new(init.clone(), &cfg),
            None,
            &mut no_log(),
        )
        .unwrap();
        let b = train_tracker(
            &cfg,
            &tcfg,
            &data,
            TrainState::new(init.clone(), &cfg),
            None,
            &mut no_log(),
        )
        .unwrap();
        assert_eq!(a.state, b.state);
        assert_ne!(a.state.params, init);
        let half = train_tracker(
            &cfg,
            &tcfg,
            &data,
            TrainState::new(init, &cfg),
            Some(3),
            &mut no_log(),
        )
        .unwrap();
        assert_eq!(half.state.iteration, 3);
        let ck = half
            .state
            .to_checkpoint("tracker", serde_json::json!({}), &ParamStore::new());
        let ck = crate::model::params::decode_checkpoint(
            &crate::model::params::encode_checkpoint(&ck).unwrap(),
        )
        .unwrap();
        let resumed = TrainState::from_checkpoint(&ck, "tracker", &cfg).unwrap();
        let rest = train_tracker(&cfg, &tcfg, &data, resumed, None, &mut no_log()).unwrap();
        assert_eq!(rest.state, a.state);
        let all: Vec<LossRecord> = half.losses.into_iter().chain(rest.losses).collect();
        assert_eq!(all, a.losses);
    }

    #[test]
    fn refiner_training_leaves_tracker_untouched() {
        let (scene, data) = tiny_data(2);
        let tcfg = tiny_tracker(&scene);
        let tracker = init_tracker(&tcfg, 3).unwrap();
        let before = tracker.clone();
        let rcfg = RefinerConfig {
            layers: 1,
            dim: scene.query_dim,
            heads: 2,
            ffn_dim: 16,
            kernel: 3,
            mask_dim: scene.feature_dim,
            num_classes: scene.num_classes(),
        };
        let cfg = TrainConfig {
            clip_len: 6,
            ..tiny_train(3)
        };
        let init = init_refiner(&rcfg, 4).unwrap();
        let out = train_refiner(
            &cfg,
            &rcfg,
            (&tracker, &tcfg),
            &data,
            TrainState::new(init.clone(), &cfg),
            None,
            &mut no_log(),
        )
        .unwrap();
        assert_eq!(tracker, before);
        assert!(out.state.params.names().all(|n| n.starts_with("refiner.")));
        assert_ne!(out.state.params, init);
        // one step's gradients cover only refiner parameters
        let spec = sample_batch(&cfg, &data, 0)[0];
        let (_, g) = refiner_step(&init, &rcfg, (&tracker, &tcfg), &cfg, &data, &spec, 0).unwrap();
        assert!(g.names().all(|n| n.starts_with("refiner.")));
        assert_eq!(g.len(), init.len());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            max_iter: 10,
            lr: 1.0,
            ..TrainConfig::tracker()
        };
        assert_eq!(cfg.lr_at(6), 1.0);
        assert_eq!(cfg.lr_at(7), 0.1);
        let bad = TrainConfig {
            decay_at: 1.0,
            ..TrainConfig::tracker()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let s = loss_csv(&[LossRecord {
            iter: 0,
            loss: 1.5,
            lr: 0.001,
        }]);
        assert_eq!(s, "iter,loss,lr\n0,1.5,0.001\n");
    }
}
