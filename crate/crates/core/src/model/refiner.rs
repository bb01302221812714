//! Temporal refiner: per-slot temporal convolution and attention over the
//! whole video, temporal weighting for a video-level class, per-frame masks.
//!
//! Internally queries are kept slot-major, row `n*T + t` for slot `n` at
//! frame `t`.

use serde::{Deserialize, Serialize};

use super::heads::{add_heads, class_head, mask_head, HeadVars};
use super::params::{add_attention, add_layer_norm, add_linear, init_stream, Bound, ParamStore};
use super::tracker::{attn_vars, ffn, ffn_vars, ln_vars, norm, FfnVars, LayerNormVars};
use crate::datamodel::{Stage, TrackedQuerySequence};
use crate::error::{Error, Result};
use crate::numerics::{linear, multi_head_attention, AttentionVars, Tape, Tensor, Var};

pub const PREFIX: &str = "refiner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub kernel: usize,
    pub mask_dim: usize,
    pub num_classes: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            kernel: 5,
            mask_dim: 32,
            num_classes: 5,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.ffn_dim == 0
            || self.mask_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Config("refiner sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "refiner kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "refiner dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Residual branch outputs start at zero, so a fresh refiner passes its
/// input queries through unchanged.
pub fn init_refiner(cfg: &RefinerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = init_stream(seed, "init.refiner");
    let mut s = ParamStore::new();
    let d = cfg.dim;
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.block{l}");
        add_layer_norm(&mut s, &format!("{p}.conv_ln"), d);
        s.insert(format!("{p}.conv.w"), Tensor::zeros([cfg.kernel, d, d]));
        s.insert(format!("{p}.conv.b"), Tensor::zeros([d]));
        add_layer_norm(&mut s, &format!("{p}.attn_ln"), d);
        add_attention(&mut s, &mut rng, &format!("{p}.attn"), d);
        s.insert(format!("{p}.attn.o.w"), Tensor::zeros([d, d]));
        add_layer_norm(&mut s, &format!("{p}.ffn_ln"), d);
        add_linear(&mut s, &mut rng, &format!("{p}.ffn.fc1"), d, cfg.ffn_dim);
        s.insert(format!("{p}.ffn.fc2.w"), Tensor::zeros([cfg.ffn_dim, d]));
        s.insert(format!("{p}.ffn.fc2.b"), Tensor::zeros([d]));
    }
    add_linear(&mut s, &mut rng, &format!("{PREFIX}.weight"), d, 1);
    add_heads(
        &mut s,
        &mut rng,
        PREFIX,
        d,
        cfg.num_classes + 1,
        cfg.mask_dim,
    );
    Ok(s)
}

/// Copies the class and mask heads of a trained tracker into `refiner`.
pub fn warm_start_heads(refiner: &mut ParamStore, tracker: &ParamStore) -> Result<()> {
    let prefix = format!("{}.", super::tracker::PREFIX);
    for (name, value) in tracker.iter() {
        let Some(rest) = name.strip_prefix(&prefix) else {
            continue;
        };
        if rest.starts_with("block") {
            continue;
        }
        let target = format!("{PREFIX}.{rest}");
        let current = refiner.get(&target)?;
        if current.shape() != value.shape() {
            return Err(Error::shape(
                "warm_start_heads",
                format!(
                    "{target} {:?} vs {name} {:?}",
                    current.shape(),
                    value.shape()
                ),
            ));
        }
        refiner.insert(target, value.clone());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockVars {
    pub conv_ln: LayerNormVars,
    pub conv_w: Var,
    pub conv_b: Var,
    pub attn_ln: LayerNormVars,
    pub attn: AttentionVars,
    pub ffn_ln: LayerNormVars,
    pub ffn: FfnVars,
}

#[derive(Clone, Debug)]
pub struct RefinerVars {
    pub blocks: Vec<DecoderBlockVars>,
    pub weight_w: Var,
    pub weight_b: Var,
    pub heads: HeadVars,
}

impl RefinerVars {
    pub fn from_bound(b: &Bound, cfg: &RefinerConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{PREFIX}.block{l}");
                Ok(DecoderBlockVars {
                    conv_ln: ln_vars(b, &format!("{p}.conv_ln"))?,
                    conv_w: b.var(&format!("{p}.conv.w"))?,
                    conv_b: b.var(&format!("{p}.conv.b"))?,
                    attn_ln: ln_vars(b, &format!("{p}.attn_ln"))?,
                    attn: attn_vars(b, &format!("{p}.attn"))?,
                    ffn_ln: ln_vars(b, &format!("{p}.ffn_ln"))?,
                    ffn: ffn_vars(b, &format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            weight_w: b.var(&format!("{PREFIX}.weight.w"))?,
            weight_b: b.var(&format!("{PREFIX}.weight.b"))?,
            heads: HeadVars::from_bound(b, PREFIX)?,
        })
    }
}

fn per_slot(
    t: &Tape,
    x: Var,
    slots: usize,
    frames: usize,
    f: impl Fn(Var) -> Result<Var>,
) -> Result<Var> {
    let parts = (0..slots)
        .map(|n| f(t.slice_rows(x, n * frames, (n + 1) * frames)?))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        t.concat_rows(&parts)
    }
}

/// One decoder block on slot-major `x: [N*T, D]`: temporal convolution,
/// temporal self-attention and FFN, each a pre-norm residual branch. Slots
/// never mix.
pub fn temporal_decoder_block(
    t: &Tape,
    x: Var,
    slots: usize,
    frames: usize,
    p: &DecoderBlockVars,
    heads: usize,
) -> Result<Var> {
    let h = norm(t, x, &p.conv_ln)?;
    let x = t.add(
        x,
        per_slot(t, h, slots, frames, |s| t.conv1d(s, p.conv_w, p.conv_b))?,
    )?;
    let h = norm(t, x, &p.attn_ln)?;
    let x = t.add(
        x,
        per_slot(t, h, slots, frames, |s| {
            multi_head_attention(t, s, s, s, &p.attn, heads)
        })?,
    )?;
    let h = norm(t, x, &p.ffn_ln)?;
    t.add(x, ffn(t, h, &p.ffn)?)
}

/// Softmax-over-time weights `[N, T]` from a scalar logit per frame.
pub fn temporal_weights(
    t: &Tape,
    x: Var,
    slots: usize,
    frames: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let logits = linear(t, x, w, b)?;
    t.softmax(t.reshape(logits, &[slots, frames])?, 1)
}

/// `Σ_t w_t Q^t` per slot, `[N, D]`.
pub fn temporal_weighting(
    t: &Tape,
    x: Var,
    slots: usize,
    frames: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let weights = temporal_weights(t, x, slots, frames, w, b)?;
    let parts = (0..slots)
        .map(|n| {
            let wn = t.slice_rows(weights, n, n + 1)?;
            t.matmul(wn, t.slice_rows(x, n * frames, (n + 1) * frames)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        t.concat_rows(&parts)
    }
}

/// Rows of slot-major layout in frame-major order and back.
pub fn frame_major_order(slots: usize, frames: usize) -> Vec<usize> {
    (0..frames)
        .flat_map(|f| (0..slots).map(move |n| n * frames + f))
        .collect()
}

pub fn slot_major_order(slots: usize, frames: usize) -> Vec<usize> {
    (0..slots)
        .flat_map(|n| (0..frames).map(move |f| f * slots + n))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RefinerTapeOutput {
    /// Slot-major `[N*T, D]`.
    pub queries: Var,
    /// `[N, K+1]`, shared by every frame.
    pub class_logits: Var,
    /// `[N, Dm]` per frame.
    pub mask_embeddings: Vec<Var>,
}

/// Runs the refiner on per-frame `[N,D]` inputs already on `t`.
pub fn refiner_forward_on(
    t: &Tape,
    vars: &RefinerVars,
    cfg: &RefinerConfig,
    inputs: &[Var],
) -> Result<RefinerTapeOutput> {
    let frames = inputs.len();
    if frames == 0 {
        return Err(Error::Invalid("refiner needs at least one frame".into()));
    }
    let shape = t.shape(inputs[0]);
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(Error::shape(
            "refiner",
            format!("queries {shape:?}, dim {}", cfg.dim),
        ));
    }
    let slots = shape[0];
    let stacked = if frames == 1 {
        inputs[0]
    } else {
        t.concat_rows(inputs)?
    };
    let mut x = t.gather_rows(stacked, &slot_major_order(slots, frames))?;
    for b in &vars.blocks {
        x = temporal_decoder_block(t, x, slots, frames, b, cfg.heads)?;
    }
    let pooled = temporal_weighting(t, x, slots, frames, vars.weight_w, vars.weight_b)?;
    let class_logits = class_head(t, pooled, &vars.heads)?;
    let masks = mask_head(t, x, &vars.heads)?;
    let mask_embeddings = (0..frames)
        .map(|f| {
            t.gather_rows(
                masks,
                &(0..slots).map(|n| n * frames + f).collect::<Vec<_>>(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(RefinerTapeOutput {
        queries: x,
        class_logits,
        mask_embeddings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerOutput {
    pub sequence: TrackedQuerySequence,
    /// `[N, K+1]` video-level logits.
    pub class_logits: Tensor,
    /// `[T, N, Dm]`
    pub mask_embeddings: Tensor,
}

/// Inference with fixed parameters.
pub fn refiner_forward(
    params: &ParamStore,
    cfg: &RefinerConfig,
    input: &TrackedQuerySequence,
) -> Result<RefinerOutput> {
    let t = Tape::new();
    let bound = params.bind(&t, false)?;
    let vars = RefinerVars::from_bound(&bound, cfg)?;
    let inputs = (0..input.num_frames())
        .map(|i| t.constant(input.frame(i)))
        .collect::<Result<Vec<_>>>()?;
    let out = refiner_forward_on(&t, &vars, cfg, &inputs)?;
    let (frames, slots) = (input.num_frames(), input.num_slots());
    let q = t
        .value(out.queries)
        .select_rows(&frame_major_order(slots, frames));
    let masks: Vec<Tensor> = out
        .mask_embeddings
        .iter()
        .map(|&v| t.value(v).clone())
        .collect();
    let class_logits = t.value(out.class_logits).clone();
    Ok(RefinerOutput {
        sequence: TrackedQuerySequence::new(q.reshape([frames, slots, cfg.dim])?, Stage::Refiner)?,
        class_logits,
        mask_embeddings: Tensor::stack(&masks)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tracker::{init_tracker, tracker_forward, RcaBinding, TrackerConfig};
    use crate::numerics::check_gradients_many;
    use crate::rng;

    fn small() -> RefinerConfig {
        RefinerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            kernel: 3,
            mask_dim: 4,
            num_classes: 3,
        }
    }

    /// Fresh parameters with the zero-initialized branch outputs randomized.
    fn random_refiner(cfg: &RefinerConfig, seed: u64) -> ParamStore {
        let mut s = init_refiner(cfg, seed).unwrap();
        let mut r = rng::stream(seed, "branches");
        let names: Vec<String> = s
            .names()
            .filter(|n| n.contains(".o.w") || n.contains("ffn.fc2") || n.contains(".conv."))
            .cloned()
            .collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            s.insert(n, Tensor::randn(shape, 0.3, &mut r));
        }
        s
    }

    fn seq(t: usize, n: usize, seed: u64) -> TrackedQuerySequence {
        TrackedQuerySequence::new(
            Tensor::randn([t, n, 8], 1.0, &mut rng::stream(seed, "seq")),
            Stage::Tracker,
        )
        .unwrap()
    }

    #[test]
    fn fresh_refiner_passes_queries_through() {
        let cfg = small();
        let s = init_refiner(&cfg, 1).unwrap();
        let input = seq(5, 3, 2);
        let out = refiner_forward(&s, &cfg, &input).unwrap();
        assert_eq!(out.sequence.queries, input.queries);
        assert_eq!(out.mask_embeddings.shape(), [5, 3, 4]);
        assert_eq!(out.class_logits.shape(), [3, 4]);
    }

    #[test]
    fn passthrough_masks_match_tracker_heads() {
        let rcfg = small();
        let tcfg = TrackerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            mask_dim: 4,
            num_classes: 3,
            binding: RcaBinding::NoisyIdentity,
        };
        let tr = init_tracker(&tcfg, 3).unwrap();
        let mut rf = init_refiner(&rcfg, 4).unwrap();
        warm_start_heads(&mut rf, &tr).unwrap();
        let t_out = tracker_forward(&tr, &tcfg, &seq(4, 3, 5)).unwrap();
        let r_out = refiner_forward(&rf, &rcfg, &t_out.sequence).unwrap();
        for f in 0..4 {
            assert_eq!(r_out.mask_embeddings.index0(f), t_out.mask_embeddings[f]);
        }
        let t_one = tracker_forward(&tr, &tcfg, &seq(1, 3, 6)).unwrap();
        let r_one = refiner_forward(&rf, &rcfg, &t_one.sequence).unwrap();
        assert_eq!(r_one.class_logits, t_one.class_logits[0]);
        let wrong = init_tracker(
            &TrackerConfig {
                mask_dim: 5,
                ..tcfg
            },
            3,
        )
        .unwrap();
        assert!(warm_start_heads(&mut rf, &wrong).is_err());
    }

    #[test]
    fn slots_are_independent_and_time_is_not_causal() {
        let cfg = small();
        let s = random_refiner(&cfg, 6);
        let input = seq(4, 3, 7);
        let a = refiner_forward(&s, &cfg, &input).unwrap();
        // perturb slot 1 everywhere
        let mut b_in = input.clone();
        for f in 0..4 {
            for d in 0..8 {
                let v = b_in.queries.at(&[f, 1, d]);
                b_in.queries.set(&[f, 1, d], v + 0.5);
            }
        }
        let b = refiner_forward(&s, &cfg, &b_in).unwrap();
        for f in 0..4 {
            for n in [0, 2] {
                for d in 0..8 {
                    assert_eq!(
                        a.sequence.queries.at(&[f, n, d]),
                        b.sequence.queries.at(&[f, n, d])
                    );
                }
            }
        }
        assert_eq!(a.class_logits.row(0), b.class_logits.row(0));
        // perturb the last frame: earlier frames change
        let mut c_in = input.clone();
        c_in.queries
            .set(&[3, 0, 0], input.queries.at(&[3, 0, 0]) + 1.0);
        let c = refiner_forward(&s, &cfg, &c_in).unwrap();
        assert_ne!(a.sequence.frame(0), c.sequence.frame(0));
    }

    fn weighting(x: &Tensor, w: &Tensor, b: &Tensor, slots: usize, frames: usize) -> Tensor {
        let t = Tape::new();
        let (x, w, b) = (
            t.constant(x.clone()).unwrap(),
            t.constant(w.clone()).unwrap(),
            t.constant(b.clone()).unwrap(),
        );
        let out = temporal_weighting(&t, x, slots, frames, w, b).unwrap();
        let v = t.value(out).clone();
        v
    }

    #[test]
    fn temporal_weighting_cases() {
        let mut r = rng::stream(8, "tw");
        let w = Tensor::randn([4, 1], 1.0, &mut r);
        let b = Tensor::randn([1], 1.0, &mut r);
        // one frame: weight exactly 1
        let x1 = Tensor::randn([2, 4], 1.0, &mut r);
        assert_eq!(weighting(&x1, &w, &b, 2, 1), x1);
        // zero weights: plain mean
        let x3 = Tensor::randn([6, 4], 1.0, &mut r);
        let mean = weighting(&x3, &Tensor::zeros([4, 1]), &Tensor::zeros([1]), 2, 3);
        for n in 0..2 {
            for d in 0..4 {
                let m = (0..3).map(|f| x3.at(&[n * 3 + f, d])).sum::<f64>() / 3.0;
                assert!((mean.at(&[n, d]) - m).abs() < 1e-12);
            }
        }
        // direct formula
        let got = weighting(&x3, &w, &b, 2, 3);
        for n in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|f| {
                    x3.row(n * 3 + f)
                        .iter()
                        .zip(w.data())
                        .map(|(a, c)| a * c)
                        .sum::<f64>()
                        + b.data()[0]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..4 {
                let want: f64 = (0..3).map(|f| e[f] / z * x3.at(&[n * 3 + f, d])).sum();
                assert!((got.at(&[n, d]) - want).abs() <= 1e-12);
            }
        }
        let t = Tape::new();
        let (xv, wv, bv) = (
            t.constant(x3).unwrap(),
            t.constant(w).unwrap(),
            t.constant(b).unwrap(),
        );
        let ws = temporal_weights(&t, xv, 2, 3, wv, bv).unwrap();
        for n in 0..2 {
            assert!((t.value(ws).row(n).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn decoder_block_gradients_single_frame() {
        let cfg = small();
        let s = random_refiner(&cfg, 9);
        let mut r = rng::stream(10, "x");
        let x = Tensor::randn([2, 8], 1.0, &mut r);
        let coef = Tensor::randn([2, 8], 1.0, &mut r);
        let inputs = vec![
            x,
            s.get("refiner.block0.conv.w").unwrap().clone(),
            s.get("refiner.block0.attn.v.w").unwrap().clone(),
        ];
        let err = check_gradients_many(
            |t, v| {
                let b = s.bind(t, false)?;
                let mut vars = RefinerVars::from_bound(&b, &cfg)?;
                vars.blocks[0].conv_w = v[1];
                vars.blocks[0].attn.wv = v[2];
                let y = temporal_decoder_block(t, v[0], 2, 1, &vars.blocks[0], cfg.heads)?;
                t.sum(t.mul(y, t.constant(coef.clone())?)?)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn full_refiner_gradients() {
        let cfg = small();
        let s = random_refiner(&cfg, 11);
        let input = seq(4, 3, 12);
        let mut inputs: Vec<Tensor> = (0..4).map(|f| input.frame(f)).collect();
        inputs.push(s.get("refiner.weight.w").unwrap().clone());
        inputs.push(s.get("refiner.block1.conv.w").unwrap().clone());
        let err = check_gradients_many(
            |t, v| {
                let b = s.bind(t, false)?;
                let mut vars = RefinerVars::from_bound(&b, &cfg)?;
                vars.weight_w = v[4];
                vars.blocks[1].conv_w = v[5];
                let out = refiner_forward_on(t, &vars, &cfg, &v[..4])?;
                let mut acc = t.sum(t.mul(out.class_logits, out.class_logits)?)?;
                for &m in &out.mask_embeddings {
                    acc = t.add(acc, t.sum(m)?)?;
                }
                Ok(acc)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn layout_orders_are_inverse() {
        let fm = frame_major_order(3, 4);
        let sm = slot_major_order(3, 4);
        for (i, &j) in fm.iter().enumerate() {
            assert_eq!(sm[j], i);
        }
    }
}
