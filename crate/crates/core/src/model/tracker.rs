//! Referring tracker: cascaded denoising blocks run frame by frame, each
//! frame referring to the previous frame's denoised queries.

use serde::{Deserialize, Serialize};

use super::heads::{add_heads, class_head, mask_head, HeadVars};
use super::params::{add_attention, add_layer_norm, add_linear, init_stream, Bound, ParamStore};
use crate::datamodel::{Stage, TrackedQuerySequence};
use crate::error::{Error, Result};
use crate::numerics::{
    feed_forward, layer_norm, multi_head_attention, AttentionVars, Tape, Tensor, Var,
    LAYER_NORM_EPS,
};

pub const PREFIX: &str = "tracker";

/// Which inputs feed the identity, query and key/value slots of the
/// referring cross-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcaBinding {
    /// ID = current queries, Q = reference, K = V = current queries; later
    /// blocks take the previous block output in place of the queries.
    NoisyIdentity,
    /// ID = reference, Q = reference, K = V = current queries; later blocks
    /// carry the previous block output on the identity path and keep
    /// attending to the current queries.
    #[default]
    ReferenceIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mask_dim: usize,
    /// Semantic classes, excluding "no object".
    pub num_classes: usize,
    pub binding: RcaBinding,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            mask_dim: 32,
            num_classes: 5,
            binding: RcaBinding::ReferenceIdentity,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.ffn_dim == 0
            || self.mask_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Config("tracker sizes must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "tracker dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_tracker(cfg: &TrackerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = init_stream(seed, "init.tracker");
    let mut s = ParamStore::new();
    let d = cfg.dim;
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.block{l}");
        add_layer_norm(&mut s, &format!("{p}.rca_ln_q"), d);
        add_layer_norm(&mut s, &format!("{p}.rca_ln_kv"), d);
        add_attention(&mut s, &mut rng, &format!("{p}.rca"), d);
        add_layer_norm(&mut s, &format!("{p}.sa_ln"), d);
        add_attention(&mut s, &mut rng, &format!("{p}.sa"), d);
        add_layer_norm(&mut s, &format!("{p}.ffn_ln"), d);
        add_linear(&mut s, &mut rng, &format!("{p}.ffn.fc1"), d, cfg.ffn_dim);
        add_linear(&mut s, &mut rng, &format!("{p}.ffn.fc2"), cfg.ffn_dim, d);
    }
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

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub g: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) fn ln_vars(b: &Bound, p: &str) -> Result<LayerNormVars> {
    Ok(LayerNormVars {
        g: b.var(&format!("{p}.g"))?,
        b: b.var(&format!("{p}.b"))?,
    })
}

pub(crate) fn attn_vars(b: &Bound, p: &str) -> Result<AttentionVars> {
    let v = |n: &str| b.var(&format!("{p}.{n}"));
    Ok(AttentionVars {
        wq: v("q.w")?,
        bq: v("q.b")?,
        wk: v("k.w")?,
        bk: v("k.b")?,
        wv: v("v.w")?,
        bv: v("v.b")?,
        wo: v("o.w")?,
        bo: v("o.b")?,
    })
}

pub(crate) fn ffn_vars(b: &Bound, p: &str) -> Result<FfnVars> {
    let v = |n: &str| b.var(&format!("{p}.{n}"));
    Ok(FfnVars {
        w1: v("fc1.w")?,
        b1: v("fc1.b")?,
        w2: v("fc2.w")?,
        b2: v("fc2.b")?,
    })
}

pub(crate) fn norm(t: &Tape, x: Var, p: &LayerNormVars) -> Result<Var> {
    layer_norm(t, x, p.g, p.b, LAYER_NORM_EPS)
}

pub(crate) fn ffn(t: &Tape, x: Var, p: &FfnVars) -> Result<Var> {
    feed_forward(t, x, p.w1, p.b1, p.w2, p.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub rca_ln_q: LayerNormVars,
    pub rca_ln_kv: LayerNormVars,
    pub rca: AttentionVars,
    pub sa_ln: LayerNormVars,
    pub sa: AttentionVars,
    pub ffn_ln: LayerNormVars,
    pub ffn: FfnVars,
}

#[derive(Clone, Debug)]
pub struct TrackerVars {
    pub blocks: Vec<BlockVars>,
    pub heads: HeadVars,
}

impl TrackerVars {
    pub fn from_bound(b: &Bound, cfg: &TrackerConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{PREFIX}.block{l}");
                Ok(BlockVars {
                    rca_ln_q: ln_vars(b, &format!("{p}.rca_ln_q"))?,
                    rca_ln_kv: ln_vars(b, &format!("{p}.rca_ln_kv"))?,
                    rca: attn_vars(b, &format!("{p}.rca"))?,
                    sa_ln: ln_vars(b, &format!("{p}.sa_ln"))?,
                    sa: attn_vars(b, &format!("{p}.sa"))?,
                    ffn_ln: ln_vars(b, &format!("{p}.ffn_ln"))?,
                    ffn: ffn_vars(b, &format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            heads: HeadVars::from_bound(b, PREFIX)?,
        })
    }
}

/// `ID + MHA(Q, K, V)`.
pub fn rca(
    t: &Tape,
    id: Var,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    if t.shape(id) != t.shape(q) {
        return Err(Error::shape(
            "rca",
            format!("ID {:?} vs Q {:?}", t.shape(id), t.shape(q)),
        ));
    }
    t.add(id, multi_head_attention(t, q, k, v, p, heads)?)
}

/// One denoising block: referring cross-attention from `reference` onto
/// `keys` with `state` on the identity path, self-attention over slots,
/// FFN; pre-norm residual layout.
pub fn td_block(
    t: &Tape,
    state: Var,
    reference: Var,
    keys: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let q = norm(t, reference, &p.rca_ln_q)?;
    let kv = norm(t, keys, &p.rca_ln_kv)?;
    let x = rca(t, state, q, kv, kv, &p.rca, heads)?;
    let h = norm(t, x, &p.sa_ln)?;
    let x = t.add(x, multi_head_attention(t, h, h, h, &p.sa, heads)?)?;
    let h = norm(t, x, &p.ffn_ln)?;
    t.add(x, ffn(t, h, &p.ffn)?)
}

/// Tracker outputs recorded on a tape, one entry per frame.
#[derive(Clone, Debug)]
pub struct TrackerTapeOutput {
    pub queries: Vec<Var>,
    pub class_logits: Vec<Var>,
    pub mask_embeddings: Vec<Var>,
}

/// Runs the tracker over per-frame `[N,D]` inputs already on `t`.
pub fn tracker_forward_on(
    t: &Tape,
    vars: &TrackerVars,
    cfg: &TrackerConfig,
    inputs: &[Var],
) -> Result<TrackerTapeOutput> {
    let mut out = TrackerTapeOutput {
        queries: Vec::with_capacity(inputs.len()),
        class_logits: Vec::with_capacity(inputs.len()),
        mask_embeddings: Vec::with_capacity(inputs.len()),
    };
    for (i, &noisy) in inputs.iter().enumerate() {
        if t.shape(noisy).get(1) != Some(&cfg.dim) {
            return Err(Error::shape(
                "tracker",
                format!("frame {i} queries {:?}, dim {}", t.shape(noisy), cfg.dim),
            ));
        }
        let reference = if i == 0 { noisy } else { out.queries[i - 1] };
        let mut x = match cfg.binding {
            RcaBinding::NoisyIdentity => noisy,
            RcaBinding::ReferenceIdentity => reference,
        };
        for b in &vars.blocks {
            let keys = match cfg.binding {
                RcaBinding::NoisyIdentity => x,
                RcaBinding::ReferenceIdentity => noisy,
            };
            x = td_block(t, x, reference, keys, b, cfg.heads)?;
        }
        out.class_logits.push(class_head(t, x, &vars.heads)?);
        out.mask_embeddings.push(mask_head(t, x, &vars.heads)?);
        out.queries.push(x);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerOutput {
    pub sequence: TrackedQuerySequence,
    /// `[N, K+1]` per frame.
    pub class_logits: Vec<Tensor>,
    /// `[N, Dm]` per frame.
    pub mask_embeddings: Vec<Tensor>,
}

/// Inference with fixed parameters.
pub fn tracker_forward(
    params: &ParamStore,
    cfg: &TrackerConfig,
    input: &TrackedQuerySequence,
) -> Result<TrackerOutput> {
    let t = Tape::new();
    let bound = params.bind(&t, false)?;
    let vars = TrackerVars::from_bound(&bound, cfg)?;
    let inputs = (0..input.num_frames())
        .map(|i| t.constant(input.frame(i)))
        .collect::<Result<Vec<_>>>()?;
    let out = tracker_forward_on(&t, &vars, cfg, &inputs)?;
    let values = |vs: &[Var]| vs.iter().map(|&v| t.value(v).clone()).collect::<Vec<_>>();
    Ok(TrackerOutput {
        sequence: TrackedQuerySequence::from_frames(&values(&out.queries), Stage::Tracker)?,
        class_logits: values(&out.class_logits),
        mask_embeddings: values(&out.mask_embeddings),
    })
}
