//! Synthetic videos of moving shapes over banded backgrounds, and a stand-in
//! for a frozen per-frame segmenter.
//!
//! Every video gets a random orthonormal basis `b_s` in `R^(Dm-1)`, one
//! vector per segment. Pixel features are `[b_seg; 1]` (void pixels
//! `[0; 1]`), so a mask embedding `[2c·b_s; -c]` yields logit `+c` inside
//! segment `s` and `-c` everywhere else.
//!
//! Query embeddings are laid out as
//! `[identity (Dm-1) | class one-hot (K+1) | appearance (rest)]` and
//! normalized. Noise on the appearance block has standard deviation `σ`;
//! the identity and class blocks get `σ·identity_noise_ratio`. Class logits
//! and mask embeddings are decoded from the noisy identity and class
//! blocks, so masks stay sharp while cosine similarity over the whole
//! embedding degrades with `σ`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameQueries, IdMap, PanopticVideo, SegmentId, TrackInfo, VideoClip, VOID};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

/// First segment id used for stuff classes in generated ground truth.
pub const GT_STUFF_ID_BASE: SegmentId = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_things: usize,
    pub max_things: usize,
    pub stuff_regions: usize,
    pub num_thing_classes: usize,
    pub num_stuff_classes: usize,
    /// Shape half-extent range as a fraction of the shorter grid side.
    pub min_size: f64,
    pub max_size: f64,
    /// Pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per-frame probability that a hidden thing appears.
    pub appear_prob: f64,
    /// Per-frame probability that a visible thing disappears.
    pub disappear_prob: f64,
    pub noise: f64,
    pub identity_noise_ratio: f64,
    pub distractors: usize,
    pub query_dim: usize,
    pub feature_dim: usize,
    pub mask_scale: f64,
    pub class_scale: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_frames: 16,
            height: 32,
            width: 32,
            min_things: 2,
            max_things: 5,
            stuff_regions: 3,
            num_thing_classes: 3,
            num_stuff_classes: 2,
            min_size: 0.12,
            max_size: 0.25,
            min_speed: 0.5,
            max_speed: 2.0,
            appear_prob: 0.1,
            disappear_prob: 0.05,
            noise: 0.3,
            identity_noise_ratio: 0.1,
            distractors: 2,
            query_dim: 64,
            feature_dim: 32,
            mask_scale: 8.0,
            class_scale: 6.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Number of real classes `K` (things first, then stuff).
    pub fn num_classes(&self) -> usize {
        self.num_thing_classes + self.num_stuff_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return bad("num_frames, height and width must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.identity_noise_ratio >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for (name, p) in [
            ("appear_prob", self.appear_prob),
            ("disappear_prob", self.disappear_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if self.min_things > self.max_things {
            return bad("min_things exceeds max_things".into());
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed) {
            return bad("speed range is invalid".into());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("size range is invalid".into());
        }
        if self.num_thing_classes == 0 && self.max_things > 0 {
            return bad("things requested but num_thing_classes is 0".into());
        }
        if self.num_stuff_classes == 0 && self.stuff_regions > 0 {
            return bad("stuff regions requested but num_stuff_classes is 0".into());
        }
        if self.num_classes() == 0 || self.num_classes() > 64 {
            return bad("class count must lie in 1..=64".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        let segments = self.max_things + self.stuff_regions.min(self.num_stuff_classes);
        if segments > self.feature_dim - 1 {
            return bad(format!(
                "{segments} segments do not fit a {}-dim feature basis",
                self.feature_dim - 1
            ));
        }
        if self.query_dim < self.feature_dim + self.num_classes() + 1 {
            return bad(format!(
                "query_dim {} is below feature_dim + num_classes + 1",
                self.query_dim
            ));
        }
        if segments + self.distractors >= 999 {
            return bad("too many queries per frame".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
struct Thing {
    shape: Shape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    vx: f64,
    vy: f64,
    visible: bool,
}

impl Thing {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        match self.shape {
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    fn step(&mut self, w: f64, h: f64) {
        self.cx += self.vx;
        self.cy += self.vy;
        bounce(&mut self.cx, &mut self.vx, self.rx, w);
        bounce(&mut self.cy, &mut self.vy, self.ry, h);
    }
}

fn bounce(c: &mut f64, v: &mut f64, r: f64, extent: f64) {
    let (lo, hi) = (r.min(extent / 2.0), (extent - r).max(extent / 2.0));
    if *c < lo {
        *c = 2.0 * lo - *c;
        *v = -*v;
    } else if *c > hi {
        *c = 2.0 * hi - *c;
        *v = -*v;
    }
    *c = c.clamp(lo, hi);
}

/// Random orthonormal rows `[n, d]` by Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

/// Generates one video and its exact panoptic ground truth.
pub fn generate_clip(cfg: &SceneConfig) -> Result<(VideoClip, PanopticVideo)> {
    cfg.validate()?;
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.num_frames);
    let mut r = rng::stream(cfg.seed, "synth.scene");

    // stuff: horizontal bands, bands of one class share an id
    let mut tracks = BTreeMap::new();
    let mut background = vec![VOID; h * w];
    if cfg.stuff_regions > 0 {
        let mut cuts: Vec<usize> = (0..cfg.stuff_regions - 1)
            .map(|_| r.random_range(0..=h))
            .collect();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(h);
        for band in 0..cfg.stuff_regions {
            let class = cfg.num_thing_classes + r.random_range(0..cfg.num_stuff_classes);
            let id = GT_STUFF_ID_BASE + class as SegmentId;
            tracks.insert(
                id,
                TrackInfo {
                    class,
                    is_thing: false,
                },
            );
            for y in cuts[band]..cuts[band + 1] {
                background[y * w..(y + 1) * w].fill(id);
            }
        }
    }

    let n_things = r.random_range(cfg.min_things..=cfg.max_things);
    let side = h.min(w) as f64;
    let mut things: Vec<Thing> = (0..n_things)
        .map(|i| {
            let class = r.random_range(0..cfg.num_thing_classes);
            tracks.insert(
                i as SegmentId + 1,
                TrackInfo {
                    class,
                    is_thing: true,
                },
            );
            let rx = side * r.random_range(cfg.min_size..=cfg.max_size);
            let ry = side * r.random_range(cfg.min_size..=cfg.max_size);
            let speed = r.random_range(cfg.min_speed..=cfg.max_speed);
            let angle = r.random_range(0.0..std::f64::consts::TAU);
            Thing {
                shape: if r.random_bool(0.5) {
                    Shape::Rect
                } else {
                    Shape::Ellipse
                },
                cx: r.random_range(0.0..w as f64),
                cy: r.random_range(0.0..h as f64),
                rx,
                ry,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                visible: !r.random_bool(cfg.appear_prob),
            }
        })
        .collect();
    for th in &mut things {
        bounce(&mut th.cx, &mut th.vx, th.rx, w as f64);
        bounce(&mut th.cy, &mut th.vy, th.ry, h as f64);
    }

    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            for th in &mut things {
                th.step(w as f64, h as f64);
                th.visible = if th.visible {
                    !r.random_bool(cfg.disappear_prob)
                } else {
                    r.random_bool(cfg.appear_prob)
                };
            }
        }
        let mut ids = background.clone();
        // later things are drawn on top
        for (i, th) in things.iter().enumerate() {
            if !th.visible {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    if th.covers(x, y) {
                        ids[y * w + x] = i as SegmentId + 1;
                    }
                }
            }
        }
        frames.push(IdMap::new(h, w, ids)?);
    }
    let video = PanopticVideo::new(frames, tracks)?;
    let video = video.slice(0, t_len);
    let clip = clip_for(&video, cfg)?;
    Ok((clip, video))
}

/// Palette rows: 0 is void, then one row per track in id order.
fn clip_for(video: &PanopticVideo, cfg: &SceneConfig) -> Result<VideoClip> {
    let basis = segment_basis(video, cfg);
    let dm = cfg.feature_dim;
    let mut palette = Tensor::zeros([video.tracks().len() + 1, dm]);
    palette.set(&[0, dm - 1], 1.0);
    let mut row_of = BTreeMap::new();
    for (row, (&id, b)) in basis.iter().enumerate() {
        let r = palette.row_mut(row + 1);
        r[..dm - 1].copy_from_slice(b);
        r[dm - 1] = 1.0;
        row_of.insert(id, (row + 1) as u16);
    }
    let index = video
        .frames()
        .iter()
        .map(|f| {
            f.ids
                .iter()
                .map(|id| row_of.get(id).copied().unwrap_or(0))
                .collect()
        })
        .collect();
    VideoClip::new(video.height(), video.width(), palette, index)
}

fn segment_basis(video: &PanopticVideo, cfg: &SceneConfig) -> BTreeMap<SegmentId, Vec<f64>> {
    let mut r = rng::stream(cfg.seed, "synth.basis");
    let rows = orthonormal_rows(video.tracks().len(), cfg.feature_dim - 1, &mut r);
    video.tracks().keys().copied().zip(rows).collect()
}

/// Output of the segmenter stand-in for one video.
#[derive(Clone, Debug)]
pub struct StubOutput {
    pub frames: Vec<FrameQueries>,
    /// Per frame, ground-truth id behind each query (`None` for distractors).
    pub sources: Vec<Vec<Option<SegmentId>>>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Converts ground truth into noisy, shuffled per-frame queries.
pub fn segmenter_stub(gt: &PanopticVideo, cfg: &SceneConfig) -> Result<StubOutput> {
    cfg.validate()?;
    let k = cfg.num_classes();
    let (d, dm) = (cfg.query_dim, cfg.feature_dim);
    let id_dims = dm - 1;
    let cls_off = id_dims;
    let app_off = id_dims + k + 1;
    let app_dims = d - app_off;
    let basis = segment_basis(gt, cfg);

    let mut canon_rng = rng::stream(cfg.seed, "stub.canonical");
    let appearance = |rng: &mut Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..app_dims).map(|_| rng::normal(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|a| a / n).collect()
    };
    // (source id, basis, class) per query source; distractors have no basis
    let mut sources: Vec<(Option<SegmentId>, Option<Vec<f64>>, usize, Vec<f64>)> = gt
        .tracks()
        .iter()
        .map(|(&id, info)| {
            (
                Some(id),
                Some(basis[&id].clone()),
                info.class,
                appearance(&mut canon_rng),
            )
        })
        .collect();
    for _ in 0..cfg.distractors {
        sources.push((None, None, k, appearance(&mut canon_rng)));
    }
    let n = sources.len();
    if n == 0 {
        return Err(Error::Invalid(
            "video has no segments and no distractors".into(),
        ));
    }

    // each block carries unit norm before the joint normalization
    let norm = 1.0 / 3f64.sqrt();
    let sigma_id = cfg.noise * cfg.identity_noise_ratio;
    let mut noise_rng = rng::stream(cfg.seed, "stub.noise");
    let mut perm_rng = rng::stream(cfg.seed, "stub.perm");
    let mut frames = Vec::with_capacity(gt.num_frames());
    let mut frame_sources = Vec::with_capacity(gt.num_frames());
    for t in 0..gt.num_frames() {
        let present = gt.frame(t).distinct();
        let mut emb = Tensor::zeros([n, d]);
        let mut cls = Tensor::zeros([n, k + 1]);
        let mut msk = Tensor::zeros([n, dm]);
        for (q, (id, b, class, app)) in sources.iter().enumerate() {
            let visible = id.is_some_and(|id| present.contains(&id));
            let row = emb.row_mut(q);
            if visible {
                for (i, &v) in b.as_ref().unwrap().iter().enumerate() {
                    row[i] = v * norm;
                }
            }
            row[cls_off + if visible { *class } else { k }] = norm;
            for (i, &v) in app.iter().enumerate() {
                row[app_off + i] = v * norm;
            }
            for (i, v) in row.iter_mut().enumerate() {
                let s = if i < app_off { sigma_id } else { cfg.noise };
                if s > 0.0 {
                    *v += s * rng::normal(&mut noise_rng);
                }
                *v = round_f32(*v);
            }
            let row = emb.row(q).to_vec();
            let crow = cls.row_mut(q);
            for c in 0..=k {
                crow[c] = round_f32(cfg.class_scale * row[cls_off + c] / norm);
            }
            let mrow = msk.row_mut(q);
            for i in 0..id_dims {
                mrow[i] = round_f32(2.0 * cfg.mask_scale * row[i] / norm);
            }
            mrow[dm - 1] = round_f32(-cfg.mask_scale);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut perm_rng);
        let fq = FrameQueries::new(emb, cls, msk)?.reordered(&order);
        frame_sources.push(order.iter().map(|&q| sources[q].0).collect());
        frames.push(fq);
    }
    Ok(StubOutput {
        frames,
        sources: frame_sources,
    })
}
