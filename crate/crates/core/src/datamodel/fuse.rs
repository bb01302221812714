//! Panoptic fusion of per-query masks into a single id map per frame.
//!
//! Predicted segment ids encode the class and the query slot so that a slot
//! keeps its id across frames: things get `(class+1)*1000 + slot + 1`,
//! stuff gets `(class+1)*1000` (one id per class, which merges all queries
//! of a stuff class).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::panoptic::{IdMap, PanopticVideo, SegmentId, TrackInfo, VOID};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ID_CLASS_STRIDE: SegmentId = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    /// Minimum object score for a query to take part.
    pub object_threshold: f64,
    /// Minimum fraction of its own mask a query must keep after competition.
    pub overlap_threshold: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            object_threshold: 0.5,
            overlap_threshold: 0.8,
        }
    }
}

pub fn thing_id(class: usize, slot: usize) -> SegmentId {
    (class as SegmentId + 1) * ID_CLASS_STRIDE + slot as SegmentId + 1
}

pub fn stuff_id(class: usize) -> SegmentId {
    (class as SegmentId + 1) * ID_CLASS_STRIDE
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fuses one frame. `mask_logits: [N, H*W]` (or `[N,H,W]`),
/// `class_logits: [N, K+1]`; classes below `num_thing_classes` are things.
pub fn fuse_frame(
    mask_logits: &Tensor,
    height: usize,
    width: usize,
    class_logits: &Tensor,
    num_thing_classes: usize,
    cfg: &FuseConfig,
) -> Result<(IdMap, BTreeMap<SegmentId, TrackInfo>)> {
    let (n, kp1) = class_logits.dims2()?;
    let hw = height * width;
    if mask_logits.len() != n * hw || mask_logits.shape()[0] != n {
        return Err(Error::shape(
            "panoptic_fuse",
            format!(
                "mask logits {:?} for {n} queries on {height}x{width}",
                mask_logits.shape()
            ),
        ));
    }
    let no_object = kp1 - 1;
    let mut kept = Vec::new();
    for q in 0..n {
        let probs = softmax_row(class_logits.row(q));
        let (mut label, mut best) = (0, f64::NEG_INFINITY);
        for (c, &p) in probs.iter().enumerate() {
            if p > best {
                best = p;
                label = c;
            }
        }
        if label == no_object {
            continue;
        }
        // label is the argmax over real classes here, so `best` is the score
        if best >= cfg.object_threshold {
            kept.push((q, label, best));
        }
    }
    let logits = mask_logits.data();
    let mut winner = vec![usize::MAX; hw];
    let mut win_area = vec![0usize; kept.len()];
    for (px, w) in winner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, &(q, _, score)) in kept.iter().enumerate() {
            let v = score * sigmoid(logits[q * hw + px]);
            if v > best {
                best = v;
                *w = k;
            }
        }
        if *w != usize::MAX {
            win_area[*w] += 1;
        }
    }
    let mut ids = vec![VOID; hw];
    let mut tracks = BTreeMap::new();
    for (k, &(q, class, _)) in kept.iter().enumerate() {
        let original = (0..hw).filter(|&px| logits[q * hw + px] >= 0.0).count();
        let final_px: Vec<usize> = (0..hw)
            .filter(|&px| winner[px] == k && logits[q * hw + px] >= 0.0)
            .collect();
        if win_area[k] == 0 || original == 0 || final_px.is_empty() {
            continue;
        }
        if (win_area[k] as f64) / (original as f64) < cfg.overlap_threshold {
            continue;
        }
        let is_thing = class < num_thing_classes;
        let id = if is_thing {
            thing_id(class, q)
        } else {
            stuff_id(class)
        };
        for px in final_px {
            ids[px] = id;
        }
        tracks.insert(id, TrackInfo { class, is_thing });
    }
    Ok((IdMap::new(height, width, ids)?, tracks))
}

/// Single-frame fusion on `[N,H,W]` logits.
pub fn panoptic_fuse(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    num_thing_classes: usize,
    cfg: &FuseConfig,
) -> Result<(IdMap, BTreeMap<SegmentId, TrackInfo>)> {
    let (h, w) = match mask_logits.shape()[..] {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "panoptic_fuse",
                format!("mask logits {:?}", mask_logits.shape()),
            ))
        }
    };
    fuse_frame(mask_logits, h, w, class_logits, num_thing_classes, cfg)
}

/// Fuses every frame and assembles a video; frames are `(mask logits
/// [N,H*W], class logits [N,K+1])`.
pub fn fuse_video(
    frames: &[(Tensor, Tensor)],
    height: usize,
    width: usize,
    num_thing_classes: usize,
    cfg: &FuseConfig,
) -> Result<PanopticVideo> {
    let mut maps = Vec::with_capacity(frames.len());
    let mut tracks = BTreeMap::new();
    for (m, c) in frames {
        let (map, t) = fuse_frame(m, height, width, c, num_thing_classes, cfg)?;
        maps.push(map);
        tracks.extend(t);
    }
    PanopticVideo::new(maps, tracks)
}
