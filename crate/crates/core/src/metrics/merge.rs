//! Combining predictions made at several input resolutions.

use std::collections::BTreeMap;

use crate::datamodel::{fuse_frame, FuseConfig, IdMap, SegmentId, TrackInfo};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One scale's outputs for a frame: mask logits `[N,h,w]` and class logits
/// `[N,K+1]`.
#[derive(Clone, Debug)]
pub struct ScalePrediction {
    pub mask_logits: Tensor,
    pub class_logits: Tensor,
}

/// Bilinear resample of `[C,h,w]` to `[C,height,width]` with half-pixel
/// centers and edge clamping. Same-size input is returned unchanged.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("resize_bilinear", format!("{:?}", x.shape()))),
    };
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s =
                    ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let a = src[base + y0 * w + x0] * (1.0 - fx) + src[base + y0 * w + x1] * fx;
                let b = src[base + y1 * w + x0] * (1.0 - fx) + src[base + y1 * w + x1] * fx;
                out.push(a * (1.0 - fy) + b * fy);
            }
        }
    }
    Tensor::new([c, height, width], out)
}

/// Averages mask logits (after resampling to `height x width`) and class
/// logits over scales.
pub fn merge_logits(
    preds: &[ScalePrediction],
    height: usize,
    width: usize,
) -> Result<(Tensor, Tensor)> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Invalid("multi-scale merge needs at least one scale".into()))?;
    let n = first.class_logits.shape()[0];
    let mut masks = Tensor::zeros([n, height, width]);
    let mut classes = Tensor::zeros(first.class_logits.shape().to_vec());
    for (i, p) in preds.iter().enumerate() {
        if p.class_logits.shape() != first.class_logits.shape()
            || p.mask_logits.shape().first() != Some(&n)
        {
            return Err(Error::shape(
                "multi_scale_merge",
                format!(
                    "scale {i}: masks {:?}, classes {:?}",
                    p.mask_logits.shape(),
                    p.class_logits.shape()
                ),
            ));
        }
        let r = resize_bilinear(&p.mask_logits, height, width)?;
        masks
            .data_mut()
            .iter_mut()
            .zip(r.data())
            .for_each(|(a, b)| *a += b);
        classes
            .data_mut()
            .iter_mut()
            .zip(p.class_logits.data())
            .for_each(|(a, b)| *a += b);
    }
    let s = preds.len() as f64;
    Ok((masks.map(|v| v / s), classes.map(|v| v / s)))
}

/// Merged logits fused into one frame's id map.
pub fn multi_scale_merge(
    preds: &[ScalePrediction],
    height: usize,
    width: usize,
    num_thing_classes: usize,
    cfg: &FuseConfig,
) -> Result<(IdMap, BTreeMap<SegmentId, TrackInfo>)> {
    let (masks, classes) = merge_logits(preds, height, width)?;
    fuse_frame(&masks, height, width, &classes, num_thing_classes, cfg)
}
