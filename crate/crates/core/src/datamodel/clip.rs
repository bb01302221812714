//! Video clips with per-pixel segmenter features, and mask rasterization.
//!
//! Pixel features of the synthetic segmenter are piecewise constant: each
//! pixel points into a small palette of `Dm`-vectors. The palette form is
//! stored on disk (`DVPSF1` files) and expanded to dense `[Dm,H,W]` tensors
//! on demand.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 7] = b"DVPSF1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    height: usize,
    width: usize,
    /// `[P, Dm]`
    palette: Tensor,
    /// Per frame, palette row of each pixel (row-major).
    index: Vec<Vec<u16>>,
}

impl VideoClip {
    pub fn new(height: usize, width: usize, palette: Tensor, index: Vec<Vec<u16>>) -> Result<Self> {
        let (p, _) = palette.dims2()?;
        if index.is_empty() {
            return Err(Error::Invalid("clip has no frames".into()));
        }
        for (t, frame) in index.iter().enumerate() {
            if frame.len() != height * width {
                return Err(Error::shape(
                    "VideoClip",
                    format!("frame {t} has {} pixels", frame.len()),
                ));
            }
            if frame.iter().any(|&i| usize::from(i) >= p) {
                return Err(Error::Integrity(format!(
                    "frame {t} indexes past the {p}-row palette"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            palette,
            index,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.index.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.palette.shape()[1]
    }

    pub fn palette(&self) -> &Tensor {
        &self.palette
    }

    pub fn frame_index(&self, t: usize) -> &[u16] {
        &self.index[t]
    }

    /// Dense `[Dm, H, W]` features of frame `t`.
    pub fn pixel_features(&self, t: usize) -> Tensor {
        let dm = self.feature_dim();
        let hw = self.num_pixels();
        let mut data = vec![0.0; dm * hw];
        for (p, &row) in self.index[t].iter().enumerate() {
            for (c, &v) in self.palette.row(usize::from(row)).iter().enumerate() {
                data[c * hw + p] = v;
            }
        }
        Tensor::new([dm, self.height, self.width], data).expect("extents are consistent")
    }

    /// Mask logits `[N, H*W]` of frame `t` for `mask_embeddings: [N, Dm]`.
    /// Equal to [`rasterize_masks`] on [`Self::pixel_features`], computed
    /// through the palette.
    pub fn mask_logits(&self, t: usize, mask_embeddings: &Tensor) -> Result<Tensor> {
        let (n, dm) = mask_embeddings.dims2()?;
        if dm != self.feature_dim() {
            return Err(Error::shape(
                "mask_logits",
                format!("Dm {dm} vs features {}", self.feature_dim()),
            ));
        }
        let p = self.palette.shape()[0];
        let mut per_row = vec![0.0; n * p];
        for q in 0..n {
            let m = mask_embeddings.row(q);
            for r in 0..p {
                per_row[q * p + r] = dot(m, self.palette.row(r));
            }
        }
        let hw = self.num_pixels();
        let mut out = vec![0.0; n * hw];
        for q in 0..n {
            for (px, &r) in self.index[t].iter().enumerate() {
                out[q * hw + px] = per_row[q * p + usize::from(r)];
            }
        }
        Tensor::new([n, hw], out)
    }

    /// Tape version of [`Self::mask_logits`]; `palette` must be this clip's
    /// palette recorded on `tape` (see [`Self::palette_on`]).
    pub fn mask_logits_on(
        &self,
        tape: &Tape,
        palette: Var,
        t: usize,
        mask_embeddings: Var,
    ) -> Result<Var> {
        let per_row = tape.matmul(palette, tape.transpose(mask_embeddings)?)?;
        let idx: Vec<usize> = self.index[t].iter().map(|&r| usize::from(r)).collect();
        let gathered = tape.gather_rows(per_row, &idx)?;
        tape.transpose(gathered)
    }

    pub fn palette_on(&self, tape: &Tape) -> Result<Var> {
        tape.constant(self.palette.clone())
    }

    pub fn slice(&self, start: usize, end: usize) -> VideoClip {
        VideoClip {
            height: self.height,
            width: self.width,
            palette: self.palette.clone(),
            index: self.index[start..end].to_vec(),
        }
    }

    /// Nearest-neighbour resample to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> VideoClip {
        let index = self
            .index
            .iter()
            .map(|f| {
                let mut out = Vec::with_capacity(height * width);
                for y in 0..height {
                    let sy = y * self.height / height;
                    for x in 0..width {
                        out.push(f[sy * self.width + x * self.width / width]);
                    }
                }
                out
            })
            .collect();
        VideoClip {
            height,
            width,
            palette: self.palette.clone(),
            index,
        }
    }

    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> VideoClip {
        let index = self
            .index
            .iter()
            .map(|f| {
                let mut out = Vec::with_capacity(height * width);
                for y in top..top + height {
                    out.extend_from_slice(&f[y * self.width + left..y * self.width + left + width]);
                }
                out
            })
            .collect();
        VideoClip {
            height,
            width,
            palette: self.palette.clone(),
            index,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `logits[n,h,w] = <mask_embeddings[n], pixel_features[:,h,w]>`.
pub fn rasterize_masks(mask_embeddings: &Tensor, pixel_features: &Tensor) -> Result<Tensor> {
    let (n, dm) = mask_embeddings.dims2()?;
    let (fd, h, w) = match pixel_features.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => {
            return Err(Error::shape(
                "rasterize_masks",
                format!("features {:?}", pixel_features.shape()),
            ))
        }
    };
    if fd != dm {
        return Err(Error::shape(
            "rasterize_masks",
            format!("embedding dim {dm} vs feature dim {fd}"),
        ));
    }
    let flat = pixel_features.clone().reshape([dm, h * w])?;
    mask_embeddings.matmul(&flat)?.reshape([n, h, w])
}

pub fn encode_features(clip: &VideoClip) -> Result<Vec<u8>> {
    let (p, dm) = clip.palette.dims2()?;
    let mut out = FEATURE_MAGIC.to_vec();
    for v in [clip.num_frames(), clip.height, clip.width, dm, p] {
        let v = u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in clip.palette.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for frame in &clip.index {
        for &i in frame {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 7 || &bytes[..7] != FEATURE_MAGIC {
        return Err(Error::UnrecognizedFormat(
            "missing DVPSF1 magic in feature file".into(),
        ));
    }
    let need = |pos: usize, n: usize| -> Result<()> {
        if bytes.len() < pos + n {
            Err(Error::Truncated {
                offset: bytes.len(),
                needed: pos + n - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(7, 20)?;
    let ext: Vec<usize> = (0..5)
        .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let (t, h, w, dm, p) = (ext[0], ext[1], ext[2], ext[3], ext[4]);
    let pal_bytes = p
        .checked_mul(dm)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::ExtentOverflow("palette size".into()))?;
    let idx_bytes = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| Error::ExtentOverflow("index size".into()))?;
    let mut pos = 27;
    need(pos, pal_bytes.saturating_add(idx_bytes))?;
    let palette: Vec<f64> = bytes[pos..pos + pal_bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += pal_bytes;
    let index = (0..t)
        .map(|f| {
            let s = pos + f * h * w * 2;
            bytes[s..s + h * w * 2]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        })
        .collect();
    VideoClip::new(h, w, Tensor::new([p, dm], palette)?, index)
}

pub fn save_features(path: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::write(path, encode_features(clip)?).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<VideoClip> {
    decode_features(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn clip() -> VideoClip {
        let mut r = rng::stream(5, "clip-test");
        let palette = Tensor::randn([3, 4], 1.0, &mut r);
        VideoClip::new(
            2,
            3,
            palette,
            vec![vec![0, 1, 2, 2, 1, 0], vec![1, 1, 1, 0, 0, 2]],
        )
        .unwrap()
    }

    #[test]
    fn zero_embeddings_give_half_probability() {
        let c = clip();
        let logits = rasterize_masks(&Tensor::zeros([2, 4]), &c.pixel_features(0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = 1.0 / (1.0 + (-logits.data()[0]).exp());
        assert_eq!(p, 0.5);
    }

    #[test]
    fn one_hot_embedding_selects_channel() {
        let c = clip();
        let f = c.pixel_features(1);
        let mut e = Tensor::zeros([1, 4]);
        e.set(&[0, 2], 1.0);
        let logits = rasterize_masks(&e, &f).unwrap();
        assert_eq!(logits.data(), &f.data()[2 * 6..3 * 6]);
    }

    #[test]
    fn rasterize_matches_double_loop() {
        let mut r = rng::stream(6, "clip-test");
        let emb = Tensor::randn([2, 5], 1.0, &mut r);
        let feat = Tensor::randn([5, 2, 3], 1.0, &mut r);
        let out = rasterize_masks(&emb, &feat).unwrap();
        for n in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    let v: f64 = (0..5).map(|d| emb.at(&[n, d]) * feat.at(&[d, y, x])).sum();
                    assert!((out.at(&[n, y, x]) - v).abs() <= 1e-12);
                }
            }
        }
        assert!(rasterize_masks(&Tensor::zeros([1, 4]), &feat).is_err());
    }

    #[test]
    fn palette_path_matches_dense_path() {
        let c = clip();
        let mut r = rng::stream(7, "clip-test");
        let emb = Tensor::randn([3, 4], 1.0, &mut r);
        for t in 0..2 {
            let dense = rasterize_masks(&emb, &c.pixel_features(t)).unwrap();
            let fast = c.mask_logits(t, &emb).unwrap();
            assert!(dense
                .data()
                .iter()
                .zip(fast.data())
                .all(|(a, b)| (a - b).abs() < 1e-12));
            let tape = Tape::new();
            let pal = c.palette_on(&tape).unwrap();
            let e = tape.constant(emb.clone()).unwrap();
            let v = c.mask_logits_on(&tape, pal, t, e).unwrap();
            assert!(tape.value(v).max_abs_diff(&fast) < 1e-12);
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let c = clip();
        let bytes = encode_features(&c).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), c);
        assert!(matches!(
            decode_features(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
