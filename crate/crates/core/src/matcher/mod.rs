//! Query alignment across frames and prediction/ground-truth matching.

pub mod hungarian;

use serde::{Deserialize, Serialize};

pub use hungarian::{assign_rect, brute_force, hungarian, hungarian_padded, Assignment};

use crate::datamodel::{FrameQueries, PanopticVideo, SegmentId, Stage, TrackedQuerySequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `1 - cos(a, b)`; zero vectors count as orthogonal to everything.
pub fn cosine_cost(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // sqrt(x*x) == x exactly, so a vector against itself costs exactly 0
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

/// Pre-matched queries: frame 0 in its own order, every later frame
/// reordered to follow the previous aligned frame.
#[derive(Clone, Debug)]
pub struct Prematched {
    pub sequence: TrackedQuerySequence,
    /// Segmenter outputs in aligned slot order.
    pub frames: Vec<FrameQueries>,
    /// `orders[t][slot]` is the index of the raw query of frame `t` in that slot.
    pub orders: Vec<Vec<usize>>,
}

pub fn prematch_chain(frames: &[FrameQueries]) -> Result<Prematched> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("cannot pre-match an empty sequence".into()))?;
    let n = first.len();
    if let Some((t, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.len() != n || f.dim() != first.dim())
    {
        return Err(Error::shape(
            "prematch_chain",
            format!(
                "frame {t} has {} queries of width {}, frame 0 has {n}",
                f.len(),
                f.dim()
            ),
        ));
    }
    let mut aligned = vec![first.clone()];
    let mut orders = vec![(0..n).collect::<Vec<_>>()];
    for cur in &frames[1..] {
        let prev = &aligned.last().unwrap().embeddings;
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = cosine_cost(prev.row(i), cur.embeddings.row(j));
            }
        }
        let a = assign_rect(&cost, n, n);
        aligned.push(cur.reordered(&a.perm));
        orders.push(a.perm);
    }
    let emb: Vec<Tensor> = aligned.iter().map(|f| f.embeddings.clone()).collect();
    Ok(Prematched {
        sequence: TrackedQuerySequence::from_frames(&emb, Stage::Prematch)?,
        frames: aligned,
        orders,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub class: f64,
    pub mask: f64,
    pub dice: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            mask: 5.0,
            dice: 5.0,
        }
    }
}

/// Smoothing term of the Dice coefficient; keeps empty-vs-empty at zero
/// loss and disjoint masks within 1e-6 of one.
pub const DICE_EPS: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy of mask logits against a 0/1 target.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    s / logits.len() as f64
}

/// `1 - (2|p∩y| + ε) / (|p| + |y| + ε)` with soft `p = sigmoid(logits)`.
pub fn dice_loss(logits: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let p = sigmoid(x);
        inter += p * y;
        ps += p;
        ys += y;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (ps + ys + DICE_EPS)
}

/// Pairwise matching cost of one prediction against one ground-truth
/// segment: `λ_cls·(-p̂(c)) + λ_mask·BCE + λ_dice·Dice`.
pub fn match_cost(
    class_probs: &[f64],
    mask_logits: &[f64],
    gt_class: usize,
    gt_mask: &[f64],
    w: &MatchWeights,
) -> Result<f64> {
    if mask_logits.len() != gt_mask.len() {
        return Err(Error::shape(
            "match_cost",
            format!(
                "{} predicted pixels vs {} ground-truth pixels",
                mask_logits.len(),
                gt_mask.len()
            ),
        ));
    }
    if gt_class >= class_probs.len() {
        return Err(Error::Invalid(format!(
            "class {gt_class} outside {} logits",
            class_probs.len()
        )));
    }
    let mut c = 0.0;
    if w.class != 0.0 {
        c -= w.class * class_probs[gt_class];
    }
    if w.mask != 0.0 {
        c += w.mask * bce_with_logits(mask_logits, gt_mask);
    }
    if w.dice != 0.0 {
        c += w.dice * dice_loss(mask_logits, gt_mask);
    }
    Ok(c)
}

/// One ground-truth object over a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub id: SegmentId,
    pub class: usize,
    pub is_thing: bool,
    /// First frame with a nonempty mask.
    pub first_frame: usize,
    /// `[T, H*W]`, 1 inside the segment.
    pub masks: Tensor,
}

impl GroundTruthTrack {
    pub fn mask(&self, t: usize) -> &[f64] {
        self.masks.row(t)
    }

    pub fn is_present(&self, t: usize) -> bool {
        self.masks.row(t).iter().any(|&v| v > 0.0)
    }
}

/// Tracks with at least one pixel in the video, in id order.
pub fn ground_truth_tracks(video: &PanopticVideo) -> Vec<GroundTruthTrack> {
    let hw = video.height() * video.width();
    let t_len = video.num_frames();
    video
        .tracks()
        .iter()
        .filter_map(|(&id, info)| {
            let mut data = vec![0.0; t_len * hw];
            let mut first = None;
            for (t, f) in video.frames().iter().enumerate() {
                for (px, &v) in f.ids.iter().enumerate() {
                    if v == id {
                        data[t * hw + px] = 1.0;
                        first.get_or_insert(t);
                    }
                }
            }
            Some(GroundTruthTrack {
                id,
                class: info.class,
                is_thing: info.is_thing,
                first_frame: first?,
                masks: Tensor::new([t_len, hw], data).ok()?,
            })
        })
        .collect()
}

/// Per-frame class probabilities and mask logits of a query set.
#[derive(Clone, Debug)]
pub struct ClipPredictions {
    /// Per frame `[N, K+1]`, rows summing to one.
    pub class_probs: Vec<Tensor>,
    /// Per frame `[N, H*W]`.
    pub mask_logits: Vec<Tensor>,
}

impl ClipPredictions {
    pub fn num_frames(&self) -> usize {
        self.mask_logits.len()
    }

    pub fn num_queries(&self) -> usize {
        self.mask_logits[0].shape()[0]
    }
}

/// A stage matches on its own predictions from the halfway iteration on,
/// and on the upstream stage's before that.
pub fn uses_own_predictions(iter: usize, max_iter: usize) -> bool {
    2 * iter >= max_iter
}

fn assign(cost: Vec<f64>, g: usize, n: usize) -> Result<Assignment> {
    if g > n {
        return Err(Error::Invalid(format!(
            "{g} ground-truth tracks but only {n} queries"
        )));
    }
    hungarian_padded(&Tensor::new([g, n], cost)?)
}

/// Tracker matching: every track is matched on its first-appearance frame
/// only, against `upstream` before the halfway iteration and `own` after.
pub fn match_tracker(
    upstream: &ClipPredictions,
    own: &ClipPredictions,
    gts: &[GroundTruthTrack],
    iter: usize,
    max_iter: usize,
    w: &MatchWeights,
) -> Result<Assignment> {
    let preds = if uses_own_predictions(iter, max_iter) {
        own
    } else {
        upstream
    };
    let n = preds.num_queries();
    let mut cost = Vec::with_capacity(gts.len() * n);
    for g in gts {
        let f = g.first_frame;
        for q in 0..n {
            cost.push(match_cost(
                preds.class_probs[f].row(q),
                preds.mask_logits[f].row(q),
                g.class,
                g.mask(f),
                w,
            )?);
        }
    }
    assign(cost, gts.len(), n)
}

/// Refiner matching: cost summed over every frame of the video.
pub fn match_refiner(
    upstream: &ClipPredictions,
    own: &ClipPredictions,
    gts: &[GroundTruthTrack],
    iter: usize,
    max_iter: usize,
    w: &MatchWeights,
) -> Result<Assignment> {
    let preds = if uses_own_predictions(iter, max_iter) {
        own
    } else {
        upstream
    };
    let n = preds.num_queries();
    let mut cost = Vec::with_capacity(gts.len() * n);
    for g in gts {
        for q in 0..n {
            let mut c = 0.0;
            for t in 0..preds.num_frames() {
                c += match_cost(
                    preds.class_probs[t].row(q),
                    preds.mask_logits[t].row(q),
                    g.class,
                    g.mask(t),
                    w,
                )?;
            }
            cost.push(c);
        }
    }
    assign(cost, gts.len(), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;

    fn frame(emb: Tensor) -> FrameQueries {
        let n = emb.shape()[0];
        FrameQueries::new(emb, Tensor::zeros([n, 3]), Tensor::zeros([n, 2])).unwrap()
    }

    #[test]
    fn single_frame_passes_through() {
        let mut r = rng::stream(1, "prematch-test");
        let f = frame(Tensor::randn([4, 6], 1.0, &mut r));
        let p = prematch_chain(std::slice::from_ref(&f)).unwrap();
        assert_eq!(p.frames[0], f);
        assert_eq!(p.orders, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn recovers_inverse_permutation() {
        let mut r = rng::stream(2, "prematch-test");
        let e = Tensor::randn([6, 8], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut r);
        let shuffled = e.select_rows(&perm);
        let p = prematch_chain(&[frame(e.clone()), frame(shuffled)]).unwrap();
        // slot i must hold the query that was originally row i
        for i in 0..6 {
            assert_eq!(perm[p.orders[1][i]], i);
        }
        assert_eq!(p.sequence.frame(1), e);
    }

    #[test]
    fn identical_orthonormal_frames_align_identically() {
        let e = Tensor::eye(5);
        let frames: Vec<_> = (0..4).map(|_| frame(e.clone())).collect();
        let p = prematch_chain(&frames).unwrap();
        assert!(p.orders.iter().all(|o| o == &vec![0, 1, 2, 3, 4]));
    }

    #[test]
    fn mismatched_counts_rejected() {
        let a = frame(Tensor::eye(3));
        let b = frame(Tensor::ones([2, 3]));
        assert!(prematch_chain(&[a, b]).is_err());
    }

    #[test]
    fn cosine_cost_range() {
        assert_eq!(cosine_cost(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((cosine_cost(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_cost_is_minus_class_weight() {
        let gt = [1.0, 0.0, 1.0, 0.0];
        let logits: Vec<f64> = gt
            .iter()
            .map(|&y| if y > 0.0 { 60.0 } else { -60.0 })
            .collect();
        let w = MatchWeights::default();
        let c = match_cost(&[0.0, 1.0, 0.0], &logits, 1, &gt, &w).unwrap();
        assert!((c + w.class).abs() < 1e-9, "{c}");
    }

    #[test]
    fn half_overlap_by_hand() {
        // 2x2 grid: gt = top row; prediction probability 0.5 on left column
        // (logit 0) and ~0 elsewhere.
        let gt = [1.0, 1.0, 0.0, 0.0];
        let logits = [0.0, -60.0, 0.0, -60.0];
        let w = MatchWeights::default();
        let c = match_cost(&[0.25; 4], &logits, 0, &gt, &w).unwrap();
        let ln2 = 2f64.ln();
        let bce = (ln2 + 60.0 + ln2 + 0.0) / 4.0;
        let dice = 1.0 - (2.0 * 0.5 + DICE_EPS) / (1.0 + 2.0 + DICE_EPS);
        let expect = -2.0 * 0.25 + 5.0 * bce + 5.0 * dice;
        assert!((c - expect).abs() < 1e-9, "{c} vs {expect}");
    }

    #[test]
    fn zero_weights_cost_nothing() {
        let w = MatchWeights {
            class: 0.0,
            mask: 0.0,
            dice: 0.0,
        };
        assert_eq!(
            match_cost(&[0.3, 0.7], &[4.0, -1.0], 0, &[0.0, 1.0], &w).unwrap(),
            0.0
        );
        assert!(match_cost(&[0.3, 0.7], &[4.0], 0, &[0.0, 1.0], &w).is_err());
    }

    fn preds(probs: Vec<Tensor>, masks: Vec<Tensor>) -> ClipPredictions {
        ClipPredictions {
            class_probs: probs,
            mask_logits: masks,
        }
    }

    fn track(id: SegmentId, class: usize, first_frame: usize, masks: Tensor) -> GroundTruthTrack {
        GroundTruthTrack {
            id,
            class,
            is_thing: true,
            first_frame,
            masks,
        }
    }

    #[test]
    fn tracker_matching_uses_first_frame_and_source() {
        // two queries, one pixel; query q predicts pixel on iff q == track
        let on = |v: bool| if v { 30.0 } else { -30.0 };
        let good = preds(
            vec![Tensor::full([2, 2], 0.5); 2],
            vec![Tensor::from_rows(&[vec![on(true)], vec![on(false)]]).unwrap(); 2],
        );
        let swapped = preds(
            vec![Tensor::full([2, 2], 0.5); 2],
            vec![Tensor::from_rows(&[vec![on(false)], vec![on(true)]]).unwrap(); 2],
        );
        let gts = vec![
            track(1, 0, 0, Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
            track(2, 0, 1, Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap()),
        ];
        let w = MatchWeights::default();
        assert_eq!(
            match_tracker(&good, &swapped, &gts, 0, 10, &w)
                .unwrap()
                .perm,
            vec![0, 1]
        );
        assert_eq!(
            match_tracker(&good, &swapped, &gts, 5, 10, &w)
                .unwrap()
                .perm,
            vec![1, 0]
        );
        assert_eq!(
            match_refiner(&swapped, &good, &gts, 4, 10, &w)
                .unwrap()
                .perm,
            vec![1, 0]
        );
        assert!(match_tracker(
            &good,
            &good,
            &[gts[0].clone(), gts[1].clone(), gts[0].clone()],
            0,
            1,
            &w
        )
        .is_err());
    }

    #[test]
    fn refiner_matching_equals_brute_force() {
        let mut r = rng::stream(3, "match-refiner");
        let (t, n, hw) = (3, 3, 6);
        let probs: Vec<Tensor> = (0..t)
            .map(|_| {
                crate::numerics::nn::eager::softmax(&Tensor::randn([n, 4], 1.0, &mut r), 1).unwrap()
            })
            .collect();
        let masks: Vec<Tensor> = (0..t)
            .map(|_| Tensor::randn([n, hw], 2.0, &mut r))
            .collect();
        let p = preds(probs, masks);
        let gts: Vec<_> = (0..3)
            .map(|i| {
                let m = Tensor::randn([t, hw], 1.0, &mut r).map(|v| f64::from(u8::from(v > 0.0)));
                track(i + 1, i as usize, 0, m)
            })
            .collect();
        let w = MatchWeights::default();
        let a = match_refiner(&p, &p, &gts, 9, 10, &w).unwrap();
        let mut c = Tensor::zeros([3, 3]);
        for (i, g) in gts.iter().enumerate() {
            for q in 0..n {
                let mut s = 0.0;
                for f in 0..t {
                    s += match_cost(
                        p.class_probs[f].row(q),
                        p.mask_logits[f].row(q),
                        g.class,
                        g.mask(f),
                        &w,
                    )
                    .unwrap();
                }
                c.set(&[i, q], s);
            }
        }
        assert_eq!(a.perm, brute_force(&c).perm);
    }

    #[test]
    fn source_switch_boundary() {
        assert!(!uses_own_predictions(0, 100));
        assert!(!uses_own_predictions(49, 100));
        assert!(uses_own_predictions(50, 100));
        assert!(!uses_own_predictions(2, 5));
        assert!(uses_own_predictions(3, 5));
    }
}
