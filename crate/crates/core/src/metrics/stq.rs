//! Segmentation-and-tracking quality and a slot-consistency diagnostic.
//!
//! STQ is the geometric mean of
//!
//! * AQ: for every ground-truth thing track `g`,
//!   `(1/|g|) Σ_p |p∩g| · IoU(p, g)` over predicted thing tracks `p`,
//!   averaged over ground-truth tracks (whole-video tubes);
//! * SQ: semantic mean IoU over classes.
//!
//! Pixels that are void in the ground truth are ignored by both terms. A
//! predicted void pixel has no class. With no ground-truth thing track, AQ
//! is 1 if the prediction has no thing pixels and 0 otherwise.

use std::collections::{BTreeMap, HashMap};

use super::vpq::check_extents;
use crate::datamodel::{PanopticVideo, SegmentId, VOID};
use crate::error::Result;

/// Accumulators for STQ; [`StqStat::merge`] pools several videos.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StqStat {
    /// Sum over ground-truth tracks of their AQ term.
    pub aq_sum: f64,
    pub gt_tracks: u64,
    pub pred_thing_pixels: u64,
    /// Per class `(intersection, union)` pixel counts.
    pub class_iou: BTreeMap<usize, (u64, u64)>,
}

impl StqStat {
    pub fn merge(&mut self, other: &StqStat) {
        self.aq_sum += other.aq_sum;
        self.gt_tracks += other.gt_tracks;
        self.pred_thing_pixels += other.pred_thing_pixels;
        for (&c, &(i, u)) in &other.class_iou {
            let e = self.class_iou.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    pub fn aq(&self) -> f64 {
        if self.gt_tracks == 0 {
            if self.pred_thing_pixels == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.aq_sum / self.gt_tracks as f64
        }
    }

    pub fn sq(&self) -> f64 {
        let ious: Vec<f64> = self
            .class_iou
            .values()
            .filter(|&&(_, u)| u > 0)
            .map(|&(i, u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn stq(&self) -> f64 {
        (self.aq() * self.sq()).sqrt()
    }
}

pub fn stq_stats(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<StqStat> {
    check_extents(pred, gt)?;
    let pred_thing = |p: SegmentId| p != VOID && pred.tracks()[&p].is_thing;
    let gt_thing = |g: SegmentId| g != VOID && gt.tracks()[&g].is_thing;
    let mut inter: HashMap<(SegmentId, SegmentId), u64> = HashMap::new();
    let mut gt_area: BTreeMap<SegmentId, u64> = BTreeMap::new();
    let mut pred_area: HashMap<SegmentId, u64> = HashMap::new();
    // per class: (gt pixels, pred pixels, both)
    let mut sem: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
    let mut stat = StqStat::default();
    for t in 0..gt.num_frames() {
        for (&g, &p) in gt.frame(t).ids.iter().zip(&pred.frame(t).ids) {
            if g == VOID {
                continue;
            }
            let gc = gt.tracks()[&g].class;
            sem.entry(gc).or_default().0 += 1;
            if p != VOID {
                let pc = pred.tracks()[&p].class;
                sem.entry(pc).or_default().1 += 1;
                if pc == gc {
                    sem.entry(gc).or_default().2 += 1;
                }
            }
            if pred_thing(p) {
                *pred_area.entry(p).or_default() += 1;
                stat.pred_thing_pixels += 1;
            }
            if gt_thing(g) {
                *gt_area.entry(g).or_default() += 1;
                if pred_thing(p) {
                    *inter.entry((g, p)).or_default() += 1;
                }
            }
        }
    }
    let mut per_gt: BTreeMap<SegmentId, f64> = gt_area.keys().map(|&g| (g, 0.0)).collect();
    let mut pairs: Vec<_> = inter.into_iter().collect();
    pairs.sort_unstable_by_key(|&(k, _)| k);
    for ((g, p), tpa) in pairs {
        let (ga, pa) = (gt_area[&g], pred_area[&p]);
        let iou = tpa as f64 / (ga + pa - tpa) as f64;
        *per_gt.get_mut(&g).unwrap() += tpa as f64 * iou;
    }
    for (g, s) in per_gt {
        stat.aq_sum += s / gt_area[&g] as f64;
        stat.gt_tracks += 1;
    }
    for (c, (gn, pn, both)) in sem {
        stat.class_iou.insert(c, (both, gn + pn - both));
    }
    Ok(stat)
}

/// STQ of one video, in `[0,1]`.
pub fn stq(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<f64> {
    Ok(stq_stats(pred, gt)?.stq())
}

/// `(consistent, total)` counts of (ground-truth thing track, frame) pairs.
pub fn association_counts(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<(u64, u64)> {
    check_extents(pred, gt)?;
    let (mut ok, mut total) = (0, 0);
    for (&g, info) in gt.tracks() {
        if !info.is_thing {
            continue;
        }
        // per frame majority predicted id under the track's pixels
        let mut majorities = Vec::new();
        for t in 0..gt.num_frames() {
            let mut counts: BTreeMap<SegmentId, u64> = BTreeMap::new();
            for (&gi, &p) in gt.frame(t).ids.iter().zip(&pred.frame(t).ids) {
                if gi == g {
                    *counts.entry(p).or_default() += 1;
                }
            }
            if let Some(m) = mode(&counts) {
                majorities.push(m);
            }
        }
        let mut freq: BTreeMap<SegmentId, u64> = BTreeMap::new();
        for &m in majorities.iter().filter(|&&m| m != VOID) {
            *freq.entry(m).or_default() += 1;
        }
        let global = mode(&freq);
        total += majorities.len() as u64;
        ok += majorities
            .iter()
            .filter(|&&m| m != VOID && Some(m) == global)
            .count() as u64;
    }
    Ok((ok, total))
}

/// Most frequent key; ties go to the smallest.
fn mode(counts: &BTreeMap<SegmentId, u64>) -> Option<SegmentId> {
    let mut best: Option<(SegmentId, u64)> = None;
    for (&k, &c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

/// Fraction of (ground-truth thing track, frame) pairs whose majority
/// predicted id is the track's most frequent majority id over the video.
/// A void majority never counts as consistent. Videos without thing
/// tracks score 1.
pub fn association_accuracy(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<f64> {
    let (ok, total) = association_counts(pred, gt)?;
    Ok(if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{IdMap, TrackInfo};

    fn video(
        frames: Vec<Vec<SegmentId>>,
        w: usize,
        tracks: &[(SegmentId, usize, bool)],
    ) -> PanopticVideo {
        let h = frames[0].len() / w;
        let maps = frames
            .into_iter()
            .map(|f| IdMap::new(h, w, f).unwrap())
            .collect();
        let table = tracks
            .iter()
            .map(|&(id, class, is_thing)| (id, TrackInfo { class, is_thing }))
            .collect();
        PanopticVideo::new(maps, table).unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let gt = video(
            vec![vec![1, 1, 9, 9], vec![9, 1, 1, 9]],
            2,
            &[(1, 0, true), (9, 2, false)],
        );
        assert_eq!(stq(&gt, &gt).unwrap(), 1.0);
        let empty = video(vec![vec![0; 4], vec![0; 4]], 2, &[]);
        assert_eq!(stq(&empty, &gt).unwrap(), 0.0);
    }

    #[test]
    fn two_frame_hand_case() {
        // 1x4 grid, thing 1 (class 0) and stuff 9 (class 1)
        let gt = video(
            vec![vec![1, 1, 9, 9], vec![9, 1, 1, 9]],
            4,
            &[(1, 0, true), (9, 1, false)],
        );
        // prediction: thing 5 in frame 0, thing 6 in frame 1, stuff elsewhere
        let pred = video(
            vec![vec![5, 5, 8, 8], vec![8, 8, 6, 8]],
            4,
            &[(5, 0, true), (6, 0, true), (8, 1, false)],
        );
        // |g| = 4. p=5: |p|=2, ∩=2, IoU=2/4. p=6: |p|=1, ∩=1, IoU=1/4.
        let aq: f64 = (2.0 * 0.5 + 1.0 * 0.25) / 4.0;
        // class 0: gt 4 px, pred 3 px, both 3 -> 3/4; class 1: gt 4, pred 5, both 4 -> 4/5
        let sq = (0.75 + 0.8) / 2.0;
        let got = stq(&pred, &gt).unwrap();
        assert!((got - (aq * sq).sqrt()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn association_examples() {
        let gt = video(vec![vec![1, 2]; 4], 2, &[(1, 0, true), (2, 0, true)]);
        assert_eq!(association_accuracy(&gt, &gt).unwrap(), 1.0);
        let tracks = [(5, 0, true), (6, 0, true)];
        let swapped = video(
            vec![vec![5, 6], vec![5, 6], vec![6, 5], vec![6, 5]],
            2,
            &tracks,
        );
        assert_eq!(association_accuracy(&swapped, &gt).unwrap(), 0.5);
        let empty = video(vec![vec![0, 0]; 4], 2, &[]);
        assert_eq!(association_accuracy(&empty, &gt).unwrap(), 0.0);
    }
}
