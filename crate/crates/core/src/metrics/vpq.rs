//! Video panoptic quality over sliding temporal windows.
//!
//! For every window of `k` consecutive frames (stride 1) each segment id
//! becomes a spatio-temporal tube. Predicted and ground-truth tubes of the
//! same class with IoU above 0.5 are true positives. Statistics are
//! accumulated per class over all windows (and, for a dataset, over all
//! videos); VPQ is the mean over classes of `ΣIoU / (TP + FP/2 + FN/2)`,
//! scaled to `[0, 100]`.
//!
//! Void ground-truth pixels are excluded from IoU, and a predicted tube
//! lying more than half on void is not counted as a false positive. A video
//! shorter than `k` is scored as a single window.

use std::collections::{BTreeMap, HashMap};

use crate::datamodel::{PanopticVideo, SegmentId, VOID};
use crate::error::{Error, Result};

pub const VPQ_WINDOWS: [usize; 4] = [1, 2, 4, 6];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassStat {
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-class panoptic-quality accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqStat {
    pub per_class: BTreeMap<usize, ClassStat>,
}

impl PqStat {
    pub fn merge(&mut self, other: &PqStat) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.iou += s.iou;
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
        }
    }

    /// Mean PQ over classes with any segment, in `[0,100]`; `None` when no
    /// class has a segment.
    pub fn pq(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_class
            .values()
            .filter(|s| s.tp + s.fp + s.fn_ > 0)
            .map(|s| s.iou / (s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

pub(crate) fn check_extents(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<()> {
    let p = (pred.num_frames(), pred.height(), pred.width());
    let g = (gt.num_frames(), gt.height(), gt.width());
    if p != g {
        return Err(Error::shape(
            "metrics",
            format!("prediction (T,H,W)={p:?}, ground truth {g:?}"),
        ));
    }
    Ok(())
}

/// `(start, end)` frame ranges of the length-`k` windows.
pub fn windows(num_frames: usize, k: usize) -> Vec<(usize, usize)> {
    if num_frames < k {
        vec![(0, num_frames)]
    } else {
        (0..=num_frames - k).map(|s| (s, s + k)).collect()
    }
}

fn window_stat(
    pred: &PanopticVideo,
    gt: &PanopticVideo,
    start: usize,
    end: usize,
    stat: &mut PqStat,
) {
    let mut pairs: HashMap<(SegmentId, SegmentId), u64> = HashMap::new();
    for t in start..end {
        for (&g, &p) in gt.frame(t).ids.iter().zip(&pred.frame(t).ids) {
            *pairs.entry((g, p)).or_default() += 1;
        }
    }
    let mut gt_area: BTreeMap<SegmentId, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<SegmentId, u64> = BTreeMap::new();
    let mut pred_on_void: HashMap<SegmentId, u64> = HashMap::new();
    for (&(g, p), &n) in &pairs {
        if g != VOID {
            *gt_area.entry(g).or_default() += n;
        }
        if p != VOID {
            *pred_area.entry(p).or_default() += n;
            if g == VOID {
                *pred_on_void.entry(p).or_default() += n;
            }
        }
    }
    let mut gt_matched = BTreeMap::new();
    let mut pred_matched = BTreeMap::new();
    let mut keys: Vec<_> = pairs.keys().copied().collect();
    keys.sort_unstable();
    for (g, p) in keys {
        if g == VOID || p == VOID {
            continue;
        }
        let gc = gt.tracks()[&g].class;
        if pred.tracks()[&p].class != gc {
            continue;
        }
        let inter = pairs[&(g, p)];
        let union =
            pred_area[&p] + gt_area[&g] - inter - pred_on_void.get(&p).copied().unwrap_or(0);
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            let s = stat.per_class.entry(gc).or_default();
            s.tp += 1;
            s.iou += iou;
            gt_matched.insert(g, ());
            pred_matched.insert(p, ());
        }
    }
    for &g in gt_area.keys() {
        if !gt_matched.contains_key(&g) {
            stat.per_class.entry(gt.tracks()[&g].class).or_default().fn_ += 1;
        }
    }
    for (&p, &area) in &pred_area {
        if pred_matched.contains_key(&p) {
            continue;
        }
        let on_void = pred_on_void.get(&p).copied().unwrap_or(0);
        if on_void * 2 > area {
            continue;
        }
        stat.per_class
            .entry(pred.tracks()[&p].class)
            .or_default()
            .fp += 1;
    }
}

/// Accumulated statistics of all length-`k` windows of one video.
pub fn vpq_stats(pred: &PanopticVideo, gt: &PanopticVideo, k: usize) -> Result<PqStat> {
    check_extents(pred, gt)?;
    if k == 0 {
        return Err(Error::Invalid("window length must be positive".into()));
    }
    let mut stat = PqStat::default();
    for (s, e) in windows(gt.num_frames(), k) {
        window_stat(pred, gt, s, e, &mut stat);
    }
    Ok(stat)
}

/// VPQ over windows of `k` frames, in `[0,100]`. Two videos without any
/// segment score 100.
pub fn vpq_k(pred: &PanopticVideo, gt: &PanopticVideo, k: usize) -> Result<f64> {
    Ok(vpq_stats(pred, gt, k)?.pq().unwrap_or(100.0))
}

/// Arithmetic mean of the per-window scores; requires exactly the window
/// set `{1, 2, 4, 6}`.
pub fn vpq_mean(per_k: &BTreeMap<usize, f64>) -> Result<f64> {
    for k in VPQ_WINDOWS {
        if !per_k.contains_key(&k) {
            return Err(Error::Missing(format!("VPQ for window length {k}")));
        }
    }
    if let Some(extra) = per_k.keys().find(|k| !VPQ_WINDOWS.contains(k)) {
        return Err(Error::Invalid(format!("unexpected window length {extra}")));
    }
    Ok(VPQ_WINDOWS.iter().map(|k| per_k[k]).sum::<f64>() / VPQ_WINDOWS.len() as f64)
}

/// Nearest value with one decimal (halves away from zero).
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
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
    fn identical_videos_score_100() {
        let v = video(
            vec![vec![1, 1, 2, 0], vec![1, 2, 2, 0], vec![2, 2, 2, 1]],
            2,
            &[(1, 0, true), (2, 3, false)],
        );
        for k in VPQ_WINDOWS {
            assert_eq!(vpq_k(&v, &v, k).unwrap(), 100.0);
        }
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = video(vec![vec![1, 1, 2, 2]], 2, &[(1, 0, true), (2, 1, false)]);
        let pred = video(vec![vec![0; 4]], 2, &[]);
        assert_eq!(vpq_k(&pred, &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_tube_iou() {
        // gt segment covers all 10 pixels, prediction 6 of them: IoU 0.6
        let gt = video(vec![vec![1; 10]], 5, &[(1, 0, true)]);
        let pred = video(vec![vec![7, 7, 7, 7, 7, 7, 0, 0, 0, 0]], 5, &[(7, 0, true)]);
        assert!((vpq_k(&pred, &gt, 1).unwrap() - 60.0).abs() < 1e-12);
        // predicted pixels on void ground truth are ignored
        let gt = video(vec![vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0]], 5, &[(1, 0, true)]);
        let pred = video(vec![vec![7; 10]], 5, &[(7, 0, true)]);
        assert_eq!(vpq_k(&pred, &gt, 1).unwrap(), 100.0);
    }

    #[test]
    fn identity_switch_breaks_long_windows() {
        let gt = video(
            vec![vec![1, 2], vec![1, 2]],
            2,
            &[(1, 0, true), (2, 0, true)],
        );
        let pred = video(
            vec![vec![5, 6], vec![6, 5]],
            2,
            &[(5, 0, true), (6, 0, true)],
        );
        assert_eq!(vpq_k(&pred, &gt, 1).unwrap(), 100.0);
        assert_eq!(vpq_k(&pred, &gt, 2).unwrap(), 0.0);
    }

    #[test]
    fn short_video_is_one_window() {
        assert_eq!(windows(3, 6), vec![(0, 3)]);
        assert_eq!(windows(4, 2), vec![(0, 2), (1, 3), (2, 4)]);
    }

    #[test]
    fn mean_requires_all_windows() {
        let m: BTreeMap<usize, f64> = [(1, 1.0), (2, 2.0), (4, 3.0)].into_iter().collect();
        assert!(matches!(vpq_mean(&m), Err(Error::Missing(_))));
        let m: BTreeMap<usize, f64> = VPQ_WINDOWS.iter().map(|&k| (k, 7.5)).collect();
        assert_eq!(vpq_mean(&m).unwrap(), 7.5);
    }
}
