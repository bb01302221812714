use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stq::{association_counts, stq_stats, StqStat};
use super::vpq::{vpq_mean, vpq_stats, PqStat, VPQ_WINDOWS};
use crate::datamodel::PanopticVideo;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub name: String,
    pub vpq_per_k: BTreeMap<usize, f64>,
    pub vpq_mean: f64,
    pub stq: f64,
    pub association_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub vpq_per_k: BTreeMap<usize, f64>,
    pub vpq_mean: f64,
    pub stq: f64,
    pub association_accuracy: f64,
    pub per_video: Vec<VideoMetrics>,
}

struct VideoStats {
    pq: Vec<PqStat>,
    stq: StqStat,
    assoc: (u64, u64),
}

fn video_stats(pred: &PanopticVideo, gt: &PanopticVideo) -> Result<VideoStats> {
    Ok(VideoStats {
        pq: VPQ_WINDOWS
            .iter()
            .map(|&k| vpq_stats(pred, gt, k))
            .collect::<Result<_>>()?,
        stq: stq_stats(pred, gt)?,
        assoc: association_counts(pred, gt)?,
    })
}

fn summarize(
    pq: &[PqStat],
    stq: &StqStat,
    assoc: (u64, u64),
) -> Result<(BTreeMap<usize, f64>, f64, f64, f64)> {
    let per_k: BTreeMap<usize, f64> = VPQ_WINDOWS
        .iter()
        .zip(pq)
        .map(|(&k, s)| (k, s.pq().unwrap_or(100.0)))
        .collect();
    let mean = vpq_mean(&per_k)?;
    let aa = if assoc.1 == 0 {
        1.0
    } else {
        assoc.0 as f64 / assoc.1 as f64
    };
    Ok((per_k, mean, stq.stq(), aa))
}

impl MetricReport {
    /// Scores named `(prediction, ground truth)` pairs. Dataset figures pool
    /// the per-class statistics of all videos rather than averaging
    /// per-video scores.
    pub fn evaluate(videos: &[(String, PanopticVideo, PanopticVideo)]) -> Result<MetricReport> {
        if videos.is_empty() {
            return Err(Error::Invalid("no videos to evaluate".into()));
        }
        let stats: Vec<VideoStats> = videos
            .par_iter()
            .map(|(_, p, g)| video_stats(p, g))
            .collect::<Result<_>>()?;
        let mut pooled_pq = vec![PqStat::default(); VPQ_WINDOWS.len()];
        let mut pooled_stq = StqStat::default();
        let mut pooled_assoc = (0, 0);
        let mut per_video = Vec::with_capacity(videos.len());
        for ((name, _, _), s) in videos.iter().zip(&stats) {
            for (acc, v) in pooled_pq.iter_mut().zip(&s.pq) {
                acc.merge(v);
            }
            pooled_stq.merge(&s.stq);
            pooled_assoc.0 += s.assoc.0;
            pooled_assoc.1 += s.assoc.1;
            let (vpq_per_k, vpq_mean, stq, association_accuracy) =
                summarize(&s.pq, &s.stq, s.assoc)?;
            per_video.push(VideoMetrics {
                name: name.clone(),
                vpq_per_k,
                vpq_mean,
                stq,
                association_accuracy,
            });
        }
        let (vpq_per_k, vpq_mean, stq, association_accuracy) =
            summarize(&pooled_pq, &pooled_stq, pooled_assoc)?;
        Ok(MetricReport {
            vpq_per_k,
            vpq_mean,
            stq,
            association_accuracy,
            per_video,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("metric report", e))
    }

    /// Aligned text table: one row per video, then the pooled row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&str, &BTreeMap<usize, f64>, f64, f64, f64)> = self
            .per_video
            .iter()
            .map(|v| {
                (
                    v.name.as_str(),
                    &v.vpq_per_k,
                    v.vpq_mean,
                    v.stq,
                    v.association_accuracy,
                )
            })
            .collect();
        rows.push((
            "all",
            &self.vpq_per_k,
            self.vpq_mean,
            self.stq,
            self.association_accuracy,
        ));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "video", "VPQ", "VPQ1", "VPQ2", "VPQ4", "VPQ6", "STQ", "AA"
        );
        for (name, per_k, mean, stq, aa) in rows {
            let _ = write!(out, "{name:<width$} {mean:>6.1}");
            for k in VPQ_WINDOWS {
                let _ = write!(out, " {:>6.1}", per_k.get(&k).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(out, " {stq:>6.3} {aa:>6.3}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{IdMap, TrackInfo};

    #[test]
    fn perfect_report_and_table() {
        let tracks = [
            (
                1,
                TrackInfo {
                    class: 0,
                    is_thing: true,
                },
            ),
            (
                9,
                TrackInfo {
                    class: 1,
                    is_thing: false,
                },
            ),
        ];
        let v = PanopticVideo::new(
            vec![IdMap::new(1, 3, vec![1, 9, 9]).unwrap(); 3],
            tracks.into_iter().collect(),
        )
        .unwrap();
        let r = MetricReport::evaluate(&[("a".into(), v.clone(), v)]).unwrap();
        assert!(r.vpq_per_k.values().all(|&x| x == 100.0));
        assert_eq!(r.stq, 1.0);
        let table = r.to_table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(
            cols,
            ["video", "VPQ", "VPQ1", "VPQ2", "VPQ4", "VPQ6", "STQ", "AA"]
        );
        assert!(table.lines().last().unwrap().contains("100.0"));
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
