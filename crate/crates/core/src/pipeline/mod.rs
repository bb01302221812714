//! Datasets on disk and stage-by-stage inference.
//!
//! A dataset directory holds `manifest.json` and one sub-directory per
//! video with `annotation.json` and `frame_%04d.pgm` (ground truth),
//! `queries.dvpsq` (segmenter outputs) and `features.dvpsf` (pixel
//! features). A prediction directory has the same per-video layout without
//! the query and feature files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    fuse_video, load_features, load_panoptic, load_query_dump, save_features, save_panoptic,
    save_query_dump, FrameQueries, FuseConfig, IdMap, PanopticVideo, SegmentId, Stage, TrackInfo,
    TrackedQuerySequence, VideoClip,
};
use crate::error::{Error, Result};
use crate::matcher::prematch_chain;
use crate::metrics::{multi_scale_merge, ScalePrediction};
use crate::model::{refiner_forward, tracker_forward, ParamStore, RefinerConfig, TrackerConfig};
use crate::numerics::Tensor;
use crate::rng;
use crate::synth::{generate_clip, segmenter_stub, SceneConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUERIES_FILE: &str = "queries.dvpsq";
pub const FEATURES_FILE: &str = "features.dvpsf";
const MANIFEST_FORMAT: &str = "dvps-dataset-1";

/// One video with its segmenter outputs, pixel features and ground truth.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub name: String,
    pub queries: Vec<FrameQueries>,
    pub clip: VideoClip,
    pub gt: PanopticVideo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_videos: usize,
    pub seed: u64,
    /// Scene template; its `seed` is replaced per video.
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_videos: 10,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub videos: Vec<ManifestVideo>,
}

impl Manifest {
    pub fn num_thing_classes(&self) -> usize {
        self.scene.num_thing_classes
    }
}

pub fn video_name(i: usize) -> String {
    format!("video_{i:04}")
}

/// Generates every video of a dataset in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Manifest, Vec<VideoSample>)> {
    cfg.scene.validate()?;
    let videos: Vec<ManifestVideo> = (0..cfg.num_videos)
        .map(|i| ManifestVideo {
            name: video_name(i),
            seed: rng::indexed_seed(cfg.seed, "data", i as u64),
        })
        .collect();
    let samples = videos
        .par_iter()
        .map(|v| {
            let scene = SceneConfig {
                seed: v.seed,
                ..cfg.scene.clone()
            };
            let (clip, gt) = generate_clip(&scene)?;
            let stub = segmenter_stub(&gt, &scene)?;
            Ok(VideoSample {
                name: v.name.clone(),
                queries: stub.frames,
                clip,
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: cfg.seed,
        scene: cfg.scene.clone(),
        videos,
    };
    Ok((manifest, samples))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, manifest: &Manifest, samples: &[VideoSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples.par_iter().try_for_each(|s| {
        let vdir = dir.join(&s.name);
        save_panoptic(&vdir, &s.gt)?;
        save_query_dump(&vdir.join(QUERIES_FILE), &s.queries)?;
        save_features(&vdir.join(FEATURES_FILE), &s.clip)
    })?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::UnrecognizedFormat(format!(
            "dataset manifest format {:?}",
            m.format
        )));
    }
    Ok(m)
}

pub fn load_sample(dir: &Path, name: &str) -> Result<VideoSample> {
    let vdir = dir.join(name);
    let gt = load_panoptic(&vdir)?;
    let queries = load_query_dump(&vdir.join(QUERIES_FILE))?;
    let clip = load_features(&vdir.join(FEATURES_FILE))?;
    if queries.len() != gt.num_frames() || clip.num_frames() != gt.num_frames() {
        return Err(Error::Integrity(format!(
            "{name}: {} annotated frames, {} query frames, {} feature frames",
            gt.num_frames(),
            queries.len(),
            clip.num_frames()
        )));
    }
    if (clip.height(), clip.width()) != (gt.height(), gt.width()) {
        return Err(Error::Integrity(format!(
            "{name}: feature and annotation extents differ"
        )));
    }
    Ok(VideoSample {
        name: name.into(),
        queries,
        clip,
        gt,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<VideoSample>)> {
    let m = load_manifest(dir)?;
    let samples = m
        .videos
        .par_iter()
        .map(|v| load_sample(dir, &v.name))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}

/// Trained stages available to inference.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub tracker: Option<(ParamStore, TrackerConfig)>,
    pub refiner: Option<(ParamStore, RefinerConfig)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub stage: Stage,
    /// Resolution factors; more than one merges predictions across scales.
    pub scales: Vec<f64>,
    pub fuse: FuseConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Refiner,
            scales: vec![1.0],
            fuse: FuseConfig::default(),
        }
    }
}

/// Per-frame `(mask embeddings [N,Dm], class logits [N,K+1])` of a stage.
pub fn stage_outputs(
    queries: &[FrameQueries],
    stage: Stage,
    models: &Models,
) -> Result<Vec<(Tensor, Tensor)>> {
    let pre = prematch_chain(queries)?;
    let tracker = || {
        models
            .tracker
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("tracker checkpoint for stage {}", stage.name())))
    };
    match stage {
        Stage::Prematch => Ok(pre
            .frames
            .into_iter()
            .map(|f| (f.mask_embeddings, f.class_logits))
            .collect()),
        Stage::Tracker => {
            let (p, c) = tracker()?;
            let out = tracker_forward(p, c, &pre.sequence)?;
            Ok(out
                .mask_embeddings
                .into_iter()
                .zip(out.class_logits)
                .collect())
        }
        Stage::Refiner => {
            let (tp, tc) = tracker()?;
            let (rp, rc) = models
                .refiner
                .as_ref()
                .ok_or_else(|| Error::Missing("refiner checkpoint for stage refiner".into()))?;
            let tr = tracker_forward(tp, tc, &pre.sequence)?;
            let out = refiner_forward(rp, rc, &tr.sequence)?;
            Ok((0..out.mask_embeddings.shape()[0])
                .map(|t| (out.mask_embeddings.index0(t), out.class_logits.clone()))
                .collect())
        }
    }
}

fn scaled_extent(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

/// Runs the pipeline up to `cfg.stage` and fuses panoptic predictions.
pub fn infer_video(
    queries: &[FrameQueries],
    clip: &VideoClip,
    models: &Models,
    num_thing_classes: usize,
    cfg: &InferConfig,
) -> Result<PanopticVideo> {
    if cfg.scales.is_empty() || cfg.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!(
            "scales must be positive, got {:?}",
            cfg.scales
        )));
    }
    let outputs = stage_outputs(queries, cfg.stage, models)?;
    let (h, w) = (clip.height(), clip.width());
    if cfg.scales == [1.0] {
        let frames = outputs
            .into_iter()
            .enumerate()
            .map(|(t, (m, c))| Ok((clip.mask_logits(t, &m)?, c)))
            .collect::<Result<Vec<_>>>()?;
        return fuse_video(&frames, h, w, num_thing_classes, &cfg.fuse);
    }
    let scaled: Vec<VideoClip> = cfg
        .scales
        .iter()
        .map(|&s| clip.resized(scaled_extent(h, s), scaled_extent(w, s)))
        .collect();
    let mut maps: Vec<IdMap> = Vec::with_capacity(outputs.len());
    let mut tracks: std::collections::BTreeMap<SegmentId, TrackInfo> = Default::default();
    for (t, (m, c)) in outputs.iter().enumerate() {
        let preds = scaled
            .iter()
            .map(|sc| {
                let logits = sc.mask_logits(t, m)?;
                let n = logits.shape()[0];
                Ok(ScalePrediction {
                    mask_logits: logits.reshape([n, sc.height(), sc.width()])?,
                    class_logits: c.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (map, tr) = multi_scale_merge(&preds, h, w, num_thing_classes, &cfg.fuse)?;
        maps.push(map);
        tracks.extend(tr);
    }
    PanopticVideo::new(maps, tracks)
}

/// Inference over a whole dataset, in manifest order.
pub fn infer_dataset(
    samples: &[VideoSample],
    models: &Models,
    num_thing_classes: usize,
    cfg: &InferConfig,
) -> Result<Vec<(String, PanopticVideo)>> {
    samples
        .par_iter()
        .map(|s| {
            Ok((
                s.name.clone(),
                infer_video(&s.queries, &s.clip, models, num_thing_classes, cfg)?,
            ))
        })
        .collect()
}

pub fn save_predictions(dir: &Path, preds: &[(String, PanopticVideo)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    preds
        .par_iter()
        .try_for_each(|(name, v)| save_panoptic(&dir.join(name), v))
}

/// Sub-directories of `dir` holding an annotation, sorted by name.
pub fn list_videos(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path: PathBuf = entry.path();
        if path
            .join(crate::datamodel::panoptic::ANNOTATION_FILE)
            .is_file()
        {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                names.push(n.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs each ground-truth video with its prediction; both directories
/// must hold the same video set.
pub fn load_eval_pairs(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<Vec<(String, PanopticVideo, PanopticVideo)>> {
    let preds = list_videos(pred_dir)?;
    let gts = list_videos(gt_dir)?;
    let missing: Vec<&String> = gts.iter().filter(|g| !preds.contains(g)).collect();
    let extra: Vec<&String> = preds.iter().filter(|p| !gts.contains(p)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Integrity(format!(
            "video sets differ: missing predictions for {missing:?}, unexpected predictions {extra:?}"
        )));
    }
    if gts.is_empty() {
        return Err(Error::Invalid(format!(
            "no videos under {}",
            gt_dir.display()
        )));
    }
    gts.par_iter()
        .map(|n| {
            Ok((
                n.clone(),
                load_panoptic(&pred_dir.join(n))?,
                load_panoptic(&gt_dir.join(n))?,
            ))
        })
        .collect()
}

/// Pre-matched queries as a sequence (used by diagnostics).
pub fn prematched_sequence(queries: &[FrameQueries]) -> Result<TrackedQuerySequence> {
    Ok(prematch_chain(queries)?.sequence)
}
