//! Panoptic ground truth / predictions and their on-disk annotation format.
//!
//! A video directory holds `annotation.json` (track table, extents, frame
//! file names) and one 16-bit binary PGM per frame whose pixel values are
//! segment ids, `0` meaning void.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SegmentId = u32;
pub const VOID: SegmentId = 0;
pub const ANNOTATION_FILE: &str = "annotation.json";
const ANNOTATION_FORMAT: &str = "dvps-panoptic-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub class: usize,
    pub is_thing: bool,
}

/// Segment-id raster of one frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<SegmentId>,
}

impl IdMap {
    pub fn new(height: usize, width: usize, ids: Vec<SegmentId>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(
                "IdMap",
                format!("{height}x{width} map with {} ids", ids.len()),
            ));
        }
        Ok(Self { height, width, ids })
    }

    pub fn void(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![VOID; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> SegmentId {
        self.ids[y * self.width + x]
    }

    pub fn distinct(&self) -> BTreeSet<SegmentId> {
        self.ids.iter().copied().collect()
    }

    /// Nearest-neighbour resample to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> IdMap {
        let mut ids = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height.max(1);
            for x in 0..width {
                let sx = (x * self.width) / width.max(1);
                ids.push(self.get(sy, sx));
            }
        }
        IdMap { height, width, ids }
    }

    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> IdMap {
        let mut ids = Vec::with_capacity(height * width);
        for y in top..top + height {
            ids.extend_from_slice(&self.ids[y * self.width + left..y * self.width + left + width]);
        }
        IdMap { height, width, ids }
    }
}

/// Per-frame id maps plus the track table shared by all frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticVideo {
    frames: Vec<IdMap>,
    tracks: BTreeMap<SegmentId, TrackInfo>,
}

impl PanopticVideo {
    /// Validates extents, track-table coverage and stuff uniqueness.
    pub fn new(frames: Vec<IdMap>, tracks: BTreeMap<SegmentId, TrackInfo>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Integrity("panoptic video has no frames".into()))?;
        let (h, w) = (first.height, first.width);
        if h == 0 || w == 0 {
            return Err(Error::Integrity("panoptic video has empty frames".into()));
        }
        if tracks.contains_key(&VOID) {
            return Err(Error::Integrity(
                "track table must not contain the void id 0".into(),
            ));
        }
        for (t, f) in frames.iter().enumerate() {
            if (f.height, f.width) != (h, w) {
                return Err(Error::Integrity(format!(
                    "frame {t} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
            for id in f.distinct() {
                if id != VOID && !tracks.contains_key(&id) {
                    return Err(Error::Integrity(format!(
                        "segment id {id} in frame {t} is missing from the track table"
                    )));
                }
            }
        }
        let mut stuff_seen = BTreeMap::new();
        for (&id, info) in &tracks {
            if !info.is_thing {
                if let Some(prev) = stuff_seen.insert(info.class, id) {
                    return Err(Error::Integrity(format!(
                        "stuff class {} has two segment ids ({prev} and {id})",
                        info.class
                    )));
                }
            }
        }
        Ok(Self { frames, tracks })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn frames(&self) -> &[IdMap] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &IdMap {
        &self.frames[t]
    }

    pub fn tracks(&self) -> &BTreeMap<SegmentId, TrackInfo> {
        &self.tracks
    }

    /// Frames `start..end` with the track table restricted to ids present.
    pub fn slice(&self, start: usize, end: usize) -> PanopticVideo {
        let frames = self.frames[start..end].to_vec();
        self.with_frames(frames)
    }

    pub fn resized(&self, height: usize, width: usize) -> PanopticVideo {
        let frames = self
            .frames
            .iter()
            .map(|f| f.resized(height, width))
            .collect();
        self.with_frames(frames)
    }

    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> PanopticVideo {
        let frames = self
            .frames
            .iter()
            .map(|f| f.cropped(top, left, height, width))
            .collect();
        self.with_frames(frames)
    }

    fn with_frames(&self, frames: Vec<IdMap>) -> PanopticVideo {
        let present: BTreeSet<_> = frames.iter().flat_map(|f| f.ids.iter().copied()).collect();
        let tracks = self
            .tracks
            .iter()
            .filter(|(id, _)| present.contains(id))
            .map(|(&id, &info)| (id, info))
            .collect();
        PanopticVideo { frames, tracks }
    }

    /// Same content with segment ids rewritten through `f` (void stays void).
    pub fn relabeled(&self, f: impl Fn(SegmentId) -> SegmentId) -> Result<PanopticVideo> {
        let frames = self
            .frames
            .iter()
            .map(|m| IdMap {
                height: m.height,
                width: m.width,
                ids: m
                    .ids
                    .iter()
                    .map(|&id| if id == VOID { VOID } else { f(id) })
                    .collect(),
            })
            .collect();
        let tracks = self
            .tracks
            .iter()
            .map(|(&id, &info)| (f(id), info))
            .collect();
        PanopticVideo::new(frames, tracks)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationTrack {
    id: SegmentId,
    class: usize,
    is_thing: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationManifest {
    format: String,
    num_frames: usize,
    height: usize,
    width: usize,
    tracks: Vec<AnnotationTrack>,
    frames: Vec<String>,
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.pgm")
}

/// Binary (P5) 16-bit PGM encoding of an id map.
pub fn encode_pgm16(map: &IdMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(map.ids.len() * 2);
    for &id in &map.ids {
        let v = u16::try_from(id)
            .map_err(|_| Error::ExtentOverflow(format!("segment id {id} does not fit 16 bits")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<IdMap> {
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster. Comments are not produced and not
    // accepted.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated {
                offset: pos,
                needed: 1,
            });
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .unwrap_or("")
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(Error::UnrecognizedFormat(format!(
            "expected P5 PGM, found {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Integrity(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(Error::UnrecognizedFormat(format!(
            "expected 16-bit PGM, maxval {maxval}"
        )));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| Error::ExtentOverflow(format!("PGM {width}x{height}")))?;
    if bytes.len() < pos + need {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: pos + need - bytes.len(),
        });
    }
    let ids = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| SegmentId::from(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    IdMap::new(height, width, ids)
}

pub fn save_panoptic(dir: &Path, video: &PanopticVideo) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..video.num_frames()).map(frame_file_name).collect();
    for (map, name) in video.frames.iter().zip(&names) {
        let path = dir.join(name);
        std::fs::write(&path, encode_pgm16(map)?).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = AnnotationManifest {
        format: ANNOTATION_FORMAT.into(),
        num_frames: video.num_frames(),
        height: video.height(),
        width: video.width(),
        tracks: video
            .tracks
            .iter()
            .map(|(&id, info)| AnnotationTrack {
                id,
                class: info.class,
                is_thing: info.is_thing,
            })
            .collect(),
        frames: names,
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("annotation", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_panoptic(dir: &Path) -> Result<PanopticVideo> {
    let path = dir.join(ANNOTATION_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: AnnotationManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.format != ANNOTATION_FORMAT {
        return Err(Error::UnrecognizedFormat(format!(
            "annotation format {:?}",
            manifest.format
        )));
    }
    if manifest.num_frames == 0 {
        return Err(Error::Integrity("annotation declares zero frames".into()));
    }
    if manifest.frames.len() != manifest.num_frames {
        return Err(Error::Integrity(format!(
            "annotation lists {} frame files for {} frames",
            manifest.frames.len(),
            manifest.num_frames
        )));
    }
    let mut frames = Vec::with_capacity(manifest.num_frames);
    for name in &manifest.frames {
        let p = dir.join(name);
        let map = decode_pgm16(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        if (map.height, map.width) != (manifest.height, manifest.width) {
            return Err(Error::Integrity(format!(
                "{} has wrong extents",
                p.display()
            )));
        }
        frames.push(map);
    }
    let mut tracks = BTreeMap::new();
    for t in manifest.tracks {
        if tracks
            .insert(
                t.id,
                TrackInfo {
                    class: t.class,
                    is_thing: t.is_thing,
                },
            )
            .is_some()
        {
            return Err(Error::Integrity(format!("duplicate track id {}", t.id)));
        }
    }
    PanopticVideo::new(frames, tracks)
}
