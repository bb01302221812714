//! Data types and on-disk formats shared by every pipeline stage.

pub mod clip;
pub mod fuse;
pub mod panoptic;
pub mod queries;
pub mod sequence;
pub mod viz;

pub use clip::{load_features, rasterize_masks, save_features, VideoClip};
pub use fuse::{fuse_frame, fuse_video, panoptic_fuse, stuff_id, thing_id, FuseConfig};
pub use panoptic::{
    load_panoptic, save_panoptic, IdMap, PanopticVideo, SegmentId, TrackInfo, VOID,
};
pub use queries::{load_query_dump, save_query_dump, FrameQueries};
pub use sequence::{Stage, TrackedQuerySequence};
