//! Tracker and refiner networks and their parameter storage.

pub mod heads;
pub mod params;
pub mod refiner;
pub mod tracker;

pub use params::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ParamStore};
pub use refiner::{init_refiner, refiner_forward, warm_start_heads, RefinerConfig, RefinerOutput};
pub use tracker::{init_tracker, tracker_forward, RcaBinding, TrackerConfig, TrackerOutput};
