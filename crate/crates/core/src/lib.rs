//! Decoupled video panoptic segmentation at desk scale.
//!
//! The pipeline runs a frozen per-frame segmenter (here a synthetic stub),
//! aligns its unordered queries across frames with a referring tracker, and
//! refines the aligned sequences over the whole video with a temporal
//! refiner. Training losses, VPQ/STQ evaluation and a synthetic data
//! generator live alongside.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod synth;

pub use error::{Error, Result};
