use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prematch,
    Tracker,
    Refiner,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prematch => "prematch",
            Stage::Tracker => "tracker",
            Stage::Refiner => "refiner",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prematch" => Ok(Stage::Prematch),
            "tracker" => Ok(Stage::Tracker),
            "refiner" => Ok(Stage::Refiner),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Queries aligned over time: slot `n` is the same object in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedQuerySequence {
    /// `[T, N, D]`
    pub queries: Tensor,
    pub stage: Stage,
}

impl TrackedQuerySequence {
    pub fn new(queries: Tensor, stage: Stage) -> Result<Self> {
        if queries.ndim() != 3 || queries.shape()[0] == 0 || queries.shape()[1] == 0 {
            return Err(Error::shape(
                "TrackedQuerySequence",
                format!("{:?}", queries.shape()),
            ));
        }
        Ok(Self { queries, stage })
    }

    pub fn from_frames(frames: &[Tensor], stage: Stage) -> Result<Self> {
        Self::new(Tensor::stack(frames)?, stage)
    }

    pub fn num_frames(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn num_slots(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.queries.shape()[2]
    }

    /// `[N, D]` queries of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.queries.index0(t)
    }
}
