//! JSON run configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::losses::TrainConfig;
use crate::model::{RefinerConfig, TrackerConfig};
use crate::pipeline::{DatasetConfig, InferConfig};
use crate::synth::SceneConfig;

/// Everything a subcommand may need. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub scene: SceneConfig,
    pub tracker: TrackerConfig,
    pub refiner: RefinerConfig,
    pub train_tracker: TrainConfig,
    pub train_refiner: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 10,
            scene: SceneConfig::default(),
            tracker: TrackerConfig::default(),
            refiner: RefinerConfig::default(),
            train_tracker: TrainConfig::tracker(),
            train_refiner: TrainConfig::refiner(),
            infer: InferConfig::default(),
        }
    }
}

// seeds derived from the top-level one; a file may repeat them only unchanged
const DERIVED_SEEDS: [&str; 3] = ["scene.seed", "train_tracker.seed", "train_refiner.seed"];

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |v, k| v.get(k))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key {path:?}")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("key {:?} is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*k).to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys is non-empty")
}

/// Parses `key.path=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Builds the configuration from an optional JSON file and overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !root.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut root, &k, v)?;
        }
        let top = lookup(&root, "seed").cloned().unwrap_or(Value::from(0));
        for k in DERIVED_SEEDS {
            if lookup(&root, k).is_some_and(|v| *v != top) {
                return Err(Error::Config(format!(
                    "{k} is derived from the top-level seed; set `seed` instead"
                )));
            }
        }
        let mut cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.scene.seed = cfg.seed;
        cfg.train_tracker.seed = cfg.seed;
        cfg.train_refiner.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            num_videos: self.num_videos,
            seed: self.seed,
            scene: self.scene.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.tracker.validate()?;
        self.refiner.validate()?;
        self.train_tracker.validate()?;
        self.train_refiner.validate()?;
        self.check_scene(&self.scene)
    }

    /// Checks the model dimensions against a dataset's scene settings.
    pub fn check_scene(&self, scene: &SceneConfig) -> Result<()> {
        let t = &self.tracker;
        let r = &self.refiner;
        let want = [
            ("tracker.dim", t.dim, "scene.query_dim", scene.query_dim),
            (
                "tracker.mask_dim",
                t.mask_dim,
                "scene.feature_dim",
                scene.feature_dim,
            ),
            (
                "tracker.num_classes",
                t.num_classes,
                "scene classes",
                scene.num_classes(),
            ),
            ("refiner.dim", r.dim, "tracker.dim", t.dim),
            (
                "refiner.mask_dim",
                r.mask_dim,
                "tracker.mask_dim",
                t.mask_dim,
            ),
            (
                "refiner.num_classes",
                r.num_classes,
                "tracker.num_classes",
                t.num_classes,
            ),
        ];
        for (a, x, b, y) in want {
            if x != y {
                return Err(Error::Config(format!("{a} = {x} does not match {b} = {y}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::json("run config", e))
    }
}
