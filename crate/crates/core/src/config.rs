//! The combined run configuration: world, model and training sections in one
//! JSON document, validated with JSON-pointer error locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::world::{World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Inline world parameters. Exactly one of `world` and `world_file` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldConfig>,
    /// A world written by `init-world`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_file: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The toy preset.
    fn default() -> Self {
        Self {
            world: Some(WorldConfig::default()),
            world_file: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn prefixed(section: &str, err: Error) -> Error {
    match err {
        Error::Config { pointer, message } => Error::Config {
            pointer: format!("/{section}{pointer}"),
            message,
        },
        other => other,
    }
}

impl RunConfig {
    /// Parses a document; type errors carry the JSON pointer of the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = e
                .path()
                .iter()
                .map(|seg| match seg {
                    serde_path_to_error::Segment::Seq { index } => format!("/{index}"),
                    serde_path_to_error::Segment::Map { key } => format!("/{key}"),
                    serde_path_to_error::Segment::Enum { variant } => format!("/{variant}"),
                    serde_path_to_error::Segment::Unknown => String::new(),
                })
                .collect::<String>();
            Error::Config {
                pointer,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate_sections()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&codec::read_text(path)?)?;
        if let Some(file) = &cfg.world_file {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.world_file = Some(dir.join(file));
                }
            }
        }
        Ok(cfg)
    }

    /// Checks each section on its own, without touching any world file.
    pub fn validate_sections(&self) -> Result<()> {
        match (&self.world, &self.world_file) {
            (Some(w), None) => w.validate().map_err(|e| prefixed("world", e))?,
            (None, Some(_)) => {}
            _ => return Err(Error::config("/world", "give exactly one of world and world_file")),
        }
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if let Some(w) = &self.world {
            self.check_token_dim(w.token_dim)?;
        }
        Ok(())
    }

    fn check_token_dim(&self, world_dim: usize) -> Result<()> {
        if self.model.token_dim != world_dim {
            return Err(Error::config(
                "/model/token_dim",
                format!("must equal the world token dimension {world_dim}"),
            ));
        }
        Ok(())
    }

    /// Builds or loads the world.
    pub fn world(&self) -> Result<World> {
        let world = match (&self.world, &self.world_file) {
            (Some(w), _) => World::build(w.clone()).map_err(|e| prefixed("world", e))?,
            (None, Some(path)) => World::load(path)?,
            (None, None) => return Err(Error::config("/world", "missing")),
        };
        self.check_token_dim(world.token_dim())?;
        Ok(world)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer_of(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_json(r#"{"world": {}}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"world": {"seed": 3}, "train": {"beta": 0, "total_steps": 10}}"#).unwrap();
        assert_eq!(cfg.world.unwrap().seed, 3);
        assert_eq!(cfg.train.beta, 0.0);
        assert_eq!(cfg.train.alpha, 1.0);
    }

    #[test]
    fn validation_errors_carry_pointers() {
        assert_eq!(pointer_of(r#"{"world": {"num_known_concepts": 1}}"#), "/world/num_known_concepts");
        assert_eq!(pointer_of(r#"{"world": {}, "train": {"n_accumulation": 1}}"#), "/train/n_accumulation");
        assert_eq!(pointer_of(r#"{"world": {}, "model": {"theta1": "1.5"}}"#), "/model/theta1");
        assert_eq!(pointer_of(r#"{"world": {}, "model": {"token_dim": 16}}"#), "/model/token_dim");
        assert_eq!(pointer_of(r#"{}"#), "/world");
    }

    #[test]
    fn type_errors_carry_pointers() {
        assert_eq!(pointer_of(r#"{"world": {"token_dim": "x"}}"#), "/world/token_dim");
        assert_eq!(pointer_of(r#"{"world": {}, "train": {"tau": "abc"}}"#), "/train/tau");
        assert!(pointer_of(r#"{"world": {"bogus": 1}}"#).starts_with("/world"));
    }

    #[test]
    fn round_trip_and_digest() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(digest(&cfg).unwrap(), digest(&back).unwrap());
        let other = RunConfig {
            train: TrainConfig { seed: 8, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        assert_ne!(digest(&cfg).unwrap(), digest(&other).unwrap());
        // Known SHA-256 of "null".
        assert_eq!(
            digest(&()).unwrap(),
            "74234e98afe7498fb5daf1f36ac2d78acc339464f950703b8c019892f982b90b"
        );
    }
}
