use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_select::validate_crop_bounds;
use crate::rng::RNG_ALGORITHM;

/// Which crop branches contribute embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    RawOnly,
    FeatureOnly,
}

impl Branches {
    pub fn raw(self) -> bool {
        matches!(self, Branches::Both | Branches::RawOnly)
    }

    pub fn feature(self) -> bool {
        matches!(self, Branches::Both | Branches::FeatureOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_map: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Lower bound of the crop side fraction.
    pub alpha: f64,
    /// Upper bound of the crop side fraction.
    pub beta: f64,
    /// Candidate anchor patches kept from the attention grid.
    pub k: usize,
    /// Anchors drawn per image (crops per branch).
    pub n_crops: usize,
    /// Softmax temperature of the description weights.
    pub tau: f32,
    /// Softmax temperature of the patch probabilities.
    pub patch_temperature: f32,
    pub seed: u64,
    pub rng: String,
    /// Expected split layer of the embedding encoder; checked against the backend.
    pub split_layer: Option<usize>,
    pub include_full_image: bool,
    pub branches: Branches,
    pub workers: usize,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.9,
            k: 20,
            n_crops: 60,
            tau: crate::scoring::DEFAULT_TAU,
            patch_temperature: 1.0,
            seed: 0,
            rng: RNG_ALGORITHM.to_string(),
            split_layer: None,
            include_full_image: false,
            branches: Branches::Both,
            workers: 1,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_crop_bounds(self.alpha, self.beta)?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_crops == 0 {
            return Err(Error::Config("n_crops must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.patch_temperature > 0.0 && self.patch_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "patch_temperature must be positive, got {}",
                self.patch_temperature
            )));
        }
        if self.rng != RNG_ALGORITHM {
            return Err(Error::Config(format!(
                "unsupported rng `{}`, only `{RNG_ALGORITHM}` is available",
                self.rng
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Embeddings produced per image.
    pub fn embeddings_per_image(&self) -> usize {
        let per_branch = self.n_crops;
        (self.branches.raw() as usize + self.branches.feature() as usize) * per_branch
            + self.include_full_image as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.alpha, c.beta, c.k, c.n_crops), (0.5, 0.9, 20, 60));
        assert_eq!(c.embeddings_per_image(), 120);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "branches": "raw_only"}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.branches, Branches::RawOnly);
        assert_eq!(c.k, 20);
        assert_eq!(c.embeddings_per_image(), 60);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 7}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            RunConfig { alpha: 0.9, beta: 0.5, ..Default::default() },
            RunConfig { k: 0, ..Default::default() },
            RunConfig { n_crops: 0, ..Default::default() },
            RunConfig { tau: 0.0, ..Default::default() },
            RunConfig { rng: "mt19937".into(), ..Default::default() },
            RunConfig { workers: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
