//! Unified run configuration, read from TOML.
//!
//! Every section and field has a default, and unknown keys are rejected.
//! The defaults describe the toy setting: 200 phantoms at 64x64, the small
//! network, and a short training schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::FoldSettings;
use crate::model::NetConfig;
use crate::phantom::PhantomConfig;
use crate::preprocess::{AugmentPolicy, PreprocessConfig};
use crate::trainer::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "VCE_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentPolicy,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Localized-loss weights to compare; 0 is the plain CycleGAN.
    pub gammas: Vec<f64>,
    pub folds: FoldSettings,
    /// Absolute difference mapped to the top of the heatmap colormap.
    pub heatmap_vmax: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("vce_out"),
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig {
                size: 64,
                ..Default::default()
            },
            augment: AugmentPolicy::default(),
            net: NetConfig::toy(),
            train: TrainConfig::toy(),
            gammas: vec![0.0, 35.0, 100.0],
            folds: FoldSettings::default(),
            heatmap_vmax: 0.5,
        }
    }
}

impl RunConfig {
    /// Parses a config. Missing keys take the run defaults above, so a
    /// partial `[net]` section fills in from the toy network, not the
    /// full-scale one.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("run config always serializes");
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.augment.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.preprocess.size != self.net.image_size {
            return Err(Error::Config(format!(
                "preprocess.size ({}) must equal net.image_size ({})",
                self.preprocess.size, self.net.image_size
            )));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("gammas must be a nonempty list of finite values >= 0".into()));
        }
        if self.folds.n_folds < 2 {
            return Err(Error::Config("folds.n_folds must be >= 2".into()));
        }
        if !(self.heatmap_vmax > 0.0 && self.heatmap_vmax.is_finite()) {
            return Err(Error::Config("heatmap_vmax must be positive".into()));
        }
        Ok(())
    }

    /// Sets every seed (phantoms, training, folds) to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
        self.folds.seed = seed;
    }

    /// Output root, honoring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Overlays `top` onto `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[phantom]\nn_samples = 10\n[net]\nnorm_kind = \"batch\"").unwrap();
        assert_eq!(cfg.phantom.n_samples, 10);
        assert_eq!(cfg.phantom.image_size, 64);
        assert_eq!(cfg.net.norm_kind, crate::nn::NormKind::Batch);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[phantom]\nlesion_prob = 2.0").is_err());
        assert!(RunConfig::from_toml_str("[preprocess]\nsize = 32").is_err());
        assert!(RunConfig::from_toml_str("gammas = []").is_err());
    }
}
