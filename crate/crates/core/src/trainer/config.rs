use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::NetworkConfig;
use crate::error::{invalid, Error, Result};
use crate::losses::LossConfig;
use crate::preprocess::{AhaParams, MaskInterpolation, PreprocessConfig, DEFAULT_SPACING_MM};

/// Which patch stream a network consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Min-max normalized intensities.
    #[default]
    Raw,
    /// Background-suppressed twin.
    VesselLike,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceNetwork {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub network: InferenceNetwork,
    pub input: InputKind,
}

/// Everything a training run needs. Loaded from `train.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub learning_rate: f64,
    pub lr_step_epochs: usize,
    pub lr_factor: f64,
    pub ema_base_decay: f64,
    pub seed: u64,
    pub teacher_input: InputKind,
    /// Training steps per epoch per training case.
    pub patches_per_case: usize,
    /// Labeled patches per validation case used for model selection.
    pub val_patches_per_case: usize,
    pub spacing_mm: f64,
    pub mask_interpolation: MaskInterpolation,
    pub aha: AhaParams,
    pub inference: InferenceConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            patch_size: 32,
            stride: 16,
            learning_rate: 1e-3,
            lr_step_epochs: 10,
            lr_factor: 0.1,
            ema_base_decay: 0.999,
            seed: 0,
            teacher_input: InputKind::Raw,
            patches_per_case: 4,
            val_patches_per_case: 4,
            spacing_mm: DEFAULT_SPACING_MM,
            mask_interpolation: MaskInterpolation::Nearest,
            aha: AhaParams::default(),
            inference: InferenceConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Published training setting.
    Published,
    /// Chosen for this implementation.
    ArtifactDefault,
    /// Set explicitly by the user.
    User,
}

/// Default-value provenance of every top-level and nested key.
const PUBLISHED: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_step_epochs",
    "lr_factor",
    "ema_base_decay",
    "loss.sup_weight",
    "loss.semi_weight",
];

impl TrainerConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainerConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("lr_step_epochs", self.lr_step_epochs),
            ("patches_per_case", self.patches_per_case),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.stride > self.patch_size {
            return Err(invalid("stride must not exceed patch_size"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(invalid("lr_factor must lie in (0,1)"));
        }
        if !(self.ema_base_decay > 0.0 && self.ema_base_decay < 1.0) {
            return Err(invalid("ema_base_decay must lie in (0,1)"));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(invalid("spacing_mm must be positive"));
        }
        self.aha.validate()?;
        self.loss.validate()?;
        self.network_config().validate()
    }

    /// Network config with the training patch size filled in.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            patch_size: self.patch_size,
            ..self.network.clone()
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            spacing: self.spacing_mm,
            patch: self.patch_size,
            stride: self.stride,
            mask_interpolation: self.mask_interpolation,
            aha: self.aha.clone(),
        }
    }

    /// Learning rate at `epoch`: stepwise decay by `lr_factor`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_factor.powi((epoch / self.lr_step_epochs) as i32)
    }

    /// Flattened `key -> (value, provenance)` listing. Keys present in
    /// `user_text` (a TOML document) are marked as user-set.
    pub fn provenance(&self, user_text: Option<&str>) -> Result<Vec<(String, String, Provenance)>> {
        let user: Option<toml::Table> = user_text
            .map(|t| toml::from_str(t).map_err(|e| Error::Config(e.to_string())))
            .transpose()?;
        let value = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        Ok(out
            .into_iter()
            .map(|(k, v)| {
                let is_user = user.as_ref().is_some_and(|u| lookup(u, &k).is_some());
                let p = if is_user {
                    Provenance::User
                } else if PUBLISHED.contains(&k.as_str()) {
                    Provenance::Published
                } else {
                    Provenance::ArtifactDefault
                };
                (k, v, p)
            })
            .collect())
    }

    /// The configuration as TOML with a provenance comment per key.
    pub fn to_annotated_toml(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut section = String::new();
        let mut out = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
                out.push_str(line);
                out.push('\n');
                continue;
            }
            match trimmed.split_once(" = ") {
                Some((key, _)) => {
                    let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
                    let tag = if PUBLISHED.contains(&full.as_str()) { "published setting" } else { "artifact default" };
                    out.push_str(&format!("{line}  # {tag}\n"));
                }
                None => {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(sub) => flatten(&key, sub, out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn lookup<'a>(t: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainerConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert!((cfg.learning_rate_at(9) - 1e-3).abs() < 1e-18);
        assert!((cfg.learning_rate_at(10) - 1e-4).abs() < 1e-15);
        assert!((cfg.learning_rate_at(20) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = TrainerConfig { epochs: 3, seed: 9, ..Default::default() };
        let text = cfg.to_annotated_toml().unwrap();
        assert!(text.contains("# published setting"));
        assert_eq!(TrainerConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(TrainerConfig::from_toml_str("epochz = 3").is_err());
        assert!(TrainerConfig::from_toml_str("[loss]\nrho = 0.5").is_err());
        assert!(TrainerConfig::from_toml_str("lr_factor = 1.5").is_err());
        assert!(TrainerConfig::from_toml_str("stride = 64").is_err());
    }

    #[test]
    fn provenance_marks_user_keys() {
        let user = "epochs = 5\n[loss]\nsemi_weight = 0.0\n";
        let cfg = TrainerConfig::from_toml_str(user).unwrap();
        let prov = cfg.provenance(Some(user)).unwrap();
        let find = |k: &str| prov.iter().find(|(key, ..)| key == k).unwrap().2;
        assert_eq!(find("epochs"), Provenance::User);
        assert_eq!(find("loss.semi_weight"), Provenance::User);
        assert_eq!(find("learning_rate"), Provenance::Published);
        assert_eq!(find("patch_size"), Provenance::ArtifactDefault);
    }
}
