//! Training configuration: a nested TOML document plus `key=value` overrides.

use std::path::Path;

use sar_core::LossConfig;
use sar_vit::ViTConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};

/// Auxiliary attention loss added to cross-entropy with weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxLoss {
    #[serde(alias = "None")]
    None,
    #[serde(alias = "SpatialEntropy", alias = "spatial_entropy", alias = "spatialentropy", alias = "se")]
    SpatialEntropy,
    #[serde(alias = "TotalVariation", alias = "total_variation", alias = "totalvariation", alias = "tv")]
    TotalVariation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub aux_loss: AuxLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub detach_mean: bool,
    /// Evaluate on the test split every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Write a resumable checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Attention mass kept when thresholding maps for the Jaccard metric.
    pub jaccard_fraction: f64,
    pub test_samples: usize,
    pub model: ViTConfig,
    /// Training split; the test split reuses it with `test_samples` samples.
    pub data: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            aux_loss: AuxLoss::SpatialEntropy,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            min_lr_ratio: 1e-3,
            seed: 0,
            epsilon: 1e-9,
            detach_mean: false,
            eval_every: 5,
            checkpoint_every: 0,
            jaccard_fraction: 0.6,
            test_samples: 500,
            model: ViTConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("min_lr_ratio must lie in [0, 1], got {}", self.min_lr_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.jaccard_fraction > 0.0 && self.jaccard_fraction <= 1.0) {
            return bad(format!("jaccard_fraction must lie in (0, 1], got {}", self.jaccard_fraction));
        }
        self.loss_config().validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if self.model.image_size != self.data.image_size || self.model.patch_size != self.data.patch_size {
            return Err(Error::Incompatible(format!(
                "model expects {}px images with {}px patches, data has {}px / {}px",
                self.model.image_size, self.model.patch_size, self.data.image_size, self.data.patch_size
            )));
        }
        if self.model.num_classes != self.data.classes.len() {
            return Err(Error::Incompatible(format!(
                "model has {} classes, data has {}",
                self.model.num_classes,
                self.data.classes.len()
            )));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { epsilon: self.epsilon, detach_mean: self.detach_mean }
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec { samples: self.test_samples, ..self.data.clone() }
    }

    /// Parses TOML text, applies overrides in order and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        check_keys(&table, "")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Schema(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every settable dotted key, e.g. `model.embed_dim`.
pub fn schema_keys() -> Vec<String> {
    fn walk(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(v, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(&toml::Value::try_from(TrainConfig::default()).expect("defaults serialize"), "", &mut out);
    out.sort();
    out
}

/// `batchSize` -> `batch_size`; snake_case input is unchanged.
pub fn normalize_key(key: &str) -> String {
    key.split('.')
        .map(|seg| {
            let mut out = String::with_capacity(seg.len() + 4);
            for (i, ch) in seg.chars().enumerate() {
                if ch.is_ascii_uppercase() {
                    if i > 0 {
                        out.push('_');
                    }
                    out.push(ch.to_ascii_lowercase());
                } else if ch == '-' {
                    out.push('_');
                } else {
                    out.push(ch);
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .join(".")
}

fn check_keys(table: &toml::Table, prefix: &str) -> Result<()> {
    let keys = schema_keys();
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) if keys.iter().any(|s| s.starts_with(&format!("{key}."))) => check_keys(t, &key)?,
            _ if keys.contains(&key) => {}
            _ => return Err(Error::Schema(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `key=value` override. Keys may be dotted and camelCase; values
/// are TOML literals, with bare words taken as strings.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Schema(format!("override `{spec}` is not of the form key=value")))?;
    let key = normalize_key(key.trim());
    if !schema_keys().contains(&key) {
        return Err(Error::Schema(format!("unknown config key `{key}`")));
    }
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields one part");
    let mut node = table;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| Error::Schema(format!("`{p}` is not a table")))?;
    }
    node.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}
