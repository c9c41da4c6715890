//! Run configuration: one TOML file covering model sizes, the training
//! recipe, the synthetic languages and the pair topology.
//!
//! Every field can be overridden with `key=value` using dotted paths, for
//! example `train.max_updates=400` or `languages.1.latent_vocab=10`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{default_languages, LanguageSpec};
use crate::error::{Error, Result};
use crate::model::{LanguageVocab, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_hidden_dim: usize,
    pub readout_dim: usize,
    pub max_decode_len: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(Vec::new(), Vec::new());
        ModelSection {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            attn_hidden_dim: d.attn_hidden_dim,
            readout_dim: d.readout_dim,
            max_decode_len: d.max_decode_len,
            init_scale: d.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_size: 8000,
            dev_size: 500,
            test_size: 500,
            min_len: 3,
            max_len: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub batch_size: usize,
    pub max_updates: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = crate::zero_resource::finetune_config();
        FinetuneSection {
            batch_size: t.batch_size,
            max_updates: t.max_updates,
            eval_interval: t.eval_interval,
            patience: t.patience,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, initialization, batching and sampling.
    pub seed: u64,
    /// Directions trained with parallel data, as `SRC-TGT`.
    pub pairs: Vec<String>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub data: DataSection,
    pub languages: Vec<LanguageSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            pairs: ["S-E", "E-S", "F-E", "E-F"].map(String::from).to_vec(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            finetune: FinetuneSection::default(),
            data: DataSection::default(),
            languages: default_languages(20),
        }
    }
}

/// Split `"S-E"` into `("S", "E")`.
pub fn parse_pair(s: &str) -> Result<(String, String)> {
    match s.split_once('-') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => Ok((a.to_string(), b.to_string())),
        _ => Err(Error::Config(format!("bad language pair `{s}`, expected SRC-TGT"))),
    }
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().to_string())
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(toml_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(toml_err)?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{set}` is not key=value")))?;
            let key = key.trim();
            let mut node = &mut root;
            for part in key.split('.') {
                let next = match node {
                    toml::Value::Table(t) => t.get_mut(part),
                    toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                    _ => None,
                };
                node = next.ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            let value = parse_scalar(raw.trim());
            if let (toml::Value::String(_), false) = (&value, matches!(node, toml::Value::String(_))) {
                return Err(Error::Config(format!("bad value for `{key}`: `{}`", raw.trim())));
            }
            *node = value;
        }
        let cfg: RunConfig = root.try_into().map_err(toml_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        for l in &self.languages {
            l.validate()?;
        }
        for p in &self.pairs {
            let (s, t) = parse_pair(p)?;
            for l in [&s, &t] {
                if self.language(l).is_none() {
                    return Err(Error::Config(format!("pair {p}: unknown language `{l}`")));
                }
            }
            if s == t {
                return Err(Error::Config(format!("pair {p}: source equals target")));
            }
        }
        let d = &self.data;
        if d.min_len == 0 || d.min_len > d.max_len {
            return Err(Error::Config("data.min_len must be in [1, data.max_len]".into()));
        }
        if d.train_size == 0 || d.dev_size == 0 || d.test_size == 0 {
            return Err(Error::Config("data sizes must be >= 1".into()));
        }
        self.train.validate()?;
        self.finetune_config().validate()?;
        self.model_config().validate()
    }

    pub fn language(&self, name: &str) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.name == name)
    }

    pub fn pair_list(&self) -> Result<Vec<(String, String)>> {
        self.pairs.iter().map(|p| parse_pair(p)).collect()
    }

    /// Every configured language gets both an encoder and a decoder.
    pub fn model_config(&self) -> ModelConfig {
        let langs: Vec<LanguageVocab> = self.languages.iter().map(LanguageVocab::from_spec).collect();
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            attn_hidden_dim: m.attn_hidden_dim,
            readout_dim: m.readout_dim,
            max_decode_len: m.max_decode_len,
            init_scale: m.init_scale,
            seed: self.seed,
            ..ModelConfig::new(langs.clone(), langs)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let f = &self.finetune;
        TrainConfig {
            batch_size: f.batch_size,
            max_updates: f.max_updates,
            eval_interval: f.eval_interval,
            patience: f.patience,
            learning_rate: f.learning_rate,
            trainable: Vec::new(),
            ..self.train_config()
        }
    }
}
