use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trainer::schedule::RegScheme;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    Value { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every knob of the model and the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Width of word and candidate representations.
    pub hidden: usize,
    pub d_entity: usize,
    pub d_type: usize,
    pub d_relation: usize,
    pub d_coarse: usize,
    pub ff_dim: usize,
    /// Candidates per mention.
    pub candidates: usize,
    pub max_types: usize,
    pub max_relations: usize,
    pub heads: usize,
    pub layers: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    pub reg: RegScheme,
    pub freeze_encoder: bool,
    pub use_entity: bool,
    pub use_type: bool,
    pub use_kg: bool,
    pub type_prediction: bool,
    pub coarse_types: usize,
    pub max_sentence_len: usize,
    pub max_ngram: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 2,
            batch_size: 16,
            hidden: 64,
            d_entity: 64,
            d_type: 32,
            d_relation: 32,
            d_coarse: 32,
            ff_dim: 128,
            candidates: 30,
            max_types: 3,
            max_relations: 50,
            heads: 16,
            layers: 1,
            encoder_layers: 0,
            dropout: 0.1,
            reg: RegScheme::InvPopPower,
            freeze_encoder: true,
            use_entity: true,
            use_type: true,
            use_kg: true,
            type_prediction: true,
            coarse_types: 6,
            max_sentence_len: 100,
            max_ngram: 5,
            seed: 7,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "epochs",
    "batch_size",
    "hidden",
    "d_entity",
    "d_type",
    "d_relation",
    "d_coarse",
    "ff_dim",
    "candidates",
    "max_types",
    "max_relations",
    "heads",
    "layers",
    "encoder_layers",
    "dropout",
    "reg",
    "freeze_encoder",
    "use_entity",
    "use_type",
    "use_kg",
    "type_prediction",
    "coarse_types",
    "max_sentence_len",
    "max_ngram",
    "seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "d_entity" => self.d_entity = parse(key, value)?,
            "d_type" => self.d_type = parse(key, value)?,
            "d_relation" => self.d_relation = parse(key, value)?,
            "d_coarse" => self.d_coarse = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "candidates" => self.candidates = parse(key, value)?,
            "max_types" => self.max_types = parse(key, value)?,
            "max_relations" => self.max_relations = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "reg" => self.reg = parse(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse(key, value)?,
            "use_entity" => self.use_entity = parse(key, value)?,
            "use_type" => self.use_type = parse(key, value)?,
            "use_kg" => self.use_kg = parse(key, value)?,
            "type_prediction" => self.type_prediction = parse(key, value)?,
            "coarse_types" => self.coarse_types = parse(key, value)?,
            "max_sentence_len" => self.max_sentence_len = parse(key, value)?,
            "max_ngram" => self.max_ngram = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn values(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("lr", format!("{:e}", self.lr));
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("hidden", self.hidden.to_string());
        m.insert("d_entity", self.d_entity.to_string());
        m.insert("d_type", self.d_type.to_string());
        m.insert("d_relation", self.d_relation.to_string());
        m.insert("d_coarse", self.d_coarse.to_string());
        m.insert("ff_dim", self.ff_dim.to_string());
        m.insert("candidates", self.candidates.to_string());
        m.insert("max_types", self.max_types.to_string());
        m.insert("max_relations", self.max_relations.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("encoder_layers", self.encoder_layers.to_string());
        m.insert("dropout", self.dropout.to_string());
        m.insert("reg", self.reg.to_string());
        m.insert("freeze_encoder", self.freeze_encoder.to_string());
        m.insert("use_entity", self.use_entity.to_string());
        m.insert("use_type", self.use_type.to_string());
        m.insert("use_kg", self.use_kg.to_string());
        m.insert("type_prediction", self.type_prediction.to_string());
        m.insert("coarse_types", self.coarse_types.to_string());
        m.insert("max_sentence_len", self.max_sentence_len.to_string());
        m.insert("max_ngram", self.max_ngram.to_string());
        m.insert("seed", self.seed.to_string());
        m
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical text form, keys sorted.
    pub fn to_text(&self) -> String {
        self.values().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First eight bytes of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("d_entity", self.d_entity),
            ("d_type", self.d_type),
            ("d_relation", self.d_relation),
            ("d_coarse", self.d_coarse),
            ("ff_dim", self.ff_dim),
            ("candidates", self.candidates),
            ("max_types", self.max_types),
            ("max_relations", self.max_relations),
            ("heads", self.heads),
            ("layers", self.layers),
            ("coarse_types", self.coarse_types),
            ("max_sentence_len", self.max_sentence_len),
            ("max_ngram", self.max_ngram),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid("dropout must be in [0, 1)".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ConfigError::Invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(ConfigError::Invalid(
                "hidden must be even for positional encodings".into(),
            ));
        }
        if self.encoder_layers > 2 {
            return Err(ConfigError::Invalid("encoder_layers must be 0, 1 or 2".into()));
        }
        if !(self.use_entity || self.use_type || self.use_kg) {
            return Err(ConfigError::Invalid(
                "at least one of use_entity, use_type, use_kg must be enabled".into(),
            ));
        }
        if let RegScheme::Fixed(p) = self.reg {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(
                    "fixed masking probability must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Type prediction only feeds the payload when type signals are on.
    pub fn predicts_types(&self) -> bool {
        self.type_prediction && self.use_type
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
