//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenize::VocabKind;
use crate::train::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizationConfig {
    pub kind: VocabKind,
    pub char_vocab_size: usize,
    pub bpe_vocab_size: usize,
}

impl Default for TokenizationConfig {
    fn default() -> Self {
        TokenizationConfig { kind: VocabKind::Char, char_vocab_size: 496, bpe_vocab_size: 32000 }
    }
}

/// Corpus and output locations. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    /// Vocabulary file; built from the training corpus when absent.
    pub vocab: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_src: None, train_tgt: None, dev_src: None, dev_tgt: None, vocab: None, run_dir: PathBuf::from("run") }
    }
}

impl DataConfig {
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.train_src, &mut self.train_tgt, &mut self.dev_src, &mut self.dev_tgt, &mut self.vocab]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.run_dir);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenization: TokenizationConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are TOML literals; anything that does not parse as one is a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut node = &mut table;
            for p in parents {
                node = match node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
                    toml::Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("override {key:?}: {p} is not a section"))),
                };
            }
            node.insert(last.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.data.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.tokenization.char_vocab_size == 0 || self.tokenization.bpe_vocab_size == 0 {
            return Err(Error::Config("vocabulary sizes must be >= 1".into()));
        }
        Ok(())
    }
}
