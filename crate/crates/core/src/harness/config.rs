//! Flat `key=value` text used for config files and checkpoint config blocks.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::vit::ModelConfig;

/// Ordered string map. Lines are `key=value`; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{raw}'", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Entries of `other` replace those of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))?;
        raw.parse()
            .map_err(|e| Error::Config(format!("key '{key}' = '{raw}': {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }

    /// Writes `cfg` under `prefix` (e.g. `model.dim`).
    pub fn set_model(&mut self, prefix: &str, cfg: &ModelConfig) {
        let p = |k: &str| format!("{prefix}{k}");
        self.set(&p("dim"), cfg.dim);
        self.set(&p("depth"), cfg.depth);
        self.set(&p("heads"), cfg.heads);
        self.set(&p("head_dim"), cfg.head_dim);
        self.set(&p("mlp_dim"), cfg.mlp_dim);
        self.set(&p("patch_size"), cfg.patch_size);
        self.set(&p("image_size"), cfg.image_size);
        self.set(&p("in_channels"), cfg.in_channels);
        self.set(&p("num_classes"), cfg.num_classes);
    }

    pub fn model(&self, prefix: &str) -> Result<ModelConfig> {
        let p = |k: &str| format!("{prefix}{k}");
        let cfg = ModelConfig {
            dim: self.require(&p("dim"))?,
            depth: self.require(&p("depth"))?,
            heads: self.require(&p("heads"))?,
            head_dim: self.require(&p("head_dim"))?,
            mlp_dim: self.require(&p("mlp_dim"))?,
            patch_size: self.require(&p("patch_size"))?,
            image_size: self.require(&p("image_size"))?,
            in_channels: self.require(&p("in_channels"))?,
            num_classes: self.require(&p("num_classes"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_and_merge() {
        let mut a = KvConfig::parse("# defaults\nlr = 0.001\nepochs=3\n\n").unwrap();
        assert_eq!(a.require::<f64>("lr").unwrap(), 0.001);
        let b = KvConfig::parse("epochs=5 # override").unwrap();
        a.merge(&b);
        assert_eq!(a.require::<usize>("epochs").unwrap(), 5);
        assert_eq!(a.render(), "epochs=5\nlr=0.001\n");
        assert!(KvConfig::parse("novalue").is_err());
        assert!(a.require::<usize>("lr").is_err());
    }

    #[test]
    fn model_config_round_trip() {
        let cfg = ModelConfig::new(32, 6, 4, 64).with_image(16, 4, 3).with_classes(10);
        let mut kv = KvConfig::new();
        kv.set_model("model.", &cfg);
        assert_eq!(kv.model("model.").unwrap(), cfg);
    }
}
