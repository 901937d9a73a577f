//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must appear
//! in [`SCHEMA`]; values are checked when read.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rearec::encoder::{EncoderConfig, MaskMode};
use rearec::objectives::{Objective, ObjectiveConfig};
use rearec::training::TrainConfig;
use rearec::{Error, Result};

/// `(key, default, description)`; an empty default means unset.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("interactions", "", "raw interaction TSV (user, item, rating, timestamp)"),
    ("dataset", "", "prepared dataset JSON"),
    ("min_rating", "3", "keep events with rating strictly above this"),
    ("k_core", "5", "minimum events per user and per item"),
    ("t1", "", "validation start timestamp (default: 80% timestamp quantile)"),
    ("t2", "", "test start timestamp (default: 90% timestamp quantile)"),
    ("n_max", "50", "most recent items kept per prefix"),
    ("d", "64", "model width"),
    ("layers", "2", "transformer blocks"),
    ("heads", "2", "attention heads"),
    ("k_max", "5", "reasoning positions the model supports"),
    ("mask_mode", "causal", "causal | prefix"),
    ("dropout", "0.2", "training dropout probability"),
    ("objective", "base", "base | erl | prl"),
    ("k", "0", "reasoning steps during training"),
    ("lambda", "0.01", "KL weight (erl)"),
    ("tau", "1.0", "base temperature (prl)"),
    ("alpha", "1.0", "temperature decay rate (prl)"),
    ("gamma", "0.01", "noise variance (prl)"),
    ("tau_c", "1.0", "contrastive temperature (prl)"),
    ("learning_rate", "0.001", "Adam learning rate"),
    ("batch_size", "128", "examples per batch"),
    ("max_epochs", "200", "epoch limit"),
    ("patience", "10", "epochs without validation gain before stopping"),
    ("seed", "0", "random seed"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !known(key) {
                return Err(Error::Config(format!("line {}: unknown config key `{key}`", i + 1)));
            }
            cfg.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Overrides `key` when `value` is present.
    pub fn set<T: ToString>(&mut self, key: &str, value: Option<T>) {
        assert!(known(key), "flag `{key}` maps to no schema key");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d))
            .filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))))
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("`{key}` is required")))
    }

    pub fn encoder(&self, num_items: usize) -> Result<EncoderConfig> {
        let mask_mode: MaskMode = self.require("mask_mode")?;
        let cfg = EncoderConfig {
            num_items,
            d: self.require("d")?,
            layers: self.require("layers")?,
            heads: self.require("heads")?,
            n_max: self.require("n_max")?,
            k_max: self.require("k_max")?,
            mask_mode,
            dropout: self.require("dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let objective: Objective = self.require("objective")?;
        let cfg = TrainConfig {
            objective: ObjectiveConfig {
                objective,
                k: self.require("k")?,
                lambda: self.require("lambda")?,
                tau: self.require("tau")?,
                alpha: self.require("alpha")?,
                gamma: self.require("gamma")?,
                tau_c: self.require("tau_c")?,
            },
            learning_rate: self.require("learning_rate")?,
            batch_size: self.require("batch_size")?,
            max_epochs: self.require("max_epochs")?,
            patience: self.require("patience")?,
            seed: self.require("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Schema rendered for `--help`.
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (key = value, defaults in brackets):\n");
    for (k, d, desc) in SCHEMA {
        let d = if d.is_empty() { "unset" } else { d };
        out.push_str(&format!("  {k:<14} {desc} [{d}]\n"));
    }
    out
}
