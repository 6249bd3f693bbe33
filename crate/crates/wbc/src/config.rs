//! Line-oriented `key = value` configuration files with typed readers.
//!
//! `#` starts a comment; blank lines are ignored; later assignments override
//! earlier ones (which is how CLI `--set` overrides work). Readers track
//! which keys were consumed so unknown keys become hard errors.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::SGDConfig;

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self {
            values,
            consumed: BTreeSet::new(),
        })
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::config(format!(
                "override {assignment:?} is not of the form key=value"
            )));
        };
        self.values
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    fn get(&mut self, key: &str) -> Option<&str> {
        if self.values.contains_key(key) {
            self.consumed.insert(key.to_string());
        }
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::config(format!("key {key}: cannot parse {raw:?}: {e}"))),
        }
    }

    /// Error on any key that no reader consumed (typo guard).
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(|k| k.as_str())
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

pub fn synth_config_from(kv: &mut KvConfig) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        identities: kv.get_parsed("identities", d.identities)?,
        images_per_identity: kv.get_parsed("images_per_identity", d.images_per_identity)?,
        height: kv.get_parsed("height", d.height)?,
        width: kv.get_parsed("width", d.width)?,
        channels_in: kv.get_parsed("channels_in", d.channels_in)?,
        latent_parts: kv.get_parsed("latent_parts", d.latent_parts)?,
        jitter: kv.get_parsed("jitter", d.jitter)?,
        noise_std: kv.get_parsed("noise_std", d.noise_std)?,
        probe_per_identity: kv.get_parsed("probe_per_identity", d.probe_per_identity)?,
        gallery_per_identity: kv.get_parsed("gallery_per_identity", d.gallery_per_identity)?,
        seed: kv.get_parsed("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config_from(kv: &mut KvConfig) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        variant: kv.get_parsed::<Variant>("variant", d.variant)?,
        parts: kv.get_parsed("parts", d.parts)?,
        channels: kv.get_parsed("channels", d.channels)?,
        mid_channels: kv.get_parsed("mid_channels", d.mid_channels)?,
        embed_dim: kv.get_parsed("embed_dim", d.embed_dim)?,
        input_h: kv.get_parsed("input_h", d.input_h)?,
        input_w: kv.get_parsed("input_w", d.input_w)?,
        input_c: kv.get_parsed("input_c", d.input_c)?,
        seed: kv.get_parsed("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn sgd_config_from(kv: &mut KvConfig) -> Result<SGDConfig> {
    let d = SGDConfig::desk_scale();
    let cfg = SGDConfig {
        initial_lr: kv.get_parsed("lr", d.initial_lr)?,
        halve_period: kv.get_parsed("halve_period", d.halve_period)?,
        momentum: kv.get_parsed("momentum", d.momentum)?,
        weight_decay: kv.get_parsed("weight_decay", d.weight_decay)?,
        batch_size: kv.get_parsed("batch_size", d.batch_size)?,
        k_images: kv.get_parsed("k_images", d.k_images)?,
        max_iters: kv.get_parsed("max_iters", d.max_iters)?,
        margin: kv.get_parsed("margin", d.margin)?,
        triplet_cap: kv.get_parsed("triplet_cap", d.triplet_cap)?,
        seed: kv.get_parsed("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
