//! Flat `key = value` training configuration.
//!
//! ```text
//! # housing.cfg
//! preset = housing
//! dataset = data/housing.csv
//! epochs = 1280
//! ```
//!
//! `preset` fixes the defaults and may appear anywhere in the file; every
//! other key overrides one field. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use tabdiff_core::{Preset, TrainConfig};

use crate::error::{CliError, Result};

/// Keys in the order they are rendered.
pub const KEYS: &[&str] = &[
    "preset",
    "epochs",
    "cycle_length_epochs",
    "batch_size",
    "context_length",
    "seed",
    "eta_max",
    "eta_min",
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "test_fraction",
    "dataset",
    "checkpoint",
];

/// Splits `text` into ordered key-value pairs, rejecting unknown and
/// repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key `{key}` (known: {})",
                i + 1,
                KEYS.join(", ")
            )));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: `{key}` set twice", i + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

/// Builds a config from key-value pairs. `fallback` supplies the preset
/// when the pairs do not name one.
pub fn from_pairs(pairs: &BTreeMap<String, String>, fallback: Preset) -> Result<TrainConfig> {
    let preset = match pairs.get("preset") {
        Some(name) => Preset::parse(name)?,
        None => fallback,
    };
    let mut c = TrainConfig::for_preset(preset);
    for (key, value) in pairs {
        let v = value.as_str();
        match key.as_str() {
            "preset" => {}
            "epochs" => c.epochs = parse_value(key, v)?,
            "cycle_length_epochs" => c.cycle_length_epochs = parse_value(key, v)?,
            "batch_size" => c.batch_size = parse_value(key, v)?,
            "context_length" => c.context_length = parse_value(key, v)?,
            "seed" => c.seed = parse_value(key, v)?,
            "eta_max" => c.eta_max = parse_value(key, v)?,
            "eta_min" => c.eta_min = parse_value(key, v)?,
            "diffusion_steps" => c.diffusion_steps = parse_value(key, v)?,
            "beta_start" => c.beta_start = parse_value(key, v)?,
            "beta_end" => c.beta_end = parse_value(key, v)?,
            "test_fraction" => c.test_fraction = parse_value(key, v)?,
            "dataset" => c.dataset = value.clone(),
            "checkpoint" => c.checkpoint = value.clone(),
            _ => unreachable!("keys are checked while parsing"),
        }
    }
    Ok(c)
}

pub fn parse_config(text: &str, fallback: Preset) -> Result<TrainConfig> {
    from_pairs(&parse_pairs(text)?, fallback)
}

/// One `key = value` line per field, in [`KEYS`] order. Floats use the
/// shortest representation that parses back to the same value.
pub fn render_config(c: &TrainConfig) -> String {
    let values = [
        c.preset.name().to_string(),
        c.epochs.to_string(),
        c.cycle_length_epochs.to_string(),
        c.batch_size.to_string(),
        c.context_length.to_string(),
        c.seed.to_string(),
        format!("{:?}", c.eta_max),
        format!("{:?}", c.eta_min),
        c.diffusion_steps.to_string(),
        format!("{:?}", c.beta_start),
        format!("{:?}", c.beta_end),
        format!("{:?}", c.test_fraction),
        c.dataset.clone(),
        c.checkpoint.clone(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
