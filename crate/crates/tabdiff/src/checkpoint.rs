//! Checkpoint container.
//!
//! A UTF-8 header of `key = value` lines ending in `end`, followed by every
//! tensor as little-endian `f32` in manifest order:
//!
//! ```text
//! tabdiff-checkpoint
//! version = 1
//! epoch = 1280
//! rng.seed = 07000000...
//! model.d_model = 16
//! config.epochs = 1280
//! feature = MedInc<TAB>3.87<TAB>1.89
//! tensor = embedding.weight<TAB>9,16
//! end
//! <raw tensor bytes>
//! ```
//!
//! Encoding is a pure function of the checkpoint, so decoding and
//! re-encoding reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use tabdiff_core::data::Standardization;
use tabdiff_core::training::CHECKPOINT_VERSION;
use tabdiff_core::{Checkpoint, FeatureRegistry, Model, ModelConfig, Preset, RngState, Tensor};

use crate::config::{from_pairs, render_config};
use crate::error::{CliError, Result};

const MAGIC: &str = "tabdiff-checkpoint";
const SOURCE: &str = "<checkpoint>";

fn model_fields(m: &ModelConfig) -> [(&'static str, String); 11] {
    [
        ("d_model", m.d_model.to_string()),
        ("heads", m.heads.to_string()),
        ("layers", m.layers.to_string()),
        ("ff_width", m.ff_width.to_string()),
        ("time_dim", m.time_dim.to_string()),
        ("head_width", m.head_width.to_string()),
        ("head_layers", m.head_layers.to_string()),
        ("context_length", m.context_length.to_string()),
        ("diffusion_steps", m.diffusion_steps.to_string()),
        ("beta_start", format!("{:?}", m.beta_start)),
        ("beta_end", format!("{:?}", m.beta_end)),
    ]
}

fn check_line(what: &str, s: &str) -> Result<()> {
    if s.contains(['\n', '\r']) {
        return Err(CliError::Usage(format!("{what} must not contain line breaks")));
    }
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    check_line("dataset path", &ck.config.dataset)?;
    check_line("checkpoint path", &ck.config.checkpoint)?;
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC}");
    let _ = writeln!(h, "version = {}", ck.version);
    let _ = writeln!(h, "epoch = {}", ck.epoch);
    let seed: String = ck.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(h, "rng.seed = {seed}");
    let _ = writeln!(h, "rng.stream = {}", ck.rng.stream);
    let _ = writeln!(h, "rng.word_pos = {}", ck.rng.word_pos);
    for (k, v) in model_fields(ck.model.config()) {
        let _ = writeln!(h, "model.{k} = {v}");
    }
    for line in render_config(&ck.config).lines() {
        let _ = writeln!(h, "config.{line}");
    }
    let reg = ck.model.registry();
    for id in reg.ids() {
        let st = reg.stats(id);
        let _ = writeln!(h, "feature = {}\t{:?}\t{:?}", reg.name(id), st.mean, st.scale);
    }
    for (name, t) in ck.model.params().iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(h, "tensor = {name}\t{}", shape.join(","));
    }
    let _ = writeln!(h, "end");
    let mut out = h.into_bytes();
    for t in ck.model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(detail: impl Into<String>) -> CliError {
    CliError::format(SOURCE, detail)
}

fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = map.remove(key).ok_or_else(|| bad(format!("missing `{key}`")))?;
    v.parse().map_err(|_| bad(format!("`{key}`: cannot parse `{v}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("header terminator not found"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let mut scalars = BTreeMap::new();
    let mut config_pairs = BTreeMap::new();
    let mut features = Vec::new();
    let mut tensors = Vec::new();
    for line in lines {
        if line == "end" {
            break;
        }
        let (key, value) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        match key {
            "feature" => features.push(value.to_string()),
            "tensor" => tensors.push(value.to_string()),
            k => {
                let target = match k.strip_prefix("config.") {
                    Some(ck) => {
                        config_pairs.insert(ck.to_string(), value.to_string());
                        continue;
                    }
                    None => &mut scalars,
                };
                if target.insert(k.to_string(), value.to_string()).is_some() {
                    return Err(bad(format!("`{k}` repeated")));
                }
            }
        }
    }

    let version: u32 = take(&mut scalars, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let epoch: u64 = take(&mut scalars, "epoch")?;
    let seed_hex: String = take(&mut scalars, "rng.seed")?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(bad("rng.seed must be 64 hex digits"));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed is not hex"))?;
    }
    let rng = RngState {
        seed,
        stream: take(&mut scalars, "rng.stream")?,
        word_pos: take(&mut scalars, "rng.word_pos")?,
    };
    let model_config = ModelConfig {
        d_model: take(&mut scalars, "model.d_model")?,
        heads: take(&mut scalars, "model.heads")?,
        layers: take(&mut scalars, "model.layers")?,
        ff_width: take(&mut scalars, "model.ff_width")?,
        time_dim: take(&mut scalars, "model.time_dim")?,
        head_width: take(&mut scalars, "model.head_width")?,
        head_layers: take(&mut scalars, "model.head_layers")?,
        context_length: take(&mut scalars, "model.context_length")?,
        diffusion_steps: take(&mut scalars, "model.diffusion_steps")?,
        beta_start: take(&mut scalars, "model.beta_start")?,
        beta_end: take(&mut scalars, "model.beta_end")?,
    };
    if let Some(k) = scalars.keys().next() {
        return Err(bad(format!("unknown key `{k}`")));
    }
    let config = from_pairs(&config_pairs, Preset::Housing).map_err(|e| bad(e.to_string()))?;
    if config.model_config() != model_config {
        return Err(bad("model section disagrees with the training configuration"));
    }

    let mut names = Vec::with_capacity(features.len());
    let mut stats = Vec::with_capacity(features.len());
    for f in &features {
        let parts: Vec<&str> = f.split('\t').collect();
        let [name, mean, scale] = parts[..] else {
            return Err(bad(format!("malformed feature `{f}`")));
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("malformed feature `{f}`")));
        names.push(name.to_string());
        stats.push(Standardization {
            mean: parse(mean)?,
            scale: parse(scale)?,
        });
    }
    let registry = FeatureRegistry::new(names, stats)?;

    let mut offset = end;
    let mut named = Vec::with_capacity(tensors.len());
    for t in &tensors {
        let (name, shape) = t.split_once('\t').ok_or_else(|| bad(format!("malformed tensor `{t}`")))?;
        let shape: Vec<usize> = shape
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(format!("malformed shape in `{t}`"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let stop = offset + 4 * n;
        let raw = bytes.get(offset..stop).ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name.to_string(), Tensor::new(shape, data)?));
        offset = stop;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes after tensor data", bytes.len() - offset)));
    }
    let model = Model::from_tensors(model_config, registry, named)?;
    Ok(Checkpoint {
        version,
        model,
        config,
        rng,
        epoch,
    })
}

/// Writes through a temporary file in the same directory and renames, so a
/// crash never leaves a half-written checkpoint at `path`.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, &bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Format { detail, .. } => CliError::format(path, detail),
        other => other,
    })
}
