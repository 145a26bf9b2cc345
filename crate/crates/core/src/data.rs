//! Tables with missing entries, the feature registry, and construction of
//! token sequences for training and inference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied to per-feature scales so constant columns stay invertible.
pub const MIN_SCALE: f64 = 1e-8;

/// Index of a feature in a [`FeatureRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn standardize(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.scale
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

/// Feature names, their ids, and z-score statistics. The padding token takes
/// the id one past the last feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRegistry {
    names: Vec<String>,
    stats: Vec<Standardization>,
    lookup: BTreeMap<String, usize>,
}

/// Names end up in line-oriented files and `NAME=VALUE` flags.
fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', '\n', '\r', '=']) || name.trim() != name {
        return Err(Error::Config(format!(
            "feature name {name:?} must be non-empty, trimmed, and free of tabs, newlines, and '='"
        )));
    }
    Ok(())
}

impl FeatureRegistry {
    pub fn new(names: Vec<String>, stats: Vec<Standardization>) -> Result<Self> {
        if names.len() != stats.len() {
            return Err(Error::Config(format!(
                "{} names but {} standardization entries",
                names.len(),
                stats.len()
            )));
        }
        let mut lookup = BTreeMap::new();
        for (idx, (name, st)) in names.iter().zip(&stats).enumerate() {
            validate_name(name)?;
            if !st.scale.is_finite() || st.scale <= 0.0 || !st.mean.is_finite() {
                return Err(Error::Config(format!(
                    "feature {name}: invalid standardization {:?}",
                    st
                )));
            }
            if lookup.insert(name.clone(), idx).is_some() {
                return Err(Error::Config(format!("duplicate feature name {name}")));
            }
        }
        Ok(Self { names, stats, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Integer id reserved for padding; distinct from every feature.
    pub fn padding_id(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = FeatureId> {
        (0..self.names.len()).map(FeatureId)
    }

    pub fn id(&self, name: &str) -> Result<FeatureId> {
        self.lookup
            .get(name)
            .map(|&i| FeatureId(i))
            .ok_or_else(|| Error::UnknownFeature(name.into()))
    }

    pub fn check(&self, id: FeatureId) -> Result<FeatureId> {
        if id.0 < self.names.len() {
            Ok(id)
        } else {
            Err(Error::UnknownFeature(format!("#{}", id.0)))
        }
    }

    pub fn name(&self, id: FeatureId) -> &str {
        &self.names[id.0]
    }

    pub fn stats(&self, id: FeatureId) -> Standardization {
        self.stats[id.0]
    }

    pub fn standardize(&self, id: FeatureId, raw: f64) -> f64 {
        self.stats[id.0].standardize(raw)
    }

    pub fn destandardize(&self, id: FeatureId, z: f64) -> f64 {
        self.stats[id.0].destandardize(z)
    }
}

/// `N x F` table; `None` marks a missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    columns: Vec<String>,
    cells: Vec<Option<f64>>,
    n_rows: usize,
}

impl RawTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let width = columns.len();
        if width == 0 {
            return Err(Error::Data("table has no columns".into()));
        }
        let n_rows = rows.len();
        let mut cells = Vec::with_capacity(n_rows * width);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(Error::Data(format!(
                    "row {r} has {} cells, header has {width}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {r} holds non-finite value {bad}")));
            }
            cells.extend(row);
        }
        Ok(Self {
            columns,
            cells,
            n_rows,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, r: usize) -> &[Option<f64>] {
        let w = self.columns.len();
        &self.cells[r * w..(r + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Option<f64>]> {
        self.cells.chunks(self.columns.len())
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.rows().map(move |row| row[c])
    }

    /// Rows with no observed entry are kept but cannot be sampled from.
    pub fn is_usable(&self, r: usize) -> bool {
        self.row(r).iter().any(Option::is_some)
    }

    pub fn unusable_rows(&self) -> Vec<usize> {
        (0..self.n_rows).filter(|&r| !self.is_usable(r)).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> RawTable {
        let mut cells = Vec::with_capacity(indices.len() * self.n_cols());
        for &r in indices {
            cells.extend_from_slice(self.row(r));
        }
        RawTable {
            columns: self.columns.clone(),
            cells,
            n_rows: indices.len(),
        }
    }
}

/// Per-feature z-score over the present entries, population standard
/// deviation floored at [`MIN_SCALE`].
pub fn fit_standardization(table: &RawTable) -> Result<FeatureRegistry> {
    let mut stats = Vec::with_capacity(table.n_cols());
    for (c, name) in table.columns().iter().enumerate() {
        let present: Vec<f64> = table.column(c).flatten().collect();
        if present.len() < 2 {
            return Err(Error::Config(format!(
                "feature {name} has {} present values, need at least 2",
                present.len()
            )));
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats.push(Standardization {
            mean,
            scale: libm::sqrt(var).max(MIN_SCALE),
        });
    }
    FeatureRegistry::new(table.columns().to_vec(), stats)
}

/// Deterministic row split: returns `(train, test)` index lists.
pub fn split_rows(n_rows: usize, seed: u64, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5_0117);
    order.shuffle(&mut rng);
    let n_test = libm::round(n_rows as f64 * test_fraction.clamp(0.0, 1.0)) as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// The value the diffusion head learns to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub feature: FeatureId,
    /// Standardized magnitude.
    pub value: f64,
}

/// One sequence for the encoder. Position 0 is the request token, which
/// carries no magnitude; `None` tokens are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRow {
    pub tokens: Vec<Option<FeatureId>>,
    pub magnitudes: Vec<f64>,
    pub mask: Vec<bool>,
    pub target: Option<Target>,
}

impl TokenizedRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn request(&self) -> FeatureId {
        self.tokens[0].expect("position 0 holds the request token")
    }

    /// Integer ids with padding mapped to the registry's reserved id.
    pub fn token_ids(&self, registry: &FeatureRegistry) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| t.map_or(registry.padding_id(), |f| f.0))
            .collect()
    }

    /// Number of conditioning tokens (unmasked positions after the request).
    pub fn n_inputs(&self) -> usize {
        self.mask.iter().skip(1).filter(|&&m| m).count()
    }

    /// Extends with padding up to `len` positions.
    pub fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.tokens.push(None);
            self.magnitudes.push(0.0);
            self.mask.push(false);
        }
    }

    fn with_capacity(len: usize) -> Self {
        Self {
            tokens: Vec::with_capacity(len),
            magnitudes: Vec::with_capacity(len),
            mask: Vec::with_capacity(len),
            target: None,
        }
    }

    fn push(&mut self, token: FeatureId, magnitude: f64) {
        self.tokens.push(Some(token));
        self.magnitudes.push(magnitude);
        self.mask.push(true);
    }
}

/// Draws one training example from a row: a uniformly chosen observed
/// feature as target, and an independent uniform-size uniform subset of the
/// observed features as inputs (which may include the target).
pub fn sample_training_example<R: Rng + ?Sized>(
    row: &[Option<f64>],
    registry: &FeatureRegistry,
    rng: &mut R,
    context_len: usize,
) -> Result<TokenizedRow> {
    if context_len < 2 {
        return Err(Error::Config(format!("context length must be at least 2, got {context_len}")));
    }
    if row.len() != registry.len() {
        return Err(Error::Data(format!(
            "row has {} cells, registry has {} features",
            row.len(),
            registry.len()
        )));
    }
    let observed: Vec<usize> = row
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    if observed.is_empty() {
        return Err(Error::EmptyRow);
    }

    let target_idx = observed[rng.random_range(0..observed.len())];
    let max_inputs = (context_len - 1).min(observed.len());
    let n_inputs = rng.random_range(0..=max_inputs);
    let picks = rand::seq::index::sample(rng, observed.len(), n_inputs);

    let target = FeatureId(target_idx);
    let mut seq = TokenizedRow::with_capacity(context_len);
    seq.push(target, 0.0);
    for p in picks.iter() {
        let id = FeatureId(observed[p]);
        let raw = row[id.0].expect("observed");
        seq.push(id, registry.standardize(id, raw));
    }
    seq.pad_to(context_len);
    seq.target = Some(Target {
        feature: target,
        value: registry.standardize(target, row[target_idx].expect("observed")),
    });
    Ok(seq)
}

/// Request token followed by the given conditions in order, then padding up
/// to `context_len`. The length may exceed the training context.
pub fn build_inference_sequence(
    conditions: &[(FeatureId, f64)],
    request: FeatureId,
    registry: &FeatureRegistry,
    context_len: usize,
) -> Result<TokenizedRow> {
    registry.check(request)?;
    if context_len < 1 + conditions.len() {
        return Err(Error::Contract(format!(
            "context length {context_len} cannot hold request plus {} conditions",
            conditions.len()
        )));
    }
    let mut seq = TokenizedRow::with_capacity(context_len);
    seq.push(request, 0.0);
    for &(id, raw) in conditions {
        registry.check(id)?;
        if !raw.is_finite() {
            return Err(Error::Data(format!("condition {} is not finite", registry.name(id))));
        }
        seq.push(id, registry.standardize(id, raw));
    }
    seq.pad_to(context_len);
    Ok(seq)
}
