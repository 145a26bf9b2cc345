//! Model presets, parameter layout, and the embedding + encoder + head
//! pipeline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureRegistry, TokenizedRow};
use crate::diffusion::{DenoiserParams, NoiseSchedule};
use crate::encoder::{encode, EmbeddingTable, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Binder, ParamStore, ParamValues};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Reference scale: 192-wide embeddings, 24 heads, 2 layers, 64 tokens.
    Paper,
    /// Desk scale for a nine-feature table: 16-wide, 2 heads, 2 layers.
    Housing,
    /// No transformer layers; the condition is the request embedding.
    Debug,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::Paper),
            "housing" => Ok(Self::Housing),
            "debug" => Ok(Self::Debug),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper, housing, or debug)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Housing => "housing",
            Self::Debug => "debug",
        }
    }

    /// Feature count of the dataset the preset was sized for.
    pub fn reference_features(self) -> usize {
        match self {
            Self::Paper => 118,
            Self::Housing => 9,
            Self::Debug => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub time_dim: usize,
    pub head_width: usize,
    pub head_layers: usize,
    pub context_length: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (d_model, heads, layers, context_length) = match preset {
            Preset::Paper => (192, 24, 2, 64),
            Preset::Housing => (16, 2, 2, 10),
            Preset::Debug => (8, 1, 0, 5),
        };
        Self {
            d_model,
            heads,
            layers,
            ff_width: 4 * d_model,
            time_dim: (d_model / 4).max(1),
            head_width: 3 * d_model,
            head_layers: 3,
            context_length,
            diffusion_steps: 120,
            beta_start: 1e-5,
            beta_end: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if self.ff_width == 0 || self.time_dim == 0 || self.head_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter counts per named tensor and per module.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub tensors: Vec<(String, usize)>,
    pub embedding: usize,
    pub transformer: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamReport {
    /// Embedding plus transformer blocks.
    pub fn encoder(&self) -> usize {
        self.embedding + self.transformer
    }

    pub fn head_fraction(&self) -> f64 {
        self.head as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    registry: FeatureRegistry,
    schedule: NoiseSchedule,
    params: ParamStore,
    embedding: EmbeddingTable,
    encoder: EncoderParams,
    head: DenoiserParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, registry: FeatureRegistry, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if registry.is_empty() {
            return Err(Error::Config("registry has no features".into()));
        }
        let schedule = NoiseSchedule::build(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let mut params = ParamStore::new();
        let embedding = EmbeddingTable::declare(&mut params, registry.len(), config.d_model, rng)?;
        let encoder = EncoderParams::declare(
            &mut params,
            config.d_model,
            config.heads,
            config.layers,
            config.ff_width,
            rng,
        )?;
        let head = DenoiserParams::declare(
            &mut params,
            config.diffusion_steps,
            config.time_dim,
            config.d_model,
            config.head_width,
            config.head_layers,
            rng,
        )?;
        Ok(Self {
            config,
            registry,
            schedule,
            params,
            embedding,
            encoder,
            head,
        })
    }

    /// Rebuilds a model from stored tensors, which must match the layout
    /// implied by `config` name for name and shape.
    pub fn from_tensors(config: ModelConfig, registry: FeatureRegistry, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, registry, &mut ChaCha8Rng::seed_from_u64(0))?;
        if tensors.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        let mut data = Vec::with_capacity(tensors.len());
        for ((expected, _), (name, _)) in model.params.iter().zip(&tensors) {
            if expected != name {
                return Err(Error::Data(format!("expected tensor {expected}, found {name}")));
            }
        }
        for (_, t) in tensors {
            data.push(t);
        }
        model.params.assign(data)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &FeatureRegistry {
        &self.registry
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn head(&self) -> &DenoiserParams {
        &self.head
    }

    pub fn values(&self) -> ParamValues {
        ParamValues::from_store(&self.params)
    }

    /// Request-token hidden state as a `[1, D]` graph node.
    pub fn encode<'p>(&self, g: &mut Graph<'p>, b: &mut Binder<'p>, seq: &TokenizedRow) -> Result<Var> {
        encode(g, b, &self.embedding, &self.encoder, seq)
    }

    /// Conditioning vector for `seq` (no gradients).
    pub fn condition(&self, values: &ParamValues, seq: &TokenizedRow) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(values, false);
        let h = self.encode(&mut g, &mut b, seq)?;
        Ok(g.value(h).to_vec())
    }

    /// Diffusion loss of one training example, with the condition computed
    /// from the same graph.
    pub fn example_loss<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        seq: &TokenizedRow,
        rng: &mut R,
    ) -> Result<Var> {
        let target = seq
            .target
            .ok_or_else(|| Error::Contract("training example has no target".into()))?;
        let cond = self.encode(g, b, seq)?;
        self.head.loss(g, b, &self.schedule, target.value, cond, rng)
    }

    pub fn parameter_report(&self) -> ParamReport {
        let mut report = ParamReport {
            tensors: Vec::with_capacity(self.params.len()),
            embedding: 0,
            transformer: 0,
            head: 0,
            total: 0,
        };
        for (name, t) in self.params.iter() {
            let n = t.numel();
            if name.starts_with("embedding.") {
                report.embedding += n;
            } else if name.starts_with("encoder.") {
                report.transformer += n;
            } else {
                report.head += n;
            }
            report.total += n;
            report.tensors.push((name.into(), n));
        }
        report
    }
}
