//! Joint training of the embeddings, encoder, and diffusion head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_training_example, FeatureRegistry, RawTable};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Preset};
use crate::numerics::{AdamW, AdamWConfig, Graph, LrSchedule};
use crate::params::{Binder, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub cycle_length_epochs: u64,
    pub batch_size: usize,
    pub context_length: usize,
    pub preset: Preset,
    pub seed: u64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub test_fraction: f64,
    pub dataset: String,
    pub checkpoint: String,
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let model = ModelConfig::preset(preset);
        let (epochs, cycle) = match preset {
            Preset::Paper => (10_240, 1024),
            Preset::Housing | Preset::Debug => (1280, 128),
        };
        Self {
            epochs,
            cycle_length_epochs: cycle,
            batch_size: 512,
            context_length: model.context_length,
            preset,
            seed: 0,
            eta_max: 1e-3,
            eta_min: 1e-10,
            diffusion_steps: model.diffusion_steps,
            beta_start: model.beta_start,
            beta_end: model.beta_end,
            test_fraction: 0.1,
            dataset: String::new(),
            checkpoint: String::from("model.ckpt"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            context_length: self.context_length,
            diffusion_steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            ..ModelConfig::preset(self.preset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.cycle_length_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, cycle length, and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test fraction {} outside [0, 1)", self.test_fraction)));
        }
        LrSchedule::new(self.eta_max, self.eta_min, self.cycle_length_epochs)?;
        self.model_config().validate()
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub config: TrainConfig,
    pub rng: RngState,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub lr: f64,
    pub mean_loss: f64,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    optimizer: AdamW,
    lr: LrSchedule,
    rng: ChaCha8Rng,
    rows: RawTable,
    usable: Vec<usize>,
    epoch: u64,
}

impl Trainer {
    /// `rows` are the training rows, columns in registry order.
    pub fn new(config: TrainConfig, rows: RawTable, registry: FeatureRegistry) -> Result<Self> {
        config.validate()?;
        if rows.columns() != registry.names() {
            return Err(Error::Data("training columns do not match the registry".into()));
        }
        if !(0..rows.n_rows()).any(|r| rows.is_usable(r)) {
            return Err(Error::Data("no training row has an observed value".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model_config(), registry, &mut rng)?;
        Self::resume(config, model, rng, 0, rows)
    }

    /// Continues from an existing model and generator state. Optimizer
    /// moments start fresh.
    pub fn resume(config: TrainConfig, model: Model, rng: ChaCha8Rng, epoch: u64, rows: RawTable) -> Result<Self> {
        let usable: Vec<usize> = (0..rows.n_rows()).filter(|&r| rows.is_usable(r)).collect();
        let optimizer = AdamW::new(AdamWConfig::default(), model.params().tensors())?;
        let lr = LrSchedule::new(config.eta_max, config.eta_min, config.cycle_length_epochs)?;
        Ok(Self {
            config,
            model,
            optimizer,
            lr,
            rng,
            rows,
            usable,
            epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn lr_schedule(&self) -> &LrSchedule {
        &self.lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
        }
    }

    /// One pass over the shuffled training rows. On a non-finite loss the
    /// parameters and generator are rolled back to the start of the epoch
    /// and the error is returned.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let saved_params: ParamStore = self.model.params().clone();
        let saved_rng = self.rng.clone();
        let saved_opt = self.optimizer.clone();
        match self.epoch_inner() {
            Ok(stats) => {
                self.epoch += 1;
                Ok(stats)
            }
            Err(e) => {
                *self.model.params_mut() = saved_params;
                self.rng = saved_rng;
                self.optimizer = saved_opt;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<EpochStats> {
        let lr = self.lr.lr_at(self.epoch);
        let mut order = self.usable.clone();
        order.shuffle(&mut self.rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            total_loss += self.step(batch, lr)? * batch.len() as f64;
        }
        Ok(EpochStats {
            epoch: self.epoch,
            lr,
            mean_loss: total_loss / order.len() as f64,
        })
    }

    /// Mean loss over `batch` and one optimizer step on its gradient.
    fn step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let values = self.model.values();
        let mut grads: Vec<Vec<f64>> = self
            .model
            .params()
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        let mut loss_sum = 0.0;
        for &r in batch {
            let seq = sample_training_example(
                self.rows.row(r),
                self.model.registry(),
                &mut self.rng,
                self.config.context_length,
            )?;
            let mut g = Graph::new();
            let mut b = Binder::new(&values, true);
            let loss = self.model.example_loss(&mut g, &mut b, &seq, &mut self.rng)?;
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { op: "diffusion loss" });
            }
            loss_sum += loss_value;
            let example_grads = g.backward(loss)?;
            for (id, var) in b.bound() {
                if let Some(gv) = example_grads.get(var) {
                    for (acc, x) in grads[id.0].iter_mut().zip(gv) {
                        *acc += x;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in grads.iter_mut().flatten() {
            *g *= inv;
        }
        self.optimizer.step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        Ok(loss_sum * inv)
    }
}

/// Fits a model head-to-tail on already-split training rows, calling
/// `on_epoch` after every epoch.
pub fn train<F: FnMut(&EpochStats)>(
    config: TrainConfig,
    rows: RawTable,
    registry: FeatureRegistry,
    mut on_epoch: F,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, rows, registry)?;
    while !trainer.is_finished() {
        let stats = trainer.run_epoch()?;
        on_epoch(&stats);
    }
    Ok(trainer.checkpoint())
}
