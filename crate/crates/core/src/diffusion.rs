//! The denoising-diffusion head: logistic noise schedule, forward noising,
//! the conditional noise predictor, its loss, and the reverse sampler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{normal_tensor, Binder, Linear, ParamId, ParamStore, ParamValues};

/// Range of the logistic argument swept by the schedule.
pub const LOGIT_RANGE: (f64, f64) = (-6.0, 6.0);

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    // 1 - abar_i, accumulated in log space so small betas keep precision
    noise_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` steps with `beta_i = beta_start + (beta_end - beta_start) * sigmoid(t_i)`
    /// and `t_i` spaced evenly over [-6, 6], endpoints included.
    pub fn build(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let (lo, hi) = LOGIT_RANGE;
        let betas = (0..steps)
            .map(|i| beta_from_logit(beta_start, beta_end, lo + (hi - lo) * i as f64 / (steps - 1) as f64))
            .collect();
        let mut s = Self::from_betas(betas)?;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        Ok(s)
    }

    /// Schedule from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must be non-empty and inside (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut noise_vars = Vec::with_capacity(alphas.len());
        let mut log_prod = 0.0;
        for b in &betas {
            log_prod += libm::log1p(-b);
            alpha_bars.push(libm::exp(log_prod));
            noise_vars.push(-libm::expm1(log_prod));
        }
        Ok(Self {
            beta_start: betas[0],
            beta_end: betas[betas.len() - 1],
            betas,
            alphas,
            alpha_bars,
            noise_vars,
        })
    }

    /// Beta at an arbitrary logistic argument `t`.
    pub fn beta_at_logit(&self, t: f64) -> f64 {
        beta_from_logit(self.beta_start, self.beta_end, t)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `1 - abar_i` per step.
    pub fn noise_variances(&self) -> &[f64] {
        &self.noise_vars
    }

    /// `sigma_i^2 = beta_i (1 - abar_{i-1}) / (1 - abar_i)`, zero at `i = 0`.
    pub fn posterior_variance(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.betas[i] * self.noise_vars[i - 1] / self.noise_vars[i]
        }
    }

    /// Closed-form forward process `sqrt(abar_i) x0 + sqrt(1 - abar_i) eps`.
    pub fn q_sample(&self, x0: f64, i: usize, eps: f64) -> f64 {
        let ab = self.alpha_bars[i];
        libm::sqrt(ab) * x0 + libm::sqrt(self.noise_vars[i]) * eps
    }

    /// One reverse step from `x_i` given the predicted noise and a standard
    /// normal draw `z` (ignored at `i = 0`).
    pub fn reverse_step(&self, x: f64, i: usize, eps_hat: f64, z: f64) -> f64 {
        let mean = (x - self.betas[i] / libm::sqrt(self.noise_vars[i]) * eps_hat) / libm::sqrt(self.alphas[i]);
        if i == 0 {
            mean
        } else {
            mean + libm::sqrt(self.posterior_variance(i)) * z
        }
    }
}

/// Convex-combination form of the logistic ramp; algebraically equal to
/// `start + (end - start) * sigmoid(t)`.
fn beta_from_logit(start: f64, end: f64, t: f64) -> f64 {
    let s = sigmoid(t);
    start * (1.0 - s) + end * s
}

/// MLP mapping `(x_t, timestep embedding, condition)` to predicted noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub time_embedding: ParamId,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
}

impl DenoiserParams {
    pub fn declare<R: Rng + ?Sized>(
        store: &mut ParamStore,
        steps: usize,
        time_dim: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let time_embedding = store.push("head.time_embedding", normal_tensor(vec![steps, time_dim], 1.0, rng))?;
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut fan_in = 1 + time_dim + cond_dim;
        for l in 0..hidden_layers {
            hidden.push(Linear::declare(store, &format!("head.hidden{l}"), fan_in, hidden_width, rng)?);
            fan_in = hidden_width;
        }
        let out = Linear::declare(store, "head.out", fan_in, 1, rng)?;
        Ok(Self {
            time_embedding,
            hidden,
            out,
            time_dim,
            cond_dim,
            steps,
        })
    }

    pub fn input_width(&self) -> usize {
        1 + self.time_dim + self.cond_dim
    }

    /// Predicted noise for `N` rows: `x_t` is `[N, 1]`, `steps` has `N`
    /// entries, and `condition` is `[N, D]` or a single `[1, D]` row shared by
    /// all of them. Returns `[N, 1]`.
    pub fn predict_noise<'p>(
        &self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        x_t: Var,
        steps: &[usize],
        condition: Var,
    ) -> Result<Var> {
        let n = steps.len();
        if g.shape(x_t) != [n, 1] {
            return Err(Error::Shape {
                op: "predict_noise",
                detail: format!("x_t has shape {:?} for {n} steps", g.shape(x_t)),
            });
        }
        if let Some(&bad) = steps.iter().find(|&&i| i >= self.steps) {
            return Err(Error::Contract(format!("step {bad} outside schedule of {}", self.steps)));
        }
        let cond = match *g.shape(condition) {
            [1, d] if d == self.cond_dim && n != 1 => g.gather_rows(condition, &vec![Some(0); n])?,
            [r, d] if r == n && d == self.cond_dim => condition,
            ref s => {
                return Err(Error::Shape {
                    op: "predict_noise",
                    detail: format!("condition shape {:?} for {n} rows of width {}", s, self.cond_dim),
                })
            }
        };
        let table = b.get(g, self.time_embedding)?;
        let ids: Vec<Option<usize>> = steps.iter().map(|&i| Some(i)).collect();
        let temb = g.gather_rows(table, &ids)?;
        let mut h = g.concat(&[x_t, temb, cond])?;
        for layer in &self.hidden {
            h = layer.forward(g, b, h)?;
            h = g.gelu(h)?;
        }
        self.out.forward(g, b, h)
    }

    /// Squared error of the predicted noise at a fixed step and noise draw.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_at<'p>(
        &self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        schedule: &NoiseSchedule,
        x0: f64,
        condition: Var,
        step: usize,
        eps: f64,
    ) -> Result<Var> {
        if !x0.is_finite() {
            return Err(Error::Data(format!("diffusion target {x0} is not finite")));
        }
        let x_t = g.constant(&[1, 1], vec![schedule.q_sample(x0, step, eps)])?;
        let pred = self.predict_noise(g, b, x_t, &[step], condition)?;
        let eps = g.constant(&[1, 1], vec![eps])?;
        let diff = g.sub(pred, eps)?;
        let sq = g.square(diff)?;
        g.mean(sq)
    }

    /// Draws a uniform step and a standard-normal noise, then [`Self::loss_at`].
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        schedule: &NoiseSchedule,
        x0: f64,
        condition: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let step = rng.random_range(0..schedule.steps());
        let eps: f64 = StandardNormal.sample(rng);
        self.loss_at(g, b, schedule, x0, condition, step, eps)
    }

    /// Predicted noise for a batch of chain states without recording
    /// gradients. `conditions` is `N * D` values or one shared `D`-row.
    pub fn predict_batch(
        &self,
        values: &ParamValues,
        x: &[f64],
        step: usize,
        conditions: &[f64],
    ) -> Result<Vec<f64>> {
        let n = x.len();
        let rows = conditions.len() / self.cond_dim.max(1);
        let mut g = Graph::new();
        let mut b = Binder::new(values, false);
        let xv = g.constant(&[n, 1], x.to_vec())?;
        let cond = g.constant(&[rows, self.cond_dim], conditions.to_vec())?;
        let out = self.predict_noise(&mut g, &mut b, xv, &vec![step; n], cond)?;
        Ok(g.value(out).to_vec())
    }

    /// Runs one reverse chain per entry of `rngs`. Each chain starts from a
    /// standard normal drawn from its own generator, so a chain's result does
    /// not depend on which other chains share the batch.
    pub fn sample_chains(
        &self,
        values: &ParamValues,
        schedule: &NoiseSchedule,
        conditions: &[f64],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<f64>> {
        if schedule.steps() != self.steps {
            return Err(Error::Contract(format!(
                "schedule has {} steps, head was built for {}",
                schedule.steps(),
                self.steps
            )));
        }
        let n = rngs.len();
        if conditions.len() != self.cond_dim && conditions.len() != n * self.cond_dim {
            return Err(Error::Shape {
                op: "sample_chains",
                detail: format!("{} condition values for {n} chains of width {}", conditions.len(), self.cond_dim),
            });
        }
        let mut x: Vec<f64> = rngs.iter_mut().map(|r| StandardNormal.sample(r)).collect();
        for i in (0..schedule.steps()).rev() {
            let eps = self.predict_batch(values, &x, i, conditions)?;
            for ((xc, e), rng) in x.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                let z = if i > 0 { StandardNormal.sample(rng) } else { 0.0 };
                *xc = schedule.reverse_step(*xc, i, *e, z);
                if !xc.is_finite() {
                    return Err(Error::ChainDiverged { step: i, value: *xc });
                }
            }
        }
        Ok(x)
    }
}
