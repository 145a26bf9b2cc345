//! Density estimation, summaries, calibration, and sequential joint
//! sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_inference_sequence, sample_training_example, FeatureId, RawTable, TokenizedRow};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamValues;

/// Gaussian-consistent scale factor for the median absolute deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Samples for one requested feature, destandardized, with summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub feature: FeatureId,
    pub conditions: Vec<(FeatureId, f64)>,
    pub samples: Vec<f64>,
    pub median: f64,
    pub robust_std: f64,
}

impl DensityEstimate {
    pub fn from_samples(feature: FeatureId, conditions: Vec<(FeatureId, f64)>, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("a density estimate needs at least one sample".into()));
        }
        let med = median(&samples);
        Ok(Self {
            feature,
            conditions,
            robust_std: robust_std(&samples, med),
            median: med,
            samples,
        })
    }
}

/// Empirical median; the mean of the two central values for even counts.
pub fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `1.4826 * median(|x - median|)`.
pub fn robust_std(samples: &[f64], median_value: f64) -> f64 {
    let dev: Vec<f64> = samples.iter().map(|x| (x - median_value).abs()).collect();
    MAD_TO_SIGMA * median(&dev)
}

/// Mid-rank position of `truth` among `samples`: the fraction strictly
/// below plus half the fraction equal.
pub fn quantile_of_truth(samples: &[f64], truth: f64) -> f64 {
    let below = samples.iter().filter(|&&s| s < truth).count();
    let equal = samples.iter().filter(|&&s| s == truth).count();
    (below as f64 + 0.5 * equal as f64) / samples.len() as f64
}

/// Kolmogorov-Smirnov distance between the empirical distribution of `q`
/// and U(0, 1).
pub fn ks_uniform(q: &[f64]) -> f64 {
    let mut sorted = q.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 5% critical value of the one-sample KS statistic.
pub fn ks_critical_5pct(n: usize) -> f64 {
    1.358 / libm::sqrt(n as f64)
}

/// Normalized histogram: `densities[i]` is the density on
/// `[edges[i], edges[i + 1])`, the last bin closed on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Samples outside `range` are dropped before normalizing. Without a
    /// range the sample extent is used.
    pub fn from_samples(samples: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Contract("histogram needs at least one bin".into()));
        }
        let (lo, hi) = match range {
            Some(r) => r,
            None => samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
        };
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Data(format!("degenerate histogram range [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in samples {
            if x < lo || x > hi {
                continue;
            }
            let idx = (((x - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let kept: usize = counts.iter().sum();
        if kept == 0 {
            return Err(Error::Data(format!("no samples inside [{lo}, {hi}]")));
        }
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let densities = counts
            .iter()
            .zip(edges.windows(2))
            .map(|(&c, e)| c as f64 / (kept as f64 * (e[1] - e[0])))
            .collect();
        Ok(Self { edges, densities })
    }

    /// Probability mass per bin.
    pub fn masses(&self) -> Vec<f64> {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .collect()
    }

    pub fn integral(&self) -> f64 {
        self.masses().iter().sum()
    }
}

/// Independent generator for one reverse chain.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Largest number of chains advanced together in one batch.
pub const CHAIN_BATCH: usize = 1024;

/// A request that has been encoded once and can be sampled repeatedly,
/// from any thread.
pub struct PreparedDensity<'m> {
    model: &'m Model,
    values: ParamValues,
    request: FeatureId,
    conditions: Vec<(FeatureId, f64)>,
    condition: Vec<f64>,
}

impl<'m> PreparedDensity<'m> {
    pub fn new(model: &'m Model, conditions: &[(FeatureId, f64)], request: FeatureId) -> Result<Self> {
        let values = model.values();
        let len = model.config().context_length.max(1 + conditions.len());
        let seq = build_inference_sequence(conditions, request, model.registry(), len)?;
        let condition = model.condition(&values, &seq)?;
        Ok(Self {
            model,
            values,
            request,
            conditions: conditions.to_vec(),
            condition,
        })
    }

    pub fn condition(&self) -> &[f64] {
        &self.condition
    }

    /// Destandardized samples of chains `chains` under `seed`.
    pub fn sample_range(&self, seed: u64, chains: Range<u64>) -> Result<Vec<f64>> {
        let head = self.model.head();
        let st = self.model.registry().stats(self.request);
        let mut out = Vec::with_capacity((chains.end - chains.start) as usize);
        let mut start = chains.start;
        while start < chains.end {
            let end = (start + CHAIN_BATCH as u64).min(chains.end);
            let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|c| chain_rng(seed, c)).collect();
            let z = head.sample_chains(&self.values, self.model.schedule(), &self.condition, &mut rngs)?;
            out.extend(z.into_iter().map(|v| st.destandardize(v)));
            start = end;
        }
        Ok(out)
    }

    pub fn finish(self, samples: Vec<f64>) -> Result<DensityEstimate> {
        DensityEstimate::from_samples(self.request, self.conditions, samples)
    }
}

/// `n` samples of `request` given raw-valued `conditions`.
pub fn estimate_density(
    model: &Model,
    conditions: &[(FeatureId, f64)],
    request: FeatureId,
    n: usize,
    seed: u64,
) -> Result<DensityEstimate> {
    if n == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    let prepared = PreparedDensity::new(model, conditions, request)?;
    let samples = prepared.sample_range(seed, 0..n as u64)?;
    prepared.finish(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub quantiles: Vec<f64>,
    /// Mass per equal-width bin over [0, 1].
    pub bins: Vec<f64>,
    pub ks: f64,
    pub ks_critical: f64,
    /// Fraction of quantiles in [0.25, 0.75).
    pub central_mass: f64,
    /// Central mass exceeds 0.5 by more than two binomial standard errors.
    pub over_concentrated: bool,
}

impl CalibrationReport {
    pub fn from_quantiles(quantiles: Vec<f64>, n_bins: usize) -> Result<Self> {
        if quantiles.is_empty() || n_bins == 0 {
            return Err(Error::Contract("calibration needs quantiles and at least one bin".into()));
        }
        if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Contract("quantiles must lie in [0, 1]".into()));
        }
        let n = quantiles.len() as f64;
        let mut bins = vec![0.0; n_bins];
        for &q in &quantiles {
            let idx = ((q * n_bins as f64) as usize).min(n_bins - 1);
            bins[idx] += 1.0 / n;
        }
        let central = quantiles.iter().filter(|&&q| (0.25..0.75).contains(&q)).count() as f64 / n;
        Ok(Self {
            ks: ks_uniform(&quantiles),
            ks_critical: ks_critical_5pct(quantiles.len()),
            central_mass: central,
            over_concentrated: central - 0.5 > 2.0 * libm::sqrt(0.25 / n),
            bins,
            quantiles,
        })
    }
}

/// One held-out evaluation: a tokenized (inputs, target) example and the
/// seed of its reverse chains.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTrial {
    pub sequence: TokenizedRow,
    /// Standardized truth.
    pub truth: f64,
    pub seed: u64,
}

/// Draws `trials` (inputs, target) pairs from held-out rows the way
/// training does.
pub fn calibration_trials<R: Rng + ?Sized>(
    model: &Model,
    test_rows: &RawTable,
    rng: &mut R,
    trials: usize,
) -> Result<Vec<CalibrationTrial>> {
    if test_rows.columns() != model.registry().names() {
        return Err(Error::Data("test columns do not match the registry".into()));
    }
    let usable: Vec<usize> = (0..test_rows.n_rows()).filter(|&r| test_rows.is_usable(r)).collect();
    if usable.is_empty() || trials == 0 {
        return Err(Error::Contract("calibration needs usable rows and at least one trial".into()));
    }
    (0..trials)
        .map(|_| {
            let row = usable[rng.random_range(0..usable.len())];
            let sequence =
                sample_training_example(test_rows.row(row), model.registry(), rng, model.config().context_length)?;
            let truth = sequence.target.expect("training examples carry a target").value;
            Ok(CalibrationTrial {
                sequence,
                truth,
                seed: rng.random(),
            })
        })
        .collect()
}

/// Where the truth of `trial` falls among `n` samples of its density.
pub fn trial_quantile(model: &Model, values: &ParamValues, trial: &CalibrationTrial, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("need at least one sample per density".into()));
    }
    let condition = model.condition(values, &trial.sequence)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|c| chain_rng(trial.seed, c)).collect();
    let samples = model
        .head()
        .sample_chains(values, model.schedule(), &condition, &mut rngs)?;
    Ok(quantile_of_truth(&samples, trial.truth))
}

/// Draws `trials` examples from held-out rows and records where each true
/// value falls in its predicted density.
pub fn calibration_sweep<R: Rng + ?Sized>(
    model: &Model,
    test_rows: &RawTable,
    rng: &mut R,
    trials: usize,
    samples_per_density: usize,
    n_bins: usize,
) -> Result<CalibrationReport> {
    let values = model.values();
    let quantiles = calibration_trials(model, test_rows, rng, trials)?
        .iter()
        .map(|t| trial_quantile(model, &values, t, samples_per_density))
        .collect::<Result<Vec<_>>>()?;
    CalibrationReport::from_quantiles(quantiles, n_bins)
}

/// `n` joint draws built one dimension at a time: request `k` is sampled
/// conditioned on `base` plus the values already drawn for requests
/// `0..k` of the same draw. Returns one row per draw, raw units.
pub fn sequential_joint_samples(
    model: &Model,
    requests: &[FeatureId],
    base: &[(FeatureId, f64)],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    sequential_joint_range(model, requests, base, 0..n as u64, seed)
}

/// Draws with indices in `draws`; draw `i` is the same whichever range it
/// is requested through.
pub fn sequential_joint_range(
    model: &Model,
    requests: &[FeatureId],
    base: &[(FeatureId, f64)],
    draws: Range<u64>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if requests.is_empty() {
        return Err(Error::Contract("joint sampling needs at least one request".into()));
    }
    for (i, r) in requests.iter().enumerate() {
        model.registry().check(*r)?;
        if requests[..i].contains(r) {
            return Err(Error::Contract(format!(
                "request {} appears twice",
                model.registry().name(*r)
            )));
        }
    }
    let values = model.values();
    let d = model.config().d_model;
    let k_total = requests.len() as u64;
    let first = draws.start;
    let n = (draws.end.saturating_sub(draws.start)) as usize;
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(requests.len()); n];
    let mut start = 0usize;
    while start < n {
        let end = (start + CHAIN_BATCH).min(n);
        for (k, &request) in requests.iter().enumerate() {
            let mut conditions = Vec::with_capacity((end - start) * d);
            for draw in &draws[start..end] {
                let mut conds = base.to_vec();
                conds.extend(requests[..k].iter().copied().zip(draw.iter().copied()));
                let len = model.config().context_length.max(1 + conds.len());
                let seq = build_inference_sequence(&conds, request, model.registry(), len)?;
                conditions.extend(model.condition(&values, &seq)?);
            }
            let mut rngs: Vec<ChaCha8Rng> = (start..end)
                .map(|i| chain_rng(seed, (first + i as u64) * k_total + k as u64))
                .collect();
            let z = model
                .head()
                .sample_chains(&values, model.schedule(), &conditions, &mut rngs)?;
            let st = model.registry().stats(request);
            for (draw, v) in draws[start..end].iter_mut().zip(z) {
                draw.push(st.destandardize(v));
            }
        }
        start = end;
    }
    Ok(draws)
}

/// One joint draw; see [`sequential_joint_samples`].
pub fn sequential_joint_sample(
    model: &Model,
    requests: &[FeatureId],
    base: &[(FeatureId, f64)],
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(sequential_joint_samples(model, requests, base, 1, seed)?.remove(0))
}
