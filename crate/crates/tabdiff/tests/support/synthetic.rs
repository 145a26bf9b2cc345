//! Synthetic tables with known conditional structure, and a helper that
//! trains on them in-process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use tabdiff_core::data::{fit_standardization, split_rows};
use tabdiff_core::{Checkpoint, Preset, RawTable, TrainConfig, Trainer};

fn table(names: &[&str], rows: Vec<Vec<f64>>) -> RawTable {
    RawTable::new(
        names.iter().map(|s| s.to_string()).collect(),
        rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
    )
    .unwrap()
}

/// One column of standard-normal draws.
pub fn standard_normal(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    table(&["x"], (0..n).map(|_| vec![StandardNormal.sample(&mut rng)]).collect())
}

/// `flag` in {0, 1}; given flag 1, `y` is an equal mixture of N(-2, 0.25^2)
/// and N(2, 0.25^2); given flag 0, `y` is N(0, 0.25^2).
pub fn bimodal(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let rows = (0..n)
        .map(|_| {
            let flag = rng.random_range(0..2u8);
            let centre = match (flag, rng.random::<bool>()) {
                (0, _) => 0.0,
                (_, true) => 2.0,
                (_, false) => -2.0,
            };
            vec![f64::from(flag), centre + noise.sample(&mut rng)]
        })
        .collect();
    table(&["flag", "y"], rows)
}

/// `y = x + N(0, sd^2)` with standard-normal `x`.
pub fn linked(n: usize, sd: f64, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let rows = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            vec![x, x + noise.sample(&mut rng)]
        })
        .collect();
    table(&["x", "y"], rows)
}

/// Two independent columns with different marginals.
pub fn independent(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = rng.random_range(-1.0..3.0);
            vec![a, b]
        })
        .collect();
    table(&["a", "b"], rows)
}

pub fn config(preset: Preset, epochs: u64, context_length: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        cycle_length_epochs: epochs,
        context_length,
        seed,
        test_fraction: 0.0,
        ..TrainConfig::for_preset(preset)
    }
}

/// Trains on the split of `table` that `config` selects.
pub fn train(config: TrainConfig, table: &RawTable) -> Checkpoint {
    let (train_idx, _) = split_rows(table.n_rows(), config.seed, config.test_fraction);
    let rows = table.select_rows(&train_idx);
    let registry = fit_standardization(&rows).unwrap();
    let mut trainer = Trainer::new(config, rows, registry).unwrap();
    while !trainer.is_finished() {
        trainer.run_epoch().unwrap();
    }
    trainer.checkpoint()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}
