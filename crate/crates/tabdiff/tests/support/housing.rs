//! The California housing checks: marginals, the income trend, and
//! held-out calibration. They run on the real table when it is available
//! and on a surrogate table otherwise.

use std::path::{Path, PathBuf};

use tabdiff::checkpoint;
use tabdiff::cli::{calibrate_parallel, split_dataset};
use tabdiff::parallel;
use tabdiff::table::{load_csv, DEFAULT_MISSING};
use tabdiff_core::eval::{ks_two_sample, CalibrationReport};
use tabdiff_core::{Checkpoint, FeatureId, Preset, RawTable, TrainConfig};

pub const COLUMNS: [&str; 9] = [
    "MedInc",
    "HouseAge",
    "AveRooms",
    "AveBedrms",
    "Population",
    "AveOccup",
    "Latitude",
    "Longitude",
    "MedHouseVal",
];

/// `TABDIFF_HOUSING_CSV`, else `data/california_housing.csv` under the
/// workspace root.
pub fn locate_csv() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("TABDIFF_HOUSING_CSV") {
        return Some(PathBuf::from(p));
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/california_housing.csv");
    p.exists().then_some(p)
}

pub fn housing_config(dataset: &Path, checkpoint: &Path) -> TrainConfig {
    TrainConfig {
        seed: 20,
        dataset: dataset.to_string_lossy().into_owned(),
        checkpoint: checkpoint.to_string_lossy().into_owned(),
        ..TrainConfig::for_preset(Preset::Housing)
    }
}

/// Trains unless `cache` already holds a checkpoint of the same config.
pub fn train_or_load(config: TrainConfig, table: &RawTable, cache: &Path) -> Checkpoint {
    if let Ok(ck) = checkpoint::load(cache) {
        if ck.config == config && ck.epoch == config.epochs {
            return ck;
        }
    }
    let ck = super::synthetic::train(config, table);
    if let Some(dir) = cache.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    checkpoint::save(&ck, cache).unwrap();
    ck
}

pub fn load_table(path: &Path) -> RawTable {
    load_csv(path, DEFAULT_MISSING).unwrap()
}

/// Worst per-feature two-sample KS between `n` unconditional samples and
/// the training marginal.
pub fn marginal_ks(ck: &Checkpoint, table: &RawTable, n: usize, threads: usize) -> Vec<(String, f64)> {
    let (train, _) = split_dataset(table, &ck.config);
    let reg = ck.model.registry();
    reg.ids()
        .map(|id| {
            let col = train.columns().iter().position(|c| c == reg.name(id)).unwrap();
            let truth: Vec<f64> = train.column(col).flatten().collect();
            let est = parallel::estimate_density(&ck.model, &[], id, n, 100 + id.0 as u64, threads).unwrap();
            (reg.name(id).to_string(), ks_two_sample(&est.samples, &truth))
        })
        .collect()
}

/// Median of `target` conditioned on each value of `driver`.
pub fn conditional_medians(
    ck: &Checkpoint,
    driver: &str,
    target: &str,
    levels: &[f64],
    n: usize,
    threads: usize,
) -> Vec<f64> {
    let reg = ck.model.registry();
    let d: FeatureId = reg.id(driver).unwrap();
    let t = reg.id(target).unwrap();
    levels
        .iter()
        .map(|&v| parallel::estimate_density(&ck.model, &[(d, v)], t, n, 7, threads).unwrap().median)
        .collect()
}

/// Income levels at the 10th to 90th training percentiles.
pub fn income_levels(ck: &Checkpoint, table: &RawTable, driver: &str) -> Vec<f64> {
    let (train, _) = split_dataset(table, &ck.config);
    let col = train.columns().iter().position(|c| c == driver).unwrap();
    let mut v: Vec<f64> = train.column(col).flatten().collect();
    v.sort_by(f64::total_cmp);
    [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|q| v[((v.len() - 1) as f64 * q) as usize])
        .collect()
}

pub fn held_out_calibration(ck: &Checkpoint, table: &RawTable, trials: usize, n: usize, threads: usize) -> CalibrationReport {
    let (_, test) = split_dataset(table, &ck.config);
    let test = tabdiff::cli::align_columns(&test, ck.model.registry()).unwrap();
    calibrate_parallel(&ck.model, &test, 31, trials, n, 10, threads).unwrap()
}
