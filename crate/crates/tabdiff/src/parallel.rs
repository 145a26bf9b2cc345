//! Fans reverse chains out over worker threads. Every chain owns a
//! generator derived from its index, so results do not depend on the
//! worker count.

use std::thread;

use tabdiff_core::eval::PreparedDensity;
use tabdiff_core::{FeatureId, Model};

use crate::error::Result;

/// `n` destandardized samples of the prepared request.
pub fn sample_density(prepared: &PreparedDensity<'_>, seed: u64, n: usize, threads: usize) -> Result<Vec<f64>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return Ok(prepared.sample_range(seed, 0..n as u64)?);
    }
    let per = n.div_ceil(threads) as u64;
    let n = n as u64;
    let parts: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = (0..threads as u64)
            .map(|w| {
                let range = (w * per).min(n)..((w + 1) * per).min(n);
                s.spawn(move || prepared.sample_range(seed, range))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n as usize);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Estimates a density using `threads` workers.
pub fn estimate_density(
    model: &Model,
    conditions: &[(FeatureId, f64)],
    request: FeatureId,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<tabdiff_core::DensityEstimate> {
    if n == 0 {
        return Err(crate::error::CliError::Usage("--n must be at least 1".into()));
    }
    let prepared = PreparedDensity::new(model, conditions, request)?;
    let samples = sample_density(&prepared, seed, n, threads)?;
    Ok(prepared.finish(samples)?)
}
