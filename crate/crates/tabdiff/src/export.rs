//! Tab-separated exports. Every table has a one-line header; reports are
//! `key<TAB>value` lines followed by a blank line and a table.

use std::fmt::Write as _;

use tabdiff_core::eval::{CalibrationReport, DensityEstimate, Histogram};
use tabdiff_core::FeatureRegistry;

use crate::error::{CliError, Result};

pub const HISTOGRAM_HEADER: &str = "left\tright\tdensity";

pub fn histogram_tsv(h: &Histogram) -> String {
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    for (e, d) in h.edges.windows(2).zip(&h.densities) {
        let _ = writeln!(out, "{:?}\t{:?}\t{:?}", e[0], e[1], d);
    }
    out
}

pub fn parse_histogram_tsv(text: &str) -> Result<Histogram> {
    let bad = |d: String| CliError::format("<histogram>", d);
    let mut lines = text.lines();
    if lines.next() != Some(HISTOGRAM_HEADER) {
        return Err(bad("missing histogram header".into()));
    }
    let mut edges = Vec::new();
    let mut densities = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<f64> = line
            .split('\t')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("row {}: not numeric", i + 1)))?;
        let [left, right, density] = f[..] else {
            return Err(bad(format!("row {}: expected 3 fields", i + 1)));
        };
        match edges.last() {
            None => edges.push(left),
            Some(&prev) if prev == left => {}
            Some(_) => return Err(bad(format!("row {}: bins are not contiguous", i + 1))),
        }
        edges.push(right);
        densities.push(density);
    }
    if densities.is_empty() {
        return Err(bad("no bins".into()));
    }
    Ok(Histogram { edges, densities })
}

/// One column per feature, one row per draw.
pub fn samples_tsv(names: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = names.join("\t");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

pub fn density_summary(est: &DensityEstimate, registry: &FeatureRegistry) -> String {
    let conds: Vec<String> = est
        .conditions
        .iter()
        .map(|(id, v)| format!("{}={v:?}", registry.name(*id)))
        .collect();
    format!(
        "request\t{}\nconditions\t{}\nn\t{}\nmedian\t{:?}\nrobust_std\t{:?}\n",
        registry.name(est.feature),
        conds.join(","),
        est.samples.len(),
        est.median,
        est.robust_std
    )
}

pub fn calibration_tsv(r: &CalibrationReport) -> String {
    let mut out = format!(
        "trials\t{}\nks\t{:?}\nks_critical_5pct\t{:?}\ncentral_mass\t{:?}\nover_concentrated\t{}\n\nleft\tright\tmass\n",
        r.quantiles.len(),
        r.ks,
        r.ks_critical,
        r.central_mass,
        r.over_concentrated
    );
    let b = r.bins.len() as f64;
    for (i, m) in r.bins.iter().enumerate() {
        let _ = writeln!(out, "{:?}\t{:?}\t{m:?}", i as f64 / b, (i + 1) as f64 / b);
    }
    out
}

/// Reads the `key<TAB>value` block at the top of a report.
pub fn parse_report_fields(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| !l.is_empty())
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
