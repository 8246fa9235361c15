//! Bootstrap confidence intervals and stratified error tables.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{percentile, pooled_rmse};

/// Percentile bootstrap over window-level squared-error totals. Each
/// resample redraws windows with replacement and pools their cells into
/// one RMSE, so the interval is centered on the pooled point estimate.
pub fn bootstrap_ci(
    per_window: &[(f64, usize)],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    if per_window.len() < 2 || n_resamples == 0 {
        let point = pooled_rmse(per_window);
        return (point, point);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_window.len();
    let mut stats = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let mut sse = 0.0;
        let mut cells = 0usize;
        for _ in 0..n {
            let (s, c) = per_window[rng.random_range(0..n)];
            sse += s;
            cells += c;
        }
        if cells > 0 {
            stats.push((sse / cells as f64).sqrt());
        }
    }
    let tail = (1.0 - level) / 2.0;
    (percentile(&stats, tail), percentile(&stats, 1.0 - tail))
}

/// One row of a stratified error table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub rmse: f64,
    pub n_windows: usize,
    pub n_units: usize,
}

/// Blackout-length buckets used throughout reporting.
pub fn length_bucket(len: usize) -> &'static str {
    match len {
        0..=6 => "<=6",
        7..=12 => "7-12",
        13..=24 => "13-24",
        _ => ">24",
    }
}

pub const LENGTH_BUCKETS: [&str; 4] = ["<=6", "7-12", "13-24", ">24"];

/// Four-hour buckets over the blackout start hour.
pub fn hour_bucket(hour: u32) -> String {
    let lo = (hour / 4) * 4;
    format!("{:02}-{:02}", lo, lo + 3)
}

pub fn hour_buckets() -> Vec<String> {
    (0..6).map(|i| format!("{:02}-{:02}", i * 4, i * 4 + 3)).collect()
}

/// Pool `(sse, n)` pairs per bucket label into RMSE rows, keeping the
/// supplied bucket order and dropping empty buckets.
pub fn bucket_table(
    order: &[String],
    assignments: &[(String, f64, usize)],
) -> Vec<BucketRow> {
    order
        .iter()
        .filter_map(|label| {
            let members: Vec<(f64, usize)> = assignments
                .iter()
                .filter(|(l, _, _)| l == label)
                .map(|(_, s, n)| (*s, *n))
                .collect();
            if members.is_empty() {
                return None;
            }
            Some(BucketRow {
                label: label.clone(),
                rmse: pooled_rmse(&members),
                n_windows: members.len(),
                n_units: members.iter().map(|(_, n)| n).sum(),
            })
        })
        .collect()
}
