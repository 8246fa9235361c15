//! Evaluation-window construction: candidate enumeration over fully
//! observed segments and stratified monthly sampling.

use std::collections::BTreeMap;

use chrono::{Datelike, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::substream_seed;
use crate::panel::Panel;

/// One evaluation unit: a blackout interval on one detector plus the
/// aligned forecast targets for every horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlackoutWindow {
    pub window_id: String,
    pub detector_index: usize,
    /// Inclusive time-index interval of the blackout.
    pub start: usize,
    pub end: usize,
    pub length: usize,
    /// Calendar month (1-12) of the blackout start.
    pub month: u32,
    /// Hour of day (0-23) of the blackout start.
    pub start_hour: u32,
    /// Horizon -> target time index (`end + k`).
    pub forecast_targets: BTreeMap<usize, usize>,
}

/// Months that could not supply the requested number of windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthShortfall {
    pub month: u32,
    pub requested: usize,
    pub available: usize,
}

/// Enumerate every window of each requested length that is fully observed
/// over `[start - 1, end + max(horizons)]`, so the interpolation anchors
/// and every forecast target are available as ground truth.
pub fn find_candidate_windows(
    panel: &Panel,
    lengths: &[usize],
    horizons: &[usize],
) -> Vec<BlackoutWindow> {
    let t_len = panel.n_steps();
    let d_len = panel.n_detectors();
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    if t_len < 2 {
        return out;
    }

    for det in 0..d_len {
        // run[t] = number of consecutive observed cells starting at t
        let mut run = vec![0usize; t_len + 1];
        for t in (0..t_len).rev() {
            run[t] = if panel.is_observed(t, det) { run[t + 1] + 1 } else { 0 };
        }
        for &len in lengths {
            if len == 0 {
                continue;
            }
            let needed = len + 1 + max_h;
            // start ranges so that start-1 >= 0 and end + max_h < t_len
            if t_len < needed {
                continue;
            }
            for start in 1..=(t_len - len - max_h) {
                if run[start - 1] >= needed {
                    let end = start + len - 1;
                    let ts = panel.timestamps()[start];
                    let forecast_targets =
                        horizons.iter().map(|&h| (h, end + h)).collect::<BTreeMap<_, _>>();
                    out.push(BlackoutWindow {
                        window_id: format!("w{:03}s{:06}l{:03}", det, start, len),
                        detector_index: det,
                        start,
                        end,
                        length: len,
                        month: ts.month(),
                        start_hour: ts.hour(),
                        forecast_targets,
                    });
                }
            }
        }
    }
    out
}

/// The span of cells a selected window influences: its interpolation
/// anchors through its furthest forecast target.
fn influence_span(w: &BlackoutWindow) -> (usize, usize) {
    let max_target = w.forecast_targets.values().copied().max().unwrap_or(w.end);
    (w.start.saturating_sub(1), max_target)
}

/// Uniform per-month sample without replacement, stratified by the
/// blackout start timestamp. Selected windows never overlap another
/// selected window's anchor-to-target span on the same detector, so every
/// window keeps observed anchors and targets in the masked training
/// panel. Months that cannot supply the requested count contribute what
/// they have and are reported as shortfalls.
pub fn sample_stratified(
    candidates: &[BlackoutWindow],
    per_month: usize,
    seed: u64,
) -> (Vec<BlackoutWindow>, Vec<MonthShortfall>) {
    let mut by_month: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, w) in candidates.iter().enumerate() {
        by_month.entry(w.month).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "window-sampling"));
    let mut taken: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let conflicts = |taken: &BTreeMap<usize, Vec<(usize, usize)>>, w: &BlackoutWindow| {
        let (lo, hi) = influence_span(w);
        taken
            .get(&w.detector_index)
            .map(|spans| spans.iter().any(|(a, b)| lo <= *b && *a <= hi))
            .unwrap_or(false)
    };

    let mut selected = Vec::new();
    let mut shortfalls = Vec::new();
    for (month, idxs) in &by_month {
        if per_month == 0 {
            continue;
        }
        // walk a random permutation of the month's candidates, accepting
        // until the quota is filled or the supply runs out
        let order: Vec<usize> = rand::seq::index::sample(&mut rng, idxs.len(), idxs.len())
            .into_iter()
            .map(|j| idxs[j])
            .collect();
        let mut picked = 0usize;
        for i in order {
            if picked == per_month {
                break;
            }
            let w = &candidates[i];
            if conflicts(&taken, w) {
                continue;
            }
            taken.entry(w.detector_index).or_default().push(influence_span(w));
            selected.push(i);
            picked += 1;
        }
        if picked < per_month {
            shortfalls.push(MonthShortfall {
                month: *month,
                requested: per_month,
                available: picked,
            });
        }
    }
    selected.sort_unstable();
    (selected.into_iter().map(|i| candidates[i].clone()).collect(), shortfalls)
}
