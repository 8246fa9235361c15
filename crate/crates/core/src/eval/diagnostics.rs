//! Missingness diagnostics: can dropout be predicted, and what does the
//! blackout event structure look like?
//!
//! Three probes: (1) blackout onsets vs matched controls using only
//! observed proxies, (2) next-step missingness prediction with and
//! without smoothed latent features under a time-aware split, and
//! (3) run-length statistics of blackouts plus network-wide outages.
//! The probe classifier is a logistic model trained by plain gradient
//! ascent on the Bernoulli log-likelihood, matching the dropout channel.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{percentile, sigmoid, substream_seed, variance};
use crate::panel::{Panel, TimeFeatures};

/// Lookback for the "last observed value" feature.
const LAST_VALUE_LOOKBACK: usize = 48;
/// Window for the short-term variance feature.
const VARIANCE_WINDOW: usize = 12;
/// Required clean neighborhood around a matched control.
const CONTROL_CLEARANCE: usize = 3;
/// Negative-to-positive cap when subsampling training examples.
const NEGATIVE_RATIO: usize = 4;
/// Hard cap on example counts to bound probe cost on large panels.
const MAX_EXAMPLES: usize = 200_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Test 1: onset-vs-control AUC from observed-only features.
    pub onset_auc: Option<f64>,
    /// Test 2: next-step missingness AUC, observed-only features.
    pub next_step_auc_observed: Option<f64>,
    /// Test 2: next-step missingness AUC with smoothed latent features.
    pub next_step_auc_latent: Option<f64>,
    /// Test 3: pooled blackout run-length statistics (steps).
    pub run_length_median: f64,
    pub run_length_p75: f64,
    pub run_length_max: usize,
    pub n_runs: usize,
    /// Timesteps with every detector missing, merged into events.
    pub network_outage_events: usize,
    pub notes: Vec<String>,
}

struct Example {
    features: Vec<f64>,
    label: f64,
    time: usize,
}

/// Observed-only proxies at `(t, d)`: last observed value (within a
/// lookback), short-term variance of recent observed values, and the time
/// features at `t`. `None` when the column has no usable history.
fn observed_features(
    panel: &Panel,
    tf: &TimeFeatures,
    t: usize,
    d: usize,
) -> Option<Vec<f64>> {
    let lo = t.saturating_sub(LAST_VALUE_LOOKBACK);
    let last = (lo..t).rev().find_map(|s| panel.value_at(s, d))?;
    let var_lo = t.saturating_sub(VARIANCE_WINDOW);
    let recent: Vec<f64> = (var_lo..t).filter_map(|s| panel.value_at(s, d)).collect();
    if recent.len() < 2 {
        return None;
    }
    let mut features = vec![last, variance(&recent)];
    let f_t = tf.row(t);
    features.extend(f_t.iter());
    Some(features)
}

/// Rank-based AUC (Mann-Whitney) with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| **l > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &e in &idx[i..=j] {
            if labels[e] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Logistic probe trained by full-batch gradient ascent with a small L2
/// pull on the weights. Features are standardized on the training split.
struct LogisticProbe {
    weights: DVector<f64>,
    bias: f64,
    means: DVector<f64>,
    stds: DVector<f64>,
}

impl LogisticProbe {
    fn fit(x: &DMatrix<f64>, y: &[f64]) -> LogisticProbe {
        let n = x.nrows();
        let p = x.ncols();
        let mut means = DVector::zeros(p);
        let mut stds = DVector::from_element(p, 1.0);
        for j in 0..p {
            let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = variance(&col);
            means[j] = m;
            stds[j] = v.sqrt().max(1e-9);
        }
        let xs = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - means[j]) / stds[j]);
        let pos_rate = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let mut w = DVector::zeros(p);
        let mut b = (pos_rate / (1.0 - pos_rate)).ln();
        let lr = 1.0;
        let l2 = 1e-3;
        for _ in 0..300 {
            let mut grad_w = DVector::zeros(p);
            let mut grad_b = 0.0;
            for i in 0..n {
                let logit = xs.row(i).transpose().dot(&w) + b;
                let resid = y[i] - sigmoid(logit);
                grad_w.axpy(resid, &xs.row(i).transpose(), 1.0);
                grad_b += resid;
            }
            grad_w /= n as f64;
            grad_b /= n as f64;
            grad_w.axpy(-l2, &w, 1.0);
            w.axpy(lr, &grad_w, 1.0);
            b += lr * grad_b;
        }
        LogisticProbe { weights: w, bias: b, means, stds }
    }

    fn score(&self, features: &[f64]) -> f64 {
        let mut logit = self.bias;
        for j in 0..self.weights.len() {
            logit += self.weights[j] * (features[j] - self.means[j]) / self.stds[j];
        }
        logit
    }
}

/// Train on examples at `t <= split_time`, score the rest, return AUC.
fn time_split_auc(examples: &[Example], split_time: usize) -> Option<f64> {
    let train: Vec<&Example> = examples.iter().filter(|e| e.time <= split_time).collect();
    let test: Vec<&Example> = examples.iter().filter(|e| e.time > split_time).collect();
    let enough = |set: &[&Example]| {
        let pos = set.iter().filter(|e| e.label > 0.5).count();
        pos >= 10 && set.len() - pos >= 10
    };
    if !enough(&train) || !enough(&test) {
        return None;
    }
    let p = train[0].features.len();
    let x = DMatrix::from_fn(train.len(), p, |i, j| train[i].features[j]);
    let y: Vec<f64> = train.iter().map(|e| e.label).collect();
    let probe = LogisticProbe::fit(&x, &y);
    let scores: Vec<f64> = test.iter().map(|e| probe.score(&e.features)).collect();
    let labels: Vec<f64> = test.iter().map(|e| e.label).collect();
    roc_auc(&scores, &labels)
}

/// Deterministically cap negatives at `NEGATIVE_RATIO` per positive and
/// the total example count at `MAX_EXAMPLES`.
fn subsample(examples: Vec<Example>, seed: u64) -> Vec<Example> {
    let n_pos = examples.iter().filter(|e| e.label > 0.5).count();
    let n_neg = examples.len() - n_pos;
    let max_neg = (n_pos * NEGATIVE_RATIO).max(100).min(MAX_EXAMPLES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(n_pos + max_neg.min(n_neg));
    if n_neg > max_neg {
        let neg_idx: Vec<usize> =
            (0..examples.len()).filter(|i| examples[*i].label <= 0.5).collect();
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, neg_idx.len(), max_neg)
            .into_iter()
            .map(|j| neg_idx[j])
            .collect();
        picks.sort_unstable();
        let keep: std::collections::HashSet<usize> = picks.into_iter().collect();
        for (i, e) in examples.into_iter().enumerate() {
            if e.label > 0.5 || keep.contains(&i) {
                kept.push(e);
            }
        }
    } else {
        kept = examples;
    }
    kept
}

/// Run all three probes. `smoothed_states` are the per-step posterior
/// means from a trained smoother (used only by the latent-augmented
/// variant of Test 2). The split time separates classifier training data
/// from scoring data.
pub fn missingness_diagnostics(
    panel: &Panel,
    smoothed_states: &DMatrix<f64>,
    tf: &TimeFeatures,
    split_time: usize,
    seed: u64,
) -> DiagnosticsReport {
    let t_len = panel.n_steps();
    let d_len = panel.n_detectors();
    let mut notes = Vec::new();

    // ---- Test 1: onsets vs matched controls, observed-only features.
    let week = panel.steps_per_day() * 7;
    let mut onset_examples = Vec::new();
    for d in 0..d_len {
        for t in 1..t_len {
            if panel.is_observed(t, d) || !panel.is_observed(t - 1, d) {
                continue;
            }
            let Some(features) = observed_features(panel, tf, t, d) else { continue };
            // matched control: same detector, same time of day, one week
            // away, with nothing missing nearby
            let control_t = [t.checked_sub(week), t.checked_add(week)]
                .into_iter()
                .flatten()
                .find(|&ct| {
                    ct < t_len && {
                        let lo = ct.saturating_sub(CONTROL_CLEARANCE);
                        let hi = (ct + CONTROL_CLEARANCE).min(t_len - 1);
                        (lo..=hi).all(|s| panel.is_observed(s, d))
                    }
                });
            let Some(ct) = control_t else { continue };
            let Some(control_features) = observed_features(panel, tf, ct, d) else { continue };
            onset_examples.push(Example { features, label: 1.0, time: t });
            onset_examples.push(Example { features: control_features, label: 0.0, time: ct });
        }
    }
    let onset_auc = time_split_auc(&onset_examples, split_time);
    if onset_auc.is_none() {
        notes.push("onset probe skipped: too few onsets or controls per split".into());
    }

    // ---- Test 2: next-step missingness, observed vs latent-augmented.
    let warmup = VARIANCE_WINDOW.max(2);
    let k = smoothed_states.ncols();
    let mut obs_examples = Vec::new();
    let mut lat_examples = Vec::new();
    for d in 0..d_len {
        for t in warmup..t_len.saturating_sub(1) {
            let Some(base) = observed_features(panel, tf, t, d) else { continue };
            let label = if panel.is_observed(t + 1, d) { 0.0 } else { 1.0 };
            let mut latent = base.clone();
            for j in 0..k {
                latent.push(smoothed_states[(t, j)]);
            }
            obs_examples.push(Example { features: base, label, time: t });
            lat_examples.push(Example { features: latent, label, time: t });
        }
    }
    let obs_examples = subsample(obs_examples, substream_seed(seed, "diag-next-obs"));
    let lat_examples = subsample(lat_examples, substream_seed(seed, "diag-next-lat"));
    let next_step_auc_observed = time_split_auc(&obs_examples, split_time);
    let next_step_auc_latent = time_split_auc(&lat_examples, split_time);
    if next_step_auc_observed.is_none() {
        notes.push("next-step probe skipped: too few positives per split".into());
    }

    // ---- Test 3: run lengths and network-wide outages.
    let mut runs: Vec<f64> = Vec::new();
    for d in 0..d_len {
        let mut run = 0usize;
        for t in 0..=t_len {
            let missing = t < t_len && !panel.is_observed(t, d);
            if missing {
                run += 1;
            } else if run > 0 {
                runs.push(run as f64);
                run = 0;
            }
        }
    }
    let mut network_outage_events = 0usize;
    let mut in_outage = false;
    for t in 0..t_len {
        let all_missing = (0..d_len).all(|d| !panel.is_observed(t, d));
        if all_missing && !in_outage {
            network_outage_events += 1;
        }
        in_outage = all_missing;
    }

    DiagnosticsReport {
        onset_auc,
        next_step_auc_observed,
        next_step_auc_latent,
        run_length_median: crate::numerics::median(&runs),
        run_length_p75: percentile(&runs, 0.75),
        run_length_max: runs.iter().cloned().fold(0.0, f64::max) as usize,
        n_runs: runs.len(),
        network_outage_events,
        notes,
    }
}
