//! Synthetic panels from a known LDS with state-dependent dropout of
//! controllable strength.
//!
//! Dropout logits are `b0 + alpha * (u_d^T z_t)` with `u_d` a fixed unit
//! vector per detector and `b0` the logit of the base missing rate;
//! `alpha = 0` reduces to MCAR at the base rate. Pointwise mode samples
//! each indicator independently; block mode turns onset draws into
//! contiguous blackouts (onset probability is scaled down by the mean
//! block length so the overall missing rate stays near the base rate in
//! both modes).

use chrono::NaiveDateTime;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::LdsParams;
use crate::numerics::{sigmoid, substream_seed, symmetrize};
use crate::panel::{regular_timestamps, Panel};

/// How dropout indicators are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BlackoutMode {
    /// Independent Bernoulli draw per cell.
    PointwiseBernoulli,
    /// Bernoulli onset draws extended into contiguous blackouts of uniform
    /// random length (merging of overlapping blocks is allowed).
    StateTriggeredBlocks { min_len: usize, max_len: usize },
}

/// Generator settings. `true_params: None` draws a random stable system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub k: usize,
    pub d: usize,
    pub t: usize,
    /// State-dependence strength of the dropout logits.
    pub alpha: f64,
    pub base_missing_rate: f64,
    pub blackout_mode: BlackoutMode,
    pub seed: u64,
    /// Observation noise variance per detector for generated systems.
    pub obs_noise: f64,
    /// Emission scale for generated systems.
    pub emission_scale: f64,
    /// ISO-8601 start of the timestamp grid.
    pub start_timestamp: String,
    pub interval_secs: i64,
    #[serde(skip)]
    pub true_params: Option<LdsParams>,
    /// Accept an unstable supplied system instead of rejecting it.
    pub allow_unstable: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: 4,
            d: 12,
            t: 5000,
            alpha: 0.0,
            base_missing_rate: 0.05,
            blackout_mode: BlackoutMode::StateTriggeredBlocks { min_len: 6, max_len: 24 },
            seed: 0,
            obs_noise: 0.25,
            emission_scale: 1.0,
            start_timestamp: "2015-01-01T00:00:00".into(),
            interval_secs: 300,
            true_params: None,
            allow_unstable: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.t == 0 {
            return Err(Error::Config("k, d, t must all be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if !(self.base_missing_rate > 0.0 && self.base_missing_rate < 1.0) {
            return Err(Error::Config("base_missing_rate must lie in (0, 1)".into()));
        }
        if let BlackoutMode::StateTriggeredBlocks { min_len, max_len } = self.blackout_mode {
            if min_len == 0 || min_len > max_len {
                return Err(Error::Config("block lengths must satisfy 1 <= min <= max".into()));
            }
        }
        if !(self.obs_noise > 0.0) {
            return Err(Error::Config("obs_noise must be positive".into()));
        }
        Ok(())
    }

    fn start(&self) -> Result<NaiveDateTime> {
        NaiveDateTime::parse_from_str(&self.start_timestamp, "%Y-%m-%dT%H:%M:%S")
            .map_err(|e| Error::Config(format!("bad start_timestamp: {}", e)))
    }
}

/// A generated panel together with everything the generator knew.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// The working panel with dropout applied.
    pub panel: Panel,
    /// Fully observed measurements (the evaluation ground truth).
    pub truth: DMatrix<f64>,
    /// True latent trajectory (T x K).
    pub states: DMatrix<f64>,
    pub true_params: LdsParams,
    /// Unit dropout directions, one row per detector.
    pub miss_directions: DMatrix<f64>,
}

impl SynthOutput {
    /// The truth matrix wrapped as a fully observed panel.
    pub fn truth_panel(&self) -> Panel {
        Panel::fully_observed(
            self.truth.clone(),
            self.panel.timestamps().to_vec(),
            self.panel.detector_ids().to_vec(),
        )
        .expect("truth panel is always valid")
    }
}

/// Random stable system: symmetric transition with eigenvalues in
/// [0.85, 0.98] and process noise tuned for a unit stationary covariance,
/// so dropout logits see states on a consistent scale at any `k`.
fn random_stable_system(config: &SynthConfig, rng: &mut ChaCha8Rng) -> LdsParams {
    let k = config.k;
    let d = config.d;
    let normal = Normal::new(0.0, 1.0).unwrap();

    // orthogonal basis via QR of a Gaussian matrix
    let gauss = DMatrix::from_fn(k, k, |_, _| normal.sample(rng));
    let qr = gauss.qr();
    let basis = qr.q();

    let rhos = DVector::from_fn(k, |_, _| rng.random_range(0.85..0.98));
    let a = &basis * DMatrix::from_diagonal(&rhos) * basis.transpose();
    // stationary covariance = I when Q = U diag(1 - rho^2) U^T
    let q = &basis * DMatrix::from_diagonal(&rhos.map(|r| 1.0 - r * r)) * basis.transpose();

    let c = DMatrix::from_fn(d, k, |_, _| config.emission_scale * normal.sample(rng));
    LdsParams {
        mu0: DVector::zeros(k),
        sigma0: DMatrix::identity(k, k),
        a: symmetrize(&a),
        q: symmetrize(&q),
        c,
        r_diag: DVector::from_element(d, config.obs_noise),
    }
}

fn max_abs_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Generate states, measurements and dropout per the config. Identical
/// seeds produce bit-identical output.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut sys_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "system"));
    let params = match &config.true_params {
        Some(p) => {
            p.validate()?;
            if p.state_dim() != config.k || p.obs_dim() != config.d {
                return Err(Error::Dimension("true_params disagree with configured k/d".into()));
            }
            let radius = max_abs_eigenvalue(&p.a);
            if radius >= 1.0 && !config.allow_unstable {
                return Err(Error::Validation(format!(
                    "supplied system is unstable (spectral radius {:.3}); set allow_unstable to force",
                    radius
                )));
            }
            p.clone()
        }
        None => random_stable_system(config, &mut sys_rng),
    };

    let normal = Normal::new(0.0, 1.0).unwrap();
    let k = config.k;
    let d = config.d;
    let t_len = config.t;

    // Unit dropout directions, fixed once per detector.
    let mut dir_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "directions"));
    let miss_directions = DMatrix::from_fn(d, k, |_, _| normal.sample(&mut dir_rng));
    let miss_directions = {
        let mut m = miss_directions;
        for r in 0..d {
            let norm = m.row(r).norm();
            if norm > 0.0 {
                for c in 0..k {
                    m[(r, c)] /= norm;
                }
            }
        }
        m
    };

    // Latent trajectory and noisy emissions.
    let mut state_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "states"));
    let (q_chol, _) = crate::numerics::chol_with_jitter(&params.q, 0)?;
    let (s0_chol, _) = crate::numerics::chol_with_jitter(&params.sigma0, 0)?;
    let mut states = DMatrix::zeros(t_len, k);
    let mut z = &params.mu0
        + s0_chol.l() * DVector::from_fn(k, |_, _| normal.sample(&mut state_rng));
    for t in 0..t_len {
        if t > 0 {
            let noise = q_chol.l() * DVector::from_fn(k, |_, _| normal.sample(&mut state_rng));
            z = &params.a * &z + noise;
        }
        states.set_row(t, &z.transpose());
    }

    let mut obs_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "observations"));
    let mut truth = DMatrix::zeros(t_len, d);
    for t in 0..t_len {
        let z_t = states.row(t).transpose();
        let mean = &params.c * &z_t;
        for det in 0..d {
            truth[(t, det)] = mean[det] + params.r_diag[det].sqrt() * normal.sample(&mut obs_rng);
        }
    }

    // Dropout indicators.
    let b0 = (config.base_missing_rate / (1.0 - config.base_missing_rate)).ln();
    let mut miss_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "missingness"));
    let mut missing = DMatrix::from_element(t_len, d, false);
    match config.blackout_mode {
        BlackoutMode::PointwiseBernoulli => {
            for t in 0..t_len {
                let z_t = states.row(t).transpose();
                for det in 0..d {
                    let pi = sigmoid(b0 + config.alpha * miss_directions.row(det).transpose().dot(&z_t));
                    if miss_rng.random::<f64>() < pi {
                        missing[(t, det)] = true;
                    }
                }
            }
        }
        BlackoutMode::StateTriggeredBlocks { min_len, max_len } => {
            let mean_len = 0.5 * (min_len + max_len) as f64;
            for t in 0..t_len {
                let z_t = states.row(t).transpose();
                for det in 0..d {
                    let pi = sigmoid(b0 + config.alpha * miss_directions.row(det).transpose().dot(&z_t));
                    let onset = pi / mean_len;
                    if miss_rng.random::<f64>() < onset {
                        let len = miss_rng.random_range(min_len..=max_len);
                        for s in t..(t + len).min(t_len) {
                            missing[(s, det)] = true;
                        }
                    }
                }
            }
        }
    }

    let observed = missing.map(|m| !m);
    let values = DMatrix::from_fn(t_len, d, |r, c| if observed[(r, c)] { truth[(r, c)] } else { f64::NAN });
    let timestamps = regular_timestamps(config.start()?, config.interval_secs, t_len);
    let ids: Vec<String> = (0..d).map(|i| format!("det{:03}", i)).collect();
    let panel = Panel::new(
        values,
        observed,
        DMatrix::from_element(t_len, d, false),
        timestamps,
        ids,
    )?;

    Ok(SynthOutput { panel, truth, states, true_params: params, miss_directions })
}
