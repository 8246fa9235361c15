//! Approximate EM for the blackout state-space model.
//!
//! E-step: filter + smooth with the current parameters and accumulate
//! posterior moments (cross-covariances approximated by outer products of
//! smoothed means). M-step: closed-form moment updates for the LDS block,
//! stabilized by shrinking `A` toward identity, shrinking `Q` toward an
//! isotropic matrix and capping `tr(Q)`; detector-wise gradient ascent on
//! the Bernoulli log-likelihood for the dropout block, with artificially
//! masked evaluation cells excluded so injected blackouts never teach the
//! missingness model.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::{self, FilterTrace, LdsParams, SmoothedTrace};
use crate::mnar::{self, MissingnessParams};
use crate::model::ModelParams;
use crate::numerics::{chol_with_jitter, median, psd_floor, symmetrize, variance};
use crate::panel::{Panel, StaticFeatures, TimeFeatures};

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub n_iterations: usize,
    /// Gradient-ascent steps on the dropout parameters per EM iteration.
    pub grad_steps_per_iter: usize,
    pub grad_lr: f64,
    /// Shrinkage of `A` toward identity, in [0, 1].
    pub shrink_a: f64,
    /// Shrinkage of `Q` toward an isotropic matrix, in [0, 1].
    pub shrink_q: f64,
    /// Cap on `tr(Q)`; `None` resolves to 10x the median observed
    /// per-detector variance at fit time.
    pub trace_cap_q: Option<f64>,
    /// Latent dimension used when initializing from data.
    pub k: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            n_iterations: 10,
            grad_steps_per_iter: 2,
            grad_lr: 1e-4,
            shrink_a: 0.05,
            shrink_q: 0.1,
            trace_cap_q: None,
            k: 20,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shrink_a) || !(0.0..=1.0).contains(&self.shrink_q) {
            return Err(Error::Config("shrink_a and shrink_q must lie in [0, 1]".into()));
        }
        if self.grad_lr < 0.0 {
            return Err(Error::Config("grad_lr must be nonnegative".into()));
        }
        if let Some(cap) = self.trace_cap_q {
            if !(cap > 0.0) {
                return Err(Error::Config("trace_cap_q must be positive".into()));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// One EM iteration's bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Gaussian loglik of observed values plus (when the dropout channel
    /// is active) the Bernoulli loglik of the indicators, both evaluated
    /// at the parameters entering the iteration.
    pub objective: f64,
    pub gauss_loglik: f64,
    pub miss_loglik: f64,
    /// Wall-clock bookkeeping; excluded from serialized reports so reruns
    /// stay byte-identical.
    #[serde(skip_serializing, default)]
    pub wall_secs: f64,
    pub q_cap_fired: bool,
    pub a_spectral_radius: f64,
    pub skipped_detectors: usize,
    pub jitter_events: usize,
}

/// Objective and stabilization history of one `fit` call.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub iterations: Vec<IterationRecord>,
    pub resolved_trace_cap_q: f64,
}

impl TrainingTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "iteration,objective,gauss_loglik,miss_loglik,wall_secs,q_cap_fired,a_spectral_radius,skipped_detectors,jitter_events"
        )?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.objective,
                r.gauss_loglik,
                r.miss_loglik,
                r.wall_secs,
                r.q_cap_fired as u8,
                r.a_spectral_radius,
                r.skipped_detectors,
                r.jitter_events
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Posterior moment accumulators from one smoothing pass.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `sum_t E[z_t z_t^T]` over all t.
    pub s_zz_full: DMatrix<f64>,
    /// Same sum excluding the last step (denominator of the `A` update).
    pub s_zz_head: DMatrix<f64>,
    /// Same sum excluding the first step.
    pub s_zz_tail: DMatrix<f64>,
    /// `sum_{t>=1} mu_{t|T} mu_{t-1|T}^T` (mean outer products).
    pub s_cross: DMatrix<f64>,
    pub first_mean: DVector<f64>,
    pub first_cov: DMatrix<f64>,
    /// Per-detector `sum_{t in O_d} E[z_t z_t^T]`.
    pub s_zz_obs: Vec<DMatrix<f64>>,
    /// Per-detector `sum_{t in O_d} x_{t,d} mu_{t|T}`.
    pub s_xz_obs: Vec<DVector<f64>>,
    /// Per-detector `sum_{t in O_d} x_{t,d}^2`.
    pub s_xx_obs: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub t_len: usize,
}

/// E-step output: the filter/smoother traces plus the accumulated moments.
#[derive(Debug, Clone)]
pub struct EStep {
    pub filter: FilterTrace,
    pub smoothed: SmoothedTrace,
    pub stats: SufficientStats,
}

/// Run the (MNAR-aware when enabled) filter and smoother, then accumulate
/// the moment statistics the M-step consumes.
pub fn e_step(
    panel: &Panel,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    params: &ModelParams,
) -> Result<EStep> {
    let filter =
        lds::filter_sequence(panel, time_features, static_features, params, params.mnar_enabled)?;
    let smoothed = lds::rts_smooth(&filter, &params.lds)?;
    let stats = accumulate_stats(panel, &smoothed);
    Ok(EStep { filter, smoothed, stats })
}

fn accumulate_stats(panel: &Panel, smoothed: &SmoothedTrace) -> SufficientStats {
    let t_len = smoothed.len();
    let k = smoothed.beliefs[0].dim();
    let d = panel.n_detectors();

    let mut s_zz_full = DMatrix::zeros(k, k);
    let mut s_zz_head = DMatrix::zeros(k, k);
    let mut s_zz_tail = DMatrix::zeros(k, k);
    let mut s_cross = DMatrix::zeros(k, k);
    let mut s_zz_obs = vec![DMatrix::zeros(k, k); d];
    let mut s_xz_obs = vec![DVector::zeros(k); d];
    let mut s_xx_obs = vec![0.0; d];
    let mut n_obs = vec![0usize; d];

    for t in 0..t_len {
        let bel = &smoothed.beliefs[t];
        let ezz = &bel.cov + &bel.mean * bel.mean.transpose();
        s_zz_full += &ezz;
        if t + 1 < t_len {
            s_zz_head += &ezz;
        }
        if t > 0 {
            s_zz_tail += &ezz;
            s_cross += &bel.mean * smoothed.beliefs[t - 1].mean.transpose();
        }
        for det in 0..d {
            if let Some(x) = panel.value_at(t, det) {
                s_zz_obs[det] += &ezz;
                s_xz_obs[det].axpy(x, &bel.mean, 1.0);
                s_xx_obs[det] += x * x;
                n_obs[det] += 1;
            }
        }
    }

    SufficientStats {
        s_zz_full,
        s_zz_head,
        s_zz_tail,
        s_cross,
        first_mean: smoothed.beliefs[0].mean.clone(),
        first_cov: smoothed.beliefs[0].cov.clone(),
        s_zz_obs,
        s_xz_obs,
        s_xx_obs,
        n_obs,
        t_len,
    }
}

/// Floor applied to updated observation-noise entries.
pub const R_FLOOR: f64 = 1e-4;

/// Closed-form LDS update with stabilization. Detectors that were never
/// observed keep their previous emission row and noise entry. Returns the
/// new parameters and whether the `tr(Q)` cap fired.
pub fn m_step_lds(
    stats: &SufficientStats,
    old: &LdsParams,
    config: &EmConfig,
    trace_cap_q: f64,
) -> Result<(LdsParams, bool)> {
    let k = old.state_dim();
    let d = old.obs_dim();

    let mu0 = stats.first_mean.clone();
    let sigma0 = psd_floor(&stats.first_cov, 1e-10);

    let (a_raw, q_sym) = if stats.t_len >= 2 {
        // A_raw = S_cross S_head^{-1}
        let (head_chol, _) = chol_with_jitter(&stats.s_zz_head, 0)?;
        let a_raw = head_chol.solve(&stats.s_cross.transpose()).transpose();
        // Q_raw from the standard residual moments at A_raw.
        let n = (stats.t_len - 1) as f64;
        let q_raw = (&stats.s_zz_tail - &a_raw * stats.s_cross.transpose()
            - &stats.s_cross * a_raw.transpose()
            + &a_raw * &stats.s_zz_head * a_raw.transpose())
            / n;
        (a_raw, symmetrize(&q_raw))
    } else {
        (old.a.clone(), symmetrize(&old.q))
    };

    let a = &a_raw * (1.0 - config.shrink_a)
        + DMatrix::<f64>::identity(k, k) * config.shrink_a;
    let iso = q_sym.trace() / k as f64;
    let mut q = &q_sym * (1.0 - config.shrink_q) + DMatrix::<f64>::identity(k, k) * (config.shrink_q * iso);
    q = psd_floor(&q, 1e-8);
    let mut cap_fired = false;
    let tr = q.trace();
    if tr > trace_cap_q {
        q *= trace_cap_q / tr;
        cap_fired = true;
    }

    let mut c = old.c.clone();
    let mut r_diag = old.r_diag.clone();
    for det in 0..d {
        if stats.n_obs[det] == 0 {
            continue;
        }
        let (chol, _) = chol_with_jitter(&stats.s_zz_obs[det], 0)?;
        let c_d = chol.solve(&stats.s_xz_obs[det]);
        let n = stats.n_obs[det] as f64;
        let resid = (stats.s_xx_obs[det] - 2.0 * c_d.dot(&stats.s_xz_obs[det])
            + c_d.dot(&(&stats.s_zz_obs[det] * &c_d)))
            / n;
        r_diag[det] = resid.max(R_FLOOR);
        c.set_row(det, &c_d.transpose());
    }

    Ok((LdsParams { mu0, sigma0, a, q, c, r_diag }, cap_fired))
}

/// Detector-wise gradient ascent on the Bernoulli log-likelihood of the
/// missingness indicators, evaluated at the smoothed means. Cells flagged
/// in the panel's artificial mask are excluded. Detectors producing a
/// non-finite gradient are skipped for the iteration; the skip count is
/// returned.
pub fn m_step_missingness(
    panel: &Panel,
    smoothed_means: &DMatrix<f64>,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    old: &MissingnessParams,
    config: &EmConfig,
) -> (MissingnessParams, usize) {
    let mut params = old.clone();
    let mut skipped = 0;
    for _ in 0..config.grad_steps_per_iter {
        let grads = mnar::loglik_gradients(
            panel,
            smoothed_means,
            time_features,
            &params,
            static_features,
            panel.artificial_mask(),
        );
        for (d, g) in grads.iter().enumerate() {
            let finite = g.b.is_finite()
                && g.phi.iter().all(|v| v.is_finite())
                && g.psi.iter().all(|v| v.is_finite())
                && g.eta.iter().all(|v| v.is_finite());
            if !finite {
                skipped += 1;
                continue;
            }
            params.b[d] += config.grad_lr * g.b;
            let lr = config.grad_lr;
            for k in 0..params.phi.ncols() {
                params.phi[(d, k)] += lr * g.phi[k];
            }
            for p in 0..params.psi.ncols() {
                params.psi[(d, p)] += lr * g.psi[p];
            }
            for q in 0..params.eta.ncols() {
                params.eta[(d, q)] += lr * g.eta[q];
            }
        }
    }
    (params, skipped)
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Median across detectors of the per-detector observed-value variance.
pub fn median_observed_variance(panel: &Panel) -> f64 {
    let mut vars = Vec::new();
    for d in 0..panel.n_detectors() {
        let xs: Vec<f64> =
            (0..panel.n_steps()).filter_map(|t| panel.value_at(t, d)).collect();
        if xs.len() >= 2 {
            vars.push(variance(&xs));
        }
    }
    if vars.is_empty() {
        1.0
    } else {
        median(&vars)
    }
}

/// Run EM for `config.n_iterations`. The dropout channel participates in
/// inference and gets gradient updates iff `init.mnar_enabled`; with it
/// disabled the missingness parameters pass through untouched, so the fit
/// is invariant to their initialization.
pub fn fit(
    panel: &Panel,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    init: ModelParams,
    config: &EmConfig,
) -> Result<(ModelParams, TrainingTrace)> {
    config.validate()?;
    init.validate()?;
    let cap = config.trace_cap_q.unwrap_or_else(|| 10.0 * median_observed_variance(panel));
    let mut trace = TrainingTrace { iterations: Vec::new(), resolved_trace_cap_q: cap };
    let mut params = init;

    for iter in 0..config.n_iterations {
        let started = Instant::now();
        let estep = e_step(panel, time_features, static_features, &params)?;
        let gauss = estep.filter.total_gauss_loglik();
        let miss = if params.mnar_enabled { estep.filter.total_miss_loglik() } else { 0.0 };
        let objective = gauss + miss;
        if !objective.is_finite() {
            return Err(Error::numerical(iter, "non-finite training objective"));
        }

        let (new_lds, cap_fired) = m_step_lds(&estep.stats, &params.lds, config, cap)?;
        let mut skipped = 0;
        let new_miss = if params.mnar_enabled {
            let means = estep.smoothed.means_matrix();
            let (m, s) = m_step_missingness(
                panel,
                &means,
                time_features,
                static_features,
                &params.miss,
                config,
            );
            skipped = s;
            m
        } else {
            params.miss.clone()
        };

        trace.iterations.push(IterationRecord {
            iteration: iter,
            objective,
            gauss_loglik: gauss,
            miss_loglik: miss,
            wall_secs: started.elapsed().as_secs_f64(),
            q_cap_fired: cap_fired,
            a_spectral_radius: spectral_radius(&new_lds.a),
            skipped_detectors: skipped,
            jitter_events: estep.filter.jitter_events + estep.smoothed.jitter_events,
        });

        params = ModelParams { lds: new_lds, miss: new_miss, mnar_enabled: params.mnar_enabled };
    }
    Ok((params, trace))
}

/// The two-phase protocol: a MAR fit, then an MNAR fit warm-started from
/// the MAR result with the dropout channel switched on.
pub struct TwoPhaseFit {
    pub mar: ModelParams,
    pub mar_trace: TrainingTrace,
    pub mnar: ModelParams,
    pub mnar_trace: TrainingTrace,
}

pub fn fit_two_phase(
    panel: &Panel,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    init: ModelParams,
    config: &EmConfig,
) -> Result<TwoPhaseFit> {
    let mar_init = ModelParams { mnar_enabled: false, ..init };
    let (mar, mar_trace) = fit(panel, time_features, static_features, mar_init, config)?;
    let mnar_init = ModelParams { mnar_enabled: true, ..mar.clone() };
    let (mnar, mnar_trace) = fit(panel, time_features, static_features, mnar_init, config)?;
    Ok(TwoPhaseFit { mar, mar_trace, mnar, mnar_trace })
}

/// Data-driven initialization: emission rows from the top-K principal
/// directions of the column-mean-imputed observed panel, near-identity
/// dynamics, per-detector noise from observed variance, and dropout
/// intercepts at the empirical per-detector missing rate.
pub fn init_params(
    panel: &Panel,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    k: usize,
    seed: u64,
) -> Result<ModelParams> {
    if k == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    let t_len = panel.n_steps();
    let d = panel.n_detectors();

    // Column means over observed entries; global mean as fallback.
    let mut col_means = vec![0.0f64; d];
    let mut all_observed: Vec<f64> = Vec::new();
    for det in 0..d {
        let xs: Vec<f64> = (0..t_len).filter_map(|t| panel.value_at(t, det)).collect();
        col_means[det] = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        all_observed.extend_from_slice(&xs);
    }
    let global_var = variance(&all_observed).max(1e-2);

    // Covariance of the mean-imputed, column-centered panel.
    let mut cov = DMatrix::zeros(d, d);
    for t in 0..t_len {
        let row = DVector::from_fn(d, |det, _| {
            panel.value_at(t, det).unwrap_or(col_means[det]) - col_means[det]
        });
        cov += &row * row.transpose();
    }
    cov /= t_len as f64;

    let eig = symmetrize(&cov).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut c = DMatrix::zeros(d, k);
    for j in 0..k {
        if j < d && eig.eigenvalues[order[j]] > 1e-10 {
            let lam = eig.eigenvalues[order[j]];
            let dir = eig.eigenvectors.column(order[j]) * lam.sqrt();
            c.set_column(j, &dir);
        } else {
            // Degenerate direction (k > rank): small seeded noise so EM can
            // still break symmetry.
            for det in 0..d {
                c[(det, j)] = 0.01 * normal.sample(&mut rng);
            }
        }
    }

    let mut r_diag = DVector::from_element(d, global_var);
    let mut b = DVector::zeros(d);
    for det in 0..d {
        let xs: Vec<f64> = (0..t_len).filter_map(|t| panel.value_at(t, det)).collect();
        if xs.len() >= 2 {
            r_diag[det] = variance(&xs).max(1e-2);
        }
        let miss_rate =
            (t_len - xs.len()) as f64 / t_len as f64;
        let logit = (miss_rate / (1.0 - miss_rate)).ln();
        b[det] = logit.clamp(-6.0, 6.0);
    }

    let lds = LdsParams {
        mu0: DVector::zeros(k),
        sigma0: DMatrix::identity(k, k),
        a: DMatrix::identity(k, k) * 0.99,
        q: DMatrix::identity(k, k) * 0.01,
        c,
        r_diag,
    };
    let mut miss = MissingnessParams::zeroed(d, k, time_features.dim(), static_features.dim());
    miss.b = b;
    let params = ModelParams { lds, miss, mnar_enabled: false };
    params.validate()?;
    Ok(params)
}
