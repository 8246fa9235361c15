//! Linear-Gaussian state-space machinery.
//!
//! State:       `z_t | z_{t-1} ~ N(A z_{t-1}, Q)`
//! Observation: `x_t | z_t     ~ N(C z_t, R)`, `R` diagonal.
//!
//! Measurement updates run in information form: with diagonal `R` the
//! observed detectors contribute a sum of `K x K` outer products to the
//! posterior precision, so each step solves only `K x K` systems no
//! matter how many detectors report.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mnar;
use crate::model::ModelParams;
use crate::numerics::{chol_with_jitter, logdet, symmetrize};
use crate::panel::{Panel, StaticFeatures, TimeFeatures};

const LN_2PI: f64 = 1.8378770664093453;

/// Time-invariant LDS parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsParams {
    /// Initial state mean (length K).
    pub mu0: DVector<f64>,
    /// Initial state covariance (K x K, PSD).
    pub sigma0: DMatrix<f64>,
    /// Transition matrix (K x K).
    pub a: DMatrix<f64>,
    /// Process noise covariance (K x K, PSD).
    pub q: DMatrix<f64>,
    /// Emission matrix (D x K).
    pub c: DMatrix<f64>,
    /// Diagonal of the observation noise covariance (length D, positive).
    pub r_diag: DVector<f64>,
}

impl LdsParams {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.state_dim();
        let d = self.obs_dim();
        if self.a.ncols() != k
            || self.q.shape() != (k, k)
            || self.sigma0.shape() != (k, k)
            || self.mu0.len() != k
            || self.c.ncols() != k
            || self.r_diag.len() != d
        {
            return Err(Error::Dimension("inconsistent LDS parameter shapes".into()));
        }
        if self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Validation("R diagonal must be strictly positive".into()));
        }
        let finite = self.mu0.iter().all(|v| v.is_finite())
            && self.sigma0.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("LDS parameters must be finite".into()));
        }
        Ok(())
    }

    /// The prior belief `N(mu0, Sigma0)`.
    pub fn prior(&self) -> GaussianBelief {
        GaussianBelief { mean: self.mu0.clone(), cov: self.sigma0.clone() }
    }
}

/// A Gaussian over the latent state; covariance kept symmetric after
/// every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-sequence filtering output.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    /// `N(mu_{t|t-1}, Sigma_{t|t-1})` for every t (t = 0 holds the prior).
    pub predicted: Vec<GaussianBelief>,
    /// `N(mu_{t|t}, Sigma_{t|t})` for every t.
    pub filtered: Vec<GaussianBelief>,
    /// Per-step Gaussian log-density of the observed detector values under
    /// the predictive distribution.
    pub gauss_loglik: Vec<f64>,
    /// Per-step Bernoulli log-likelihood of the missingness indicators
    /// (zero when the dropout channel is disabled).
    pub miss_loglik: Vec<f64>,
    /// Number of jittered solves performed across the pass.
    pub jitter_events: usize,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }

    pub fn total_gauss_loglik(&self) -> f64 {
        self.gauss_loglik.iter().sum()
    }

    pub fn total_miss_loglik(&self) -> f64 {
        self.miss_loglik.iter().sum()
    }
}

/// RTS smoothing output: `N(mu_{t|T}, Sigma_{t|T})` per step.
#[derive(Debug, Clone)]
pub struct SmoothedTrace {
    pub beliefs: Vec<GaussianBelief>,
    pub jitter_events: usize,
}

impl SmoothedTrace {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    /// Smoothed means stacked as a `T x K` matrix.
    pub fn means_matrix(&self) -> DMatrix<f64> {
        let t = self.beliefs.len();
        let k = if t > 0 { self.beliefs[0].dim() } else { 0 };
        DMatrix::from_fn(t, k, |r, c| self.beliefs[r].mean[c])
    }
}

/// One-step time update: `mean' = A mean`, `cov' = A cov A^T + Q`.
pub fn predict(belief: &GaussianBelief, params: &LdsParams) -> GaussianBelief {
    let mean = &params.a * &belief.mean;
    let cov = symmetrize(&(&params.a * &belief.cov * params.a.transpose() + &params.q));
    GaussianBelief { mean, cov }
}

/// Information-form measurement update over the observed detectors.
///
/// Returns the posterior belief and the Gaussian log-density of the
/// observed entries under the predictive distribution
/// `N(C_o mean, C_o cov C_o^T + R_o)`, computed with `K x K` solves via
/// the Woodbury identity and the matrix determinant lemma.
pub fn update_observed(
    belief: &GaussianBelief,
    x_row: &DVector<f64>,
    obs_mask_row: &[bool],
    params: &LdsParams,
    step: usize,
) -> Result<(GaussianBelief, f64, usize)> {
    let observed: Vec<usize> = (0..obs_mask_row.len()).filter(|d| obs_mask_row[*d]).collect();
    if observed.is_empty() {
        return Ok((belief.clone(), 0.0, 0));
    }
    let k = belief.dim();

    let (prior_chol, mut jitters) = chol_with_jitter(&belief.cov, step)?;
    let prior_precision = prior_chol.inverse();
    let prior_logdet = logdet(&prior_chol);

    // Posterior precision and information vector.
    let mut precision = prior_precision.clone();
    let mut info = &prior_precision * &belief.mean;
    // Innovation pieces for the log-likelihood.
    let mut quad_diag = 0.0;
    let mut logdet_r = 0.0;
    let mut u = DVector::zeros(k);

    for &d in &observed {
        let c_d = params.c.row(d).transpose();
        let r_d = params.r_diag[d];
        let x_d = x_row[d];
        if !x_d.is_finite() {
            return Err(Error::numerical(step, format!("observed value at detector {} not finite", d)));
        }
        precision += &c_d * c_d.transpose() / r_d;
        info += &c_d * (x_d / r_d);

        let resid = x_d - c_d.dot(&belief.mean);
        quad_diag += resid * resid / r_d;
        logdet_r += r_d.ln();
        u += &c_d * (resid / r_d);
    }

    let precision = symmetrize(&precision);
    let (post_chol, j2) = chol_with_jitter(&precision, step)?;
    jitters += j2;
    let mean = post_chol.solve(&info);
    let cov = symmetrize(&post_chol.inverse());

    // log N(x_o; C_o mu, C_o Sigma C_o^T + R_o) via the determinant lemma:
    // logdet(S) = logdet(R_o) + logdet(Sigma) + logdet(Lambda_post)
    // v^T S^{-1} v = v^T R^{-1} v - u^T Lambda_post^{-1} u, u = C_o^T R^{-1} v
    let logdet_s = logdet_r + prior_logdet + logdet(&post_chol);
    let quad = quad_diag - u.dot(&post_chol.solve(&u));
    let loglik = -0.5 * (observed.len() as f64 * LN_2PI + logdet_s + quad);

    Ok((GaussianBelief { mean, cov }, loglik, jitters))
}

/// Filter a full panel. For each step: predict, update on the observed
/// detectors, then (when `mnar_enabled`) fold in the missingness
/// indicators as a Gaussianized pseudo-observation. With `mnar_enabled`
/// false the dropout pattern is ignored entirely.
pub fn filter_sequence(
    panel: &Panel,
    time_features: &TimeFeatures,
    static_features: &StaticFeatures,
    params: &ModelParams,
    mnar_enabled: bool,
) -> Result<FilterTrace> {
    params.validate()?;
    if panel.n_detectors() != params.lds.obs_dim() {
        return Err(Error::Dimension(format!(
            "panel has {} detectors, model expects {}",
            panel.n_detectors(),
            params.lds.obs_dim()
        )));
    }
    let t_len = panel.n_steps();
    let mut trace = FilterTrace {
        predicted: Vec::with_capacity(t_len),
        filtered: Vec::with_capacity(t_len),
        gauss_loglik: Vec::with_capacity(t_len),
        miss_loglik: Vec::with_capacity(t_len),
        jitter_events: 0,
    };

    let mut belief = params.lds.prior();
    for t in 0..t_len {
        if t > 0 {
            belief = predict(&belief, &params.lds);
        }
        let predicted = belief.clone();

        let x_row = panel.value_row(t);
        let obs_row = panel.observed_row(t);
        let (updated, gauss_ll, jitters) =
            update_observed(&belief, &x_row, &obs_row, &params.lds, t)?;
        trace.jitter_events += jitters;
        belief = updated;

        let miss_ll = if mnar_enabled {
            let lin_mean = match params.miss.linearize_at {
                mnar::LinearizeAt::Predicted => &predicted.mean,
                mnar::LinearizeAt::Posterior => &belief.mean,
            };
            let miss_row: Vec<bool> = obs_row.iter().map(|o| !o).collect();
            let f_t = time_features.row(t);
            let (after, ll, jitters) = mnar::mnar_pseudo_update(
                &belief,
                lin_mean,
                &miss_row,
                &f_t,
                &params.miss,
                static_features,
                t,
            )?;
            trace.jitter_events += jitters;
            belief = after;
            ll
        } else {
            0.0
        };

        trace.predicted.push(predicted);
        trace.filtered.push(belief.clone());
        trace.gauss_loglik.push(gauss_ll);
        trace.miss_loglik.push(miss_ll);
    }
    Ok(trace)
}

/// Backward RTS pass. The smoother revisits only the stored moments and
/// the linear dynamics; the dropout channel plays no further role.
pub fn rts_smooth(trace: &FilterTrace, params: &LdsParams) -> Result<SmoothedTrace> {
    let t_len = trace.len();
    if t_len == 0 {
        return Ok(SmoothedTrace { beliefs: Vec::new(), jitter_events: 0 });
    }
    let mut beliefs = trace.filtered.clone();
    let mut jitter_events = 0;

    for t in (0..t_len - 1).rev() {
        let pred_next = &trace.predicted[t + 1];
        // G_t = Sigma_{t|t} A^T Sigma_{t+1|t}^{-1}, via a jittered SPD solve.
        let (chol, jitters) = chol_with_jitter(&pred_next.cov, t + 1)?;
        jitter_events += jitters;
        let a_sig = &params.a * &trace.filtered[t].cov; // (A Sigma_{t|t})
        let gain = chol.solve(&a_sig).transpose(); // Sigma A^T S^{-1}

        let dm = &beliefs[t + 1].mean - &pred_next.mean;
        let dp = &beliefs[t + 1].cov - &pred_next.cov;
        let mean = &trace.filtered[t].mean + &gain * dm;
        let cov = symmetrize(&(&trace.filtered[t].cov + &gain * dp * gain.transpose()));
        beliefs[t] = GaussianBelief { mean, cov };
    }
    Ok(SmoothedTrace { beliefs, jitter_events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnar::MissingnessParams;
    use crate::numerics::min_eigenvalue;
    use crate::panel::{regular_timestamps, Panel};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use nalgebra::{DMatrix, DVector};

    fn scalar_params(a: f64, q: f64, c: f64, r: f64, mu0: f64, s0: f64) -> LdsParams {
        LdsParams {
            mu0: DVector::from_row_slice(&[mu0]),
            sigma0: DMatrix::from_row_slice(1, 1, &[s0]),
            a: DMatrix::from_row_slice(1, 1, &[a]),
            q: DMatrix::from_row_slice(1, 1, &[q]),
            c: DMatrix::from_row_slice(1, 1, &[c]),
            r_diag: DVector::from_row_slice(&[r]),
        }
    }

    fn panel_1d(values: &[Option<f64>]) -> Panel {
        let t = values.len();
        let vals = DMatrix::from_fn(t, 1, |r, _| values[r].unwrap_or(f64::NAN));
        let obs = DMatrix::from_fn(t, 1, |r, _| values[r].is_some());
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        Panel::new(
            vals,
            obs,
            DMatrix::from_element(t, 1, false),
            regular_timestamps(start, 300, t),
            vec!["d0".into()],
        )
        .unwrap()
    }

    #[test]
    fn identity_dynamics_leave_belief_unchanged() {
        let params = scalar_params(1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[2.5]),
            cov: DMatrix::from_row_slice(1, 1, &[0.7]),
        };
        let out = predict(&belief, &params);
        assert_eq!(out.mean[0], 2.5);
        assert_eq!(out.cov[(0, 0)], 0.7);
    }

    #[test]
    fn zero_mean_stays_zero_under_any_transition() {
        let params = LdsParams {
            mu0: DVector::zeros(2),
            sigma0: DMatrix::identity(2, 2),
            a: DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.5, 0.9]),
            q: DMatrix::identity(2, 2) * 0.1,
            c: DMatrix::identity(2, 2),
            r_diag: DVector::from_element(2, 1.0),
        };
        let belief =
            GaussianBelief { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) * 0.4 };
        let out = predict(&belief, &params);
        assert!(out.mean.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn scalar_predict_hand_value() {
        // K=1, A=0.9, Q=0.1, belief (1.0, 0.5) -> (0.9, 0.81*0.5 + 0.1)
        let params = scalar_params(0.9, 0.1, 1.0, 1.0, 0.0, 1.0);
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[1.0]),
            cov: DMatrix::from_row_slice(1, 1, &[0.5]),
        };
        let out = predict(&belief, &params);
        assert_relative_eq!(out.mean[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(out.cov[(0, 0)], 0.505, epsilon = 1e-12);
    }

    #[test]
    fn update_with_nothing_observed_is_identity() {
        let params = scalar_params(1.0, 0.1, 1.0, 1.0, 0.0, 1.0);
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[0.3]),
            cov: DMatrix::from_row_slice(1, 1, &[2.0]),
        };
        let x = DVector::from_row_slice(&[f64::NAN]);
        let (out, ll, _) = update_observed(&belief, &x, &[false], &params, 0).unwrap();
        assert_eq!(out, belief);
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn scalar_bayes_update_hand_value() {
        // prior (0,1), C=1, R=1, x=2 -> posterior (1.0, 0.5)
        let params = scalar_params(1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let belief =
            GaussianBelief { mean: DVector::zeros(1), cov: DMatrix::from_row_slice(1, 1, &[1.0]) };
        let x = DVector::from_row_slice(&[2.0]);
        let (out, ll, _) = update_observed(&belief, &x, &[true], &params, 0).unwrap();
        assert_relative_eq!(out.mean[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(out.cov[(0, 0)], 0.5, epsilon = 1e-10);
        // predictive N(2; 0, 2)
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 4.0 / 2.0);
        assert_relative_eq!(ll, expected, epsilon = 1e-10);
    }

    #[test]
    fn duplicate_rows_match_half_variance_observation() {
        // Two detectors with identical emission rows and R equal to one
        // detector observed at half the variance.
        let dup = LdsParams {
            mu0: DVector::zeros(2),
            sigma0: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
            a: DMatrix::identity(2, 2),
            q: DMatrix::zeros(2, 2),
            c: DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 1.0, -0.5]),
            r_diag: DVector::from_row_slice(&[0.8, 0.8]),
        };
        let single = LdsParams {
            c: DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            r_diag: DVector::from_row_slice(&[0.4]),
            ..dup.clone()
        };
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[0.1, -0.2]),
            cov: dup.sigma0.clone(),
        };
        let x2 = DVector::from_row_slice(&[1.7, 1.7]);
        let x1 = DVector::from_row_slice(&[1.7]);
        let (out2, _, _) = update_observed(&belief, &x2, &[true, true], &dup, 0).unwrap();
        let (out1, _, _) = update_observed(&belief, &x1, &[true], &single, 0).unwrap();
        assert_relative_eq!(out2.mean[0], out1.mean[0], epsilon = 1e-9);
        assert_relative_eq!(out2.mean[1], out1.mean[1], epsilon = 1e-9);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(out2.cov[(i, j)], out1.cov[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn update_never_inflates_diagonal_variance() {
        let params = LdsParams {
            mu0: DVector::zeros(2),
            sigma0: DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.9]),
            a: DMatrix::identity(2, 2),
            q: DMatrix::zeros(2, 2),
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 1.1]),
            r_diag: DVector::from_row_slice(&[0.5, 0.25]),
        };
        let belief = GaussianBelief { mean: DVector::zeros(2), cov: params.sigma0.clone() };
        let x = DVector::from_row_slice(&[0.9, -0.4]);
        let (out, _, _) = update_observed(&belief, &x, &[true, true], &params, 0).unwrap();
        for i in 0..2 {
            assert!(out.cov[(i, i)] <= belief.cov[(i, i)] + 1e-10);
        }
        assert!(min_eigenvalue(&out.cov) >= -1e-8);
    }

    #[test]
    fn single_step_filter_with_nothing_observed_returns_prior() {
        let params = ModelParams::mar_only(scalar_params(0.9, 0.1, 1.0, 1.0, 0.4, 1.3));
        let panel = panel_1d(&[None]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let trace = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        assert_eq!(trace.len(), 1);
        assert_relative_eq!(trace.filtered[0].mean[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(trace.filtered[0].cov[(0, 0)], 1.3, epsilon = 1e-12);
        assert_eq!(trace.predicted[0], trace.filtered[0]);
        assert_eq!(trace.total_gauss_loglik(), 0.0);
    }

    #[test]
    fn loglik_total_is_sum_of_contributions() {
        let params = ModelParams::mar_only(scalar_params(0.8, 0.2, 1.0, 0.5, 0.0, 1.0));
        let panel = panel_1d(&[Some(1.0), None, Some(-0.3), Some(0.6)]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let trace = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        let total: f64 = trace.gauss_loglik.iter().sum();
        assert_relative_eq!(trace.total_gauss_loglik(), total, epsilon = 1e-12);
        assert!(trace.gauss_loglik.iter().all(|l| l.is_finite()));
        assert_eq!(trace.gauss_loglik[1], 0.0);
    }

    #[test]
    fn smoother_on_single_step_returns_filtered() {
        let params = ModelParams::mar_only(scalar_params(0.9, 0.1, 1.0, 1.0, 0.0, 1.0));
        let panel = panel_1d(&[Some(0.5)]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let trace = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        let smoothed = rts_smooth(&trace, &params.lds).unwrap();
        assert_eq!(smoothed.beliefs[0], trace.filtered[0]);
    }

    #[test]
    fn zero_transition_makes_smoothing_a_no_op() {
        let params = ModelParams::mar_only(scalar_params(0.0, 0.3, 1.0, 0.6, 0.1, 0.9));
        let panel = panel_1d(&[Some(0.5), Some(-0.2), None, Some(0.8)]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let trace = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        let smoothed = rts_smooth(&trace, &params.lds).unwrap();
        for t in 0..trace.len() {
            assert_relative_eq!(
                smoothed.beliefs[t].mean[0],
                trace.filtered[t].mean[0],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                smoothed.beliefs[t].cov[(0, 0)],
                trace.filtered[t].cov[(0, 0)],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn final_smoothed_belief_equals_final_filtered() {
        let params = ModelParams::mar_only(scalar_params(0.95, 0.2, 1.0, 0.4, 0.0, 1.0));
        let panel = panel_1d(&[Some(0.1), None, Some(0.9), Some(0.3), None]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let trace = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        let smoothed = rts_smooth(&trace, &params.lds).unwrap();
        assert_eq!(smoothed.beliefs.last().unwrap(), trace.filtered.last().unwrap());
    }

    #[test]
    fn mnar_channel_with_zero_coupling_matches_mar_exactly() {
        let lds = scalar_params(0.9, 0.1, 1.0, 0.5, 0.0, 1.0);
        let miss = MissingnessParams::zeroed(1, 1, 4, 0);
        let params = ModelParams { lds, miss, mnar_enabled: true };
        let panel = panel_1d(&[Some(1.0), None, Some(-0.5)]);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let sf = StaticFeatures::none(1);
        let with = filter_sequence(&panel, &tf, &sf, &params, true).unwrap();
        let without = filter_sequence(&panel, &tf, &sf, &params, false).unwrap();
        for t in 0..with.len() {
            assert_relative_eq!(
                with.filtered[t].mean[0],
                without.filtered[t].mean[0],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                with.filtered[t].cov[(0, 0)],
                without.filtered[t].cov[(0, 0)],
                epsilon = 1e-12
            );
        }
        // the Bernoulli trace is still recorded
        assert!(with.miss_loglik.iter().all(|l| *l < 0.0));
        assert!(without.miss_loglik.iter().all(|l| *l == 0.0));
    }
}
