//! State-dependent Bernoulli dropout channel.
//!
//! Detector `d` goes missing at time `t` with probability
//! `pi_{t,d} = sigmoid(b_d + phi_d^T z_t + psi_d^T f_t + eta_d^T g_d)`.
//! During filtering the indicator vector is folded in as a pseudo-
//! observation by Gaussianizing the Bernoulli likelihood around a
//! linearization point; during learning the exact Bernoulli likelihood
//! and its gradients drive detector-wise ascent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::GaussianBelief;
use crate::numerics::{chol_with_jitter, sigmoid, softplus, symmetrize};
use crate::panel::{Panel, StaticFeatures, TimeFeatures};

/// Variance assigned to the Gaussianized missingness pseudo-observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum VarianceMode {
    /// `pi (1 - pi)`, floored to avoid infinite-precision observations at
    /// saturated probabilities.
    MomentMatch,
    /// A tuned constant.
    Constant(f64),
}

/// Floor applied in moment-match mode.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Where the dropout channel is linearized inside a filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizeAt {
    /// At the predicted mean `mu_{t|t-1}` (default).
    Predicted,
    /// At the mean after the speed measurement update.
    Posterior,
}

/// Dropout-model parameters plus the inference settings that govern how
/// the channel enters the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessParams {
    /// Per-detector intercepts (length D).
    pub b: DVector<f64>,
    /// Latent-state weights (D x K).
    pub phi: DMatrix<f64>,
    /// Time-feature weights (D x p).
    pub psi: DMatrix<f64>,
    /// Static-feature weights (D x q).
    pub eta: DMatrix<f64>,
    /// Scalar weight on the pseudo-observation block; 0 disables it.
    pub w_miss: f64,
    pub variance_mode: VarianceMode,
    pub linearize_at: LinearizeAt,
}

impl MissingnessParams {
    /// All-zero parameters with the default inference settings.
    pub fn zeroed(d: usize, k: usize, p: usize, q: usize) -> Self {
        MissingnessParams {
            b: DVector::zeros(d),
            phi: DMatrix::zeros(d, k),
            psi: DMatrix::zeros(d, p),
            eta: DMatrix::zeros(d, q),
            w_miss: 1.0,
            variance_mode: VarianceMode::MomentMatch,
            linearize_at: LinearizeAt::Predicted,
        }
    }

    pub fn n_detectors(&self) -> usize {
        self.b.len()
    }

    pub fn state_dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_detectors();
        if self.phi.nrows() != d || self.psi.nrows() != d || self.eta.nrows() != d {
            return Err(Error::Dimension("missingness parameter rows must equal D".into()));
        }
        if !(self.w_miss >= 0.0) {
            return Err(Error::Validation("w_miss must be nonnegative".into()));
        }
        if let VarianceMode::Constant(c) = self.variance_mode {
            if !(c > 0.0) {
                return Err(Error::Validation("constant pseudo-variance must be positive".into()));
            }
        }
        let finite = self.b.iter().all(|v| v.is_finite())
            && self.phi.iter().all(|v| v.is_finite())
            && self.psi.iter().all(|v| v.is_finite())
            && self.eta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("missingness parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Dropout logits for one timestep:
/// `l_d = b_d + phi_d^T z + psi_d^T f + eta_d^T g_d`.
pub fn logits(
    z: &DVector<f64>,
    f: &DVector<f64>,
    params: &MissingnessParams,
    static_features: &StaticFeatures,
) -> DVector<f64> {
    let mut l = &params.b + &params.phi * z + &params.psi * f;
    if static_features.dim() > 0 {
        for d in 0..params.n_detectors() {
            l[d] += params.eta.row(d).transpose().dot(&static_features.row(d));
        }
    }
    l
}

/// Elementwise stable sigmoid.
pub fn probs(logits: &DVector<f64>) -> DVector<f64> {
    logits.map(sigmoid)
}

/// Row of the observation Jacobian: `d pi_d / d z = pi (1 - pi) phi_d`.
pub fn jacobian_row(pi_d: f64, phi_d: &DVector<f64>) -> DVector<f64> {
    phi_d * (pi_d * (1.0 - pi_d))
}

/// Pseudo-observation variance per detector.
pub fn pseudo_variance(pi: &DVector<f64>, mode: VarianceMode) -> DVector<f64> {
    match mode {
        VarianceMode::MomentMatch => pi.map(|p| (p * (1.0 - p)).max(VARIANCE_FLOOR)),
        VarianceMode::Constant(c) => DVector::from_element(pi.len(), c),
    }
}

/// Bernoulli log-density of one indicator given its logit:
/// `m ln pi + (1 - m) ln(1 - pi) = m l - softplus(l)`.
fn bernoulli_term(m: bool, logit: f64) -> f64 {
    (if m { logit } else { 0.0 }) - softplus(logit)
}

/// EKF-style update folding the missingness indicators into the belief.
///
/// The channel is linearized at `lin_mean` (the caller picks the predicted
/// or post-measurement mean): logits, probabilities, Jacobian and
/// pseudo-variances are all evaluated there, and the indicators enter as a
/// Gaussian observation with noise `diag(s) / w_miss`. `w_miss = 0` (or an
/// all-zero `phi`) skips the update. The returned scalar is the exact
/// Bernoulli log-likelihood of the indicator row at the linearization
/// point.
pub fn mnar_pseudo_update(
    belief: &GaussianBelief,
    lin_mean: &DVector<f64>,
    miss_row: &[bool],
    f: &DVector<f64>,
    params: &MissingnessParams,
    static_features: &StaticFeatures,
    step: usize,
) -> Result<(GaussianBelief, f64, usize)> {
    let d_total = params.n_detectors();
    if miss_row.len() != d_total {
        return Err(Error::Dimension("indicator row length must equal D".into()));
    }
    let l = logits(lin_mean, f, params, static_features);
    let pi = probs(&l);
    let loglik: f64 = (0..d_total).map(|d| bernoulli_term(miss_row[d], l[d])).sum();

    let coupled = params.w_miss > 0.0 && params.phi.iter().any(|v| *v != 0.0);
    if !coupled {
        return Ok((belief.clone(), loglik, 0));
    }

    let s = pseudo_variance(&pi, params.variance_mode);

    let (prior_chol, mut jitters) = chol_with_jitter(&belief.cov, step)?;
    let prior_precision = prior_chol.inverse();
    let mut precision = prior_precision.clone();
    let mut info = &prior_precision * &belief.mean;

    for d in 0..d_total {
        let phi_d = params.phi.row(d).transpose();
        let j_d = jacobian_row(pi[d], &phi_d);
        if j_d.iter().all(|v| *v == 0.0) {
            continue;
        }
        let noise = s[d] / params.w_miss;
        // Linearized observation: m_d ~ N(pi_d + J_d (z - lin_mean), noise)
        let y_d = (if miss_row[d] { 1.0 } else { 0.0 }) - pi[d] + j_d.dot(lin_mean);
        precision += &j_d * j_d.transpose() / noise;
        info += &j_d * (y_d / noise);
    }

    let precision = symmetrize(&precision);
    let (post_chol, j2) = chol_with_jitter(&precision, step)?;
    jitters += j2;
    let mean = post_chol.solve(&info);
    let cov = symmetrize(&post_chol.inverse());
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(step, "missingness pseudo-update produced non-finite mean"));
    }
    Ok((GaussianBelief { mean, cov }, loglik, jitters))
}

/// Exact Bernoulli log-likelihood of the panel's missingness pattern under
/// a fixed state trajectory, omitting cells flagged in `exclude_mask`.
/// Returns the total and the per-detector contributions.
pub fn bernoulli_loglik(
    panel: &Panel,
    states: &DMatrix<f64>,
    time_features: &TimeFeatures,
    params: &MissingnessParams,
    static_features: &StaticFeatures,
    exclude_mask: &DMatrix<bool>,
) -> (f64, DVector<f64>) {
    let d_total = params.n_detectors();
    let mut per_detector = DVector::zeros(d_total);
    for t in 0..panel.n_steps() {
        let z = states.row(t).transpose();
        let f = time_features.row(t);
        let l = logits(&z, &f, params, static_features);
        for d in 0..d_total {
            if exclude_mask[(t, d)] {
                continue;
            }
            per_detector[d] += bernoulli_term(!panel.is_observed(t, d), l[d]);
        }
    }
    (per_detector.sum(), per_detector)
}

/// Per-detector gradient of the Bernoulli log-likelihood.
#[derive(Debug, Clone)]
pub struct DetectorGradient {
    pub b: f64,
    pub phi: DVector<f64>,
    pub psi: DVector<f64>,
    pub eta: DVector<f64>,
}

/// Gradients of the per-detector Bernoulli log-likelihood with respect to
/// `(b_d, phi_d, psi_d, eta_d)`: `sum_t (m - pi) [1, z_t, f_t, g_d]` over
/// included cells.
pub fn loglik_gradients(
    panel: &Panel,
    states: &DMatrix<f64>,
    time_features: &TimeFeatures,
    params: &MissingnessParams,
    static_features: &StaticFeatures,
    exclude_mask: &DMatrix<bool>,
) -> Vec<DetectorGradient> {
    let d_total = params.n_detectors();
    let k = params.state_dim();
    let p = params.psi.ncols();
    let q = params.eta.ncols();
    let mut grads: Vec<DetectorGradient> = (0..d_total)
        .map(|_| DetectorGradient {
            b: 0.0,
            phi: DVector::zeros(k),
            psi: DVector::zeros(p),
            eta: DVector::zeros(q),
        })
        .collect();
    for t in 0..panel.n_steps() {
        let z = states.row(t).transpose();
        let f = time_features.row(t);
        let l = logits(&z, &f, params, static_features);
        for d in 0..d_total {
            if exclude_mask[(t, d)] {
                continue;
            }
            let m = if panel.is_observed(t, d) { 0.0 } else { 1.0 };
            let resid = m - sigmoid(l[d]);
            let g = &mut grads[d];
            g.b += resid;
            g.phi.axpy(resid, &z, 1.0);
            g.psi.axpy(resid, &f, 1.0);
            if q > 0 {
                g.eta.axpy(resid, &static_features.row(d), 1.0);
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::min_eigenvalue;
    use crate::panel::{regular_timestamps, Panel};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn unit_features() -> (DVector<f64>, StaticFeatures) {
        (DVector::zeros(4), StaticFeatures::none(2))
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let params = MissingnessParams::zeroed(2, 3, 4, 0);
        let (f, sf) = unit_features();
        let l = logits(&DVector::from_row_slice(&[1.0, -2.0, 0.5]), &f, &params, &sf);
        assert!(l.iter().all(|v| *v == 0.0));
        assert!(probs(&l).iter().all(|p| *p == 0.5));
    }

    #[test]
    fn intercept_only_logits() {
        let mut params = MissingnessParams::zeroed(2, 3, 4, 0);
        params.b = DVector::from_row_slice(&[1.0, -1.0]);
        let (f, sf) = unit_features();
        for z in [[0.0, 0.0, 0.0], [5.0, -3.0, 2.0]] {
            let l = logits(&DVector::from_row_slice(&z), &f, &params, &sf);
            assert_eq!(l[0], 1.0);
            assert_eq!(l[1], -1.0);
        }
    }

    #[test]
    fn state_coupling_logit_hand_value() {
        let mut params = MissingnessParams::zeroed(1, 1, 4, 0);
        params.phi = DMatrix::from_row_slice(1, 1, &[2.0]);
        let f = DVector::zeros(4);
        let sf = StaticFeatures::none(1);
        let l = logits(&DVector::from_row_slice(&[0.5]), &f, &params, &sf);
        assert_relative_eq!(l[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn saturated_probs_do_not_overflow() {
        let l = DVector::from_row_slice(&[0.0, 50.0, -50.0, 700.0, -700.0]);
        let p = probs(&l);
        assert_eq!(p[0], 0.5);
        assert!(1.0 - p[1] < 1e-20);
        assert!(p[2] < 1e-20);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn jacobian_peaks_at_half() {
        let j = jacobian_row(0.5, &DVector::from_row_slice(&[1.0, 0.0]));
        assert_eq!(j[0], 0.25);
        assert_eq!(j[1], 0.0);
        let j0 = jacobian_row(1e-12, &DVector::from_row_slice(&[1.0, 0.0]));
        assert!(j0[0] < 1e-11);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut params = MissingnessParams::zeroed(2, 3, 4, 0);
        params.b = DVector::from_row_slice(&[0.3, -0.6]);
        params.phi = DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 0.25, 1.5, 0.0, -0.75]);
        let (f, sf) = unit_features();
        let z = DVector::from_row_slice(&[0.2, -0.4, 0.9]);
        let h = 1e-6;
        let pi = probs(&logits(&z, &f, &params, &sf));
        for d in 0..2 {
            let jac = jacobian_row(pi[d], &params.phi.row(d).transpose());
            for k in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let pp = probs(&logits(&zp, &f, &params, &sf))[d];
                let pm = probs(&logits(&zm, &f, &params, &sf))[d];
                let fd = (pp - pm) / (2.0 * h);
                assert_relative_eq!(jac[k], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn pseudo_variance_modes() {
        let pi = DVector::from_row_slice(&[0.5, 1e-9]);
        let mm = pseudo_variance(&pi, VarianceMode::MomentMatch);
        assert_eq!(mm[0], 0.25);
        assert_eq!(mm[1], VARIANCE_FLOOR);
        let c = pseudo_variance(&pi, VarianceMode::Constant(0.25));
        assert!(c.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn pseudo_update_scalar_hand_value() {
        // K=1, D=1, prior (0,1), b=0, phi=1, m=1, moment match:
        // J=0.25, s=0.25, info form gives mean 0.4, cov 0.8.
        let mut params = MissingnessParams::zeroed(1, 1, 4, 0);
        params.phi = DMatrix::from_row_slice(1, 1, &[1.0]);
        let belief =
            GaussianBelief { mean: DVector::zeros(1), cov: DMatrix::from_element(1, 1, 1.0) };
        let f = DVector::zeros(4);
        let sf = StaticFeatures::none(1);
        let lin = belief.mean.clone();
        let (out, ll, _) =
            mnar_pseudo_update(&belief, &lin, &[true], &f, &params, &sf, 0).unwrap();
        assert_relative_eq!(out.mean[0], 0.4, epsilon = 1e-10);
        assert_relative_eq!(out.cov[(0, 0)], 0.8, epsilon = 1e-10);
        assert_relative_eq!(ll, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pseudo_update_disabled_paths() {
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[0.7]),
            cov: DMatrix::from_element(1, 1, 2.0),
        };
        let f = DVector::zeros(4);
        let sf = StaticFeatures::none(1);
        // phi = 0: belief unchanged, loglik still reported
        let params = MissingnessParams::zeroed(1, 1, 4, 0);
        let (out, ll, _) =
            mnar_pseudo_update(&belief, &belief.mean.clone(), &[false], &f, &params, &sf, 0)
                .unwrap();
        assert_eq!(out, belief);
        assert_relative_eq!(ll, 0.5f64.ln(), epsilon = 1e-12);
        // w_miss = 0: same
        let mut params = MissingnessParams::zeroed(1, 1, 4, 0);
        params.phi = DMatrix::from_row_slice(1, 1, &[3.0]);
        params.w_miss = 0.0;
        let (out, _, _) =
            mnar_pseudo_update(&belief, &belief.mean.clone(), &[true], &f, &params, &sf, 0)
                .unwrap();
        assert_eq!(out, belief);
    }

    #[test]
    fn pseudo_update_moves_mean_with_indicator_sign() {
        let mut params = MissingnessParams::zeroed(1, 1, 4, 0);
        params.phi = DMatrix::from_row_slice(1, 1, &[1.4]);
        params.b = DVector::from_row_slice(&[-0.8]);
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[0.2]),
            cov: DMatrix::from_element(1, 1, 1.5),
        };
        let f = DVector::zeros(4);
        let sf = StaticFeatures::none(1);
        for (m, expect_up) in [(true, true), (false, false)] {
            let (out, _, _) =
                mnar_pseudo_update(&belief, &belief.mean.clone(), &[m], &f, &params, &sf, 0)
                    .unwrap();
            let moved = out.mean[0] - belief.mean[0];
            // sign(phi * delta) = sign(m - pi); pi < 0.5 here
            if expect_up {
                assert!(moved > 0.0);
            } else {
                assert!(moved < 0.0);
            }
            // covariance never grows
            assert!(out.cov[(0, 0)] <= belief.cov[(0, 0)] + 1e-10);
        }
    }

    #[test]
    fn pseudo_update_covariance_psd_ordering() {
        let mut params = MissingnessParams::zeroed(3, 2, 4, 0);
        params.phi = DMatrix::from_row_slice(3, 2, &[0.5, -0.2, 1.0, 0.4, -0.3, 0.8]);
        params.b = DVector::from_row_slice(&[-1.0, 0.5, -2.0]);
        let belief = GaussianBelief {
            mean: DVector::from_row_slice(&[0.3, -0.1]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]),
        };
        let f = DVector::zeros(4);
        let sf = StaticFeatures::none(3);
        let (out, _, _) = mnar_pseudo_update(
            &belief,
            &belief.mean.clone(),
            &[true, false, true],
            &f,
            &params,
            &sf,
            0,
        )
        .unwrap();
        let diff = &belief.cov - &out.cov;
        assert!(min_eigenvalue(&diff) >= -1e-10);
    }

    fn tiny_panel(obs: &[[bool; 2]], values: f64) -> Panel {
        let t = obs.len();
        let vals = DMatrix::from_fn(t, 2, |r, c| if obs[r][c] { values } else { f64::NAN });
        let mask = DMatrix::from_fn(t, 2, |r, c| obs[r][c]);
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        Panel::new(
            vals,
            mask,
            DMatrix::from_element(t, 2, false),
            regular_timestamps(start, 300, t),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn loglik_of_half_probs_counts_cells() {
        let panel = tiny_panel(&[[true, false], [false, true], [true, true]], 1.0);
        let params = MissingnessParams::zeroed(2, 2, 4, 0);
        let states = DMatrix::zeros(3, 2);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let exclude = DMatrix::from_element(3, 2, false);
        let sf = StaticFeatures::none(2);
        let (total, per) = bernoulli_loglik(&panel, &states, &tf, &params, &sf, &exclude);
        assert_relative_eq!(total, -(6.0) * 2.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(per[0], -3.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loglik_with_everything_excluded_is_zero() {
        let panel = tiny_panel(&[[true, false], [false, true]], 1.0);
        let params = MissingnessParams::zeroed(2, 2, 4, 0);
        let states = DMatrix::zeros(2, 2);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let exclude = DMatrix::from_element(2, 2, true);
        let sf = StaticFeatures::none(2);
        let (total, per) = bernoulli_loglik(&panel, &states, &tf, &params, &sf, &exclude);
        assert_eq!(total, 0.0);
        assert!(per.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_is_zero_at_exact_fit() {
        // one observed cell (m=0) with pi forced to ~0, one missing with pi ~1:
        // (m - pi) ~ 0 everywhere.
        let panel = tiny_panel(&[[true, false]], 1.0);
        let mut params = MissingnessParams::zeroed(2, 1, 4, 0);
        params.b = DVector::from_row_slice(&[-40.0, 40.0]);
        let states = DMatrix::zeros(1, 1);
        let tf = crate::panel::build_time_features(panel.timestamps());
        let exclude = DMatrix::from_element(1, 2, false);
        let sf = StaticFeatures::none(2);
        let grads = loglik_gradients(&panel, &states, &tf, &params, &sf, &exclude);
        for g in grads {
            assert!(g.b.abs() < 1e-12);
            assert!(g.phi.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn single_cell_gradient_hand_value() {
        // one cell, m=1, pi=0.5, z=2 -> d/dphi = 0.5 * 2 = 1
        let panel = tiny_panel(&[[false, true]], 1.0);
        let params = MissingnessParams::zeroed(2, 1, 4, 0);
        let mut states = DMatrix::zeros(1, 1);
        states[(0, 0)] = 2.0;
        let tf = crate::panel::build_time_features(panel.timestamps());
        // exclude detector 1 so only the missing cell of detector 0 counts
        let mut exclude = DMatrix::from_element(1, 2, false);
        exclude[(0, 1)] = true;
        let sf = StaticFeatures::none(2);
        let grads = loglik_gradients(&panel, &states, &tf, &params, &sf, &exclude);
        assert_relative_eq!(grads[0].phi[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(grads[0].b, 0.5, epsilon = 1e-12);
        assert_eq!(grads[1].b, 0.0);
    }

    proptest! {
        #[test]
        fn sigmoid_complement(l in -40.0f64..40.0) {
            prop_assert!((sigmoid(l) + sigmoid(-l) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bernoulli_term_is_negative_logprob(l in -20.0f64..20.0, m in proptest::bool::ANY) {
            let t = bernoulli_term(m, l);
            prop_assert!(t <= 0.0);
            // the naive formula is only trustworthy away from saturation
            let pi = sigmoid(l);
            let direct = if m { pi.ln() } else { (1.0 - pi).ln() };
            prop_assert!((t - direct).abs() < 1e-6);
        }
    }
}
