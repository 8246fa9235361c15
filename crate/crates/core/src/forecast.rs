//! Observation-space reconstruction and k-step forecasting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::{predict, GaussianBelief, LdsParams, SmoothedTrace};

/// A k-step-ahead forecast mapped to observation space.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub horizon: usize,
    /// `C mu_{b+k|b}`.
    pub mean: DVector<f64>,
    /// Diagonal of `C Sigma_{b+k|b} C^T + R`.
    pub obs_cov_diag: DVector<f64>,
    /// Latent belief at the horizon (useful for chained diagnostics).
    pub latent: GaussianBelief,
}

/// Reconstruct the whole panel from smoothed means: row `t` is
/// `C mu_{t|T}`. Imputations are read from this matrix at masked cells.
pub fn impute(smoothed: &SmoothedTrace, params: &LdsParams) -> DMatrix<f64> {
    let t_len = smoothed.len();
    let d = params.obs_dim();
    let mut out = DMatrix::zeros(t_len, d);
    for t in 0..t_len {
        let row = &params.c * &smoothed.beliefs[t].mean;
        out.set_row(t, &row.transpose());
    }
    out
}

/// Propagate a filtered belief `k` steps through the dynamics and map to
/// observation space. Iterating the one-step predict is numerically
/// identical to the closed form `A^k mu`, `A^k Sigma (A^T)^k + sum A^i Q (A^T)^i`.
pub fn forecast(belief_at_end: &GaussianBelief, params: &LdsParams, k: usize) -> Result<ForecastResult> {
    if k == 0 {
        return Err(Error::Validation("forecast horizon must be at least 1".into()));
    }
    let mut latent = belief_at_end.clone();
    for _ in 0..k {
        latent = predict(&latent, params);
    }
    let mean = &params.c * &latent.mean;
    let proj = &params.c * &latent.cov * params.c.transpose();
    let obs_cov_diag =
        DVector::from_fn(params.obs_dim(), |d, _| proj[(d, d)] + params.r_diag[d]);
    Ok(ForecastResult { horizon: k, mean, obs_cov_diag, latent })
}
