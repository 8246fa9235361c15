//! Shared test oracles, independent of the filtering implementation.
//!
//! The joint-Gaussian oracle materializes the full `(T*K)`-dimensional
//! prior over the latent trajectory, conditions directly on the observed
//! entries with dense linear algebra, and reads per-step moments from the
//! conditional. It shares no code with the information-form filter it
//! checks.

use blackout_lds::lds::LdsParams;
use blackout_lds::panel::Panel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-step posterior moments computed by brute force.
pub struct JointOracle {
    t_len: usize,
    k: usize,
    /// Prior mean of the stacked trajectory.
    mean: DVector<f64>,
    /// Prior covariance of the stacked trajectory.
    cov: DMatrix<f64>,
    /// Observed cells as (time, detector, value).
    observations: Vec<(usize, usize, f64)>,
    params: LdsParams,
}

impl JointOracle {
    pub fn new(params: &LdsParams, panel: &Panel) -> Self {
        let t_len = panel.n_steps();
        let k = params.state_dim();
        let n = t_len * k;

        // stacked prior mean: m_t = A m_{t-1}
        let mut mean = DVector::zeros(n);
        let mut m_t = params.mu0.clone();
        for t in 0..t_len {
            if t > 0 {
                m_t = &params.a * &m_t;
            }
            mean.rows_mut(t * k, k).copy_from(&m_t);
        }

        // diagonal blocks by the Lyapunov recursion, off-diagonals by
        // P_{s,t} = P_{s,s} (A^{t-s})^T
        let mut diag_blocks = Vec::with_capacity(t_len);
        let mut p_t = params.sigma0.clone();
        for t in 0..t_len {
            if t > 0 {
                p_t = &params.a * &p_t * params.a.transpose() + &params.q;
            }
            diag_blocks.push(p_t.clone());
        }
        let mut cov = DMatrix::zeros(n, n);
        for s in 0..t_len {
            for t in s..t_len {
                let block = if s == t {
                    diag_blocks[s].clone()
                } else {
                    let mut a_pow = DMatrix::identity(k, k);
                    for _ in 0..(t - s) {
                        a_pow = &params.a * a_pow;
                    }
                    &diag_blocks[s] * a_pow.transpose()
                };
                cov.view_mut((s * k, t * k), (k, k)).copy_from(&block);
                if s != t {
                    cov.view_mut((t * k, s * k), (k, k)).copy_from(&block.transpose());
                }
            }
        }

        let mut observations = Vec::new();
        for t in 0..t_len {
            for d in 0..panel.n_detectors() {
                if let Some(x) = panel.value_at(t, d) {
                    observations.push((t, d, x));
                }
            }
        }

        JointOracle { t_len, k, mean, cov, observations, params: params.clone() }
    }

    /// Condition the stacked trajectory on the observations with time
    /// index `<= upto` (`None` = all of them) and return the marginal at
    /// step `t`.
    fn conditional_at(&self, t: usize, upto: Option<usize>) -> (DVector<f64>, DMatrix<f64>) {
        let used: Vec<&(usize, usize, f64)> = self
            .observations
            .iter()
            .filter(|(ot, _, _)| upto.map(|u| *ot <= u).unwrap_or(true))
            .collect();
        let n = self.t_len * self.k;
        let m = used.len();
        if m == 0 {
            return (
                self.mean.rows(t * self.k, self.k).into(),
                self.cov.view((t * self.k, t * self.k), (self.k, self.k)).into(),
            );
        }

        let mut h = DMatrix::zeros(m, n);
        let mut r = DMatrix::zeros(m, m);
        let mut x = DVector::zeros(m);
        for (i, (ot, od, ox)) in used.iter().enumerate() {
            for j in 0..self.k {
                h[(i, ot * self.k + j)] = self.params.c[(*od, j)];
            }
            r[(i, i)] = self.params.r_diag[*od];
            x[i] = *ox;
        }

        let cov_zx = &self.cov * h.transpose();
        let cov_xx = &h * &cov_zx + r;
        let innov = x - &h * &self.mean;
        let chol = cov_xx.cholesky().expect("oracle observation covariance is SPD");
        let mean_post = &self.mean + &cov_zx * chol.solve(&innov);
        let cov_post = &self.cov - &cov_zx * chol.solve(&cov_zx.transpose());

        (
            mean_post.rows(t * self.k, self.k).into(),
            cov_post.view((t * self.k, t * self.k), (self.k, self.k)).into(),
        )
    }

    /// `E[z_t | x_{1:t}]` and its covariance.
    pub fn filtered(&self, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        self.conditional_at(t, Some(t))
    }

    /// `E[z_t | x_{1:T}]` and its covariance.
    pub fn smoothed(&self, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        self.conditional_at(t, None)
    }
}

/// Random PSD matrix with eigenvalues bounded away from zero.
pub fn random_spd(k: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() * scale + DMatrix::identity(k, k) * 0.1 * scale
}

/// Random LDS with a stable transition.
pub fn random_lds(k: usize, d: usize, rng: &mut ChaCha8Rng) -> LdsParams {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let norm: f64 = a.norm();
    let a = a * (rng.random_range(0.3..0.95) / norm.max(1e-9) * (k as f64).sqrt() * 0.5);
    LdsParams {
        mu0: DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
        sigma0: random_spd(k, rng, 0.5),
        a,
        q: random_spd(k, rng, 0.3),
        c: DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)),
        r_diag: DVector::from_fn(d, |_, _| rng.random_range(0.05..1.0)),
    }
}

/// Random panel with the given missing rate; values drawn freely (the
/// oracle never requires them to come from the model).
pub fn random_panel(t_len: usize, d: usize, missing_rate: f64, rng: &mut ChaCha8Rng) -> Panel {
    use blackout_lds::panel::regular_timestamps;
    let start = chrono::NaiveDate::from_ymd_opt(2015, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    loop {
        let observed = DMatrix::from_fn(t_len, d, |_, _| rng.random::<f64>() >= missing_rate);
        let values = DMatrix::from_fn(t_len, d, |r, c| {
            if observed[(r, c)] {
                rng.random_range(-3.0..3.0)
            } else {
                f64::NAN
            }
        });
        let panel = Panel::new(
            values,
            observed,
            DMatrix::from_element(t_len, d, false),
            regular_timestamps(start, 300, t_len),
            (0..d).map(|i| format!("det{}", i)).collect(),
        )
        .unwrap();
        // keep at least one observation so the comparison is nontrivial
        if panel.observed_mask().iter().any(|o| *o) {
            return panel;
        }
    }
}
