//! State-space modeling of multivariate sensor panels with structured
//! blackouts.
//!
//! The toolkit couples a linear-Gaussian latent dynamical system with a
//! state-dependent Bernoulli dropout channel, learns both by approximate
//! EM, and evaluates blackout imputation and post-blackout forecasting
//! under a leakage-free masking protocol with heuristic baselines,
//! bootstrap confidence intervals and missingness diagnostics.

pub mod baselines;
pub mod em;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod lds;
pub mod mnar;
pub mod model;
pub mod numerics;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use em::{fit, fit_two_phase, init_params, EmConfig, TrainingTrace};
pub use error::{Error, Result};
pub use eval::{
    evaluate, find_candidate_windows, missingness_diagnostics, sample_stratified, BlackoutWindow,
    EvalReport, MethodSpec,
};
pub use forecast::{forecast, impute, ForecastResult};
pub use lds::{filter_sequence, predict, rts_smooth, update_observed, GaussianBelief, LdsParams};
pub use mnar::{MissingnessParams, VarianceMode};
pub use model::{load_model, save_model, ModelParams};
pub use panel::{
    apply_artificial_mask, build_time_features, load_panel, save_panel, MaskWindow, Panel,
    StaticFeatures, TimeFeatures,
};
pub use synth::{generate, BlackoutMode, SynthConfig, SynthOutput};
