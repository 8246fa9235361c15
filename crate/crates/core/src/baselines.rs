//! Heuristic comparison methods: last-observation-carried-forward and
//! linear interpolation inside blackouts with a seasonal naive forecast.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::{MaskWindow, Panel};

/// Which branch a seasonal naive forecast took (audited per window).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeasonalBranch {
    DailyLag,
    WeeklyLag,
    LastObserved,
}

impl SeasonalBranch {
    pub fn label(self) -> &'static str {
        match self {
            SeasonalBranch::DailyLag => "daily_lag",
            SeasonalBranch::WeeklyLag => "weekly_lag",
            SeasonalBranch::LastObserved => "last_observed",
        }
    }
}

/// Fill every missing cell with the most recent observed value in its
/// column; leading missing cells are backfilled from the first observed
/// value. A fully missing column is an error naming the detector.
pub fn locf_impute(panel: &Panel) -> Result<DMatrix<f64>> {
    let t_len = panel.n_steps();
    let d_len = panel.n_detectors();
    let mut out = DMatrix::zeros(t_len, d_len);
    for d in 0..d_len {
        let first_observed = (0..t_len).find(|t| panel.is_observed(*t, d)).ok_or_else(|| {
            Error::Validation(format!(
                "detector `{}` has no observed values to carry forward",
                panel.detector_ids()[d]
            ))
        })?;
        let mut last = panel.value_at(first_observed, d).unwrap();
        for t in 0..t_len {
            if let Some(x) = panel.value_at(t, d) {
                last = x;
            }
            out[(t, d)] = last;
        }
    }
    Ok(out)
}

/// Last observed value strictly before the blackout start; constant in the
/// horizon by construction.
pub fn locf_forecast(panel: &Panel, window: &MaskWindow, _k: usize) -> Result<f64> {
    (0..window.start)
        .rev()
        .find_map(|t| panel.value_at(t, window.detector))
        .ok_or_else(|| {
            Error::Window(format!(
                "no observed value before blackout start {} on detector {}",
                window.start, window.detector
            ))
        })
}

/// Affine interpolation across a blackout anchored at the cells adjacent
/// to the window (`start - 1` and `end + 1`). When either anchor cell is
/// unobserved the window falls back to a constant LOCF fill, reported
/// through the `fallback` flag.
pub fn linear_interp_impute(panel: &Panel, window: &MaskWindow) -> Result<(Vec<f64>, bool)> {
    let len = window.end - window.start + 1;
    let pre = if window.start > 0 { panel.value_at(window.start - 1, window.detector) } else { None };
    let post = if window.end + 1 < panel.n_steps() {
        panel.value_at(window.end + 1, window.detector)
    } else {
        None
    };
    if let (Some(a), Some(b)) = (pre, post) {
        // anchors sit at start-1 and end+1; interior points exclude both
        let span = (len + 1) as f64;
        let vals = (1..=len).map(|i| a + (b - a) * i as f64 / span).collect();
        return Ok((vals, false));
    }
    let fill = (0..window.start)
        .rev()
        .find_map(|t| panel.value_at(t, window.detector))
        .or(post)
        .ok_or_else(|| {
            Error::Window(format!(
                "no anchors at all for window [{}, {}] on detector {}",
                window.start, window.end, window.detector
            ))
        })?;
    Ok((vec![fill; len], true))
}

/// Seasonal naive forecast for the target `end + k`: the observed value one
/// day earlier if available, else one week earlier, else the last observed
/// pre-blackout value.
pub fn seasonal_naive_forecast(
    panel: &Panel,
    window: &MaskWindow,
    k: usize,
) -> Result<(f64, SeasonalBranch)> {
    let target = window.end + k;
    let day = panel.steps_per_day();
    let week = day * 7;
    if target >= day {
        if let Some(v) = panel.value_at(target - day, window.detector) {
            return Ok((v, SeasonalBranch::DailyLag));
        }
    }
    if target >= week {
        if let Some(v) = panel.value_at(target - week, window.detector) {
            return Ok((v, SeasonalBranch::WeeklyLag));
        }
    }
    locf_forecast(panel, window, k).map(|v| (v, SeasonalBranch::LastObserved))
}
