//! Leakage-free blackout evaluation: mask aligned windows, run every
//! method against the same masked training panel, score against the
//! held-out ground truth, and bootstrap the uncertainty.

pub mod diagnostics;
pub mod stats;
pub mod windows;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use diagnostics::{missingness_diagnostics, roc_auc, DiagnosticsReport};
pub use stats::{bootstrap_ci, BucketRow};
pub use windows::{find_candidate_windows, sample_stratified, BlackoutWindow, MonthShortfall};

use crate::baselines;
use crate::em::{self, EmConfig, TrainingTrace};
use crate::error::{Error, Result};
use crate::forecast;
use crate::lds;
use crate::model::ModelParams;
use crate::numerics::{pooled_rmse, substream_seed};
use crate::panel::{apply_artificial_mask, build_time_features, MaskWindow, Panel, StaticFeatures};

/// How an LDS method is trained inside the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mar,
    MnarTwoPhase,
}

/// Optional inference-setting overrides applied to an LDS method's
/// initial parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct MissOverrides {
    pub w_miss: Option<f64>,
    pub variance_mode: Option<crate::mnar::VarianceMode>,
    pub linearize_at: Option<crate::mnar::LinearizeAt>,
}

impl MissOverrides {
    fn apply(&self, params: &mut ModelParams) {
        if let Some(w) = self.w_miss {
            params.miss.w_miss = w;
        }
        if let Some(v) = self.variance_mode {
            params.miss.variance_mode = v;
        }
        if let Some(l) = self.linearize_at {
            params.miss.linearize_at = l;
        }
    }
}

/// An LDS entry in the method list. `init` supplies a warm start; when
/// absent the harness initializes from the masked training panel.
#[derive(Debug, Clone)]
pub struct LdsMethodSpec {
    pub name: String,
    pub mode: TrainMode,
    pub em: EmConfig,
    pub init: Option<ModelParams>,
    pub overrides: MissOverrides,
}

/// A method evaluated by the harness.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    Locf,
    InterpSeasonal,
    Lds(Box<LdsMethodSpec>),
}

impl MethodSpec {
    pub fn name(&self) -> &str {
        match self {
            MethodSpec::Locf => "locf",
            MethodSpec::InterpSeasonal => "interp_seasonal",
            MethodSpec::Lds(spec) => &spec.name,
        }
    }

    pub fn mar(em: EmConfig) -> Self {
        MethodSpec::Lds(Box::new(LdsMethodSpec {
            name: "mar".into(),
            mode: TrainMode::Mar,
            em,
            init: None,
            overrides: MissOverrides::default(),
        }))
    }

    pub fn mnar(em: EmConfig) -> Self {
        MethodSpec::Lds(Box::new(LdsMethodSpec {
            name: "mnar".into(),
            mode: TrainMode::MnarTwoPhase,
            em,
            init: None,
            overrides: MissOverrides::default(),
        }))
    }
}

/// One forecast scored at its horizon endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastCell {
    pub prediction: f64,
    pub truth: f64,
    pub sq_err: f64,
    /// Branch or fallback annotation (seasonal naive audit trail).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-window outcome for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowResult {
    pub window_id: String,
    pub impute_sse: f64,
    pub n_cells: usize,
    /// Predictions for the masked cells, in time order.
    pub imputed: Vec<f64>,
    pub forecasts: BTreeMap<usize, ForecastCell>,
    pub flags: Vec<String>,
    pub failed: bool,
}

/// Aggregate score for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub rmse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Pooled squared-error units (cells for imputation, windows for a
    /// forecast horizon).
    pub n_units: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub impute: TaskSummary,
    pub forecasts: BTreeMap<usize, TaskSummary>,
    pub per_window: Vec<WindowResult>,
    pub failures: usize,
    pub length_buckets: Vec<BucketRow>,
    pub hour_buckets: Vec<BucketRow>,
    /// EM objective traces for trained methods (one per phase).
    pub training: Vec<TrainingTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub detector_ids: Vec<String>,
    pub windows: Vec<BlackoutWindow>,
    pub shortfalls: Vec<MonthShortfall>,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let file = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }

    /// Flat table: `method,impute,h1,h3,h6,...`.
    pub fn write_flat_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = std::iter::once("method".to_string())
            .chain(std::iter::once("impute".to_string()))
            .chain(self.horizons.iter().map(|h| format!("h{}", h)))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for m in &self.methods {
            let mut fields = vec![m.name.clone(), format!("{}", m.impute.rmse)];
            for h in &self.horizons {
                let v = m.forecasts.get(h).map(|s| s.rmse).unwrap_or(f64::NAN);
                fields.push(format!("{}", v));
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Audit manifest of the evaluated windows.
    pub fn write_manifest_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header =
            "window_id,detector_index,detector_id,start,end,length,month,start_hour".to_string();
        for h in &self.horizons {
            header.push_str(&format!(",target_h{}", h));
        }
        writeln!(out, "{}", header)?;
        for w in &self.windows {
            let det_id = self
                .detector_ids
                .get(w.detector_index)
                .map(|s| s.as_str())
                .unwrap_or("?");
            let mut line = format!(
                "{},{},{},{},{},{},{},{}",
                w.window_id, w.detector_index, det_id, w.start, w.end, w.length, w.month,
                w.start_hour
            );
            for h in &self.horizons {
                line.push_str(&format!(",{}", w.forecast_targets.get(h).copied().unwrap_or(0)));
            }
            writeln!(out, "{}", line)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Stratified imputation tables for every method.
    pub fn write_strata_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "method,bucket_kind,bucket,rmse,n_windows,n_cells")?;
        for m in &self.methods {
            for row in &m.length_buckets {
                writeln!(
                    out,
                    "{},length,{},{},{},{}",
                    m.name, row.label, row.rmse, row.n_windows, row.n_units
                )?;
            }
            for row in &m.hour_buckets {
                writeln!(
                    out,
                    "{},hour,{},{},{},{}",
                    m.name, row.label, row.rmse, row.n_windows, row.n_units
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Stratification axes for error tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyBy {
    LengthBucket,
    HourOfDay,
}

/// Re-bucket the stored per-window imputation errors of one method.
pub fn stratify(report: &EvalReport, method: &str, by: StratifyBy) -> Option<Vec<BucketRow>> {
    let m = report.method(method)?;
    let windows: BTreeMap<&str, &BlackoutWindow> =
        report.windows.iter().map(|w| (w.window_id.as_str(), w)).collect();
    let assignments: Vec<(String, f64, usize)> = m
        .per_window
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| {
            let w = windows.get(r.window_id.as_str())?;
            let label = match by {
                StratifyBy::LengthBucket => stats::length_bucket(w.length).to_string(),
                StratifyBy::HourOfDay => stats::hour_bucket(w.start_hour),
            };
            Some((label, r.impute_sse, r.n_cells))
        })
        .collect();
    let order = match by {
        StratifyBy::LengthBucket => {
            stats::LENGTH_BUCKETS.iter().map(|s| s.to_string()).collect::<Vec<_>>()
        }
        StratifyBy::HourOfDay => stats::hour_buckets(),
    };
    Some(stats::bucket_table(&order, &assignments))
}

fn validate_windows(
    ground_truth: &Panel,
    windows: &[BlackoutWindow],
    horizons: &[usize],
) -> Result<()> {
    for w in windows {
        if w.start == 0 || w.end < w.start || w.end >= ground_truth.n_steps() {
            return Err(Error::Window(format!("window {} has bad bounds", w.window_id)));
        }
        if w.detector_index >= ground_truth.n_detectors() {
            return Err(Error::Window(format!("window {} detector out of range", w.window_id)));
        }
        for t in w.start..=w.end {
            if !ground_truth.is_observed(t, w.detector_index) {
                return Err(Error::Window(format!(
                    "window {} is not fully observed in the ground truth",
                    w.window_id
                )));
            }
        }
        for h in horizons {
            let target = w.end + h;
            if target >= ground_truth.n_steps()
                || !ground_truth.is_observed(target, w.detector_index)
            {
                return Err(Error::Window(format!(
                    "window {} lacks an observed target at horizon {}",
                    w.window_id, h
                )));
            }
            if w.forecast_targets.get(h) != Some(&target) {
                return Err(Error::Window(format!(
                    "window {} forecast target misaligned at horizon {}",
                    w.window_id, h
                )));
            }
        }
    }
    Ok(())
}

/// Per-window predictions produced by one method.
struct MethodPredictions {
    /// In window order: imputed values for the masked cells, or an error.
    imputed: Vec<std::result::Result<Vec<f64>, String>>,
    /// In window order, per horizon: forecast value and an optional note.
    forecasts: Vec<BTreeMap<usize, std::result::Result<(f64, Option<String>), String>>>,
    flags: Vec<Vec<String>>,
    training: Vec<TrainingTrace>,
}

fn run_method(
    spec: &MethodSpec,
    training_panel: &Panel,
    windows: &[BlackoutWindow],
    horizons: &[usize],
    seed: u64,
) -> Result<MethodPredictions> {
    let n = windows.len();
    let mut preds = MethodPredictions {
        imputed: Vec::with_capacity(n),
        forecasts: Vec::with_capacity(n),
        flags: vec![Vec::new(); n],
        training: Vec::new(),
    };

    match spec {
        MethodSpec::Locf => {
            let full = baselines::locf_impute(training_panel)?;
            for w in windows {
                let vals: Vec<f64> =
                    (w.start..=w.end).map(|t| full[(t, w.detector_index)]).collect();
                preds.imputed.push(Ok(vals));
                let mask = MaskWindow { detector: w.detector_index, start: w.start, end: w.end };
                let mut fc = BTreeMap::new();
                for &h in horizons {
                    fc.insert(
                        h,
                        baselines::locf_forecast(training_panel, &mask, h)
                            .map(|v| (v, None))
                            .map_err(|e| e.to_string()),
                    );
                }
                preds.forecasts.push(fc);
            }
        }
        MethodSpec::InterpSeasonal => {
            for (i, w) in windows.iter().enumerate() {
                let mask = MaskWindow { detector: w.detector_index, start: w.start, end: w.end };
                match baselines::linear_interp_impute(training_panel, &mask) {
                    Ok((vals, fallback)) => {
                        if fallback {
                            preds.flags[i].push("interp_fallback_locf".into());
                        }
                        preds.imputed.push(Ok(vals));
                    }
                    Err(e) => preds.imputed.push(Err(e.to_string())),
                }
                let mut fc = BTreeMap::new();
                for &h in horizons {
                    fc.insert(
                        h,
                        baselines::seasonal_naive_forecast(training_panel, &mask, h)
                            .map(|(v, branch)| (v, Some(branch.label().to_string())))
                            .map_err(|e| e.to_string()),
                    );
                }
                preds.forecasts.push(fc);
            }
        }
        MethodSpec::Lds(lds_spec) => {
            let tf = build_time_features(training_panel.timestamps());
            let sf = StaticFeatures::none(training_panel.n_detectors());
            let init = match &lds_spec.init {
                Some(p) => {
                    if p.obs_dim() != training_panel.n_detectors() {
                        return Err(Error::Dimension(format!(
                            "warm-start model expects {} detectors, panel has {}",
                            p.obs_dim(),
                            training_panel.n_detectors()
                        )));
                    }
                    p.clone()
                }
                None => em::init_params(
                    training_panel,
                    &tf,
                    &sf,
                    lds_spec.em.k,
                    substream_seed(seed, &format!("init/{}", lds_spec.name)),
                )?,
            };
            let params = match lds_spec.mode {
                TrainMode::Mar => {
                    let init = ModelParams { mnar_enabled: false, ..init };
                    let (params, trace) =
                        em::fit(training_panel, &tf, &sf, init, &lds_spec.em)?;
                    preds.training.push(trace);
                    params
                }
                TrainMode::MnarTwoPhase => {
                    let fit = em::fit_two_phase(training_panel, &tf, &sf, init, &lds_spec.em)?;
                    preds.training.push(fit.mar_trace);
                    preds.training.push(fit.mnar_trace);
                    fit.mnar
                }
            };
            let filter =
                lds::filter_sequence(training_panel, &tf, &sf, &params, params.mnar_enabled)?;
            let smoothed = lds::rts_smooth(&filter, &params.lds)?;
            let imputed_matrix = forecast::impute(&smoothed, &params.lds);
            for w in windows {
                let vals: Vec<f64> =
                    (w.start..=w.end).map(|t| imputed_matrix[(t, w.detector_index)]).collect();
                preds.imputed.push(Ok(vals));
                let mut fc = BTreeMap::new();
                for &h in horizons {
                    let result = forecast::forecast(&filter.filtered[w.end], &params.lds, h)
                        .map(|f| (f.mean[w.detector_index], None))
                        .map_err(|e| e.to_string());
                    fc.insert(h, result);
                }
                preds.forecasts.push(fc);
            }
        }
    }
    Ok(preds)
}

fn assemble_method_report(
    name: &str,
    preds: MethodPredictions,
    ground_truth: &Panel,
    windows: &[BlackoutWindow],
    horizons: &[usize],
    n_bootstrap: usize,
    seed: u64,
) -> MethodReport {
    let mut per_window = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let mut flags = preds.flags[i].clone();
        let mut failed = false;

        let (imputed, sse, n_cells) = match &preds.imputed[i] {
            Ok(vals) => {
                let mut sse = 0.0;
                for (j, t) in (w.start..=w.end).enumerate() {
                    let truth = ground_truth
                        .value_at(t, w.detector_index)
                        .expect("window cells observed in ground truth");
                    sse += (vals[j] - truth).powi(2);
                }
                (vals.clone(), sse, vals.len())
            }
            Err(msg) => {
                failed = true;
                flags.push(format!("impute_failed: {}", msg));
                (Vec::new(), 0.0, 0)
            }
        };

        let mut forecasts = BTreeMap::new();
        for &h in horizons {
            match preds.forecasts[i].get(&h) {
                Some(Ok((pred, note))) => {
                    let target = w.forecast_targets[&h];
                    let truth = ground_truth
                        .value_at(target, w.detector_index)
                        .expect("targets observed in ground truth");
                    forecasts.insert(
                        h,
                        ForecastCell {
                            prediction: *pred,
                            truth,
                            sq_err: (pred - truth).powi(2),
                            note: note.clone(),
                        },
                    );
                }
                Some(Err(msg)) => {
                    failed = true;
                    flags.push(format!("forecast_h{}_failed: {}", h, msg));
                }
                None => {
                    failed = true;
                    flags.push(format!("forecast_h{}_missing", h));
                }
            }
        }

        per_window.push(WindowResult {
            window_id: w.window_id.clone(),
            impute_sse: sse,
            n_cells,
            imputed,
            forecasts,
            flags,
            failed,
        });
    }

    let ok: Vec<&WindowResult> = per_window.iter().filter(|r| !r.failed).collect();
    let failures = per_window.len() - ok.len();

    let impute_pairs: Vec<(f64, usize)> = ok.iter().map(|r| (r.impute_sse, r.n_cells)).collect();
    let (ci_low, ci_high) = bootstrap_ci(
        &impute_pairs,
        n_bootstrap,
        0.95,
        substream_seed(seed, &format!("bootstrap/{}/impute", name)),
    );
    let impute = TaskSummary {
        rmse: pooled_rmse(&impute_pairs),
        ci_low,
        ci_high,
        n_units: impute_pairs.iter().map(|(_, n)| n).sum(),
    };

    let mut forecasts = BTreeMap::new();
    for &h in horizons {
        let pairs: Vec<(f64, usize)> = ok
            .iter()
            .filter_map(|r| r.forecasts.get(&h).map(|c| (c.sq_err, 1usize)))
            .collect();
        let (lo, hi) = bootstrap_ci(
            &pairs,
            n_bootstrap,
            0.95,
            substream_seed(seed, &format!("bootstrap/{}/h{}", name, h)),
        );
        forecasts.insert(
            h,
            TaskSummary { rmse: pooled_rmse(&pairs), ci_low: lo, ci_high: hi, n_units: pairs.len() },
        );
    }

    let length_assignments: Vec<(String, f64, usize)> = per_window
        .iter()
        .zip(windows.iter())
        .filter(|(r, _)| !r.failed)
        .map(|(r, w)| (stats::length_bucket(w.length).to_string(), r.impute_sse, r.n_cells))
        .collect();
    let hour_assignments: Vec<(String, f64, usize)> = per_window
        .iter()
        .zip(windows.iter())
        .filter(|(r, _)| !r.failed)
        .map(|(r, w)| (stats::hour_bucket(w.start_hour), r.impute_sse, r.n_cells))
        .collect();
    let length_order: Vec<String> = stats::LENGTH_BUCKETS.iter().map(|s| s.to_string()).collect();

    MethodReport {
        name: name.to_string(),
        impute,
        forecasts,
        per_window,
        failures,
        length_buckets: stats::bucket_table(&length_order, &length_assignments),
        hour_buckets: stats::bucket_table(&stats::hour_buckets(), &hour_assignments),
        training: preds.training,
    }
}

/// Evaluate every method on the same masked panel. Ground-truth values
/// inside the windows are visible only to the scorer: the training panel
/// hides them behind the artificial mask, and trained methods learn from
/// that panel alone.
pub fn evaluate(
    ground_truth: &Panel,
    windows: &[BlackoutWindow],
    methods: &[MethodSpec],
    horizons: &[usize],
    n_bootstrap: usize,
    seed: u64,
) -> Result<EvalReport> {
    validate_windows(ground_truth, windows, horizons)?;
    let masks: Vec<MaskWindow> = windows
        .iter()
        .map(|w| MaskWindow { detector: w.detector_index, start: w.start, end: w.end })
        .collect();
    let training_panel = apply_artificial_mask(ground_truth, &masks)?;

    let mut method_reports = Vec::with_capacity(methods.len());
    for spec in methods {
        let preds = run_method(spec, &training_panel, windows, horizons, seed)?;
        method_reports.push(assemble_method_report(
            spec.name(),
            preds,
            ground_truth,
            windows,
            horizons,
            n_bootstrap,
            seed,
        ));
    }

    Ok(EvalReport {
        horizons: horizons.to_vec(),
        seed,
        n_bootstrap,
        detector_ids: ground_truth.detector_ids().to_vec(),
        windows: windows.to_vec(),
        shortfalls: Vec::new(),
        methods: method_reports,
    })
}
