//! End-to-end workflows behind the CLI subcommands: generate, train,
//! evaluate, sweep and report. Every run echoes its fully resolved
//! configuration into `manifest.json`, and reruns driven by a manifest
//! reproduce the same numerical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::eval::{
    self, evaluate, find_candidate_windows, sample_stratified, EvalReport, LdsMethodSpec,
    MethodSpec, MissOverrides, TrainMode,
};
use crate::mnar::{LinearizeAt, VarianceMode};
use crate::model::{self, ModelParams};
use crate::numerics::substream_seed;
use crate::panel::{self, build_time_features, Panel, StaticFeatures};
use crate::report::{self, AlphaRow};
use crate::synth::{self, SynthConfig};

/// Read a JSON or TOML config file. A manifest produced by a previous run
/// (an object with `command` and `config` keys) is unwrapped so any run
/// can be replayed from its manifest.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
        _ => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?,
    };
    let value = match value {
        serde_json::Value::Object(ref obj) if obj.contains_key("command") && obj.contains_key("config") => {
            obj["config"].clone()
        }
        v => v,
    };
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn write_manifest<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    inputs: &[&Path],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let manifest = Manifest {
        command,
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs
            .iter()
            .map(|p| {
                p.strip_prefix(out_dir).map(|r| r.display().to_string()).unwrap_or_else(|_| {
                    p.display().to_string()
                })
            })
            .collect(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Generate a synthetic panel and write panel/truth CSVs plus the true
/// system parameters.
pub fn run_generate(config: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let out = synth::generate(config)?;
    let panel_path = out_dir.join("panel.csv");
    let truth_path = out_dir.join("truth.csv");
    let params_path = out_dir.join("true_params.json");
    panel::save_panel(&out.panel, &panel_path)?;
    panel::save_panel(&out.truth_panel(), &truth_path)?;
    model::save_model(&ModelParams::mar_only(out.true_params.clone()), &params_path)?;
    let mut outputs = vec![panel_path, truth_path, params_path];
    let manifest = write_manifest(out_dir, "generate", config, &[], &outputs)?;
    outputs.push(manifest);
    Ok(outputs)
}

/// Training mode exposed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Mar,
    Mnar,
    TwoPhase,
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mar" => Ok(TrainingMode::Mar),
            "mnar" => Ok(TrainingMode::Mnar),
            "two_phase" | "two-phase" => Ok(TrainingMode::TwoPhase),
            other => Err(Error::Config(format!("unknown training mode `{}`", other))),
        }
    }
}

/// Settings for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub em: EmConfig,
    pub w_miss: Option<f64>,
    pub variance_mode: Option<VarianceMode>,
    pub linearize_at: Option<LinearizeAt>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainingMode::TwoPhase,
            em: EmConfig::default(),
            w_miss: None,
            variance_mode: None,
            linearize_at: None,
        }
    }
}

fn apply_overrides(params: &mut ModelParams, cfg: &TrainConfig) {
    if let Some(w) = cfg.w_miss {
        params.miss.w_miss = w;
    }
    if let Some(v) = cfg.variance_mode {
        params.miss.variance_mode = v;
    }
    if let Some(l) = cfg.linearize_at {
        params.miss.linearize_at = l;
    }
}

/// Train on a panel (optionally restoring an artificial-mask overlay so
/// injected blackouts stay out of the dropout likelihood) and write the
/// model JSON plus objective trace CSVs.
pub fn run_train(
    panel_path: &Path,
    mask_overlay: Option<&Path>,
    warm_start: Option<&Path>,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut loaded = panel::load_panel(panel_path)?;
    if let Some(overlay) = mask_overlay {
        loaded = panel::load_mask_overlay(&loaded, overlay)?;
    }
    let tf = build_time_features(loaded.timestamps());
    let sf = StaticFeatures::none(loaded.n_detectors());

    let mut init = match warm_start {
        Some(path) => {
            let m = model::load_model(path)?;
            if m.obs_dim() != loaded.n_detectors() {
                return Err(Error::Dimension(format!(
                    "warm-start model expects {} detectors, panel has {}",
                    m.obs_dim(),
                    loaded.n_detectors()
                )));
            }
            m
        }
        None => em::init_params(&loaded, &tf, &sf, config.em.k, config.em.seed)?,
    };
    apply_overrides(&mut init, config);

    let mut outputs = Vec::new();
    match config.mode {
        TrainingMode::Mar | TrainingMode::Mnar => {
            let init = ModelParams {
                mnar_enabled: config.mode == TrainingMode::Mnar,
                ..init
            };
            let (params, trace) = em::fit(&loaded, &tf, &sf, init, &config.em)?;
            let model_path = out_dir.join("model.json");
            let trace_path = out_dir.join("trace.csv");
            model::save_model(&params, &model_path)?;
            trace.write_csv(&trace_path)?;
            outputs.extend([model_path, trace_path]);
        }
        TrainingMode::TwoPhase => {
            let fit = em::fit_two_phase(&loaded, &tf, &sf, init, &config.em)?;
            let model_path = out_dir.join("model.json");
            let mar_path = out_dir.join("model_mar.json");
            let trace_mar = out_dir.join("trace_mar.csv");
            let trace_mnar = out_dir.join("trace_mnar.csv");
            model::save_model(&fit.mnar, &model_path)?;
            model::save_model(&fit.mar, &mar_path)?;
            fit.mar_trace.write_csv(&trace_mar)?;
            fit.mnar_trace.write_csv(&trace_mnar)?;
            outputs.extend([model_path, mar_path, trace_mar, trace_mnar]);
        }
    }
    let inputs: Vec<&Path> = std::iter::once(panel_path)
        .chain(mask_overlay)
        .chain(warm_start)
        .collect();
    let manifest = write_manifest(out_dir, "train", config, &inputs, &outputs)?;
    outputs.push(manifest);
    Ok(outputs)
}

/// Settings for `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub lengths: Vec<usize>,
    pub horizons: Vec<usize>,
    pub per_month: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Any of `locf`, `interp_seasonal`, `mar`, `mnar`.
    pub methods: Vec<String>,
    pub em: EmConfig,
    pub w_miss: Option<f64>,
    pub variance_mode: Option<VarianceMode>,
    pub linearize_at: Option<LinearizeAt>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            lengths: vec![6, 12, 24],
            horizons: vec![1, 3, 6],
            per_month: 25,
            n_bootstrap: 1000,
            seed: 0,
            methods: vec!["locf".into(), "interp_seasonal".into(), "mar".into(), "mnar".into()],
            em: EmConfig::default(),
            w_miss: None,
            variance_mode: None,
            linearize_at: None,
        }
    }
}

impl EvalSettings {
    fn overrides(&self) -> MissOverrides {
        MissOverrides {
            w_miss: self.w_miss,
            variance_mode: self.variance_mode,
            linearize_at: self.linearize_at,
        }
    }

    fn build_methods(
        &self,
        mar_model: Option<&Path>,
        mnar_model: Option<&Path>,
    ) -> Result<Vec<MethodSpec>> {
        let mut out = Vec::new();
        for name in &self.methods {
            match name.as_str() {
                "locf" => out.push(MethodSpec::Locf),
                "interp_seasonal" | "interp" => out.push(MethodSpec::InterpSeasonal),
                "mar" => out.push(MethodSpec::Lds(Box::new(LdsMethodSpec {
                    name: "mar".into(),
                    mode: TrainMode::Mar,
                    em: self.em.clone(),
                    init: mar_model.map(model::load_model).transpose()?,
                    overrides: self.overrides(),
                }))),
                "mnar" => out.push(MethodSpec::Lds(Box::new(LdsMethodSpec {
                    name: "mnar".into(),
                    mode: TrainMode::MnarTwoPhase,
                    em: self.em.clone(),
                    init: mnar_model.or(mar_model).map(model::load_model).transpose()?,
                    overrides: self.overrides(),
                }))),
                other => {
                    return Err(Error::Config(format!("unknown method `{}`", other)));
                }
            }
        }
        Ok(out)
    }
}

/// Build windows from the panel, run the harness and write the report
/// bundle (JSON, flat CSV, window manifest, strata CSV).
pub fn run_eval(
    panel_path: &Path,
    mar_model: Option<&Path>,
    mnar_model: Option<&Path>,
    config: &EvalSettings,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let loaded = panel::load_panel(panel_path)?;
    let report = eval_on_panel(&loaded, mar_model, mnar_model, config)?;
    let mut outputs = write_report_bundle(&report, out_dir)?;
    let inputs: Vec<&Path> =
        std::iter::once(panel_path).chain(mar_model).chain(mnar_model).collect();
    let manifest = write_manifest(out_dir, "eval", config, &inputs, &outputs)?;
    outputs.push(manifest);
    Ok(outputs)
}

/// The harness run shared by `eval` and the sweep legs.
pub fn eval_on_panel(
    loaded: &Panel,
    mar_model: Option<&Path>,
    mnar_model: Option<&Path>,
    config: &EvalSettings,
) -> Result<EvalReport> {
    let candidates = find_candidate_windows(loaded, &config.lengths, &config.horizons);
    let (windows, shortfalls) = sample_stratified(&candidates, config.per_month, config.seed);
    if windows.is_empty() {
        return Err(Error::Window(
            "no evaluation windows could be constructed from this panel".into(),
        ));
    }
    let methods = config.build_methods(mar_model, mnar_model)?;
    let mut report = evaluate(
        loaded,
        &windows,
        &methods,
        &config.horizons,
        config.n_bootstrap,
        config.seed,
    )?;
    report.shortfalls = shortfalls;
    Ok(report)
}

fn write_report_bundle(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let json = out_dir.join("report.json");
    let flat = out_dir.join("report.csv");
    let manifest = out_dir.join("windows.csv");
    let strata = out_dir.join("strata.csv");
    report.write_json(&json)?;
    report.write_flat_csv(&flat)?;
    report.write_manifest_csv(&manifest)?;
    report.write_strata_csv(&strata)?;
    Ok(vec![json, flat, manifest, strata])
}

/// Settings for the dependence-strength sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub gen: SynthConfig,
    pub eval: EvalSettings,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut eval = EvalSettings {
            per_month: 60,
            n_bootstrap: 500,
            em: EmConfig { k: 4, ..EmConfig::default() },
            ..EvalSettings::default()
        };
        eval.methods =
            vec!["locf".into(), "interp_seasonal".into(), "mar".into(), "mnar".into()];
        SweepConfig {
            alphas: vec![0.0, 0.4, 0.8, 1.2],
            seeds: vec![0, 1, 2, 3, 4],
            gen: SynthConfig::default(),
            eval,
            jobs: 1,
        }
    }
}

/// One finished sweep leg.
#[derive(Debug, Clone)]
pub struct SweepLeg {
    pub alpha: f64,
    pub seed: u64,
    pub result: std::result::Result<EvalReport, String>,
}

/// Aggregated per-alpha sweep statistics (imputation task).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mar_mean: f64,
    pub mar_std: Option<f64>,
    pub mnar_mean: f64,
    pub mnar_std: Option<f64>,
    pub delta_mean: f64,
    pub delta_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into())
}

/// Run every (alpha, seed) leg: generate a panel, evaluate all methods on
/// it with leakage-free masking, and aggregate the dropout-model
/// advantage per alpha. Failed legs are recorded and skipped by the
/// aggregation.
pub fn run_sweep(config: &SweepConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let legs: Vec<(f64, u64)> = config
        .alphas
        .iter()
        .flat_map(|a| config.seeds.iter().map(move |s| (*a, *s)))
        .collect();

    let run_leg = |&(alpha, seed): &(f64, u64)| -> SweepLeg {
        let result = (|| -> Result<EvalReport> {
            let gen_cfg = SynthConfig {
                alpha,
                seed: substream_seed(seed, "sweep-gen"),
                ..config.gen.clone()
            };
            let out = synth::generate(&gen_cfg)?;
            let eval_cfg = EvalSettings {
                seed: substream_seed(seed, "sweep-eval"),
                ..config.eval.clone()
            };
            eval_on_panel(&out.panel, None, None, &eval_cfg)
        })()
        .map_err(|e| e.to_string());
        SweepLeg { alpha, seed, result }
    };

    let results: Vec<SweepLeg> = if config.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
        use rayon::prelude::*;
        pool.install(|| legs.par_iter().map(run_leg).collect())
    } else {
        legs.iter().map(run_leg).collect()
    };

    let mut outputs = Vec::new();

    // per-leg artifacts and the long-format leg table
    let legs_path = out_dir.join("legs.csv");
    let mut leg_rows = vec!["alpha,seed,method,task,rmse".to_string()];
    let mut failures = Vec::new();
    for leg in &results {
        match &leg.result {
            Ok(report) => {
                let leg_dir = out_dir.join(format!(
                    "leg_a{}_s{}",
                    leg.alpha.to_string().replace('.', "p"),
                    leg.seed
                ));
                fs::create_dir_all(&leg_dir)?;
                outputs.extend(write_report_bundle(report, &leg_dir)?);
                for m in &report.methods {
                    leg_rows.push(format!(
                        "{},{},{},impute,{}",
                        leg.alpha, leg.seed, m.name, m.impute.rmse
                    ));
                    for (h, s) in &m.forecasts {
                        leg_rows.push(format!(
                            "{},{},{},h{},{}",
                            leg.alpha, leg.seed, m.name, h, s.rmse
                        ));
                    }
                }
            }
            Err(msg) => failures.push(format!("{},{},{}", leg.alpha, leg.seed, msg)),
        }
    }
    fs::write(&legs_path, leg_rows.join("\n") + "\n")?;
    outputs.push(legs_path);
    if !failures.is_empty() {
        let failures_path = out_dir.join("failures.csv");
        fs::write(&failures_path, format!("alpha,seed,error\n{}\n", failures.join("\n")))?;
        outputs.push(failures_path);
    }

    // per-alpha aggregation
    let mut summary_rows = Vec::new();
    for &alpha in &config.alphas {
        let ok: Vec<&EvalReport> = results
            .iter()
            .filter(|l| l.alpha == alpha)
            .filter_map(|l| l.result.as_ref().ok())
            .collect();
        let n_failed = results
            .iter()
            .filter(|l| l.alpha == alpha && l.result.is_err())
            .count();
        let mar: Vec<f64> =
            ok.iter().filter_map(|r| r.method("mar").map(|m| m.impute.rmse)).collect();
        let mnar: Vec<f64> =
            ok.iter().filter_map(|r| r.method("mnar").map(|m| m.impute.rmse)).collect();
        let delta: Vec<f64> = ok
            .iter()
            .filter_map(|r| {
                Some(r.method("mnar")?.impute.rmse - r.method("mar")?.impute.rmse)
            })
            .collect();
        let (mar_mean, mar_std) = mean_std(&mar);
        let (mnar_mean, mnar_std) = mean_std(&mnar);
        let (delta_mean, delta_std) = mean_std(&delta);
        summary_rows.push(SweepRow {
            alpha,
            n_ok: ok.len(),
            n_failed,
            mar_mean,
            mar_std,
            mnar_mean,
            mnar_std,
            delta_mean,
            delta_std,
        });
    }

    let summary_path = out_dir.join("summary.csv");
    let mut lines = vec![
        "alpha,n_seeds_ok,n_failed,mar_rmse_mean,mar_rmse_std,mnar_rmse_mean,mnar_rmse_std,delta_rmse_mean,delta_rmse_std"
            .to_string(),
    ];
    for r in &summary_rows {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.n_ok,
            r.n_failed,
            r.mar_mean,
            fmt_opt(r.mar_std),
            r.mnar_mean,
            fmt_opt(r.mnar_std),
            r.delta_mean,
            fmt_opt(r.delta_std)
        ));
    }
    fs::write(&summary_path, lines.join("\n") + "\n")?;
    outputs.push(summary_path);

    let alpha_rows: Vec<AlphaRow> = summary_rows
        .iter()
        .map(|r| AlphaRow { alpha: r.alpha, delta_mean: r.delta_mean, delta_std: r.delta_std })
        .collect();
    let svg = out_dir.join("delta_rmse_vs_alpha.svg");
    let csv = out_dir.join("delta_rmse_vs_alpha.csv");
    report::plot_delta_rmse_vs_alpha(&alpha_rows, &svg, &csv)?;
    outputs.extend([svg, csv]);

    let manifest = write_manifest(out_dir, "sweep", config, &[], &outputs)?;
    outputs.push(manifest);
    Ok(outputs)
}

/// Parse a sweep summary CSV back into plot rows.
fn parse_sweep_summary(path: &Path) -> Result<Vec<AlphaRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 9 {
            return Err(Error::Parse { row: i, msg: "short sweep summary row".into() });
        }
        rows.push(AlphaRow {
            alpha: fields[0]
                .parse()
                .map_err(|_| Error::Parse { row: i, msg: "bad alpha".into() })?,
            delta_mean: fields[7]
                .parse()
                .map_err(|_| Error::Parse { row: i, msg: "bad delta mean".into() })?,
            delta_std: fields[8].parse().ok(),
        });
    }
    Ok(rows)
}

/// Render figures for evaluation reports and sweep summaries. Inputs are
/// sniffed by content: a report JSON yields the five-figure set, a sweep
/// summary CSV yields the dependence plot.
pub fn run_report(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    for input in inputs {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report")
            .to_string();
        match input.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let report = EvalReport::load_json(input)?;
                outputs.extend(report::render_eval_report(&report, out_dir, &stem)?);
            }
            Some("csv") => {
                let rows = parse_sweep_summary(input)?;
                let svg = out_dir.join(format!("{}_delta_rmse_vs_alpha.svg", stem));
                let csv = out_dir.join(format!("{}_delta_rmse_vs_alpha.csv", stem));
                report::plot_delta_rmse_vs_alpha(&rows, &svg, &csv)?;
                outputs.extend([svg, csv]);
            }
            _ => {
                return Err(Error::Config(format!(
                    "cannot infer report kind of `{}` (expect .json or .csv)",
                    input.display()
                )));
            }
        }
    }
    let manifest = write_manifest(out_dir, "report", &serde_json::json!({}), &[], &outputs)?;
    outputs.push(manifest);
    Ok(outputs)
}
