//! Static SVG plots and the tidy CSVs behind them.
//!
//! Every figure is rendered from a small tidy table that is written next
//! to the image, so the numbers remain scriptable offline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::em::TrainingTrace;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(format!("plot rendering failed: {}", e))
}

fn method_color(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    COLORS[i % COLORS.len()]
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header)?;
    for row in rows {
        writeln!(out, "{}", row)?;
    }
    out.flush()?;
    Ok(())
}

/// Imputation RMSE bars with 95% bootstrap whiskers.
pub fn plot_impute_bars(report: &EvalReport, svg: &Path, csv: &Path) -> Result<()> {
    let rows: Vec<String> = report
        .methods
        .iter()
        .map(|m| {
            format!("{},{},{},{}", m.name, m.impute.rmse, m.impute.ci_low, m.impute.ci_high)
        })
        .collect();
    write_csv(csv, "method,rmse,ci_low,ci_high", &rows)?;

    let root = SVGBackend::new(svg, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = report.methods.len().max(1);
    let y_max = report
        .methods
        .iter()
        .map(|m| m.impute.ci_high.max(m.impute.rmse))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let mut chart = ChartBuilder::on(&root)
        .caption("Blackout imputation RMSE (95% bootstrap CI)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0.0f64..y_max)
        .map_err(plot_err)?;
    let names: Vec<String> = report.methods.iter().map(|m| m.name.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("RMSE")
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round() as i64;
            if i >= 0 && (i as usize) < names.len() && (x - i as f64).abs() < 0.3 {
                names[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    for (i, m) in report.methods.iter().enumerate() {
        let x = i as f64;
        let color = method_color(i);
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x - 0.3, 0.0), (x + 0.3, m.impute.rmse)],
                color.mix(0.75).filled(),
            )))
            .map_err(plot_err)?;
        chart
            .draw_series(std::iter::once(ErrorBar::new_vertical(
                x,
                m.impute.ci_low,
                m.impute.rmse,
                m.impute.ci_high,
                BLACK.filled(),
                12,
            )))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Forecast RMSE against horizon, one line per method.
pub fn plot_rmse_vs_horizon(report: &EvalReport, svg: &Path, csv: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for m in &report.methods {
        for (h, s) in &m.forecasts {
            rows.push(format!("{},{},{},{},{}", m.name, h, s.rmse, s.ci_low, s.ci_high));
        }
    }
    write_csv(csv, "method,horizon,rmse,ci_low,ci_high", &rows)?;

    let root = SVGBackend::new(svg, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_h = report.horizons.iter().copied().max().unwrap_or(1) as f64;
    let y_max = report
        .methods
        .iter()
        .flat_map(|m| m.forecasts.values())
        .map(|s| s.ci_high.max(s.rmse))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let mut chart = ChartBuilder::on(&root)
        .caption("Post-blackout forecast RMSE vs horizon", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(0.5f64..(max_h + 0.5), 0.0f64..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("horizon (steps)")
        .y_desc("RMSE")
        .draw()
        .map_err(plot_err)?;
    for (i, m) in report.methods.iter().enumerate() {
        let color = method_color(i);
        let pts: Vec<(f64, f64)> =
            m.forecasts.iter().map(|(h, s)| (*h as f64, s.rmse)).collect();
        if pts.is_empty() {
            continue;
        }
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(m.name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(pts.iter().map(|p| Circle::new(*p, 4, color.filled())))
            .map_err(plot_err)?;
        for (h, s) in &m.forecasts {
            chart
                .draw_series(std::iter::once(ErrorBar::new_vertical(
                    *h as f64,
                    s.ci_low,
                    s.rmse,
                    s.ci_high,
                    color.filled(),
                    8,
                )))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn grouped_bucket_plot(
    report: &EvalReport,
    svg: &Path,
    csv: &Path,
    title: &str,
    pick: impl Fn(&crate::eval::MethodReport) -> &[crate::eval::BucketRow],
) -> Result<()> {
    let mut rows = Vec::new();
    for m in &report.methods {
        for b in pick(m) {
            rows.push(format!("{},{},{},{},{}", m.name, b.label, b.rmse, b.n_windows, b.n_units));
        }
    }
    write_csv(csv, "method,bucket,rmse,n_windows,n_units", &rows)?;

    // bucket labels in first-seen order across methods
    let mut labels: Vec<String> = Vec::new();
    for m in &report.methods {
        for b in pick(m) {
            if !labels.contains(&b.label) {
                labels.push(b.label.clone());
            }
        }
    }
    let root = SVGBackend::new(svg, (860, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let y_max = report
        .methods
        .iter()
        .flat_map(|m| pick(m).iter())
        .map(|b| b.rmse)
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let nb = labels.len().max(1);
    let nm = report.methods.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..(nb as f64 - 0.5), 0.0f64..y_max)
        .map_err(plot_err)?;
    let labels_for_axis = labels.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("RMSE")
        .x_labels(nb)
        .x_label_formatter(&|x| {
            let i = x.round() as i64;
            if i >= 0 && (i as usize) < labels_for_axis.len() && (x - i as f64).abs() < 0.3 {
                labels_for_axis[i as usize].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / nm as f64;
    for (mi, m) in report.methods.iter().enumerate() {
        let color = method_color(mi);
        let series: Vec<Rectangle<(f64, f64)>> = pick(m)
            .iter()
            .filter_map(|b| {
                let bi = labels.iter().position(|l| *l == b.label)?;
                let x0 = bi as f64 - 0.4 + mi as f64 * width;
                Some(Rectangle::new([(x0, 0.0), (x0 + width, b.rmse)], color.mix(0.8).filled()))
            })
            .collect();
        chart
            .draw_series(series)
            .map_err(plot_err)?
            .label(m.name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Imputation RMSE by blackout-length bucket.
pub fn plot_length_buckets(report: &EvalReport, svg: &Path, csv: &Path) -> Result<()> {
    grouped_bucket_plot(report, svg, csv, "Imputation RMSE by blackout length", |m| {
        &m.length_buckets
    })
}

/// Imputation RMSE by hour-of-day bucket of the blackout start.
pub fn plot_hour_buckets(report: &EvalReport, svg: &Path, csv: &Path) -> Result<()> {
    grouped_bucket_plot(report, svg, csv, "Imputation RMSE by hour-of-day bucket", |m| {
        &m.hour_buckets
    })
}

/// EM objective curves for every trained method (one line per phase).
pub fn plot_em_objective(report: &EvalReport, svg: &Path, csv: &Path) -> Result<()> {
    let mut curves: Vec<(String, &TrainingTrace)> = Vec::new();
    for m in &report.methods {
        for (pi, trace) in m.training.iter().enumerate() {
            let label = if m.training.len() > 1 {
                format!("{} phase {}", m.name, pi + 1)
            } else {
                m.name.clone()
            };
            curves.push((label, trace));
        }
    }
    let mut rows = Vec::new();
    for (label, trace) in &curves {
        for r in &trace.iterations {
            rows.push(format!("{},{},{}", label, r.iteration, r.objective));
        }
    }
    write_csv(csv, "curve,iteration,objective", &rows)?;

    let root = SVGBackend::new(svg, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    if curves.is_empty() || curves.iter().all(|(_, t)| t.iterations.is_empty()) {
        root.titled("EM objective: no trained methods in this report", ("sans-serif", 20))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
        return Ok(());
    }
    let xs_max =
        curves.iter().map(|(_, t)| t.iterations.len()).max().unwrap_or(1) as f64 - 1.0;
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, t) in &curves {
        for r in &t.iterations {
            y_min = y_min.min(r.objective);
            y_max = y_max.max(r.objective);
        }
    }
    let pad = (y_max - y_min).abs().max(1.0) * 0.07;
    let mut chart = ChartBuilder::on(&root)
        .caption("EM training objective", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(80)
        .build_cartesian_2d(-0.25f64..(xs_max + 0.25).max(0.25), (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("EM iteration")
        .y_desc("objective (log-likelihood)")
        .draw()
        .map_err(plot_err)?;
    for (i, (label, trace)) in curves.iter().enumerate() {
        let color = method_color(i);
        let pts: Vec<(f64, f64)> =
            trace.iterations.iter().map(|r| (r.iteration as f64, r.objective)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One row of a dependence-strength sweep summary.
#[derive(Debug, Clone)]
pub struct AlphaRow {
    pub alpha: f64,
    pub delta_mean: f64,
    /// `None` for single-seed sweeps (reported as n/a).
    pub delta_std: Option<f64>,
}

/// Mean dropout-model advantage against dependence strength, with +-1 std
/// whiskers.
pub fn plot_delta_rmse_vs_alpha(rows: &[AlphaRow], svg: &Path, csv: &Path) -> Result<()> {
    let tidy: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                r.alpha,
                r.delta_mean,
                r.delta_std.map(|s| s.to_string()).unwrap_or_else(|| "n/a".into())
            )
        })
        .collect();
    write_csv(csv, "alpha,delta_rmse_mean,delta_rmse_std", &tidy)?;

    let root = SVGBackend::new(svg, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    if rows.is_empty() {
        root.titled("dependence sweep: no rows", ("sans-serif", 20)).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
        return Ok(());
    }
    let x_min = rows.iter().map(|r| r.alpha).fold(f64::INFINITY, f64::min);
    let x_max = rows.iter().map(|r| r.alpha).fold(f64::NEG_INFINITY, f64::max);
    let span = (x_max - x_min).max(0.1);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for r in rows {
        let s = r.delta_std.unwrap_or(0.0);
        y_min = y_min.min(r.delta_mean - s);
        y_max = y_max.max(r.delta_mean + s);
    }
    let pad = (y_max - y_min).abs().max(0.05) * 0.2;
    let mut chart = ChartBuilder::on(&root)
        .caption("Dropout-model advantage vs dependence strength", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(42)
        .y_label_area_size(64)
        .build_cartesian_2d(
            (x_min - 0.1 * span)..(x_max + 0.1 * span),
            (y_min - pad)..(y_max + pad),
        )
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("alpha")
        .y_desc("delta RMSE (negative favors the dropout model)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(PathElement::new(
            vec![(x_min - 0.1 * span, 0.0), (x_max + 0.1 * span, 0.0)],
            BLACK.mix(0.4).stroke_width(1),
        )))
        .map_err(plot_err)?;
    let color = method_color(0);
    chart
        .draw_series(LineSeries::new(
            rows.iter().map(|r| (r.alpha, r.delta_mean)),
            color.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(rows.iter().map(|r| Circle::new((r.alpha, r.delta_mean), 4, color.filled())))
        .map_err(plot_err)?;
    for r in rows {
        if let Some(s) = r.delta_std {
            chart
                .draw_series(std::iter::once(ErrorBar::new_vertical(
                    r.alpha,
                    r.delta_mean - s,
                    r.delta_mean,
                    r.delta_mean + s,
                    color.filled(),
                    10,
                )))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Render the full figure set for one evaluation report. Returns the
/// files written.
pub fn render_eval_report(report: &EvalReport, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let emit = |name: &str| -> (PathBuf, PathBuf) {
        let svg = out_dir.join(format!("{}_{}.svg", stem, name));
        let csv = out_dir.join(format!("{}_{}.csv", stem, name));
        (svg, csv)
    };
    let (svg, csv) = emit("impute_rmse");
    plot_impute_bars(report, &svg, &csv)?;
    files.extend([svg, csv]);
    let (svg, csv) = emit("forecast_rmse_vs_horizon");
    plot_rmse_vs_horizon(report, &svg, &csv)?;
    files.extend([svg, csv]);
    let (svg, csv) = emit("impute_rmse_by_length");
    plot_length_buckets(report, &svg, &csv)?;
    files.extend([svg, csv]);
    let (svg, csv) = emit("impute_rmse_by_hour");
    plot_hour_buckets(report, &svg, &csv)?;
    files.extend([svg, csv]);
    let (svg, csv) = emit("em_objective");
    plot_em_objective(report, &svg, &csv)?;
    files.extend([svg, csv]);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, find_candidate_windows, sample_stratified, MethodSpec};
    use crate::panel::{regular_timestamps, Panel};
    use chrono::NaiveDate;
    use nalgebra::DMatrix;

    fn small_report() -> EvalReport {
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let values =
            DMatrix::from_fn(80, 2, |t, d| 8.0 + ((t + d) as f64 * 0.3).sin() * 2.0);
        let panel = Panel::fully_observed(
            values,
            regular_timestamps(start, 300, 80),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let candidates = find_candidate_windows(&panel, &[4], &[1, 3]);
        let (windows, _) = sample_stratified(&candidates, 4, 2);
        evaluate(
            &panel,
            &windows,
            &[MethodSpec::Locf, MethodSpec::InterpSeasonal],
            &[1, 3],
            60,
            0,
        )
        .unwrap()
    }

    #[test]
    fn one_report_renders_five_figures_and_their_tables() {
        let report = small_report();
        let dir = tempfile::tempdir().unwrap();
        let files = render_eval_report(&report, dir.path(), "report").unwrap();
        let svgs: Vec<&PathBuf> =
            files.iter().filter(|f| f.extension().unwrap() == "svg").collect();
        assert_eq!(svgs.len(), 5);
        for f in &files {
            assert!(f.exists(), "{:?} missing", f);
            assert!(std::fs::metadata(f).unwrap().len() > 0);
        }
    }

    #[test]
    fn tidy_csv_matches_report_numbers() {
        let report = small_report();
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("bars.svg");
        let csv = dir.path().join("bars.csv");
        plot_impute_bars(&report, &svg, &csv).unwrap();
        let body = std::fs::read_to_string(&csv).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next().unwrap(), "method,rmse,ci_low,ci_high");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], report.methods[0].name);
        assert_eq!(first[1].parse::<f64>().unwrap(), report.methods[0].impute.rmse);
    }

    #[test]
    fn alpha_plot_handles_single_seed_na() {
        let rows = vec![
            AlphaRow { alpha: 0.0, delta_mean: -0.01, delta_std: None },
            AlphaRow { alpha: 0.4, delta_mean: -0.2, delta_std: None },
        ];
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("alpha.svg");
        let csv = dir.path().join("alpha.csv");
        plot_delta_rmse_vs_alpha(&rows, &svg, &csv).unwrap();
        let body = std::fs::read_to_string(&csv).unwrap();
        assert!(body.contains("n/a"));
        assert!(svg.exists());
    }
}
