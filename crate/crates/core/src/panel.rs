//! Sensor panels: a `T x D` measurement matrix with observation and
//! artificial-blackout masks, fixed-interval timestamps and detector ids.
//!
//! CSV dialect: header `timestamp,<det_id_1>,...,<det_id_D>`, ISO-8601
//! timestamps, empty cell = missing. Mask overlays are a parallel CSV of
//! 0/1 cells under the same header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Accepted timestamp formats; the first one is the canonical output form.
const TS_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TS_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TS_FORMATS[0]).to_string()
}

/// Cell contents treated as missing besides the empty string.
fn is_missing_sentinel(s: &str) -> bool {
    matches!(s.to_ascii_lowercase().as_str(), "nan" | "na" | "null")
}

/// A `T x D` sensor panel. Immutable after construction; values at
/// unobserved cells are hidden (stored as NaN) so that no consumer can
/// read through a mask by accident.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
    artificial: DMatrix<bool>,
    timestamps: Vec<NaiveDateTime>,
    detector_ids: Vec<String>,
    interval_secs: i64,
}

/// One artificial blackout to inject: detector column plus an inclusive
/// `[start, end]` row interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskWindow {
    pub detector: usize,
    pub start: usize,
    pub end: usize,
}

impl Panel {
    /// Build a panel, validating every documented invariant.
    pub fn new(
        values: DMatrix<f64>,
        observed: DMatrix<bool>,
        artificial: DMatrix<bool>,
        timestamps: Vec<NaiveDateTime>,
        detector_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, d) = values.shape();
        if observed.shape() != (t, d) || artificial.shape() != (t, d) {
            return Err(Error::Dimension("masks must match the value matrix shape".into()));
        }
        if timestamps.len() != t {
            return Err(Error::Dimension(format!(
                "expected {} timestamps, got {}",
                t,
                timestamps.len()
            )));
        }
        if detector_ids.len() != d {
            return Err(Error::Dimension(format!(
                "expected {} detector ids, got {}",
                d,
                detector_ids.len()
            )));
        }
        if t < 1 || d < 1 {
            return Err(Error::Validation("panel must have at least one row and column".into()));
        }
        let interval_secs = if t >= 2 {
            let step = (timestamps[1] - timestamps[0]).num_seconds();
            if step <= 0 {
                return Err(Error::Validation("timestamps must be strictly increasing".into()));
            }
            for i in 2..t {
                if (timestamps[i] - timestamps[i - 1]).num_seconds() != step {
                    return Err(Error::Parse {
                        row: i,
                        msg: format!("non-constant spacing at row {}", i),
                    });
                }
            }
            step
        } else {
            300 // single-row panel: default to the 5-minute convention
        };
        for r in 0..t {
            for c in 0..d {
                if artificial[(r, c)] && observed[(r, c)] {
                    return Err(Error::Validation(format!(
                        "artificially masked cell ({}, {}) is still marked observed",
                        r, c
                    )));
                }
                if observed[(r, c)] && !values[(r, c)].is_finite() {
                    return Err(Error::Validation(format!(
                        "observed cell ({}, {}) holds a non-finite value",
                        r, c
                    )));
                }
            }
        }
        // Hide values behind the mask so they cannot leak into any consumer.
        let mut values = values;
        for r in 0..t {
            for c in 0..d {
                if !observed[(r, c)] {
                    values[(r, c)] = f64::NAN;
                }
            }
        }
        Ok(Panel { values, observed, artificial, timestamps, detector_ids, interval_secs })
    }

    /// Convenience constructor for a fully observed panel.
    pub fn fully_observed(
        values: DMatrix<f64>,
        timestamps: Vec<NaiveDateTime>,
        detector_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, d) = values.shape();
        Panel::new(
            values,
            DMatrix::from_element(t, d, true),
            DMatrix::from_element(t, d, false),
            timestamps,
            detector_ids,
        )
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_detectors(&self) -> usize {
        self.values.ncols()
    }

    /// Measurement matrix; NaN at every unobserved cell.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn observed_mask(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn artificial_mask(&self) -> &DMatrix<bool> {
        &self.artificial
    }

    pub fn is_observed(&self, t: usize, d: usize) -> bool {
        self.observed[(t, d)]
    }

    /// Value at an observed cell; `None` when the cell is masked.
    pub fn value_at(&self, t: usize, d: usize) -> Option<f64> {
        if self.observed[(t, d)] {
            Some(self.values[(t, d)])
        } else {
            None
        }
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn detector_ids(&self) -> &[String] {
        &self.detector_ids
    }

    pub fn interval_secs(&self) -> i64 {
        self.interval_secs
    }

    /// Timesteps per day at this panel's sampling interval.
    pub fn steps_per_day(&self) -> usize {
        (86_400 / self.interval_secs).max(1) as usize
    }

    /// Fraction of cells that are unobserved.
    pub fn missing_rate(&self) -> f64 {
        let missing = self.observed.iter().filter(|o| !**o).count();
        missing as f64 / (self.n_steps() * self.n_detectors()) as f64
    }

    /// Row `t` of the values matrix as a vector (NaN at unobserved cells).
    pub fn value_row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    /// Observation mask for row `t`.
    pub fn observed_row(&self, t: usize) -> Vec<bool> {
        (0..self.n_detectors()).map(|d| self.observed[(t, d)]).collect()
    }
}

/// Load a panel from the documented CSV dialect.
pub fn load_panel(path: &Path) -> Result<Panel> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, msg: format!("bad header: {}", e) })?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("timestamp") {
        return Err(Error::Parse {
            row: 0,
            msg: "header must be `timestamp,<det_id_1>,...`".into(),
        });
    }
    let detector_ids: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let d = detector_ids.len();

    let mut timestamps = Vec::new();
    let mut cells: Vec<f64> = Vec::new();
    let mut observed: Vec<bool> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if record.len() != d + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, got {}", d + 1, record.len()),
            });
        }
        let ts_str = record.get(0).unwrap();
        let ts = parse_timestamp(ts_str)
            .ok_or_else(|| Error::Parse { row, msg: format!("malformed timestamp `{}`", ts_str) })?;
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            let trimmed = field.trim();
            if trimmed.is_empty() || is_missing_sentinel(trimmed) {
                cells.push(f64::NAN);
                observed.push(false);
            } else {
                let v: f64 = trimmed.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("unparseable value `{}`", trimmed),
                })?;
                cells.push(v);
                observed.push(true);
            }
        }
    }

    let t = timestamps.len();
    if t == 0 {
        return Err(Error::Parse { row: 0, msg: "panel has no data rows".into() });
    }
    let values = DMatrix::from_row_iterator(t, d, cells.into_iter());
    let observed = DMatrix::from_row_iterator(t, d, observed.into_iter());
    let artificial = DMatrix::from_element(t, d, false);
    Panel::new(values, observed, artificial, timestamps, detector_ids)
}

/// Serialize a panel back to the documented CSV dialect. Unobserved cells
/// (natural or artificial) are written as empty fields.
pub fn save_panel(panel: &Panel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "timestamp,{}", panel.detector_ids().join(","))?;
    for t in 0..panel.n_steps() {
        let mut fields = Vec::with_capacity(panel.n_detectors() + 1);
        fields.push(format_timestamp(&panel.timestamps[t]));
        for d in 0..panel.n_detectors() {
            if panel.observed[(t, d)] {
                fields.push(format!("{}", panel.values[(t, d)]));
            } else {
                fields.push(String::new());
            }
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Write a 0/1 overlay of the panel's artificial mask.
pub fn save_mask_overlay(panel: &Panel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "timestamp,{}", panel.detector_ids().join(","))?;
    for t in 0..panel.n_steps() {
        let mut fields = Vec::with_capacity(panel.n_detectors() + 1);
        fields.push(format_timestamp(&panel.timestamps[t]));
        for d in 0..panel.n_detectors() {
            fields.push(if panel.artificial[(t, d)] { "1".into() } else { "0".into() });
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read a 0/1 overlay and mark the flagged cells as artificially masked.
/// Every flagged cell must already be unobserved in the panel.
pub fn load_mask_overlay(panel: &Panel, path: &Path) -> Result<Panel> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let mut artificial = DMatrix::from_element(panel.n_steps(), panel.n_detectors(), false);
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if record.len() != panel.n_detectors() + 1 {
            return Err(Error::Parse { row, msg: "overlay width does not match panel".into() });
        }
        if i >= panel.n_steps() {
            return Err(Error::Parse { row, msg: "overlay has more rows than panel".into() });
        }
        for (d, field) in record.iter().skip(1).enumerate() {
            match field.trim() {
                "0" => {}
                "1" => {
                    if panel.observed[(i, d)] {
                        return Err(Error::Validation(format!(
                            "overlay flags observed cell ({}, {})",
                            i, d
                        )));
                    }
                    artificial[(i, d)] = true;
                }
                other => {
                    return Err(Error::Parse { row, msg: format!("overlay cell `{}`", other) })
                }
            }
        }
    }
    Panel::new(
        panel.values.clone(),
        panel.observed.clone(),
        artificial,
        panel.timestamps.clone(),
        panel.detector_ids.clone(),
    )
}

/// Inject artificial blackouts: each window interval must be fully
/// observed in the input panel (those values become the held-out ground
/// truth). Returns a training panel where the window cells are unobserved,
/// flagged artificial, and the underlying values hidden.
pub fn apply_artificial_mask(panel: &Panel, windows: &[MaskWindow]) -> Result<Panel> {
    let mut observed = panel.observed.clone();
    let mut artificial = panel.artificial.clone();
    let mut values = panel.values.clone();
    for w in windows {
        if w.detector >= panel.n_detectors() || w.end >= panel.n_steps() || w.start > w.end {
            return Err(Error::Window(format!(
                "window detector={} [{}, {}] is out of bounds",
                w.detector, w.start, w.end
            )));
        }
        for t in w.start..=w.end {
            if !panel.observed[(t, w.detector)] {
                return Err(Error::Window(format!(
                    "window detector={} [{}, {}] overlaps a naturally missing cell at t={}",
                    w.detector, w.start, w.end, t
                )));
            }
        }
        for t in w.start..=w.end {
            observed[(t, w.detector)] = false;
            artificial[(t, w.detector)] = true;
            values[(t, w.detector)] = f64::NAN;
        }
    }
    Panel::new(
        values,
        observed,
        artificial,
        panel.timestamps.clone(),
        panel.detector_ids.clone(),
    )
}

/// Per-timestep calendar covariates: `[sin tod, cos tod, sin dow, cos dow]`
/// where tod is the fraction of the day and dow the weekday (Monday = 0)
/// plus the day fraction, both mapped through one harmonic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFeatures {
    f: DMatrix<f64>,
}

impl TimeFeatures {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.f.row(t).transpose()
    }
}

/// Build the default four-dimensional harmonic time encoding.
pub fn build_time_features(timestamps: &[NaiveDateTime]) -> TimeFeatures {
    let tau = std::f64::consts::TAU;
    let mut f = DMatrix::zeros(timestamps.len(), 4);
    for (t, ts) in timestamps.iter().enumerate() {
        let tod = ts.num_seconds_from_midnight() as f64 / 86_400.0;
        let dow = ts.date().weekday().num_days_from_monday() as f64 + tod;
        f[(t, 0)] = (tau * tod).sin();
        f[(t, 1)] = (tau * tod).cos();
        f[(t, 2)] = (tau * dow / 7.0).sin();
        f[(t, 3)] = (tau * dow / 7.0).cos();
    }
    TimeFeatures { f }
}

/// Static per-detector covariates (`D x q`); disabled by default (`q = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures {
    g: DMatrix<f64>,
}

impl StaticFeatures {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("static features must be finite".into()));
        }
        Ok(StaticFeatures { g })
    }

    /// The `q = 0` default.
    pub fn none(n_detectors: usize) -> Self {
        StaticFeatures { g: DMatrix::zeros(n_detectors, 0) }
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn row(&self, d: usize) -> DVector<f64> {
        self.g.row(d).transpose()
    }
}

/// Evenly spaced timestamps starting at `start` (convenience for synthetic
/// panels and tests).
pub fn regular_timestamps(start: NaiveDateTime, interval_secs: i64, n: usize) -> Vec<NaiveDateTime> {
    (0..n)
        .map(|i| start + chrono::Duration::seconds(interval_secs * i as i64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use std::io::Write as _;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_maps_empty_cell_to_missing() {
        let f = write_csv("timestamp,a,b\n2015-01-01T00:00:00,1.5,2\n2015-01-01T00:05:00,,3\n2015-01-01T00:10:00,4,5\n");
        let p = load_panel(f.path()).unwrap();
        assert_eq!(p.n_steps(), 3);
        assert_eq!(p.n_detectors(), 2);
        let missing = p.observed_mask().iter().filter(|o| !**o).count();
        assert_eq!(missing, 1);
        assert!(!p.is_observed(1, 0));
        assert!(p.artificial_mask().iter().all(|a| !a));
    }

    #[test]
    fn load_rejects_non_constant_spacing() {
        let f = write_csv("timestamp,a\n2015-01-01T00:00:00,1\n2015-01-01T00:05:00,2\n2015-01-01T00:15:00,3\n");
        let err = load_panel(f.path()).unwrap_err();
        assert!(err.to_string().contains("non-constant spacing at row 2"), "{}", err);
    }

    #[test]
    fn dense_panel_loads_fully_observed() {
        let mut body = String::from("timestamp,a,b,c,d\n");
        for i in 0..10 {
            body.push_str(&format!("2015-01-01T00:{:02}:00,1,2,3,4\n", 5 * i));
        }
        let f = write_csv(&body);
        let p = load_panel(f.path()).unwrap();
        assert!(p.observed_mask().iter().all(|o| *o));
        assert!(p.artificial_mask().iter().all(|a| !a));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let f = write_csv("timestamp,a,b\n2015-01-01T00:00:00,1.5,2\n2015-01-01T00:05:00,,3.25\n2015-01-01T00:10:00,4,5\n");
        let p = load_panel(f.path()).unwrap();
        let out1 = tempfile::NamedTempFile::new().unwrap();
        save_panel(&p, out1.path()).unwrap();
        let p2 = load_panel(out1.path()).unwrap();
        let out2 = tempfile::NamedTempFile::new().unwrap();
        save_panel(&p2, out2.path()).unwrap();
        let b1 = std::fs::read(out1.path()).unwrap();
        let b2 = std::fs::read(out2.path()).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1, std::fs::read(f.path()).unwrap());
    }

    #[test]
    fn empty_window_list_is_identity() {
        let f = write_csv("timestamp,a\n2015-01-01T00:00:00,1\n2015-01-01T00:05:00,2\n");
        let p = load_panel(f.path()).unwrap();
        let q = apply_artificial_mask(&p, &[]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn masking_flips_exactly_the_window_cells() {
        let values = DMatrix::from_row_slice(5, 2, &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        let times = regular_timestamps(ts("2015-01-01T00:00:00"), 300, 5);
        let p = Panel::fully_observed(values, times, vec!["a".into(), "b".into()]).unwrap();
        let q = apply_artificial_mask(&p, &[MaskWindow { detector: 0, start: 1, end: 3 }]).unwrap();
        let new_missing = q.observed_mask().iter().filter(|o| !**o).count();
        let flagged = q.artificial_mask().iter().filter(|a| **a).count();
        assert_eq!(new_missing, 3);
        assert_eq!(flagged, 3);
        // cells outside the window untouched
        for t in 0..5 {
            assert_eq!(q.value_at(t, 1), p.value_at(t, 1));
        }
        assert_eq!(q.value_at(0, 0), Some(1.0));
        assert_eq!(q.value_at(4, 0), Some(9.0));
        // hidden values unreadable
        assert_eq!(q.value_at(2, 0), None);
        assert!(q.values()[(2, 0)].is_nan());
    }

    #[test]
    fn masking_rejects_window_over_natural_hole() {
        let f = write_csv("timestamp,a\n2015-01-01T00:00:00,1\n2015-01-01T00:05:00,\n2015-01-01T00:10:00,3\n");
        let p = load_panel(f.path()).unwrap();
        let err =
            apply_artificial_mask(&p, &[MaskWindow { detector: 0, start: 0, end: 2 }]).unwrap_err();
        assert!(err.to_string().contains("naturally missing"), "{}", err);
    }

    #[test]
    fn disjoint_window_lengths_add_up() {
        let values = DMatrix::from_element(20, 3, 1.0);
        let times = regular_timestamps(ts("2015-01-01T00:00:00"), 300, 20);
        let p =
            Panel::fully_observed(values, times, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let windows = [
            MaskWindow { detector: 0, start: 2, end: 5 },
            MaskWindow { detector: 1, start: 0, end: 0 },
            MaskWindow { detector: 2, start: 10, end: 16 },
        ];
        let q = apply_artificial_mask(&p, &windows).unwrap();
        let total: usize = windows.iter().map(|w| w.end - w.start + 1).sum();
        assert_eq!(q.artificial_mask().iter().filter(|a| **a).count(), total);
    }

    #[test]
    fn midnight_monday_time_features() {
        // 2024-01-01 is a Monday.
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let tf = build_time_features(&[t0]);
        let row = tf.row(0);
        assert_relative_eq!(row[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(row[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(row[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(row[3], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn six_am_time_of_day_pair() {
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(6, 0, 0).unwrap();
        let tf = build_time_features(&[t0]);
        let row = tf.row(0);
        assert_relative_eq!(row[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(row[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_pairs_have_unit_norm() {
        let times = regular_timestamps(ts("2015-03-07T13:40:00"), 300, 50);
        let tf = build_time_features(&times);
        for t in 0..50 {
            let row = tf.row(t);
            assert_relative_eq!(row[0] * row[0] + row[1] * row[1], 1.0, epsilon = 1e-12);
            assert_relative_eq!(row[2] * row[2] + row[3] * row[3], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn overlay_round_trip() {
        let values = DMatrix::from_element(4, 2, 2.0);
        let times = regular_timestamps(ts("2015-01-01T00:00:00"), 300, 4);
        let p = Panel::fully_observed(values, times, vec!["a".into(), "b".into()]).unwrap();
        let q = apply_artificial_mask(&p, &[MaskWindow { detector: 1, start: 1, end: 2 }]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let panel_path = dir.path().join("panel.csv");
        let overlay_path = dir.path().join("mask.csv");
        save_panel(&q, &panel_path).unwrap();
        save_mask_overlay(&q, &overlay_path).unwrap();
        let loaded = load_panel(&panel_path).unwrap();
        let restored = load_mask_overlay(&loaded, &overlay_path).unwrap();
        assert_eq!(restored.artificial_mask(), q.artificial_mask());
        assert_eq!(restored.observed_mask(), q.observed_mask());
    }
}
