//! Bundled model parameters and their on-disk JSON schema.
//!
//! Matrices serialize row-major as nested arrays so saved models stay
//! readable and language-neutral.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::LdsParams;
use crate::mnar::{LinearizeAt, MissingnessParams, VarianceMode};

/// Everything the filter and trainer need: LDS parameters, the dropout
/// channel, and whether that channel participates in inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lds: LdsParams,
    pub miss: MissingnessParams,
    pub mnar_enabled: bool,
}

impl ModelParams {
    /// Wrap LDS parameters with a disabled, all-zero dropout channel.
    pub fn mar_only(lds: LdsParams) -> Self {
        let d = lds.obs_dim();
        let k = lds.state_dim();
        ModelParams { lds, miss: MissingnessParams::zeroed(d, k, 4, 0), mnar_enabled: false }
    }

    pub fn state_dim(&self) -> usize {
        self.lds.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.lds.obs_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.lds.validate()?;
        self.miss.validate()?;
        if self.miss.n_detectors() != self.lds.obs_dim() {
            return Err(Error::Dimension(
                "dropout channel and emission matrix disagree on D".into(),
            ));
        }
        if self.miss.state_dim() != self.lds.state_dim() {
            return Err(Error::Dimension(
                "dropout channel and transition matrix disagree on K".into(),
            ));
        }
        Ok(())
    }
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

fn rows_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Validation(format!("{}: ragged rows", what)));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

#[derive(Debug, Serialize, Deserialize)]
struct LdsDoc {
    mu0: Vec<f64>,
    sigma0: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    r_diag: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MissDoc {
    b: Vec<f64>,
    phi: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    eta: Vec<Vec<f64>>,
    w_miss: f64,
    variance_mode: VarianceMode,
    linearize_at: LinearizeAt,
}

/// On-disk model document.
#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    state_dim: usize,
    obs_dim: usize,
    lds: LdsDoc,
    missingness: MissDoc,
    mnar_enabled: bool,
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, &to_doc(params))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let file = BufReader::new(File::open(path)?);
    let doc: ModelDoc = serde_json::from_reader(file)?;
    params_from_doc(doc)
}

pub fn model_from_json(json: &str) -> Result<ModelParams> {
    let doc: ModelDoc = serde_json::from_str(json)?;
    params_from_doc(doc)
}

pub fn model_to_json(params: &ModelParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_doc(params))?)
}

fn to_doc(params: &ModelParams) -> ModelDoc {
    ModelDoc {
        state_dim: params.state_dim(),
        obs_dim: params.obs_dim(),
        lds: LdsDoc {
            mu0: params.lds.mu0.iter().cloned().collect(),
            sigma0: mat_rows(&params.lds.sigma0),
            a: mat_rows(&params.lds.a),
            q: mat_rows(&params.lds.q),
            c: mat_rows(&params.lds.c),
            r_diag: params.lds.r_diag.iter().cloned().collect(),
        },
        missingness: MissDoc {
            b: params.miss.b.iter().cloned().collect(),
            phi: mat_rows(&params.miss.phi),
            psi: mat_rows(&params.miss.psi),
            eta: mat_rows(&params.miss.eta),
            w_miss: params.miss.w_miss,
            variance_mode: params.miss.variance_mode,
            linearize_at: params.miss.linearize_at,
        },
        mnar_enabled: params.mnar_enabled,
    }
}

fn params_from_doc(doc: ModelDoc) -> Result<ModelParams> {
    let lds = LdsParams {
        mu0: DVector::from_vec(doc.lds.mu0),
        sigma0: rows_mat(&doc.lds.sigma0, "sigma0")?,
        a: rows_mat(&doc.lds.a, "a")?,
        q: rows_mat(&doc.lds.q, "q")?,
        c: rows_mat(&doc.lds.c, "c")?,
        r_diag: DVector::from_vec(doc.lds.r_diag),
    };
    let miss = MissingnessParams {
        b: DVector::from_vec(doc.missingness.b),
        phi: rows_mat(&doc.missingness.phi, "phi")?,
        psi: rows_mat(&doc.missingness.psi, "psi")?,
        eta: rows_mat(&doc.missingness.eta, "eta")?,
        w_miss: doc.missingness.w_miss,
        variance_mode: doc.missingness.variance_mode,
        linearize_at: doc.missingness.linearize_at,
    };
    let params = ModelParams { lds, miss, mnar_enabled: doc.mnar_enabled };
    params.validate()?;
    if params.state_dim() != doc.state_dim || params.obs_dim() != doc.obs_dim {
        return Err(Error::Validation("model document dims disagree with matrices".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ModelParams {
        let lds = LdsParams {
            mu0: DVector::from_row_slice(&[0.1, -0.2]),
            sigma0: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.8]),
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.05, 0.85]),
            q: DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]),
            c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]),
            r_diag: DVector::from_row_slice(&[0.2, 0.3, 0.4]),
        };
        let mut miss = MissingnessParams::zeroed(3, 2, 4, 0);
        miss.b = DVector::from_row_slice(&[-2.0, -1.5, -3.0]);
        miss.phi[(0, 1)] = 0.7;
        ModelParams { lds, miss, mnar_enabled: true }
    }

    #[test]
    fn json_round_trip_preserves_params() {
        let params = small_params();
        let json = model_to_json(&params).unwrap();
        let back = model_from_json(&json).unwrap();
        assert_eq!(params, back);
        // row-major nested arrays in the document
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["lds"]["c"][1][0], serde_json::json!(0.5));
        assert_eq!(v["state_dim"], serde_json::json!(2));
    }

    #[test]
    fn file_round_trip() {
        let params = small_params();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&params, f.path()).unwrap();
        let back = load_model(f.path()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn validation_rejects_mismatched_dims() {
        let mut params = small_params();
        params.miss.b = DVector::zeros(2);
        params.miss.phi = DMatrix::zeros(2, 2);
        params.miss.psi = DMatrix::zeros(2, 4);
        params.miss.eta = DMatrix::zeros(2, 0);
        assert!(params.validate().is_err());
    }
}
