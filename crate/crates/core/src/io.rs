//! Model files.
//!
//! A model is a JSON object. Matrices are `{"rows": r, "cols": c, "data":
//! [...]}` with row-major data. Three modes are accepted:
//!
//! ```json
//! {"mode": "oqho", "theta": M, "r_matrix": M, "m_matrix": M, "s_matrix": M}
//! {"mode": "explicit_ss", "a_matrix": M, "b_matrix": M, "s_matrix": M, "theta_matrix": M}
//! {"mode": "scalar_ou", "rate": 1.0, "variance": 1.0}
//! ```
//!
//! `mode` defaults to `oqho`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::RMatrix;
use crate::model::{OqhoParams, ScalarOu, SpectralSource, StateSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &RMatrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self, field: &str) -> Result<RMatrix> {
        let len = self.rows.checked_mul(self.cols);
        if len != Some(self.data.len()) {
            return Err(Error::invalid(
                field,
                format!("{}x{} matrix needs {} entries, got {}", self.rows, self.cols,
                    len.map_or("too many".to_string(), |l| l.to_string()), self.data.len()),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(field, "entries must be finite"));
        }
        Ok(RMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelFile {
    Oqho {
        theta: MatrixJson,
        r_matrix: MatrixJson,
        m_matrix: MatrixJson,
        s_matrix: MatrixJson,
    },
    ExplicitSs {
        a_matrix: MatrixJson,
        b_matrix: MatrixJson,
        s_matrix: MatrixJson,
        theta_matrix: MatrixJson,
    },
    ScalarOu {
        rate: f64,
        variance: f64,
    },
}

/// A validated model ready for computation.
#[derive(Debug, Clone)]
pub enum System {
    Oscillator(StateSpace),
    Ou(ScalarOu),
}

impl System {
    pub fn source(&self) -> &dyn SpectralSource {
        match self {
            System::Oscillator(ss) => ss,
            System::Ou(ou) => ou,
        }
    }

    /// Time-domain commands need a state-space realization.
    pub fn state_space(&self) -> Result<&StateSpace> {
        match self {
            System::Oscillator(ss) => Ok(ss),
            System::Ou(_) => Err(Error::invalid("mode", "this computation needs an oscillator model")),
        }
    }
}

fn field_error(err: serde_json::Error) -> Error {
    let msg = err.to_string();
    // serde reports missing and unknown fields with the name in backticks.
    let field = ["missing field `", "unknown field `", "unknown variant `"]
        .iter()
        .find_map(|p| msg.split(p).nth(1).and_then(|rest| rest.split('`').next()))
        .map(|f| if msg.contains("unknown variant") { "mode".to_string() } else { f.to_string() });
    Error::InvalidParams {
        field: field.unwrap_or_else(|| "model".into()),
        reason: msg,
    }
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(field_error)?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("mode").or_insert_with(|| "oqho".into());
        } else {
            return Err(Error::invalid("model", "expected a JSON object"));
        }
        serde_json::from_value(value).map_err(field_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid("model_path", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_params(p: &OqhoParams) -> Self {
        ModelFile::Oqho {
            theta: MatrixJson::from_matrix(&p.theta),
            r_matrix: MatrixJson::from_matrix(&p.r),
            m_matrix: MatrixJson::from_matrix(&p.m),
            s_matrix: MatrixJson::from_matrix(&p.s),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn mode(&self) -> &'static str {
        match self {
            ModelFile::Oqho { .. } => "oqho",
            ModelFile::ExplicitSs { .. } => "explicit_ss",
            ModelFile::ScalarOu { .. } => "scalar_ou",
        }
    }

    pub fn build(&self) -> Result<System> {
        match self {
            ModelFile::Oqho {
                theta,
                r_matrix,
                m_matrix,
                s_matrix,
            } => {
                let p = OqhoParams {
                    theta: theta.to_matrix("theta")?,
                    r: r_matrix.to_matrix("r_matrix")?,
                    m: m_matrix.to_matrix("m_matrix")?,
                    s: s_matrix.to_matrix("s_matrix")?,
                };
                Ok(System::Oscillator(StateSpace::build(&p)?))
            }
            ModelFile::ExplicitSs {
                a_matrix,
                b_matrix,
                s_matrix,
                theta_matrix,
            } => Ok(System::Oscillator(StateSpace::explicit(
                a_matrix.to_matrix("a_matrix")?,
                b_matrix.to_matrix("b_matrix")?,
                s_matrix.to_matrix("s_matrix")?,
                theta_matrix.to_matrix("theta_matrix")?,
            )?)),
            ModelFile::ScalarOu { rate, variance } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::invalid("rate", "must be positive and finite"));
                }
                if !(*variance > 0.0 && variance.is_finite()) {
                    return Err(Error::invalid("variance", "must be positive and finite"));
                }
                Ok(System::Ou(ScalarOu {
                    rate: *rate,
                    variance: *variance,
                }))
            }
        }
    }
}
