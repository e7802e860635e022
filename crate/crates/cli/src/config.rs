use std::path::{Path, PathBuf};
use std::str::FromStr;

use qef_core::freqrate::{RateConfig, RateMethod};
use qef_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Validate,
    Rate,
    RateCurve,
    Horizon,
    Montecarlo,
    Tail,
    WorstCase,
    AppendixCheck,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Validate,
        Command::Rate,
        Command::RateCurve,
        Command::Horizon,
        Command::Montecarlo,
        Command::Tail,
        Command::WorstCase,
        Command::AppendixCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Rate => "rate",
            Command::RateCurve => "rate-curve",
            Command::Horizon => "horizon",
            Command::Montecarlo => "montecarlo",
            Command::Tail => "tail",
            Command::WorstCase => "worst-case",
            Command::AppendixCheck => "appendix-check",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Command::AppendixCheck
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid("command", format!("unknown command `{s}`")))
    }
}

/// Largest number of points a grid may expand to.
pub const MAX_GRID_POINTS: usize = 100_000;

/// Explicit list or `{start, stop, points}` (inclusive, uniform).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Uniform { start: f64, stop: f64, points: usize },
}

impl Grid {
    pub fn values(&self, field: &str) -> Result<Vec<f64>> {
        let v = match self {
            Grid::List(v) => v.clone(),
            Grid::Uniform { start, stop, points } => {
                if *points < 2 {
                    return Err(Error::invalid(field, "uniform grid needs at least two points"));
                }
                if *points > MAX_GRID_POINTS {
                    return Err(Error::invalid(field, format!("at most {MAX_GRID_POINTS} points")));
                }
                (0..*points)
                    .map(|k| start + (stop - start) * k as f64 / (*points - 1) as f64)
                    .collect()
            }
        };
        if v.is_empty() {
            return Err(Error::invalid(field, "grid is empty"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(field, "grid values must be finite"));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(field, "grid must be strictly increasing"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sup_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_panels: Option<usize>,
}

impl Tolerances {
    pub fn rate_config(&self) -> Result<RateConfig> {
        let mut cfg = RateConfig::default();
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::invalid(field, "must be positive and finite"))
            }
        };
        if let Some(v) = self.abs_tol {
            cfg.quad.abs_tol = pos("tolerances.abs_tol", v)?;
        }
        if let Some(v) = self.rel_tol {
            cfg.quad.rel_tol = pos("tolerances.rel_tol", v)?;
        }
        if let Some(v) = self.tail_tol {
            cfg.tail_tol = pos("tolerances.tail_tol", v)?;
        }
        if let Some(v) = self.sup_tol {
            cfg.grid.sup_tol = pos("tolerances.sup_tol", v)?;
        }
        if let Some(v) = self.max_panels {
            if v == 0 {
                return Err(Error::invalid("tolerances.max_panels", "must be positive"));
            }
            cfg.quad.max_panels = v;
        }
        Ok(cfg)
    }
}

/// Everything a run needs. Fields not used by a command are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<Grid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<RateMethod>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(rename = "T_sweep", skip_serializing_if = "Option::is_none")]
    pub horizon_sweep: Option<Grid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trunc: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quad_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigenpairs_path: Option<PathBuf>,
}

fn serde_field(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    ["unknown field `", "missing field `"]
        .iter()
        .find_map(|p| msg.split(p).nth(1).and_then(|r| r.split('`').next()))
        .unwrap_or("config")
        .to_string()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParams {
            field: serde_field(&e),
            reason: e.to_string(),
        })
    }

    /// Reads a config file; a relative `model_path` is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.model_path, path.parent()) {
            if m.is_relative() {
                cfg.model_path = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// The configuration echoed in result documents: output locations are
    /// dropped, since they do not affect the numbers.
    pub fn echo(&self) -> Self {
        Self {
            output_path: None,
            csv_path: None,
            eigenpairs_path: None,
            ..self.clone()
        }
    }

    pub fn rate_config(&self) -> Result<RateConfig> {
        self.tolerances.clone().unwrap_or_default().rate_config()
    }

    pub fn require_theta(&self) -> Result<f64> {
        let t = self
            .theta
            .ok_or_else(|| Error::invalid("theta", "required for this command"))?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::invalid("theta", "must be finite and nonnegative"));
        }
        Ok(t)
    }

    pub fn theta_values(&self) -> Result<Vec<f64>> {
        let g = self
            .theta_grid
            .as_ref()
            .ok_or_else(|| Error::invalid("theta_grid", "required for this command"))?;
        let v = g.values("theta_grid")?;
        if v[0] < 0.0 {
            return Err(Error::invalid("theta_grid", "values must be nonnegative"));
        }
        Ok(v)
    }

    /// Horizons for the `horizon` command: the sweep, or the single `T`.
    pub fn horizons(&self) -> Result<Vec<f64>> {
        let v = match (&self.horizon_sweep, self.horizon) {
            (Some(g), _) => g.values("T_sweep")?,
            (None, Some(t)) => vec![t],
            (None, None) => return Err(Error::invalid("T", "required for this command")),
        };
        if v[0] <= 0.0 {
            return Err(Error::invalid(if self.horizon_sweep.is_some() { "T_sweep" } else { "T" }, "horizons must be positive"));
        }
        Ok(v)
    }

    pub fn positive(&self, field: &str, v: Option<f64>, default: Option<f64>) -> Result<f64> {
        let x = v
            .or(default)
            .ok_or_else(|| Error::invalid(field, "required for this command"))?;
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::invalid(field, "must be positive and finite"));
        }
        Ok(x)
    }
}
