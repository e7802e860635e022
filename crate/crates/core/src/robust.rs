//! Large-deviation tail exponents and worst-case mean-square growth bounds
//! from a convex rate `Υ(θ)`.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::freqrate::{classical_rate, qef_rate, rate_derivative_at_zero, RateConfig};
use crate::model::{margin_root, GridConfig, SpectralSource};

/// A rate curve with its slope at the origin.
pub trait RateFunction: Sync {
    fn rate(&self, theta: f64) -> Result<f64>;
    fn slope_at_zero(&self) -> Result<f64>;

    /// The rate together with an estimate of its absolute error.
    fn rate_with_error(&self, theta: f64) -> Result<(f64, f64)> {
        Ok((self.rate(theta)?, 0.0))
    }
}

/// `Υ` (or the classical `Υ*`) from the frequency-domain integral.
pub struct FrequencyRate<'a> {
    pub src: &'a dyn SpectralSource,
    pub cfg: RateConfig,
    pub classical: bool,
}

impl<'a> FrequencyRate<'a> {
    /// Rates inside an already certified range, so the per-point
    /// admissibility scan is skipped.
    pub fn certified(src: &'a dyn SpectralSource, classical: bool) -> Self {
        Self {
            src,
            cfg: RateConfig {
                check_admissibility: false,
                ..RateConfig::default()
            },
            classical,
        }
    }
}

impl RateFunction for FrequencyRate<'_> {
    fn rate(&self, theta: f64) -> Result<f64> {
        Ok(self.rate_with_error(theta)?.0)
    }

    fn rate_with_error(&self, theta: f64) -> Result<(f64, f64)> {
        let r = if self.classical {
            classical_rate(self.src, theta, &self.cfg)?
        } else {
            qef_rate(self.src, theta, &self.cfg)?
        };
        Ok((r.value, r.est_quadrature_error))
    }

    fn slope_at_zero(&self) -> Result<f64> {
        Ok(rate_derivative_at_zero(self.src, &self.cfg)?.value)
    }
}

/// An explicit rate closure with a known slope at zero.
pub struct ClosureRate<F> {
    pub f: F,
    pub slope: f64,
}

impl<F: Fn(f64) -> Result<f64> + Sync> RateFunction for ClosureRate<F> {
    fn rate(&self, theta: f64) -> Result<f64> {
        (self.f)(theta)
    }

    fn slope_at_zero(&self) -> Result<f64> {
        Ok(self.slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeLimit {
    /// `0.999` of the admissibility margin root.
    Admissibility { root: f64 },
    /// No root below the search cap.
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaRange {
    pub max: f64,
    pub limit: RangeLimit,
}

impl ThetaRange {
    pub fn new(max: f64) -> Result<Self> {
        if !(max > 0.0 && max.is_finite()) {
            return Err(Error::invalid("theta_max", "must be positive and finite"));
        }
        Ok(Self {
            max,
            limit: RangeLimit::Cap,
        })
    }

    /// `θ_max = 0.999·θ_root`, or `theta_hi` when the margin stays
    /// positive up to it.
    pub fn admissible(src: &dyn SpectralSource, theta_hi: f64, grid: &GridConfig) -> Result<Self> {
        match margin_root(src, theta_hi, grid)? {
            Some(root) => Ok(Self {
                max: 0.999 * root,
                limit: RangeLimit::Admissibility { root },
            }),
            None => Self::new(theta_hi),
        }
    }
}

struct Memo<'a> {
    rate: &'a dyn RateFunction,
    seen: HashMap<u64, (f64, f64)>,
}

impl<'a> Memo<'a> {
    fn new(rate: &'a dyn RateFunction) -> Self {
        Self {
            rate,
            seen: HashMap::new(),
        }
    }

    fn eval(&mut self, theta: f64) -> Result<f64> {
        Ok(self.eval_with_error(theta)?.0)
    }

    fn eval_with_error(&mut self, theta: f64) -> Result<(f64, f64)> {
        if let Some(&v) = self.seen.get(&theta.to_bits()) {
            return Ok(v);
        }
        let v = self.rate.rate_with_error(theta)?;
        self.seen.insert(theta.to_bits(), v);
        Ok(v)
    }
}

/// Relative width of the lower end of the search interval.
const LOWER_REL: f64 = 1e-9;
/// Terminal bracket width in `ln θ`.
const LOG_TOL: f64 = 1e-10;

/// Golden-section minimum of a unimodal `g` on `[lo, hi]`, searched in
/// `ln θ`. Returns `(θ, g(θ))`; the endpoints are compared at the end.
fn golden_min_log(g: &mut dyn FnMut(f64) -> Result<f64>, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = g(c.exp())?;
    let mut fd = g(d.exp())?;
    while b - a > LOG_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = g(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = g(d.exp())?;
        }
    }
    let mut best = if fc <= fd { (c.exp(), fc) } else { (d.exp(), fd) };
    for x in [lo, hi] {
        let v = g(x)?;
        if v < best.1 {
            best = (x, v);
        }
    }
    Ok(best)
}

fn at_upper(theta: f64, range: &ThetaRange) -> bool {
    (theta.ln() - range.max.ln()).abs() < 1e3 * LOG_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBound {
    pub alpha: f64,
    /// `sup_θ (αθ − Υ(θ))`
    pub exponent: f64,
    pub argmax_theta: f64,
    pub at_boundary: bool,
    /// Smallest exponent distinguishable from zero: the rate error at the
    /// maximizer plus the rounding of `αθ − Υ(θ)`. Smaller suprema are
    /// reported as zero.
    pub resolution: f64,
}

/// Legendre-type tail exponent over `[0, θ_max]`.
pub fn tail_exponent(rate: &dyn RateFunction, alpha: f64, range: &ThetaRange) -> Result<TailBound> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", "must be positive and finite"));
    }
    // αθ − Υ(θ) is concave and vanishes at zero.
    if alpha <= rate.slope_at_zero()? {
        return Ok(TailBound {
            alpha,
            exponent: 0.0,
            argmax_theta: 0.0,
            at_boundary: false,
            resolution: 0.0,
        });
    }
    let mut memo = Memo::new(rate);
    let (theta, neg) = golden_min_log(
        &mut |t: f64| memo.eval(t).map(|v| v - alpha * t),
        LOWER_REL * range.max,
        range.max,
    )?;
    let (_, err) = memo.eval_with_error(theta)?;
    let resolution = err + 16.0 * f64::EPSILON * alpha * theta;
    let exponent = if -neg > resolution { -neg } else { 0.0 };
    Ok(TailBound {
        alpha,
        exponent,
        argmax_theta: theta,
        at_boundary: at_upper(theta, range),
        resolution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorstCaseBound {
    pub epsilon: f64,
    /// `2·inf_θ (Υ(θ) + ε)/θ`
    pub bound: f64,
    /// `None` when the infimum is the limit `θ → 0⁺`.
    pub argmin_theta: Option<f64>,
    pub limit_at_zero: bool,
    pub at_boundary: bool,
}

/// Worst-case growth rate of the mean-square cost under a relative-entropy
/// budget `ε` per unit time.
pub fn worst_case_bound(rate: &dyn RateFunction, epsilon: f64, range: &ThetaRange) -> Result<WorstCaseBound> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", "must be finite and nonnegative"));
    }
    if epsilon == 0.0 {
        // Υ(θ)/θ is nondecreasing for convex Υ with Υ(0) = 0.
        return Ok(WorstCaseBound {
            epsilon,
            bound: 2.0 * rate.slope_at_zero()?,
            argmin_theta: None,
            limit_at_zero: true,
            at_boundary: false,
        });
    }
    let mut memo = Memo::new(rate);
    let mut h = |t: f64| memo.eval(t).map(|v| (v + epsilon) / t);
    let (theta, val) = golden_min_log(&mut h, LOWER_REL * range.max, range.max)?;
    Ok(WorstCaseBound {
        epsilon,
        bound: 2.0 * val,
        argmin_theta: Some(theta),
        limit_at_zero: false,
        at_boundary: at_upper(theta, range),
    })
}
