//! Infinite-horizon growth rate by frequency-domain quadrature.
//!
//! The integrand `ln det D_θ(λ)` behaves like `−θ Tr Φ(λ)` for large `|λ|`,
//! and `∫ Tr Φ = 2π Tr P(0)` is known exactly. Integrating the remainder
//! `ln det D_θ + θ Tr Φ = O(λ⁻⁴)` lets the truncated tail be certified at a
//! moderate cutoff.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::{
    coshm1, log_det_1p_minus_trace, log_det_real, sinhcm1, CMatrix, HermitianEig, ScalarFn, SkewSpectrum,
};
use crate::model::{admissibility, DecayBound, GridConfig, SpectralSample, SpectralSource};
use crate::quad::{self, AdaptiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    Frequency,
    Homotopy,
    SmallTheta,
    Classical,
}

impl RateMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RateMethod::Frequency => "frequency",
            RateMethod::Homotopy => "homotopy",
            RateMethod::SmallTheta => "small_theta",
            RateMethod::Classical => "classical",
        }
    }
}

impl std::str::FromStr for RateMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency" => Ok(RateMethod::Frequency),
            "homotopy" => Ok(RateMethod::Homotopy),
            "small_theta" => Ok(RateMethod::SmallTheta),
            "classical" => Ok(RateMethod::Classical),
            _ => Err(Error::invalid("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateResult {
    pub theta: f64,
    pub value: f64,
    pub method: RateMethod,
    pub lambda_cut: f64,
    pub n_nodes: usize,
    /// Quadrature error estimate plus the certified tail bound.
    pub est_quadrature_error: f64,
    pub tail_bound: f64,
    pub admissibility_margin: f64,
    /// Panel partition of `[0, lambda_cut]` used by the quadrature.
    #[serde(skip)]
    pub panels: Vec<(f64, f64)>,
}

impl RateResult {
    fn zero(theta: f64, method: RateMethod) -> Self {
        Self {
            theta,
            value: 0.0,
            method,
            lambda_cut: 0.0,
            n_nodes: 0,
            est_quadrature_error: 0.0,
            tail_bound: 0.0,
            admissibility_margin: 1.0,
            panels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RateConfig {
    pub quad: AdaptiveConfig,
    /// Target for the certified tail bound on the rate.
    pub tail_tol: f64,
    pub grid: GridConfig,
    /// Evaluate the admissibility margin before integrating.
    pub check_admissibility: bool,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            quad: AdaptiveConfig {
                abs_tol: 1e-11,
                rel_tol: 1e-11,
                max_panels: 4000,
            },
            tail_tol: 1e-11,
            grid: GridConfig::default(),
            check_admissibility: true,
        }
    }
}

/// `D_θ(λ) = cos(θΨ) − θΦ sinc(θΨ)`.
pub fn d_matrix(sample: &SpectralSample, theta: f64) -> Result<CMatrix> {
    let spec = SkewSpectrum::new(&sample.psi, 1e-9)?;
    Ok(d_from_spectrum(sample, &spec, theta))
}

fn d_from_spectrum(sample: &SpectralSample, spec: &SkewSpectrum, theta: f64) -> CMatrix {
    let cos = spec.apply(ScalarFn::Cos, theta);
    let sinc = spec.apply(ScalarFn::Sinc, theta);
    cos - (&sample.phi * sinc).scale(theta)
}

/// `Re ln det D_θ(λ)`; fails if the imaginary part is not negligible.
pub fn log_det_d(sample: &SpectralSample, theta: f64) -> Result<f64> {
    Ok(log_det_real(&d_matrix(sample, theta)?)?.value)
}

fn trace_re(m: &CMatrix) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

/// `ln(1 − x) + x` without cancellation for small `x`.
fn log1m_plus(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        -x2 * (0.5 + x * (1.0 / 3.0 + x * (0.25 + x * (0.2 + x / 6.0))))
    } else {
        (-x).ln_1p() + x
    }
}

/// Initial breakpoints: `0` then a doubling sequence from `scale/64` to `cut`.
pub fn initial_breakpoints(scale: f64, cut: f64) -> Vec<f64> {
    let mut bp = vec![0.0];
    let mut x = scale / 64.0;
    while x < cut {
        bp.push(x);
        x *= 2.0;
    }
    bp.push(cut);
    bp
}

/// Certified bound on `(1/2π)∫_{cut}^∞ |ln det D_θ + θ Tr Φ| dλ`, valid
/// once `θ ‖Φ‖ ≤ 1/2` beyond `cut`.
pub fn quantum_tail_bound(d: &DecayBound, n: usize, theta: f64, cut: f64) -> f64 {
    let n = n as f64;
    let (cp, cs) = (d.phi, d.psi);
    let t2 = theta * theta;
    n * (t2 * (0.5 * cs * cs + cp * cp) / (3.0 * cut.powi(3))
        + t2 * theta * cp * cs * cs / (15.0 * cut.powi(5)))
        / (2.0 * PI)
}

/// Smallest cutoff, at most `1e12·scale`, where `bound(cut) ≤ tol`.
fn pick_cut(
    d: &DecayBound,
    theta: f64,
    scale: f64,
    tol: f64,
    bound: impl Fn(f64) -> f64,
) -> Result<f64> {
    let floor = d.from.max((2.0 * theta * d.phi).sqrt()).max(4.0 * scale);
    let top = 1e12 * scale.max(1.0);
    let mut cut = floor;
    while bound(cut) > tol {
        cut *= 1.25;
        if cut > top {
            return Err(Error::TailBoundFailure {
                tol,
                required_cut: cut,
            });
        }
    }
    Ok(cut)
}

struct Pieces {
    value: f64,
    err: f64,
    panels: Vec<(f64, f64)>,
    n_evals: usize,
}

fn integrate_half_line<F>(f: F, scale: f64, cut: f64, cfg: &AdaptiveConfig) -> Result<Pieces>
where
    F: FnMut(f64) -> Result<f64>,
{
    let r = quad::adaptive(f, &initial_breakpoints(scale, cut), cfg)?;
    Ok(Pieces {
        value: r.value,
        err: r.est_error,
        panels: r.panels,
        n_evals: r.n_evals,
    })
}

fn margin_for(src: &dyn SpectralSource, theta: f64, cfg: &RateConfig, classical: bool) -> Result<f64> {
    if !cfg.check_admissibility {
        return Ok(f64::NAN);
    }
    let a = admissibility(src, theta, &cfg.grid)?;
    let margin = if classical {
        1.0 - theta * a.sup_classical
    } else {
        a.margin
    };
    if margin <= 0.0 {
        return Err(Error::NotAdmissible { theta, margin });
    }
    Ok(margin)
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() && theta >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("theta", "must be finite and nonnegative"))
    }
}

/// Integrand of the truncated rate integral, `ln det D_θ(λ) + θ Tr Φ(λ)`.
pub fn rate_integrand(src: &dyn SpectralSource, theta: f64, lambda: f64) -> Result<f64> {
    let s = src.sample(lambda)?;
    // With D = I + E, the integrand is [ln det(I + E) − Tr E] + Tr(E + θΦ),
    // and E + θΦ = (cos θΨ − I) − θΦ(sinc θΨ − I). Both pieces keep their
    // relative accuracy when D is close to I.
    let spec = SkewSpectrum::new(&s.psi, 1e-9)?;
    let cm1 = spec.map_real(|h| coshm1(theta * h));
    let sm1 = spec.map_real(|h| sinhcm1(theta * h));
    let phi_sm1 = &s.phi * &sm1;
    let e = &cm1 - (&s.phi + &phi_sm1).scale(theta);
    Ok(log_det_1p_minus_trace(&e)? + trace_re(&cm1) - theta * trace_re(&phi_sm1))
}

/// `Υ(θ) = −(1/4π) ∫ ln det D_θ(λ) dλ`.
pub fn qef_rate(src: &dyn SpectralSource, theta: f64, cfg: &RateConfig) -> Result<RateResult> {
    check_theta(theta)?;
    if theta == 0.0 {
        return Ok(RateResult::zero(theta, RateMethod::Frequency));
    }
    let margin = margin_for(src, theta, cfg, false)?;
    let d = src.decay()?;
    let n = src.dim();
    let scale = src.frequency_scale();
    let cut = pick_cut(&d, theta, scale, cfg.tail_tol, |c| {
        quantum_tail_bound(&d, n, theta, c)
    })?;
    let tail = quantum_tail_bound(&d, n, theta, cut);
    let p = integrate_half_line(|l| rate_integrand(src, theta, l), scale, cut, &cfg.quad)?;
    let value = -p.value / (2.0 * PI) + 0.5 * theta * src.covariance_trace()?;
    Ok(RateResult {
        theta,
        value,
        method: RateMethod::Frequency,
        lambda_cut: cut,
        n_nodes: p.n_evals,
        est_quadrature_error: p.err / (2.0 * PI) + tail,
        tail_bound: tail,
        admissibility_margin: margin,
        panels: p.panels,
    })
}

fn classical_integrand(sample: &SpectralSample, theta: f64) -> Result<f64> {
    let eig = HermitianEig::new(&sample.phi)?;
    Ok(eig.eigenvalues.iter().map(|&p| log1m_plus(theta * p)).sum())
}

/// `Υ*(θ) = −(1/4π) ∫ ln det(I − θΦ(λ)) dλ`, ignoring `Ψ`.
pub fn classical_rate(src: &dyn SpectralSource, theta: f64, cfg: &RateConfig) -> Result<RateResult> {
    check_theta(theta)?;
    if theta == 0.0 {
        return Ok(RateResult::zero(theta, RateMethod::Classical));
    }
    let margin = margin_for(src, theta, cfg, true)?;
    let d = src.decay()?;
    let n = src.dim() as f64;
    let scale = src.frequency_scale();
    let bound = |c: f64| n * theta * theta * d.phi * d.phi / (3.0 * c.powi(3)) / (2.0 * PI);
    let cut = pick_cut(&d, theta, scale, cfg.tail_tol, bound)?;
    let tail = bound(cut);
    let p = integrate_half_line(
        |l| classical_integrand(&src.sample(l)?, theta),
        scale,
        cut,
        &cfg.quad,
    )?;
    let value = -p.value / (2.0 * PI) + 0.5 * theta * src.covariance_trace()?;
    Ok(RateResult {
        theta,
        value,
        method: RateMethod::Classical,
        lambda_cut: cut,
        n_nodes: p.n_evals,
        est_quadrature_error: p.err / (2.0 * PI) + tail,
        tail_bound: tail,
        admissibility_margin: margin,
        panels: p.panels,
    })
}

/// `Tr((I − θΦ)⁻¹(I − θΦ/3)Ψ²)`; real and nonpositive.
pub fn small_theta_correction(sample: &SpectralSample, theta: f64) -> Result<f64> {
    let eig = HermitianEig::new(&sample.phi)?;
    let weight = eig.map_complex(|p| {
        Complex64::new((1.0 - theta * p / 3.0) / (1.0 - theta * p), 0.0)
    });
    let psi2 = &sample.psi * &sample.psi;
    let psi2 = (&psi2 + psi2.adjoint()).scale(0.5);
    Ok(trace_re(&(weight * psi2)))
}

/// Second-order expansion `Υ*(θ) + (θ²/8π)∫ Tr((I−θΦ)⁻¹(I−θΦ/3)Ψ²) dλ`.
pub fn small_theta_rate(src: &dyn SpectralSource, theta: f64, cfg: &RateConfig) -> Result<RateResult> {
    let base = classical_rate(src, theta, cfg)?;
    if theta == 0.0 || src.is_classical() {
        return Ok(RateResult {
            method: RateMethod::SmallTheta,
            ..base
        });
    }
    let d = src.decay()?;
    let n = src.dim() as f64;
    let scale = src.frequency_scale();
    let t2 = theta * theta;
    let bound = |c: f64| t2 * 2.0 * n * d.psi * d.psi / (3.0 * c.powi(3)) / (4.0 * PI);
    let cut = pick_cut(&d, theta, scale, cfg.tail_tol, bound)?;
    let tail = bound(cut);
    let p = integrate_half_line(
        |l| small_theta_correction(&src.sample(l)?, theta),
        scale,
        cut,
        &cfg.quad,
    )?;
    Ok(RateResult {
        theta,
        value: base.value + t2 * p.value / (4.0 * PI),
        method: RateMethod::SmallTheta,
        lambda_cut: base.lambda_cut.max(cut),
        n_nodes: base.n_nodes + p.n_evals,
        est_quadrature_error: base.est_quadrature_error + t2 * p.err / (4.0 * PI) + tail,
        tail_bound: base.tail_bound + tail,
        admissibility_margin: base.admissibility_margin,
        panels: base.panels,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DerivativeAtZero {
    /// `½ Tr P(0)`
    pub value: f64,
    /// `(1/4π) ∫ Tr Φ dλ` by quadrature.
    pub quadrature: f64,
    pub est_error: f64,
}

/// `Υ'(0) = ½ Tr(SΓSᵀ)`, cross-checked against `(1/4π)∫ Tr Φ dλ`.
pub fn rate_derivative_at_zero(src: &dyn SpectralSource, cfg: &RateConfig) -> Result<DerivativeAtZero> {
    let value = 0.5 * src.covariance_trace()?;
    let d = src.decay()?;
    let n = src.dim() as f64;
    let scale = src.frequency_scale();
    let tol = 1e-9 * value.abs().max(1.0);
    let bound = |c: f64| n * d.phi / c / (2.0 * PI);
    let cut = pick_cut(&d, 0.0, scale, tol, bound)?;
    let tail = bound(cut);
    let p = integrate_half_line(
        |l| Ok(trace_re(&src.sample(l)?.phi)),
        scale,
        cut,
        &AdaptiveConfig {
            abs_tol: 1e-12,
            rel_tol: 1e-12,
            ..cfg.quad
        },
    )?;
    let quadrature = p.value / (2.0 * PI);
    let est_error = p.err / (2.0 * PI) + tail;
    let gap = (value - quadrature).abs();
    if gap > 10.0 * est_error + 1e-12 {
        return Err(Error::QuadratureFailure {
            est_error: gap,
            panels: p.panels.len(),
        });
    }
    Ok(DerivativeAtZero {
        value,
        quadrature,
        est_error,
    })
}
