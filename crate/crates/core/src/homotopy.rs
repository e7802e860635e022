//! Growth rate by continuation in θ.
//!
//! For each frequency the logarithmic derivative `U_θ = −D_θ⁻¹ ∂_θ D_θ`
//! solves `U' = Ψ² + U²` from `U_0 = Φ`, and `∫_0^θ Tr U = −ln det D_θ`.
//! The integrator advances `V = U − Φ` together with `w = ∫ Tr V`, so that
//! `w(θ) = −ln det D_θ − θ Tr Φ` is obtained without cancellation and plugs
//! into the same tail-subtracted frequency integral as [`crate::freqrate`].

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::freqrate::{d_matrix, qef_rate, RateConfig, RateMethod, RateResult};
use crate::matfun::{frobenius_c, CMatrix, ScalarFn, SkewSpectrum};
use crate::model::{SpectralSample, SpectralSource};
use crate::quad::{gk21_combine, gk21_nodes, GK_POINTS};

#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    /// Local error target per unit θ for the step-doubling controller.
    pub tol_per_unit: f64,
    /// `‖U‖_F` above which the path is declared to blow up.
    pub ceiling: f64,
    /// Largest relative anti-Hermitian part tolerated before re-Hermitizing.
    pub drift_limit: f64,
    pub max_steps: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            tol_per_unit: 1e-9,
            ceiling: 1e8,
            drift_limit: 1e-6,
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiPath {
    pub lambda: f64,
    pub theta_nodes: Vec<f64>,
    pub u_nodes: Vec<CMatrix>,
    /// `∫_0^θ Tr(U − Φ)` at each node.
    pub w_nodes: Vec<f64>,
    /// Accumulated step-doubling error estimate.
    pub max_step_error: f64,
    pub max_drift: f64,
}

impl RiccatiPath {
    /// `−ln det D_θ` at the last node.
    pub fn log_det_neg(&self, phi_trace: f64) -> f64 {
        self.w_nodes.last().copied().unwrap_or(0.0)
            + self.theta_nodes.last().copied().unwrap_or(0.0) * phi_trace
    }
}

/// `U_θ = (cos θΨ − θΦ sinc θΨ)⁻¹ (Φ cos θΨ + Ψ sin θΨ)`, the form extended
/// by continuity to singular `Ψ`.
pub fn u_closed_form(sample: &SpectralSample, theta: f64) -> Result<CMatrix> {
    let spec = SkewSpectrum::new(&sample.psi, 1e-9)?;
    let cos = spec.apply(ScalarFn::Cos, theta);
    let sinc = spec.apply(ScalarFn::Sinc, theta);
    let sin = spec.sin(theta);
    let d = &cos - (&sample.phi * sinc).scale(theta);
    let rhs = &sample.phi * &cos + &sample.psi * sin;
    let lu = d.lu();
    let u = lu.solve(&rhs).ok_or(Error::SingularPencil { theta })?;
    if !u.iter().all(|z| z.is_finite()) {
        return Err(Error::SingularPencil { theta });
    }
    Ok(u)
}

fn trace_re(m: &CMatrix) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

struct Rhs<'a> {
    phi: &'a CMatrix,
    psi2: CMatrix,
}

impl Rhs<'_> {
    fn eval(&self, v: &CMatrix) -> (CMatrix, f64) {
        let u = self.phi + v;
        (&self.psi2 + &u * &u, trace_re(v))
    }

    fn rk4(&self, v: &CMatrix, h: f64) -> (CMatrix, f64) {
        let (k1, t1) = self.eval(v);
        let (k2, t2) = self.eval(&(v + k1.scale(0.5 * h)));
        let (k3, t3) = self.eval(&(v + k2.scale(0.5 * h)));
        let (k4, t4) = self.eval(&(v + k3.scale(h)));
        let dv = (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
        let dw = (t1 + 2.0 * t2 + 2.0 * t3 + t4) * h / 6.0;
        (v + dv, dw)
    }
}

/// Integrates the Riccati equation from `θ = 0` to `theta_max` with
/// classical RK4 and step doubling.
pub fn integrate_riccati(sample: &SpectralSample, theta_max: f64, cfg: &StepConfig) -> Result<RiccatiPath> {
    if !(theta_max >= 0.0 && theta_max.is_finite()) {
        return Err(Error::invalid("theta", "must be finite and nonnegative"));
    }
    let n = sample.dim();
    let phi = &sample.phi;
    let mut path = RiccatiPath {
        lambda: sample.lambda,
        theta_nodes: vec![0.0],
        u_nodes: vec![phi.clone()],
        w_nodes: vec![0.0],
        max_step_error: 0.0,
        max_drift: 0.0,
    };
    if theta_max == 0.0 {
        return Ok(path);
    }
    let psi2 = hermitize(&(&sample.psi * &sample.psi));
    let rhs = Rhs { phi, psi2 };
    let mut v = CMatrix::zeros(n, n);
    let mut w = 0.0;
    let mut t = 0.0;
    let mut h = theta_max / 8.0;
    let h_min = 1e-13 * theta_max;
    let mut steps = 0;
    while t < theta_max {
        if steps >= cfg.max_steps {
            return Err(Error::BlowUp {
                theta: t,
                norm: frobenius_c(&(phi + &v)),
            });
        }
        steps += 1;
        let last = t + h >= theta_max;
        let h_eff = if last { theta_max - t } else { h };
        let (v1, w1) = rhs.rk4(&v, h_eff);
        let (vh, wh) = rhs.rk4(&v, 0.5 * h_eff);
        let (v2, w2) = rhs.rk4(&vh, 0.5 * h_eff);
        let w2 = wh + w2;
        let scale = frobenius_c(&(phi + &v2)).max(1.0);
        let err = (frobenius_c(&(&v2 - &v1)) / scale).max((w2 - w1).abs()) / 15.0;
        if !err.is_finite() {
            return Err(Error::BlowUp {
                theta: t + h_eff,
                norm: f64::INFINITY,
            });
        }
        let allowed = cfg.tol_per_unit * h_eff;
        if err <= allowed || h_eff <= h_min {
            t = if last { theta_max } else { t + h_eff };
            let drift = frobenius_c(&(&v2 - v2.adjoint())) / (2.0 * scale);
            path.max_drift = path.max_drift.max(drift);
            if drift > cfg.drift_limit {
                return Err(Error::HermitianDrift {
                    drift,
                    limit: cfg.drift_limit,
                });
            }
            v = hermitize(&v2);
            w += w2;
            path.max_step_error += err;
            let u = phi + &v;
            let norm = frobenius_c(&u);
            if norm > cfg.ceiling {
                return Err(Error::BlowUp { theta: t, norm });
            }
            path.theta_nodes.push(t);
            path.u_nodes.push(u);
            path.w_nodes.push(w);
        }
        let factor = if err == 0.0 {
            4.0
        } else {
            (0.9 * (allowed / err).powf(0.25)).clamp(0.2, 4.0)
        };
        h = (h_eff * factor).max(h_min);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HomotopyConfig {
    pub rate: RateConfig,
    pub step: StepConfig,
}


/// Integrates `f` over the panels with Kronrod nodes evaluated in parallel;
/// summation follows panel order.
fn panel_sum<F>(panels: &[(f64, f64)], f: F) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let nodes: Vec<f64> = panels
        .iter()
        .flat_map(|&(a, b)| gk21_nodes(a, b).map(|(x, _)| x))
        .collect();
    let vals: Vec<f64> = nodes.par_iter().map(|&x| f(x)).collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut err = 0.0;
    for (k, &(a, b)) in panels.iter().enumerate() {
        let mut chunk = [0.0; GK_POINTS];
        chunk.copy_from_slice(&vals[k * GK_POINTS..(k + 1) * GK_POINTS]);
        let (v, e) = gk21_combine(a, b, &chunk);
        value += v;
        err += e;
    }
    Ok((value, err))
}

/// `Υ(θ)` from Riccati paths on the frequency panels chosen by
/// [`qef_rate`]; the θ-integral of `Υ'` is carried inside each path.
pub fn rate_via_homotopy(src: &dyn SpectralSource, theta: f64, cfg: &HomotopyConfig) -> Result<RateResult> {
    let freq = qef_rate(src, theta, &cfg.rate)?;
    if theta == 0.0 {
        return Ok(RateResult {
            method: RateMethod::Homotopy,
            ..freq
        });
    }
    let step_err = std::sync::Mutex::new(0.0f64);
    let (value, err) = panel_sum(&freq.panels, |l| {
        let path = integrate_riccati(&src.sample(l)?, theta, &cfg.step)?;
        let mut e = step_err.lock().expect("poisoned");
        *e = e.max(path.max_step_error);
        Ok(*path.w_nodes.last().expect("path has nodes"))
    })?;
    let step_err = step_err.into_inner().expect("poisoned");
    let width = freq.panels.last().map(|p| p.1).unwrap_or(0.0);
    Ok(RateResult {
        theta,
        value: value / (2.0 * PI) + 0.5 * theta * src.covariance_trace()?,
        method: RateMethod::Homotopy,
        est_quadrature_error: err / (2.0 * PI) + freq.tail_bound + step_err * width / (2.0 * PI),
        n_nodes: freq.panels.len() * GK_POINTS,
        ..freq
    })
}

/// `Υ'(θ) = (1/4π) ∫ Tr U_θ(λ) dλ` with the closed-form `U`.
pub fn rate_derivative(src: &dyn SpectralSource, theta: f64, cfg: &HomotopyConfig) -> Result<f64> {
    let freq = qef_rate(src, theta.max(1e-3), &cfg.rate)?;
    let (value, _) = panel_sum(&freq.panels, |l| {
        let s = src.sample(l)?;
        let u = u_closed_form(&s, theta)?;
        Ok(trace_re(&(u - &s.phi)))
    })?;
    Ok(value / (2.0 * PI) + 0.5 * src.covariance_trace()?)
}

/// Largest relative entry of `D'' + DΨ²` by central differences with step `h`.
pub fn second_order_residual(sample: &SpectralSample, theta: f64, h: f64) -> Result<f64> {
    let dm = d_matrix(sample, theta - h)?;
    let d0 = d_matrix(sample, theta)?;
    let dp = d_matrix(sample, theta + h)?;
    let ddd = (&dp - d0.scale(2.0) + &dm).scale(1.0 / (h * h));
    let res = ddd + &d0 * &sample.psi * &sample.psi;
    let scale = frobenius_c(&d0) * frobenius_c(&sample.psi).powi(2) + 1.0;
    Ok(frobenius_c(&res) / scale)
}

/// Relative residual of `U' = Ψ² + U²` with `U'` by central differences.
pub fn riccati_residual(sample: &SpectralSample, theta: f64, h: f64) -> Result<f64> {
    let um = u_closed_form(sample, theta - h)?;
    let u0 = u_closed_form(sample, theta)?;
    let up = u_closed_form(sample, theta + h)?;
    let du = (&up - &um).scale(0.5 / h);
    let rhs = &sample.psi * &sample.psi + &u0 * &u0;
    Ok(frobenius_c(&(du - &rhs)) / (frobenius_c(&rhs) + 1.0))
}

/// Relative gap between `−D⁻¹∂_θD` (central differences) and [`u_closed_form`].
pub fn log_derivative_residual(sample: &SpectralSample, theta: f64, h: f64) -> Result<f64> {
    let dm = d_matrix(sample, theta - h)?;
    let d0 = d_matrix(sample, theta)?;
    let dp = d_matrix(sample, theta + h)?;
    let dd = (&dp - &dm).scale(-0.5 / h);
    let u_fd = d0.lu().solve(&dd).ok_or(Error::SingularPencil { theta })?;
    let u = u_closed_form(sample, theta)?;
    Ok(frobenius_c(&(u_fd - &u)) / (frobenius_c(&u) + 1.0))
}
