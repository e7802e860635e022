//! One-dimensional quadrature: adaptive 21-point Gauss–Kronrod on a panel
//! partition and Golub–Welsch Gauss–Hermite rules.

use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matfun::HermitianEig;

#[allow(clippy::excessive_precision)]
const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.000000000000000000000000000000000,
];

#[allow(clippy::excessive_precision)]
const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077958109831074,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];

/// Number of integrand evaluations per Gauss–Kronrod panel.
pub const GK_POINTS: usize = 21;

/// The 21 abscissae of the Kronrod rule mapped onto `[a, b]`, with weights.
pub fn gk21_nodes(a: f64, b: f64) -> [(f64, f64); GK_POINTS] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); GK_POINTS];
    out[0] = (c, WGK[10] * h);
    for j in 0..10 {
        out[1 + 2 * j] = (c - h * XGK[j], WGK[j] * h);
        out[2 + 2 * j] = (c + h * XGK[j], WGK[j] * h);
    }
    out
}

/// Kronrod estimate and error estimate from 21 integrand values laid out
/// as in [`gk21_nodes`].
pub fn gk21_combine(a: f64, b: f64, values: &[f64; GK_POINTS]) -> (f64, f64) {
    let (v, e, _) = gk21_combine_abs(a, b, values);
    (v, e)
}

/// As [`gk21_combine`], also returning the Kronrod estimate of `∫|f|`.
pub fn gk21_combine_abs(a: f64, b: f64, values: &[f64; GK_POINTS]) -> (f64, f64, f64) {
    let h = 0.5 * (b - a);
    let fc = values[0];
    let mut kron = fc * WGK[10];
    let mut gauss = 0.0;
    let mut resabs = kron.abs();
    for j in 0..10 {
        let f1 = values[1 + 2 * j];
        let f2 = values[2 + 2 * j];
        kron += WGK[j] * (f1 + f2);
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = kron * 0.5;
    let mut resasc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        resasc += WGK[j] * ((values[1 + 2 * j] - mean).abs() + (values[2 + 2 * j] - mean).abs());
    }
    let value = kron * h;
    let resabs = resabs * h.abs();
    let resasc = resasc * h.abs();
    let mut err = ((kron - gauss) * h).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (value, err, resabs)
}

/// Single Gauss–Kronrod panel.
pub fn gk21<F>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    gk21_abs(f, a, b).map(|(v, e, _)| (v, e))
}

fn gk21_abs<F>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let nodes = gk21_nodes(a, b);
    let mut values = [0.0; GK_POINTS];
    for (v, (x, _)) in values.iter_mut().zip(nodes.iter()) {
        *v = f(*x)?;
    }
    Ok(gk21_combine_abs(a, b, &values))
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-11,
            rel_tol: 1e-11,
            max_panels: 4000,
        }
    }
}

/// Outcome of an adaptive run; `panels` is sorted by left endpoint.
#[derive(Debug, Clone)]
pub struct AdaptiveResult {
    pub value: f64,
    pub est_error: f64,
    pub panels: Vec<(f64, f64)>,
    pub n_evals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    abs: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

fn ordered_sum(pieces: &mut [Piece]) -> (f64, f64, f64) {
    pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
    pieces
        .iter()
        .fold((0.0, 0.0, 0.0), |(v, e, m), p| (v + p.value, e + p.error, m + p.abs))
}

const ROUNDOFF_FLOOR: f64 = 100.0 * f64::EPSILON;

/// Global adaptive bisection starting from the partition given by
/// `breakpoints` (strictly increasing, at least two entries).
pub fn adaptive<F>(mut f: F, breakpoints: &[f64], cfg: &AdaptiveConfig) -> Result<AdaptiveResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    assert!(breakpoints.len() >= 2, "need at least one panel");
    let mut heap = BinaryHeap::new();
    let mut n_evals = 0;
    for w in breakpoints.windows(2) {
        let (value, error, abs) = gk21_abs(&mut f, w[0], w[1])?;
        n_evals += GK_POINTS;
        heap.push(Piece {
            a: w[0],
            b: w[1],
            value,
            error,
            abs,
        });
    }
    let target = |value: f64, abs: f64| {
        // Each panel estimate is floored at 50ε∫|f|, so tolerances below
        // twice the summed floor cannot be met.
        cfg.abs_tol
            .max(cfg.rel_tol * value.abs())
            .max(ROUNDOFF_FLOOR * abs)
    };
    let exact = |heap: &BinaryHeap<Piece>| {
        let mut pieces: Vec<Piece> = heap.iter().copied().collect();
        let sums = ordered_sum(&mut pieces);
        (pieces, sums)
    };
    // Running totals drive the loop; the ordered sum decides termination.
    let (_, (mut value, mut err, mut abs)) = exact(&heap);
    loop {
        if err <= target(value, abs) {
            let (pieces, (v, e, m)) = exact(&heap);
            if e <= target(v, m) {
                return Ok(AdaptiveResult {
                    value: v,
                    est_error: e,
                    panels: pieces.iter().map(|p| (p.a, p.b)).collect(),
                    n_evals,
                });
            }
            (value, err, abs) = (v, e, m);
        }
        if heap.len() >= cfg.max_panels {
            let (_, (_, e, _)) = exact(&heap);
            return Err(Error::QuadratureFailure {
                est_error: e,
                panels: heap.len(),
            });
        }
        let worst = heap.pop().expect("heap is nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel can no longer be split in floating point.
            heap.push(worst);
            let (_, (_, e, _)) = exact(&heap);
            return Err(Error::QuadratureFailure {
                est_error: e,
                panels: heap.len(),
            });
        }
        value -= worst.value;
        err -= worst.error;
        abs -= worst.abs;
        for (a, b) in [(worst.a, mid), (mid, worst.b)] {
            let (v, e, m) = gk21_abs(&mut f, a, b)?;
            n_evals += GK_POINTS;
            value += v;
            err += e;
            abs += m;
            heap.push(Piece {
                a,
                b,
                value: v,
                error: e,
                abs: m,
            });
        }
    }
}

/// Applies the Kronrod rule on a fixed partition. Returns the value and the
/// summed error estimate.
pub fn on_panels<F>(mut f: F, panels: &[(f64, f64)]) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut value = 0.0;
    let mut err = 0.0;
    for &(a, b) in panels {
        let (v, e) = gk21(&mut f, a, b)?;
        value += v;
        err += e;
    }
    Ok((value, err))
}

/// Gauss–Hermite rule for the standard normal weight `exp(-x²/2)/√(2π)`;
/// weights sum to one.
pub fn gauss_hermite(order: usize) -> Result<Vec<(f64, f64)>> {
    assert!(order >= 1);
    let mut jac = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = HermitianEig::new(&jac)?;
    Ok((0..order)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect())
}

/// Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre(order: usize, a: f64, b: f64) -> Result<Vec<(f64, f64)>> {
    assert!(order >= 1);
    let mut jac = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let kf = k as f64;
        let beta = kf / (4.0 * kf * kf - 1.0).sqrt();
        jac[(k - 1, k)] = beta;
        jac[(k, k - 1)] = beta;
    }
    let eig = HermitianEig::new(&jac)?;
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    Ok((0..order)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (c + h * eig.eigenvalues[k], 2.0 * h * v0 * v0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kronrod_integrates_polynomials_exactly() {
        let mut f = |x: f64| Ok(x.powi(30) - 3.0 * x.powi(7) + 1.0);
        let (v, _) = gk21(&mut f, -1.0, 2.0).unwrap();
        let exact = (2f64.powi(31) + 1.0) / 31.0 - 3.0 * (2f64.powi(8) - 1.0) / 8.0 + 3.0;
        assert_relative_eq!(v, exact, max_relative = 1e-13);
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let f = |x: f64| Ok(1.0 / (1e-4 + x * x));
        let r = adaptive(f, &[-1.0, 1.0], &AdaptiveConfig::default()).unwrap();
        let exact = 2.0 * (1.0 / 1e-2) * (1.0f64 / 1e-2).atan();
        assert_relative_eq!(r.value, exact, max_relative = 1e-10);
        assert!(r.panels.len() > 2);
        assert!(r.panels.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn adaptive_reports_failure_when_budget_is_too_small() {
        let f = |x: f64| Ok((1.0 / (x + 1e-12)).sin());
        let cfg = AdaptiveConfig {
            max_panels: 8,
            ..Default::default()
        };
        assert!(matches!(
            adaptive(f, &[0.0, 1.0], &cfg),
            Err(Error::QuadratureFailure { .. })
        ));
    }

    #[test]
    fn integrand_errors_propagate() {
        let f = |x: f64| {
            if x > 0.5 {
                Err(Error::SingularMatrix)
            } else {
                Ok(x)
            }
        };
        assert!(adaptive(f, &[0.0, 1.0], &AdaptiveConfig::default()).is_err());
    }

    #[test]
    fn gauss_hermite_moments() {
        let rule = gauss_hermite(20).unwrap();
        let m = |p: i32| rule.iter().map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert_relative_eq!(m(0), 1.0, epsilon = 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert_relative_eq!(m(2), 1.0, epsilon = 1e-12);
        assert_relative_eq!(m(4), 3.0, epsilon = 1e-11);
        assert_relative_eq!(m(8), 105.0, max_relative = 1e-11);
        // E exp(s x) = exp(s²/2)
        let e = rule.iter().map(|(x, w)| w * (0.7 * x).exp()).sum::<f64>();
        assert_relative_eq!(e, (0.245f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn gauss_legendre_matches_exact_integrals() {
        let rule = gauss_legendre(12, 0.0, 2.0).unwrap();
        let v: f64 = rule.iter().map(|(x, w)| w * x.exp()).sum();
        assert_relative_eq!(v, 2f64.exp() - 1.0, max_relative = 1e-14);
    }
}
