//! Sampling and quadrature checks of the classical-averaging representations.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::horizon::{build_operators, log_qef_from_operators, DiscretizedOperators, TimeGrid};
use crate::matfun::{CMatrix, HermitianEig, RMatrix};
use crate::model::StateSpace;
use crate::quad::gauss_hermite;

/// Samples per independent random stream.
pub const BATCH_SIZE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Draws `ΔZ ~ N(0, KΔt)` (the increments have covariance blocks
/// `K(t_i, t_j)Δt²`, and `K = [K(t_i, t_j)]Δt` as a matrix).
#[derive(Debug, Clone)]
pub struct IncrementSampler {
    /// `V·diag(√λ)` from the eigendecomposition of the covariance.
    pub factor: RMatrix,
    pub clipped: usize,
}

impl IncrementSampler {
    pub fn new(ops: &DiscretizedOperators) -> Result<Self> {
        let cov = ops.k.scale(ops.grid.dt());
        let eig = HermitianEig::new(&cov)?;
        let top = eig.max_eigenvalue().max(0.0);
        let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
        let mut clipped = 0;
        let mut factor = eig.eigenvectors.clone();
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if !lam.is_finite() || lam < -tol {
                return Err(Error::FactorizationFailure(format!(
                    "covariance eigenvalue {lam:.3e} below tolerance {:.3e}",
                    -tol
                )));
            }
            if lam < 0.0 {
                clipped += 1;
            }
            factor.column_mut(k).scale_mut(lam.max(0.0).sqrt());
        }
        if clipped > 0 {
            log::warn!("clipped {clipped} slightly negative covariance eigenvalues to zero");
        }
        Ok(Self { factor, clipped })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(rng));
        &self.factor * xi
    }
}

/// Random stream for batch `index` under `seed`.
pub fn batch_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    shift: f64,
    s1: f64,
    s2: f64,
    count: usize,
}

impl Moments {
    fn empty() -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            s1: 0.0,
            s2: 0.0,
            count: 0,
        }
    }

    fn push(&mut self, e: f64) {
        if e > self.shift {
            let r = (self.shift - e).exp();
            self.s1 = self.s1 * r + 1.0;
            self.s2 = self.s2 * r * r + 1.0;
            self.shift = e;
        } else {
            let w = (e - self.shift).exp();
            self.s1 += w;
            self.s2 += w * w;
        }
        self.count += 1;
    }

    fn merge(self, o: Self) -> Self {
        if o.count == 0 {
            return self;
        }
        if self.count == 0 {
            return o;
        }
        let shift = self.shift.max(o.shift);
        let a = (self.shift - shift).exp();
        let b = (o.shift - shift).exp();
        Self {
            shift,
            s1: self.s1 * a + o.s1 * b,
            s2: self.s2 * a * a + o.s2 * b * b,
            count: self.count + o.count,
        }
    }
}

/// Monte Carlo estimate of the finite-horizon `ln Ξ`: the deterministic
/// `−½ Tr ln cos(θL)` plus the log of the sample mean of
/// `exp(√θ Σ μ_iᵀΔZ_i + (θ/2) ΣΣ ΔZ_iᵀ P(t_i − t_j) ΔZ_j)`.
pub fn mc_log_qef(
    ss: &StateSpace,
    grid: &TimeGrid,
    theta: f64,
    mu: Option<&DVector<f64>>,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::invalid("n_samples", "need at least two samples"));
    }
    if theta == 0.0 {
        return Ok(McEstimate {
            value: 0.0,
            stderr: 0.0,
            n_samples,
            seed,
        });
    }
    let ops = build_operators(ss, grid, theta)?;
    // Checks the spectral condition and the mean length.
    log_qef_from_operators(&ops, mu)?;
    let sampler = IncrementSampler::new(&ops)?;
    let q = ops.covariance()?.scale(0.5 * theta / grid.dt());
    let b = mu.map(|m| m.scale(theta.sqrt()));
    let n_batches = n_samples.div_ceil(BATCH_SIZE);
    let batches: Vec<Result<Moments>> = (0..n_batches)
        .into_par_iter()
        .map(|k| {
            let mut rng = batch_rng(seed, k as u64);
            let count = BATCH_SIZE.min(n_samples - k * BATCH_SIZE);
            let mut m = Moments::empty();
            for _ in 0..count {
                let dz = sampler.sample(&mut rng);
                let mut e = dz.dot(&(&q * &dz));
                if let Some(b) = &b {
                    e += b.dot(&dz);
                }
                if !e.is_finite() {
                    return Err(Error::DegenerateSamples(format!("exponent {e}")));
                }
                m.push(e);
            }
            Ok(m)
        })
        .collect();
    let mut total = Moments::empty();
    for m in batches {
        total = total.merge(m?);
    }
    let n = total.count as f64;
    let mean = total.s1 / n;
    let var = ((total.s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
    if !(mean.is_finite() && mean > 0.0 && var.is_finite()) {
        return Err(Error::DegenerateSamples("sample moments are not finite".into()));
    }
    Ok(McEstimate {
        value: -0.5 * ops.ln_cos_trace() + total.shift + mean.ln(),
        stderr: (var / n).sqrt() / mean,
        n_samples,
        seed,
    })
}

/// Truncated position and momentum matrices `(ξ, η)` on `n` ladder states.
pub fn ladder_quadratures(n: usize) -> (CMatrix, CMatrix) {
    let mut a = CMatrix::zeros(n, n);
    for k in 0..n.saturating_sub(1) {
        a[(k, k + 1)] = Complex64::new(((k + 1) as f64).sqrt(), 0.0);
    }
    let ad = a.adjoint();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let xi = (&a + &ad).scale(s);
    let eta = (&a - &ad).map(|z| z * Complex64::new(0.0, -s));
    (xi, eta)
}

/// `σ = √(2 tanh ω)`.
pub fn fock_sigma(omega: f64) -> f64 {
    (2.0 * omega.tanh()).sqrt()
}

/// Max entrywise gap over the top-left `block × block` corner between
/// `exp(ω(ξ² + η²))` and `(1/cosh ω) E exp(σ(aξ + bη))` with `a, b`
/// independent standard normal.
pub fn fock_block_error(omega: f64, n_trunc: usize, quad_order: usize, block: usize) -> Result<FockError> {
    let (xi, eta) = ladder_quadratures(n_trunc);
    let sigma = fock_sigma(omega);
    let h = &xi * &xi + &eta * &eta;
    let lhs = HermitianEig::new(&h)?.map_real(|x| (omega * x).exp());
    let nodes = gauss_hermite(quad_order)?;
    let pairs: Vec<(usize, usize)> = (0..quad_order)
        .flat_map(|p| (0..quad_order).map(move |q| (p, q)))
        .collect();
    let terms: Vec<Result<CMatrix>> = pairs
        .par_iter()
        .map(|&(p, q)| {
            let (x, wx) = nodes[p];
            let (y, wy) = nodes[q];
            let g = xi.scale(sigma * x) + eta.scale(sigma * y);
            let e = HermitianEig::new(&g)?.map_real(f64::exp);
            Ok(e.view((0, 0), (block, block)).map(|z| z * (wx * wy)))
        })
        .collect();
    let mut rhs = CMatrix::zeros(block, block);
    let mut magnitude = RMatrix::zeros(block, block);
    for t in terms {
        let t = t?;
        magnitude += t.map(|z| z.norm());
        rhs += t;
    }
    let c = omega.cosh();
    rhs /= Complex64::new(c, 0.0);
    let lhs = lhs.view((0, 0), (block, block));
    Ok(FockError {
        max_block_error: (rhs - lhs).iter().map(|z| z.norm()).fold(0.0, f64::max),
        roundoff_floor: f64::EPSILON * (n_trunc as f64) * magnitude.max() / c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FockError {
    pub max_block_error: f64,
    /// `ε·n·max Σ|w·term|`: errors below this are rounding noise.
    pub roundoff_floor: f64,
}

/// Checks the position-momentum factorization identity on the top-left
/// `n_trunc/4` block. The same block is recomputed with a third more basis
/// states; growth of the error there marks edge contamination.
pub fn fock_truncation_check(omega: f64, n_trunc: usize, quad_order: usize) -> Result<(f64, f64)> {
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::invalid("omega", "must be finite and nonnegative"));
    }
    if n_trunc < 20 {
        return Err(Error::invalid("n_trunc", "must be at least 20"));
    }
    if quad_order < 20 {
        return Err(Error::invalid("quad_order", "must be at least 20"));
    }
    let sigma = fock_sigma(omega);
    let block = n_trunc / 4;
    let base = fock_block_error(omega, n_trunc, quad_order, block)?;
    let larger = fock_block_error(omega, n_trunc + n_trunc / 3, quad_order, block)?;
    check_refinement(&base, &larger)?;
    Ok((base.max_block_error, sigma))
}

/// Fails when refining the basis makes the block error grow above the
/// rounding floor of either computation.
pub fn check_refinement(base: &FockError, larger: &FockError) -> Result<()> {
    let floor = base.roundoff_floor.max(larger.roundoff_floor);
    if larger.max_block_error > base.max_block_error.max(floor) {
        return Err(Error::TruncationTooSmall {
            smaller: base.max_block_error,
            larger: larger.max_block_error,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::horizon::{constant_mean, finite_horizon_log_qef};
    use crate::model::OqhoParams;
    use rand::Rng;

    fn test_model() -> StateSpace {
        StateSpace::build(&OqhoParams::one_mode()).unwrap()
    }

    #[test]
    fn zero_theta_is_trivial() {
        let g = TimeGrid::new(2.0, 16).unwrap();
        let r = mc_log_qef(&test_model(), &g, 0.0, None, 100, 1).unwrap();
        assert_eq!((r.value, r.stderr), (0.0, 0.0));
    }

    #[test]
    fn seeded_determinism() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = mc_log_qef(&test_model(), &g, 0.1, None, 5000, 42).unwrap();
        let b = mc_log_qef(&test_model(), &g, 0.1, None, 5000, 42).unwrap();
        let c = mc_log_qef(&test_model(), &g, 0.1, None, 5000, 43).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn agrees_with_closed_form() {
        let ss = test_model();
        let g = TimeGrid::new(2.0, 32).unwrap();
        let mu = constant_mean(&g, &[0.5, -0.3]);
        for m in [None, Some(&mu)] {
            let exact = finite_horizon_log_qef(&ss, &g, 0.1, m).unwrap().log_qef;
            let r = mc_log_qef(&ss, &g, 0.1, m, 20000, 5).unwrap();
            assert!((r.value - exact).abs() < 4.0 * r.stderr, "{} vs {exact} ± {}", r.value, r.stderr);
        }
    }

    #[test]
    fn stderr_scales_as_inverse_root() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = mc_log_qef(&test_model(), &g, 0.2, None, 8000, 9).unwrap();
        let b = mc_log_qef(&test_model(), &g, 0.2, None, 32000, 9).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn increment_variance_is_majorized() {
        let g = TimeGrid::new(2.0, 32).unwrap();
        let ops = build_operators(&test_model(), &g, 0.5).unwrap();
        let s = IncrementSampler::new(&ops).unwrap();
        let mut rng = batch_rng(3, 0);
        let samples: Vec<DVector<f64>> = (0..20000).map(|_| s.sample(&mut rng)).collect();
        for _ in 0..5 {
            let f = DVector::from_fn(64, |_, _| rng.random_range(-1.0..1.0));
            let v: Vec<f64> = samples.iter().map(|z| f.dot(z)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            let bound = f.norm_squared() * g.dt();
            assert!(var <= bound * (1.0 + 4.0 * (2.0 / v.len() as f64).sqrt()), "{var} {bound}");
        }
    }

    #[test]
    fn spectral_bound_propagates() {
        let g = TimeGrid::new(2.0, 16).unwrap();
        let err = mc_log_qef(&test_model(), &g, 50.0, None, 100, 1).unwrap_err();
        assert!(matches!(err, Error::SpectralConditionViolated { .. }));
    }

    #[test]
    fn ladder_commutator() {
        let (xi, eta) = ladder_quadratures(30);
        let c = &xi * &eta - &eta * &xi;
        for k in 0..29 {
            assert!((c[(k, k)] - Complex64::new(0.0, 1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fock_zero_frequency() {
        let (e, s) = fock_truncation_check(0.0, 20, 20).unwrap();
        assert!(e <= 1e-12);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn fock_sigma_value() {
        let t = (0.4f64.exp() - 1.0) / (0.4f64.exp() + 1.0);
        assert!((fock_sigma(0.2).powi(2) - 2.0 * t).abs() < 1e-15);
        assert!((fock_sigma(0.2) - 0.6283).abs() < 1e-4);
    }

    #[test]
    fn fock_identity_holds_at_moderate_frequency() {
        let (e, s) = fock_truncation_check(0.2, 40, 40).unwrap();
        assert!(e < 1e-9);
        assert!((s - fock_sigma(0.2)).abs() == 0.0);
        let coarse = fock_block_error(0.2, 40, 20, 10).unwrap();
        let fine = fock_block_error(0.2, 40, 30, 10).unwrap();
        assert!(fine.max_block_error < coarse.max_block_error);
    }

    #[test]
    fn fock_truncation_error_decreases() {
        let e: Vec<f64> = [20, 26, 40]
            .iter()
            .map(|&n| fock_block_error(0.3, n, 30, 5).unwrap().max_block_error)
            .collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn growing_error_is_flagged() {
        let mk = |e| FockError {
            max_block_error: e,
            roundoff_floor: 1e-12,
        };
        assert!(check_refinement(&mk(1e-4), &mk(1e-6)).is_ok());
        assert!(check_refinement(&mk(2e-13), &mk(8e-13)).is_ok());
        assert!(matches!(
            check_refinement(&mk(1e-6), &mk(1e-4)),
            Err(Error::TruncationTooSmall { .. })
        ));
    }

    #[test]
    fn fock_preconditions() {
        assert_eq!(fock_truncation_check(0.2, 10, 40).unwrap_err().field(), Some("n_trunc"));
        assert_eq!(fock_truncation_check(0.2, 40, 4).unwrap_err().field(), Some("quad_order"));
        assert_eq!(fock_truncation_check(-1.0, 40, 40).unwrap_err().field(), Some("omega"));
    }
}
