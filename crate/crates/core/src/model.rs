//! Open quantum harmonic oscillator data: state-space matrices, time-domain
//! kernels, the quantum spectral density and the admissibility test for a
//! risk-sensitivity parameter.

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matfun::{
    self, frobenius_c, hermitian_defect, skew_defect, solve_lyapunov, stability_and_radius,
    tanhc, to_complex, CMatrix, HermitianEig, RMatrix, SkewSpectrum,
};

const STRUCT_TOL: f64 = 1e-12;
const PR_TOL: f64 = 1e-8;
const RANK_TOL: f64 = 1e-10;
const POLISH: usize = 3;

/// The 2×2 symplectic unit `[[0, 1], [-1, 0]]`.
pub fn bj() -> RMatrix {
    RMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
}

/// `bJ ⊗ I_{m/2}`.
pub fn field_j(m: usize) -> RMatrix {
    let h = m / 2;
    let mut j = RMatrix::zeros(m, m);
    for k in 0..h {
        j[(k, h + k)] = 1.0;
        j[(h + k, k)] = -1.0;
    }
    j
}

fn scale_of(m: &RMatrix) -> f64 {
    m.norm().max(1.0)
}

fn check_finite(field: &str, m: &RMatrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(field, "entries must be finite"))
    }
}

fn numerical_rank(m: &RMatrix) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// Physical parameters of an oscillator: CCR matrix `theta`, energy matrix
/// `r`, coupling `m` and output weighting `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OqhoParams {
    pub theta: RMatrix,
    pub r: RMatrix,
    pub m: RMatrix,
    pub s: RMatrix,
}

impl OqhoParams {
    /// The one-mode reference oscillator `Θ = J, R = I, M = I, S = I`.
    pub fn one_mode() -> Self {
        Self {
            theta: bj(),
            r: RMatrix::identity(2, 2),
            m: RMatrix::identity(2, 2),
            s: RMatrix::identity(2, 2),
        }
    }

    pub fn nu(&self) -> usize {
        self.theta.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let nu = self.theta.nrows();
        check_finite("theta", &self.theta)?;
        check_finite("r_matrix", &self.r)?;
        check_finite("m_matrix", &self.m)?;
        check_finite("s_matrix", &self.s)?;
        if nu == 0 || !self.theta.is_square() {
            return Err(Error::invalid("theta", "must be a nonempty square matrix"));
        }
        if (&self.theta + self.theta.transpose()).norm() > STRUCT_TOL * scale_of(&self.theta) {
            return Err(Error::invalid("theta", "must be antisymmetric"));
        }
        if self.r.shape() != (nu, nu) {
            return Err(Error::invalid("r_matrix", format!("must be {nu}x{nu}")));
        }
        if (&self.r - self.r.transpose()).norm() > STRUCT_TOL * scale_of(&self.r) {
            return Err(Error::invalid("r_matrix", "must be symmetric"));
        }
        let m = self.m.nrows();
        if self.m.ncols() != nu {
            return Err(Error::invalid("m_matrix", format!("must have {nu} columns")));
        }
        if m == 0 || !m.is_multiple_of(2) {
            return Err(Error::invalid("m_matrix", "row count must be even and positive"));
        }
        let n = self.s.nrows();
        if self.s.ncols() != nu || n == 0 || n > nu {
            return Err(Error::invalid(
                "s_matrix",
                format!("must be n x {nu} with 1 <= n <= {nu}"),
            ));
        }
        if numerical_rank(&self.s) < n {
            return Err(Error::invalid("s_matrix", "must have full row rank"));
        }
        Ok(())
    }
}

/// State-space realization `dX = AX dt + B dW`, `Y = SX`, with the derived
/// commutation data.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub a: RMatrix,
    pub b: RMatrix,
    pub s: RMatrix,
    pub theta: RMatrix,
    /// `B J Bᵀ`
    pub mho: RMatrix,
    pub j: RMatrix,
    pub gamma: Option<RMatrix>,
    pub hurwitz: bool,
    pub spectral_abscissa: f64,
    /// `‖AΘ + ΘAᵀ + ℧‖_F / (‖A‖‖Θ‖ + ‖℧‖)`
    pub pr_residual: f64,
    pub s_full_rank: bool,
}

impl StateSpace {
    pub fn build(params: &OqhoParams) -> Result<Self> {
        params.validate()?;
        let j = field_j(params.m.nrows());
        let mt = params.m.transpose();
        let a = (&params.theta * (&params.r + &mt * &j * &params.m)).scale(2.0);
        let b = (&params.theta * &mt).scale(2.0);
        Self::assemble(a, b, params.s.clone(), params.theta.clone(), j)
    }

    /// Uses user-supplied `(A, B, S, Θ)`. The realizability identity is
    /// enforced; a rank-deficient `S` is accepted and flagged.
    pub fn explicit(a: RMatrix, b: RMatrix, s: RMatrix, theta: RMatrix) -> Result<Self> {
        check_finite("a_matrix", &a)?;
        check_finite("b_matrix", &b)?;
        check_finite("s_matrix", &s)?;
        check_finite("theta_matrix", &theta)?;
        let nu = a.nrows();
        if nu == 0 || !a.is_square() {
            return Err(Error::invalid("a_matrix", "must be a nonempty square matrix"));
        }
        if theta.shape() != (nu, nu) {
            return Err(Error::invalid("theta_matrix", format!("must be {nu}x{nu}")));
        }
        if (&theta + theta.transpose()).norm() > STRUCT_TOL * scale_of(&theta) {
            return Err(Error::invalid("theta_matrix", "must be antisymmetric"));
        }
        let m = b.ncols();
        if b.nrows() != nu || m == 0 || !m.is_multiple_of(2) {
            return Err(Error::invalid(
                "b_matrix",
                format!("must be {nu} x m with m even and positive"),
            ));
        }
        if s.ncols() != nu || s.nrows() == 0 || s.nrows() > nu {
            return Err(Error::invalid(
                "s_matrix",
                format!("must be n x {nu} with 1 <= n <= {nu}"),
            ));
        }
        let ss = Self::assemble(a, b, s, theta, field_j(m))?;
        if ss.pr_residual > PR_TOL {
            return Err(Error::invalid(
                "a_matrix",
                format!(
                    "violates physical realizability (relative residual {:.3e})",
                    ss.pr_residual
                ),
            ));
        }
        Ok(ss)
    }

    fn assemble(a: RMatrix, b: RMatrix, s: RMatrix, theta: RMatrix, j: RMatrix) -> Result<Self> {
        let mho = &b * &j * b.transpose();
        let pr = (&a * &theta + &theta * a.transpose() + &mho).norm();
        let pr_residual = pr / (a.norm() * theta.norm() + mho.norm()).max(f64::MIN_POSITIVE);
        let (hurwitz, spectral_abscissa) = stability_and_radius(&a)?;
        let gamma = if hurwitz {
            Some(solve_lyapunov(&a, &(&b * b.transpose()))?)
        } else {
            None
        };
        let s_full_rank = numerical_rank(&s) == s.nrows();
        if !s_full_rank {
            warn!("weighting matrix S is rank deficient");
        }
        Ok(Self {
            a,
            b,
            s,
            theta,
            mho,
            j,
            gamma,
            hurwitz,
            spectral_abscissa,
            pr_residual,
            s_full_rank,
        })
    }

    /// State dimension ν.
    pub fn nu(&self) -> usize {
        self.a.nrows()
    }

    /// Output dimension n.
    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn gramian(&self) -> Result<&RMatrix> {
        self.gamma.as_ref().ok_or(Error::GramianUnavailable)
    }

    fn kernel_with(&self, tau: f64, inner: &RMatrix) -> RMatrix {
        if tau >= 0.0 {
            &self.s * matfun::expm(&self.a.scale(tau)) * inner * self.s.transpose()
        } else {
            &self.s * inner * matfun::expm(&self.a.transpose().scale(-tau)) * self.s.transpose()
        }
    }

    /// Commutator kernel `Λ(τ)`.
    pub fn lambda_kernel(&self, tau: f64) -> RMatrix {
        self.kernel_with(tau, &self.theta)
    }

    /// Real covariance kernel `P(τ)`.
    pub fn covariance_kernel(&self, tau: f64) -> Result<RMatrix> {
        Ok(self.kernel_with(tau, self.gramian()?))
    }

    pub fn kernels(&self, tau: f64) -> Result<KernelSample> {
        Ok(KernelSample {
            tau,
            p: self.covariance_kernel(tau)?,
            lambda: self.lambda_kernel(tau),
        })
    }

    /// Quantum spectral density `(Φ(λ), Ψ(λ))`.
    pub fn spectral_density(&self, lambda: f64) -> Result<SpectralSample> {
        if !self.hurwitz {
            return Err(Error::NotHurwitz {
                abscissa: self.spectral_abscissa,
            });
        }
        let nu = self.nu();
        let mut resolvent = -to_complex(&self.a);
        for k in 0..nu {
            resolvent[(k, k)] += Complex64::new(0.0, lambda);
        }
        let inv = resolvent
            .try_inverse()
            .ok_or(Error::SingularResolvent { lambda })?;
        let f = to_complex(&self.s) * inv;
        let fa = f.adjoint();
        let phi = &f * to_complex(&(&self.b * self.b.transpose())) * &fa;
        let psi = &f * to_complex(&self.mho) * &fa;
        Ok(SpectralSample {
            lambda,
            phi: (&phi + phi.adjoint()).scale(0.5),
            psi: (&psi - psi.adjoint()).scale(0.5),
        })
    }
}

/// Kernel values at one lag.
#[derive(Debug, Clone)]
pub struct KernelSample {
    pub tau: f64,
    pub p: RMatrix,
    pub lambda: RMatrix,
}

/// `(Φ(λ), Ψ(λ))` at one frequency.
#[derive(Debug, Clone)]
pub struct SpectralSample {
    pub lambda: f64,
    pub phi: CMatrix,
    pub psi: CMatrix,
}

impl SpectralSample {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Checks `Φ = Φ*`, `Ψ = -Ψ*` and `Φ + iΨ ⪰ 0` to relative tolerance `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        if hermitian_defect(&self.phi) > tol {
            return Err(Error::invalid("phi", "not Hermitian"));
        }
        let d = skew_defect(&self.psi);
        if d > tol {
            return Err(Error::NotSkewHermitian { defect: d });
        }
        let q = &self.phi + self.psi.map(|z| z * Complex64::i());
        let eig = HermitianEig::new(&q)?;
        let scale = frobenius_c(&self.phi).max(f64::MIN_POSITIVE);
        if eig.min_eigenvalue() < -tol * scale {
            return Err(Error::invalid("phi", "Phi + i Psi is not positive semidefinite"));
        }
        Ok(())
    }
}

/// Bounds `‖Φ(λ)‖ ≤ phi/λ²` and `‖Ψ(λ)‖ ≤ psi/λ²` valid for `|λ| ≥ from`.
#[derive(Debug, Clone, Copy)]
pub struct DecayBound {
    pub phi: f64,
    pub psi: f64,
    pub from: f64,
}

/// A stationary Gaussian process described through its quantum spectral
/// density.
pub trait SpectralSource: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, lambda: f64) -> Result<SpectralSample>;
    fn decay(&self) -> Result<DecayBound>;
    /// `Tr P(0)`, which equals `(1/2π)∫ Tr Φ(λ) dλ`.
    fn covariance_trace(&self) -> Result<f64>;
    /// Typical frequency where the density changes shape.
    fn frequency_scale(&self) -> f64;
    /// True when `Ψ ≡ 0`.
    fn is_classical(&self) -> bool {
        false
    }
}

impl SpectralSource for StateSpace {
    fn dim(&self) -> usize {
        self.n()
    }

    fn sample(&self, lambda: f64) -> Result<SpectralSample> {
        self.spectral_density(lambda)
    }

    fn decay(&self) -> Result<DecayBound> {
        if !self.hurwitz {
            return Err(Error::NotHurwitz {
                abscissa: self.spectral_abscissa,
            });
        }
        // For |λ| ≥ 2‖A‖ the resolvent norm is at most 2/|λ|.
        let s2 = self.s.norm_squared();
        Ok(DecayBound {
            phi: 4.0 * s2 * (&self.b * self.b.transpose()).norm(),
            psi: 4.0 * s2 * self.mho.norm(),
            from: 2.0 * self.a.norm(),
        })
    }

    fn covariance_trace(&self) -> Result<f64> {
        Ok((&self.s * self.gramian()? * self.s.transpose()).trace())
    }

    fn frequency_scale(&self) -> f64 {
        self.a.norm().max(1e-12)
    }

    fn is_classical(&self) -> bool {
        self.mho.iter().all(|&x| x == 0.0)
    }
}

/// Scalar classical Ornstein–Uhlenbeck process with `P(τ) = var·e^{-rate|τ|}`
/// and `Ψ ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarOu {
    pub rate: f64,
    pub variance: f64,
}

impl Default for ScalarOu {
    fn default() -> Self {
        Self {
            rate: 1.0,
            variance: 1.0,
        }
    }
}

impl ScalarOu {
    pub fn phi(&self, lambda: f64) -> f64 {
        2.0 * self.rate * self.variance / (self.rate * self.rate + lambda * lambda)
    }

    /// Closed-form classical rate `(rate/2)(1 − √(1 − 2θ·var/rate))`.
    pub fn classical_rate_exact(&self, theta: f64) -> f64 {
        0.5 * self.rate * (1.0 - (1.0 - 2.0 * theta * self.variance / self.rate).sqrt())
    }
}

impl SpectralSource for ScalarOu {
    fn dim(&self) -> usize {
        1
    }

    fn sample(&self, lambda: f64) -> Result<SpectralSample> {
        Ok(SpectralSample {
            lambda,
            phi: CMatrix::from_element(1, 1, Complex64::new(self.phi(lambda), 0.0)),
            psi: CMatrix::zeros(1, 1),
        })
    }

    fn decay(&self) -> Result<DecayBound> {
        Ok(DecayBound {
            phi: 2.0 * self.rate * self.variance,
            psi: 0.0,
            from: 0.0,
        })
    }

    fn covariance_trace(&self) -> Result<f64> {
        Ok(self.variance)
    }

    fn frequency_scale(&self) -> f64 {
        self.rate
    }

    fn is_classical(&self) -> bool {
        true
    }
}

/// `λ_max(√tanc(θΨ) Φ √tanc(θΨ))` and `λ_max(Φ)` for one sample.
pub fn sample_lambda_max(sample: &SpectralSample, theta: f64) -> Result<(f64, f64)> {
    let classical = HermitianEig::new(&sample.phi)?.max_eigenvalue();
    if theta == 0.0 {
        return Ok((classical, classical));
    }
    let spec = SkewSpectrum::new(&sample.psi, 1e-9)?;
    let root = spec.map_real(|h| tanhc(theta * h).sqrt());
    let sym = &root * &sample.phi * &root;
    Ok((HermitianEig::new(&sym)?.max_eigenvalue(), classical))
}

/// Refinement settings for the admissibility frequency grid.
#[derive(Debug, Clone, Copy)]
pub struct GridConfig {
    pub initial_points: usize,
    pub max_points: usize,
    /// Stop doubling once the sup changes by less than this (relative).
    pub sup_tol: f64,
    /// Largest allowed ratio between largest eigenvalues at adjacent nodes.
    pub max_adjacent_ratio: f64,
    /// Lowest positive node as a multiple of the source frequency scale.
    pub lambda_min_rel: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            initial_points: 64,
            max_points: 1 << 15,
            sup_tol: 1e-6,
            max_adjacent_ratio: 16.0,
            lambda_min_rel: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Admissibility {
    pub admissible: bool,
    pub margin: f64,
    pub theta_star: f64,
    /// Grid sup of `λ_max(√tanc Φ √tanc)`.
    pub sup_quantum: f64,
    /// Grid sup of `λ_max(Φ)`.
    pub sup_classical: f64,
    pub argsup_lambda: f64,
    pub grid_points: usize,
    pub lambda_cut: f64,
}

/// Log-spaced nonnegative grid: `0` followed by `points − 1` nodes from
/// `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let k = points.max(3) - 1;
    let (la, lb) = (lo.ln(), hi.ln());
    std::iter::once(0.0)
        .chain((0..k).map(|i| (la + (lb - la) * i as f64 / (k - 1) as f64).exp()))
        .collect()
}

/// Admissibility on a caller-supplied grid of nonnegative frequencies
/// (`Φ(−λ) = conj Φ(λ)`, so the negative half-line adds nothing).
pub fn admissibility_on_grid(
    src: &dyn SpectralSource,
    theta: f64,
    grid: &[f64],
    max_adjacent_ratio: f64,
) -> Result<Admissibility> {
    scan(src, theta, grid, max_adjacent_ratio, 0)
}

/// Golden-section maximization of `f` on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    while b - a > 1e-10 * b.abs().max(1e-300) {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1)?;
        }
    }
    Ok(if f1 >= f2 { (x1, f1) } else { (x2, f2) })
}

/// Grid sup plus golden-section polishing around the `polish` largest
/// interior local maxima of each curve.
fn scan(
    src: &dyn SpectralSource,
    theta: f64,
    grid: &[f64],
    max_adjacent_ratio: f64,
    polish: usize,
) -> Result<Admissibility> {
    if !(theta >= 0.0) {
        return Err(Error::invalid("theta", "must be nonnegative"));
    }
    let mut vals = Vec::with_capacity(grid.len());
    for &l in grid {
        vals.push(sample_lambda_max(&src.sample(l)?, theta)?);
    }
    let (mut sq, mut sc, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0);
    for (&l, &(q, c)) in grid.iter().zip(vals.iter()) {
        if q > sq {
            sq = q;
            arg = l;
        }
        sc = sc.max(c);
    }
    let floor = 1e-12 * sc.max(f64::MIN_POSITIVE);
    for w in grid.windows(2).zip(vals.windows(2)) {
        let (lw, vw) = w;
        let (x, y) = (vw[0].1, vw[1].1);
        if x > floor && y > floor {
            let ratio = x.max(y) / x.min(y);
            if ratio > max_adjacent_ratio {
                return Err(Error::GridTooCoarse {
                    ratio,
                    lambda: lw[0],
                });
            }
        }
    }
    if polish > 0 && grid.len() >= 3 {
        for which in [0usize, 1] {
            let pick = |v: &(f64, f64)| if which == 0 { v.0 } else { v.1 };
            let mut peaks: Vec<usize> = (1..grid.len() - 1)
                .filter(|&k| pick(&vals[k]) >= pick(&vals[k - 1]) && pick(&vals[k]) >= pick(&vals[k + 1]))
                .collect();
            peaks.sort_by(|&x, &y| pick(&vals[y]).total_cmp(&pick(&vals[x])));
            for &k in peaks.iter().take(polish) {
                let f = |l: f64| sample_lambda_max(&src.sample(l)?, theta).map(|v| pick(&v));
                let (l, v) = golden_max(f, grid[k - 1], grid[k + 1])?;
                if which == 0 && v > sq {
                    sq = v;
                    arg = l;
                } else if which == 1 {
                    sc = sc.max(v);
                }
            }
        }
    }
    let margin = if theta == 0.0 { 1.0 } else { 1.0 - theta * sq };
    Ok(Admissibility {
        admissible: margin > 0.0,
        margin,
        theta_star: if sc > 0.0 { 1.0 / sc } else { f64::INFINITY },
        sup_quantum: sq,
        sup_classical: sc,
        argsup_lambda: arg,
        grid_points: grid.len(),
        lambda_cut: grid.last().copied().unwrap_or(0.0),
    })
}

/// Admissibility with automatic grid construction: the grid extends to a
/// cutoff past which the decay bound keeps `‖Φ‖` below the sup already
/// found, and its density doubles until the sup settles. Local maxima of
/// the sampled curves are polished by golden-section search.
pub fn admissibility(src: &dyn SpectralSource, theta: f64, cfg: &GridConfig) -> Result<Admissibility> {
    let scale = src.frequency_scale();
    let decay = src.decay()?;
    let s0 = sample_lambda_max(&src.sample(0.0)?, theta)?.1;
    let cut_for = |level: f64| {
        let by_decay = if level > 0.0 {
            (2.0 * decay.phi / level).sqrt()
        } else {
            0.0
        };
        by_decay.max(decay.from).max(10.0 * scale)
    };
    let lo = cfg.lambda_min_rel * scale;
    let mut cut = cut_for(s0);
    let mut points = cfg.initial_points;
    let mut prev: Option<Admissibility> = None;
    loop {
        let grid = log_grid(lo, cut, points);
        let cur = scan(src, theta, &grid, f64::INFINITY, POLISH)?;
        let needed = cut_for(cur.sup_classical);
        if needed > cut * (1.0 + 1e-12) {
            cut = needed;
            prev = None;
            continue;
        }
        if let Some(p) = &prev {
            let dq = (cur.sup_quantum - p.sup_quantum).abs();
            let dc = (cur.sup_classical - p.sup_classical).abs();
            let tol = cfg.sup_tol * cur.sup_classical.max(f64::MIN_POSITIVE);
            if dq < tol && dc < tol {
                return scan(src, theta, &grid, cfg.max_adjacent_ratio, POLISH);
            }
        }
        if points * 2 > cfg.max_points {
            return scan(src, theta, &grid, cfg.max_adjacent_ratio, POLISH);
        }
        prev = Some(cur);
        points *= 2;
    }
}

/// Smallest θ in `(0, theta_hi]` at which the margin vanishes, found by
/// bisection; `None` if the margin stays positive up to `theta_hi`.
pub fn margin_root(src: &dyn SpectralSource, theta_hi: f64, cfg: &GridConfig) -> Result<Option<f64>> {
    let base = admissibility(src, 0.0, cfg)?;
    let lo0 = (0.5 * base.theta_star).min(theta_hi);
    let margin = |t: f64| admissibility(src, t, cfg).map(|a| a.margin);
    if margin(theta_hi)? > 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = (lo0, theta_hi);
    if margin(lo)? <= 0.0 {
        lo = 0.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if margin(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Random valid oscillator parameters for property tests and fuzzing seeds.
pub fn params_from_entries(nu_modes: usize, m_modes: usize, entries: &[f64]) -> OqhoParams {
    let nu = 2 * nu_modes;
    let m = 2 * m_modes;
    let mut it = entries.iter().copied().cycle();
    let mut next = || it.next().unwrap_or(0.0);
    let theta = field_j(nu);
    let mut r = RMatrix::zeros(nu, nu);
    for i in 0..nu {
        for k in i..nu {
            let v = next();
            r[(i, k)] = v;
            r[(k, i)] = v;
        }
    }
    let mut mm = RMatrix::zeros(m, nu);
    for v in mm.iter_mut() {
        *v = next();
    }
    OqhoParams {
        theta,
        r,
        m: mm,
        s: DMatrix::identity(nu, nu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_model() -> StateSpace {
        StateSpace::build(&OqhoParams::one_mode()).unwrap()
    }

    fn second_model() -> StateSpace {
        StateSpace::build(&OqhoParams {
            theta: bj(),
            r: RMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.0]),
            m: RMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.1, 0.7]),
            s: RMatrix::identity(2, 2),
        })
        .unwrap()
    }

    fn close(a: &RMatrix, b: &RMatrix, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn one_mode_state_space() {
        let ss = test_model();
        let j = bj();
        let i2 = RMatrix::identity(2, 2);
        assert!(close(&ss.a, &(j.scale(2.0) - i2.scale(2.0)), 1e-14));
        assert!(close(&ss.b, &j.scale(2.0), 1e-14));
        assert!(close(&ss.mho, &j.scale(4.0), 1e-14));
        assert!(close(ss.gamma.as_ref().unwrap(), &i2, 1e-12));
        assert!(ss.hurwitz);
        assert_relative_eq!(ss.spectral_abscissa, -2.0, epsilon = 1e-12);
        assert!(ss.pr_residual < 1e-15);
    }

    #[test]
    fn zero_coupling_is_not_hurwitz() {
        let ss = StateSpace::build(&OqhoParams {
            theta: bj(),
            r: RMatrix::zeros(2, 2),
            m: RMatrix::zeros(2, 2),
            s: RMatrix::identity(2, 2),
        })
        .unwrap();
        assert!(ss.a.iter().all(|&x| x == 0.0));
        assert!(ss.b.iter().all(|&x| x == 0.0));
        assert!(!ss.hurwitz);
        assert!(ss.gamma.is_none());
        assert_eq!(ss.covariance_kernel(0.0).unwrap_err(), Error::GramianUnavailable);
        assert!(matches!(ss.spectral_density(1.0), Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn validation_names_the_field() {
        let mut p = OqhoParams::one_mode();
        p.m = RMatrix::identity(3, 2);
        assert_eq!(p.validate().unwrap_err().field(), Some("m_matrix"));
        let mut p = OqhoParams::one_mode();
        p.r[(0, 1)] = 0.5;
        assert_eq!(p.validate().unwrap_err().field(), Some("r_matrix"));
        let mut p = OqhoParams::one_mode();
        p.theta = RMatrix::identity(2, 2);
        assert_eq!(p.validate().unwrap_err().field(), Some("theta"));
        let mut p = OqhoParams::one_mode();
        p.s = RMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(p.validate().unwrap_err().field(), Some("s_matrix"));
        let mut p = OqhoParams::one_mode();
        p.r[(1, 1)] = f64::NAN;
        assert_eq!(p.validate().unwrap_err().field(), Some("r_matrix"));
    }

    #[test]
    fn explicit_mode_accepts_rank_deficient_output() {
        let t = test_model();
        let s = RMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let ss = StateSpace::explicit(t.a.clone(), t.b.clone(), s, t.theta.clone()).unwrap();
        assert!(!ss.s_full_rank);
        let bad = StateSpace::explicit(t.a.scale(2.0), t.b.clone(), t.s.clone(), t.theta.clone());
        assert_eq!(bad.unwrap_err().field(), Some("a_matrix"));
    }

    #[test]
    fn kernels_at_zero_lag_and_symmetry() {
        let ss = second_model();
        let k0 = ss.kernels(0.0).unwrap();
        assert!(close(&k0.lambda, &(&ss.s * &ss.theta * ss.s.transpose()), 1e-14));
        assert!(close(&k0.p, &(&ss.s * ss.gamma.as_ref().unwrap() * ss.s.transpose()), 1e-14));
        for tau in [0.3, 1.0, 2.5] {
            let kp = ss.kernels(tau).unwrap();
            let km = ss.kernels(-tau).unwrap();
            assert!(close(&kp.lambda, &(-km.lambda.transpose()), 1e-13));
            assert!(close(&kp.p, &km.p.transpose(), 1e-13));
        }
    }

    #[test]
    fn kernels_decay_at_the_spectral_abscissa_rate() {
        let ss = test_model();
        for tau in [2.0, 5.0, 10.0] {
            let k = ss.kernels(tau).unwrap();
            let bound = 2.0 * (-2.0 * tau).exp();
            assert!(k.lambda.norm() <= bound && k.p.norm() <= bound);
        }
    }

    #[test]
    fn one_mode_density_at_zero() {
        let s = test_model().spectral_density(0.0).unwrap();
        let half = to_complex(&RMatrix::identity(2, 2).scale(0.5));
        let half_j = to_complex(&bj().scale(0.5));
        assert!(frobenius_c(&(&s.phi - half)) < 1e-14);
        assert!(frobenius_c(&(&s.psi - half_j)) < 1e-14);
    }

    #[test]
    fn density_structure() {
        let ss = second_model();
        for l in [-10.0, -1.3, 0.0, 0.7, 10.0] {
            let s = ss.spectral_density(l).unwrap();
            assert!(hermitian_defect(&s.phi) < 1e-12);
            assert!(skew_defect(&s.psi) < 1e-12);
            s.check(1e-10).unwrap();
        }
        let p = ss.spectral_density(10.0).unwrap().phi;
        let m = ss.spectral_density(-10.0).unwrap().phi;
        assert!(frobenius_c(&(p.map(|z| z.conj()) - m)) < 1e-15);
    }

    #[test]
    fn decay_bound_holds() {
        for ss in [test_model(), second_model()] {
            let d = ss.decay().unwrap();
            for f in [1.0, 1.5, 3.0, 30.0, 1e4] {
                let l = d.from * f + 1e-9;
                let s = ss.spectral_density(l).unwrap();
                assert!(frobenius_c(&s.phi) <= d.phi / (l * l));
                assert!(frobenius_c(&s.psi) <= d.psi / (l * l));
            }
        }
    }

    /// (1/2π)∫Φ(λ)e^{iλτ}dλ = P(τ) and (1/2π)∫Ψ(λ)e^{iλτ}dλ = Λ(τ).
    #[test]
    fn kernels_match_inverse_fourier_transform_of_density() {
        let ss = second_model();
        let panels = log_grid(1e-3, 400.0, 300);
        for tau in [0.0, 0.4, 1.1] {
            let mut pf = CMatrix::zeros(2, 2);
            let mut lf = CMatrix::zeros(2, 2);
            for w in panels.windows(2) {
                for (l, wt) in crate::quad::gk21_nodes(w[0], w[1]) {
                    let s = ss.spectral_density(l).unwrap();
                    let sm = ss.spectral_density(-l).unwrap();
                    let e = Complex64::new(0.0, l * tau).exp();
                    let c = Complex64::new(wt / (2.0 * std::f64::consts::PI), 0.0);
                    pf += (s.phi.map(|z| z * e) + sm.phi.map(|z| z / e)).map(|z| z * c);
                    lf += (s.psi.map(|z| z * e) + sm.psi.map(|z| z / e)).map(|z| z * c);
                }
            }
            let k = ss.kernels(tau).unwrap();
            // Truncation of the λ⁻² tail at 400 dominates the error.
            assert!(frobenius_c(&(pf - to_complex(&k.p))) < 5e-3, "P at {tau}");
            assert!(frobenius_c(&(lf - to_complex(&k.lambda))) < 5e-3, "Lambda at {tau}");
        }
    }

    #[test]
    fn admissibility_at_zero_theta() {
        let a = admissibility(&test_model(), 0.0, &GridConfig::default()).unwrap();
        assert!(a.admissible);
        assert_eq!(a.margin, 1.0);
        assert_relative_eq!(a.theta_star, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn ou_threshold() {
        let a = admissibility(&ScalarOu::default(), 0.2, &GridConfig::default()).unwrap();
        assert_relative_eq!(a.theta_star, 0.5, max_relative = 1e-12);
        assert_relative_eq!(a.margin, 1.0 - 0.2 * 2.0, max_relative = 1e-12);
    }

    #[test]
    fn test_model_admissible_below_threshold() {
        for theta in [0.1, 0.5, 0.9, 0.99] {
            let a = admissibility(&test_model(), theta, &GridConfig::default()).unwrap();
            assert!(a.admissible, "theta {theta}");
            assert!(a.sup_quantum <= a.sup_classical + 1e-12);
        }
    }

    #[test]
    fn coarse_grid_is_reported() {
        let grid = [0.0, 1e-3, 1e3];
        let err = admissibility_on_grid(&ScalarOu::default(), 0.1, &grid, 4.0).unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse { .. }));
    }

    #[test]
    fn margin_root_for_classical_source_is_theta_star() {
        let r = margin_root(&ScalarOu::default(), 2.0, &GridConfig::default())
            .unwrap()
            .unwrap();
        assert_relative_eq!(r, 0.5, max_relative = 1e-8);
        assert!(margin_root(&ScalarOu::default(), 0.4, &GridConfig::default())
            .unwrap()
            .is_none());
    }

    fn arb_model() -> impl Strategy<Value = OqhoParams> {
        (1usize..=2, 1usize..=2, prop::collection::vec(-1.5f64..1.5, 40))
            .prop_map(|(n, m, e)| params_from_entries(n, m, &e))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn realizability_identity(p in arb_model()) {
            let ss = StateSpace::build(&p).unwrap();
            prop_assert!(ss.pr_residual <= 1e-10);
        }

        #[test]
        fn combined_lyapunov_equation(p in arb_model()) {
            let ss = StateSpace::build(&p).unwrap();
            prop_assume!(ss.hurwitz);
            let g = ss.gamma.clone().unwrap();
            let i = Complex64::i();
            let x = to_complex(&g) + to_complex(&ss.theta).map(|z| z * i);
            let a = to_complex(&ss.a);
            let b = to_complex(&ss.b);
            let m = ss.b.ncols();
            let w = to_complex(&RMatrix::identity(m, m)) + to_complex(&ss.j).map(|z| z * i);
            let res = &a * &x + &x * a.transpose() + &b * w * b.transpose();
            let scale = a.norm() * x.norm() + ss.b.norm_squared();
            prop_assert!(frobenius_c(&res) <= 1e-9 * scale);
        }

        #[test]
        fn symmetrized_product_is_isospectral(p in arb_model(), lam in -5.0f64..5.0, theta in 0.01f64..0.5) {
            let ss = StateSpace::build(&p).unwrap();
            prop_assume!(ss.hurwitz);
            let s = ss.spectral_density(lam).unwrap();
            let (sym_max, _) = sample_lambda_max(&s, theta).unwrap();
            let tanc = SkewSpectrum::new(&s.psi, 1e-9).unwrap()
                .apply(crate::matfun::ScalarFn::Tanc, theta);
            let prod = &s.phi * tanc;
            let ev = prod.schur().eigenvalues().unwrap();
            let prod_max = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((prod_max - sym_max).abs() <= 1e-9 * sym_max.abs().max(1.0));
        }

        #[test]
        fn density_is_positive(p in arb_model(), lam in -20.0f64..20.0) {
            let ss = StateSpace::build(&p).unwrap();
            prop_assume!(ss.hurwitz);
            prop_assert!(ss.spectral_density(lam).unwrap().check(1e-9).is_ok());
        }
    }
}
