//! Finite-horizon operators on a midpoint grid.
//!
//! Vectors on the grid are stored node-major: entry `i·n + a` is component
//! `a` at node `t_i`. The commutator operator is `L[i,j] = Λ(t_i − t_j)Δt`,
//! exactly antisymmetric by construction. Functions of `θL` are even and so
//! are functions of `−L² = LᵀL`, which is real symmetric; `tanc(θL)` is
//! computed from that decomposition.

use std::io::{self, Write};

use nalgebra::{Cholesky, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::freqrate::{qef_rate, RateConfig};
use crate::matfun::{expm, ln_cosh, tanhc, CMatrix, HermitianEig, RMatrix};
use crate::model::StateSpace;
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_points: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_points: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("T", "horizon must be positive and finite"));
        }
        if n_points < 2 {
            return Err(Error::invalid("N", "need at least two nodes"));
        }
        Ok(Self { horizon, n_points })
    }

    /// `round(density·T)` nodes.
    pub fn with_density(horizon: f64, per_unit: f64) -> Result<Self> {
        Self::new(horizon, (per_unit * horizon).round().max(2.0) as usize)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_points as f64
    }

    /// `t_i = (i − ½)Δt`, `i = 1..N`.
    pub fn nodes(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_points).map(|i| (i as f64 + 0.5) * dt).collect()
    }
}

/// Nyström matrices for a fixed `(grid, θ)`.
#[derive(Debug, Clone)]
pub struct DiscretizedOperators {
    pub grid: TimeGrid,
    pub theta: f64,
    /// Output dimension.
    pub n: usize,
    pub l: RMatrix,
    pub p: Option<RMatrix>,
    /// `tanc(θL)`
    pub k: RMatrix,
    /// `tanc(θL)^{1/2}`
    pub k_half: RMatrix,
    /// Eigenvalues of `LᵀL`, ascending and clipped at zero.
    pub gram_eigenvalues: DVector<f64>,
}

impl DiscretizedOperators {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `Tr ln cos(θL) = Σ ln cosh(θ√x)` over the eigenvalues `x` of `LᵀL`.
    pub fn ln_cos_trace(&self) -> f64 {
        self.gram_eigenvalues
            .iter()
            .map(|&x| ln_cosh(self.theta * x.sqrt()))
            .sum()
    }

    pub fn covariance(&self) -> Result<&RMatrix> {
        self.p.as_ref().ok_or(Error::GramianUnavailable)
    }
}

fn block_matrix(n: usize, nn: usize, dt: f64, lag: impl Fn(usize) -> RMatrix, antisym: bool) -> RMatrix {
    let lags: Vec<RMatrix> = (0..nn).map(|k| lag(k).scale(dt)).collect();
    let dim = n * nn;
    let mut m = RMatrix::zeros(dim, dim);
    for i in 0..nn {
        for j in 0..=i {
            let b = &lags[i - j];
            for a in 0..n {
                for c in 0..n {
                    let v = b[(a, c)];
                    m[(i * n + a, j * n + c)] = v;
                    if i != j {
                        m[(j * n + c, i * n + a)] = if antisym { -v } else { v };
                    }
                }
            }
        }
    }
    if antisym {
        (&m - m.transpose()).scale(0.5)
    } else {
        (&m + m.transpose()).scale(0.5)
    }
}

/// Builds `L`, `P` (when the Gramian exists) and `K = tanc(θL)`.
pub fn build_operators(ss: &StateSpace, grid: &TimeGrid, theta: f64) -> Result<DiscretizedOperators> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::invalid("theta", "must be finite and nonnegative"));
    }
    let nn = grid.n_points;
    let n = ss.n();
    let dt = grid.dt();
    let exps: Vec<RMatrix> = (0..nn).map(|k| expm(&ss.a.scale(k as f64 * dt))).collect();
    let st = ss.s.transpose();
    let l = block_matrix(n, nn, dt, |k| &ss.s * &exps[k] * &ss.theta * &st, true);
    let p = ss
        .gamma
        .as_ref()
        .map(|g| block_matrix(n, nn, dt, |k| &ss.s * &exps[k] * g * &st, false));
    let gram = HermitianEig::new(&(l.transpose() * &l))?;
    let x = gram.eigenvalues.map(|v| v.max(0.0));
    let k = gram.map_real(|v| tanhc(theta * v.max(0.0).sqrt()));
    let k_half = gram.map_real(|v| tanhc(theta * v.max(0.0).sqrt()).sqrt());
    Ok(DiscretizedOperators {
        grid: *grid,
        theta,
        n,
        l,
        p,
        k: (&k + k.transpose()).scale(0.5),
        k_half: (&k_half + k_half.transpose()).scale(0.5),
        gram_eigenvalues: x,
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FiniteHorizon {
    pub log_qef: f64,
    /// `−½ Tr ln cos(θL)`
    pub ln_cos_term: f64,
    /// `−½ Σ ln(1 − θ m_k)`
    pub det_term: f64,
    pub mean_term: f64,
    /// `ρ(PK)`
    pub spectral_radius: f64,
}

/// Mean samples with the same value at every node.
pub fn constant_mean(grid: &TimeGrid, value: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        grid.n_points * value.len(),
        (0..grid.n_points).flat_map(|_| value.iter().copied()),
    )
}

/// `ln Ξ` from prebuilt operators.
pub fn log_qef_from_operators(ops: &DiscretizedOperators, mu: Option<&DVector<f64>>) -> Result<FiniteHorizon> {
    let theta = ops.theta;
    let dim = ops.dim();
    if let Some(m) = mu {
        if m.len() != dim {
            return Err(Error::invalid("mu", format!("expected {dim} samples")));
        }
    }
    if theta == 0.0 {
        return Ok(FiniteHorizon::default());
    }
    let p = ops.covariance()?;
    let m = &ops.k_half * p * &ops.k_half;
    let m = (&m + m.transpose()).scale(0.5);
    let eigs = m.clone().symmetric_eigenvalues();
    let rho = eigs.max().max(0.0);
    if theta * rho >= 1.0 {
        return Err(Error::SpectralConditionViolated {
            value: theta * rho,
            spectral_radius: rho,
        });
    }
    let det_term = -0.5 * eigs.iter().map(|&v| (-theta * v.max(0.0)).ln_1p()).sum::<f64>();
    let ln_cos_term = -0.5 * ops.ln_cos_trace();
    let mean_term = match mu {
        None => 0.0,
        Some(mu) => {
            let y = &ops.k_half * mu;
            let a = RMatrix::identity(dim, dim) - m.scale(theta);
            let chol = Cholesky::new(a).ok_or(Error::SpectralConditionViolated {
                value: theta * rho,
                spectral_radius: rho,
            })?;
            let z = chol.solve(&y);
            0.5 * theta * ops.grid.dt() * y.dot(&z)
        }
    };
    Ok(FiniteHorizon {
        log_qef: ln_cos_term + det_term + mean_term,
        ln_cos_term,
        det_term,
        mean_term,
        spectral_radius: rho,
    })
}

/// Finite-horizon `ln Ξ` of the Gaussian-state formula, with optional mean
/// samples (node-major, length `nN`).
pub fn finite_horizon_log_qef(
    ss: &StateSpace,
    grid: &TimeGrid,
    theta: f64,
    mu: Option<&DVector<f64>>,
) -> Result<FiniteHorizon> {
    if theta == 0.0 {
        return Ok(FiniteHorizon::default());
    }
    log_qef_from_operators(&build_operators(ss, grid, theta)?, mu)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvergencePoint {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_points: usize,
    pub rate_estimate: f64,
    pub target: f64,
    pub rel_error: f64,
}

/// `(1/T) ln Ξ` over several horizons at fixed node density, against the
/// infinite-horizon rate. Horizons run concurrently.
pub fn rate_convergence(
    ss: &StateSpace,
    theta: f64,
    horizons: &[f64],
    per_unit: f64,
    cfg: &RateConfig,
) -> Result<Vec<ConvergencePoint>> {
    let target = qef_rate(ss, theta, cfg)?.value;
    horizons
        .par_iter()
        .map(|&t| {
            let grid = TimeGrid::with_density(t, per_unit)?;
            let est = finite_horizon_log_qef(ss, &grid, theta, None)?.log_qef / t;
            Ok(ConvergencePoint {
                horizon: t,
                n_points: grid.n_points,
                rate_estimate: est,
                target,
                rel_error: (est - target).abs() / target.abs(),
            })
        })
        .collect()
}

/// One eigenfrequency `ω > 0` with `L f = iω f`, `f = φ + iψ`, normalized
/// so that `Σ |f(t_i)|² Δt = 1`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub omega: f64,
    pub phi: DVector<f64>,
    pub psi: DVector<f64>,
}

impl EigenPair {
    pub fn f(&self) -> DVector<Complex64> {
        self.phi.zip_map(&self.psi, Complex64::new)
    }
}

#[derive(Debug, Clone)]
pub struct Eigenbasis {
    /// Pairs with `ω` descending.
    pub pairs: Vec<EigenPair>,
    /// Full spectrum of `−iL`, ascending.
    pub spectrum: DVector<f64>,
    pub min_abs_omega: f64,
    /// `max_k |w_k + w_{N−1−k}|` over the sorted spectrum.
    pub pairing_defect: f64,
}

/// Spectrum of `−iL` with the smallest modulus; no zero check.
pub fn spectrum(ops: &DiscretizedOperators) -> Result<(DVector<f64>, f64)> {
    let h = ops.l.map(|v| Complex64::new(0.0, -v));
    let w = h.symmetric_eigenvalues();
    let mut v: Vec<f64> = w.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let min_abs = v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    Ok((DVector::from_vec(v), min_abs))
}

/// Eigenfrequencies and eigenfunctions of the discrete commutator operator.
/// `zero_tol` is relative to the largest frequency.
pub fn eigenbasis(ops: &DiscretizedOperators, zero_tol: f64) -> Result<Eigenbasis> {
    let h: CMatrix = ops.l.map(|v| Complex64::new(0.0, -v));
    let eig = HermitianEig::new(&h)?;
    let w = &eig.eigenvalues;
    let dim = w.len();
    let top = w.amax();
    let min_abs = w.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if min_abs < zero_tol * top {
        return Err(Error::ZeroEigenvalue {
            min_abs_omega: min_abs,
            tol: zero_tol * top,
        });
    }
    let pairing_defect = (0..dim)
        .map(|k| (w[k] + w[dim - 1 - k]).abs())
        .fold(0.0, f64::max);
    let scale = 1.0 / ops.grid.dt().sqrt();
    let pairs = (0..dim)
        .rev()
        .take_while(|&k| w[k] > 0.0)
        .map(|k| {
            let col = eig.eigenvectors.column(k);
            EigenPair {
                omega: w[k],
                phi: col.map(|z| z.re * scale),
                psi: col.map(|z| z.im * scale),
            }
        })
        .collect();
    Ok(Eigenbasis {
        pairs,
        spectrum: w.clone(),
        min_abs_omega: min_abs,
        pairing_defect,
    })
}

/// Gram matrix in the `Δt`-weighted inner product of the stacked family
/// `φ_1, ψ_1, φ_2, ψ_2, …` over the first `count` pairs.
pub fn qkl_gram(pairs: &[EigenPair], dt: f64, count: usize) -> RMatrix {
    let vecs: Vec<&DVector<f64>> = pairs
        .iter()
        .take(count)
        .flat_map(|p| [&p.phi, &p.psi])
        .collect();
    let k = vecs.len();
    RMatrix::from_fn(k, k, |a, b| vecs[a].dot(vecs[b]) * dt)
}

/// `max |G − ½I|` for [`qkl_gram`].
pub fn orthonormality_residual(pairs: &[EigenPair], dt: f64, count: usize) -> f64 {
    let g = qkl_gram(pairs, dt, count);
    let k = g.nrows();
    (g - RMatrix::identity(k, k).scale(0.5)).amax()
}

/// Relative Frobenius error of `2Σ ω_k (φ_k(s)ψ_k(t)ᵀ − ψ_k(s)φ_k(t)ᵀ)Δt`
/// against `L` using the first `modes` pairs.
pub fn mercer_residual(ops: &DiscretizedOperators, pairs: &[EigenPair], modes: usize) -> f64 {
    let dim = ops.dim();
    let dt = ops.grid.dt();
    let mut r = RMatrix::zeros(dim, dim);
    for p in pairs.iter().take(modes) {
        let c = 2.0 * p.omega * dt;
        r += (&p.phi * p.psi.transpose() - &p.psi * p.phi.transpose()).scale(c);
    }
    (&ops.l - r).norm() / ops.l.norm()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HilbertSchmidt {
    /// `2 Σ_{ω>0} ω²`
    pub eigen_sum: f64,
    /// `Σ_{i,j} ‖Λ(t_i − t_j)‖²_F Δt²`
    pub discrete_sum: f64,
    /// `∫_{−T}^{T} (T − |τ|) ‖Λ(τ)‖²_F dτ`
    pub continuum: f64,
}

pub fn hilbert_schmidt(ss: &StateSpace, ops: &DiscretizedOperators, basis: &Eigenbasis) -> Result<HilbertSchmidt> {
    let eigen_sum = 2.0 * basis.pairs.iter().map(|p| p.omega * p.omega).sum::<f64>();
    let discrete_sum = ops.l.norm_squared();
    let t = ops.grid.horizon;
    // ‖Λ(−τ)‖ = ‖Λ(τ)‖, so fold onto [0, T].
    let f = |tau: f64| Ok(2.0 * (t - tau) * ss.lambda_kernel(tau).norm_squared());
    let breaks: Vec<f64> = (0..=16).map(|k| t * k as f64 / 16.0).collect();
    let r = quad::adaptive(f, &breaks, &quad::AdaptiveConfig::default())?;
    Ok(HilbertSchmidt {
        eigen_sum,
        discrete_sum,
        continuum: r.value,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BvpResidual {
    /// Interior residual of the second-order ODE relative to its forcing.
    pub ode: f64,
    /// Left boundary condition residual relative to `max |z|`.
    pub bc_left: f64,
    pub bc_right: f64,
}

impl BvpResidual {
    pub fn bc(&self) -> f64 {
        self.bc_left.max(self.bc_right)
    }
}

fn cmul(m: &CMatrix, v: &DVector<Complex64>) -> DVector<Complex64> {
    m * v
}

/// Value and slope at `t0` of the quadratic through three samples.
fn quadratic_end(ts: [f64; 3], zs: [&DVector<Complex64>; 3], t0: f64) -> (DVector<Complex64>, DVector<Complex64>) {
    let v = RMatrix::from_fn(3, 3, |r, c| (ts[r] - t0).powi(c as i32));
    let inv = v.try_inverse().expect("distinct nodes");
    let comb = |row: usize| {
        let mut out = zs[0].map(|_| Complex64::new(0.0, 0.0));
        for k in 0..3 {
            out += zs[k].map(|z| z * inv[(row, k)]);
        }
        out
    };
    (comb(0), comb(1))
}

/// Residuals of the boundary value problem satisfied by `z = S⁻¹(iω f)` for
/// an eigenpair: the ODE `z̈ + (℧Aᵀ℧⁻¹ − A)ż − ℧Aᵀ℧⁻¹Az = −℧Sᵀf` on interior
/// nodes and the conditions `(I + Θ℧⁻¹A)z(0) = Θ℧⁻¹ż(0)`, `ż(T) = Az(T)`.
pub fn bvp_residual(ss: &StateSpace, pair: &EigenPair, grid: &TimeGrid) -> Result<BvpResidual> {
    let nu = ss.nu();
    let n = ss.n();
    if n != nu {
        return Err(Error::NonSquareS);
    }
    let s_inv = ss.s.clone().try_inverse().ok_or(Error::NonSquareS)?;
    let mho_inv = ss.mho.clone().try_inverse().ok_or(Error::SingularMho)?;
    let nn = grid.n_points;
    if pair.phi.len() != n * nn || nn < 3 {
        return Err(Error::invalid("pair", "sample count does not match the grid"));
    }
    let f = pair.f();
    if f.norm() == 0.0 {
        return Err(Error::invalid("pair", "eigenfunction is zero"));
    }
    let c = |m: &RMatrix| m.map(|x| Complex64::new(x, 0.0));
    let at = ss.a.transpose();
    let c1 = c(&(&ss.mho * &at * &mho_inv - &ss.a));
    let c0 = c(&(&ss.mho * &at * &mho_inv * &ss.a));
    let forcing = c(&(&ss.mho * ss.s.transpose()));
    let s_inv = c(&s_inv);
    let iw = Complex64::new(0.0, pair.omega);
    let fi: Vec<DVector<Complex64>> = (0..nn).map(|i| f.rows(i * n, n).into_owned()).collect();
    let z: Vec<DVector<Complex64>> = fi.iter().map(|v| cmul(&s_inv, v).map(|x| x * iw)).collect();
    let dt = grid.dt();
    let mut res_max = 0.0f64;
    let mut rhs_max = 0.0f64;
    for i in 0..nn {
        let rhs = -cmul(&forcing, &fi[i]);
        rhs_max = rhs_max.max(rhs.camax());
        if i == 0 || i == nn - 1 {
            continue;
        }
        let zd = (&z[i + 1] - &z[i - 1]).map(|x| x / (2.0 * dt));
        let zdd = (&z[i + 1] - z[i].map(|x| x * 2.0) + &z[i - 1]).map(|x| x / (dt * dt));
        let res = zdd + cmul(&c1, &zd) - cmul(&c0, &z[i]) - rhs;
        res_max = res_max.max(res.camax());
    }
    let t = grid.nodes();
    let (z0, zd0) = quadratic_end([t[0], t[1], t[2]], [&z[0], &z[1], &z[2]], 0.0);
    let (zt, zdt) = quadratic_end(
        [t[nn - 3], t[nn - 2], t[nn - 1]],
        [&z[nn - 3], &z[nn - 2], &z[nn - 1]],
        grid.horizon,
    );
    let tm = &ss.theta * &mho_inv;
    let left_op = c(&(RMatrix::identity(nu, nu) + &tm * &ss.a));
    let b0 = cmul(&left_op, &z0) - cmul(&c(&tm), &zd0);
    let bt = zdt - cmul(&c(&ss.a), &zt);
    let zmax = z.iter().map(|v| v.camax()).fold(0.0, f64::max);
    Ok(BvpResidual {
        ode: res_max / rhs_max,
        bc_left: b0.camax() / zmax,
        bc_right: bt.camax() / zmax,
    })
}

/// Writes eigenpairs as CSV: `k,omega` followed by `phi_i_a` and `psi_i_a`
/// for node `i` and component `a`.
pub fn write_eigenpairs_csv<W: Write>(mut out: W, pairs: &[EigenPair], n: usize) -> io::Result<()> {
    let len = pairs.first().map(|p| p.phi.len()).unwrap_or(0);
    let nodes = len.checked_div(n).unwrap_or(0);
    write!(out, "k,omega")?;
    for name in ["phi", "psi"] {
        for i in 0..nodes {
            for a in 0..n {
                write!(out, ",{name}_{i}_{a}")?;
            }
        }
    }
    writeln!(out)?;
    for (k, p) in pairs.iter().enumerate() {
        write!(out, "{},{:.16e}", k + 1, p.omega)?;
        for v in p.phi.iter().chain(p.psi.iter()) {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::{apply_skew_function, to_complex, ScalarFn};
    use crate::model::{bj, OqhoParams};
    use rand::{Rng, SeedableRng};

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

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.25, 0.75, 1.25, 1.75]);
        assert_eq!(TimeGrid::with_density(4.0, 50.0).unwrap().n_points, 200);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
    }

    #[test]
    fn operators_structure() {
        let ss = second_model();
        let g = TimeGrid::new(2.0, 40).unwrap();
        let ops = build_operators(&ss, &g, 0.3).unwrap();
        assert_eq!((&ops.l + ops.l.transpose()).amax(), 0.0);
        let p = ops.p.as_ref().unwrap();
        assert_eq!((p - p.transpose()).amax(), 0.0);
        assert!(p.clone().symmetric_eigenvalues().min() > -1e-12);
        let lag = ss.lambda_kernel(g.nodes()[5] - g.nodes()[2]).scale(g.dt());
        for a in 0..2 {
            for c in 0..2 {
                assert!((ops.l[(5 * 2 + a, 2 * 2 + c)] - lag[(a, c)]).abs() < 1e-15);
            }
        }
        let kh2 = &ops.k_half * &ops.k_half;
        assert!((kh2 - &ops.k).amax() < 1e-12);
    }

    #[test]
    fn zero_theta_gives_identity_covariance() {
        let ops = build_operators(&test_model(), &TimeGrid::new(2.0, 20).unwrap(), 0.0).unwrap();
        assert!((&ops.k - RMatrix::identity(40, 40)).amax() < 1e-12);
        let r = finite_horizon_log_qef(&test_model(), &TimeGrid::new(2.0, 20).unwrap(), 0.0, None).unwrap();
        assert_eq!(r.log_qef, 0.0);
    }

    #[test]
    fn classical_model_has_trivial_commutator() {
        let ss = StateSpace::explicit(
            -RMatrix::identity(2, 2),
            RMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            RMatrix::identity(2, 2),
            RMatrix::zeros(2, 2),
        )
        .unwrap();
        let ops = build_operators(&ss, &TimeGrid::new(1.0, 10).unwrap(), 0.7).unwrap();
        assert_eq!(ops.l.amax(), 0.0);
        assert!((&ops.k - RMatrix::identity(20, 20)).amax() < 1e-14);
    }

    #[test]
    fn tanc_spectrum_in_unit_interval() {
        let ops = build_operators(&test_model(), &TimeGrid::new(4.0, 200).unwrap(), 0.8).unwrap();
        let e = ops.k.clone().symmetric_eigenvalues();
        assert!(e.min() > 0.0 && e.max() <= 1.0 + 1e-12);
    }

    #[test]
    fn one_mode_log_qef_is_exactly_linear_in_horizon() {
        for (t, nn) in [(1.0, 20), (2.0, 50), (3.0, 64)] {
            let r = finite_horizon_log_qef(&test_model(), &TimeGrid::new(t, nn).unwrap(), 0.1, None).unwrap();
            assert!((r.log_qef - 0.1 * t).abs() < 1e-11, "{t}: {}", r.log_qef);
        }
    }

    #[test]
    fn mean_term_is_nonnegative_and_additive() {
        let ss = second_model();
        let g = TimeGrid::new(2.0, 40).unwrap();
        let ops = build_operators(&ss, &g, 0.2).unwrap();
        let mu = constant_mean(&g, &[0.3, -0.2]);
        let with = log_qef_from_operators(&ops, Some(&mu)).unwrap();
        let without = log_qef_from_operators(&ops, None).unwrap();
        assert!(with.mean_term > 0.0);
        assert!((with.log_qef - without.log_qef - with.mean_term).abs() < 1e-14);
    }

    #[test]
    fn spectral_condition_is_enforced() {
        let ss = second_model();
        let g = TimeGrid::new(2.0, 40).unwrap();
        let err = finite_horizon_log_qef(&ss, &g, 5.0, None).unwrap_err();
        assert!(matches!(err, Error::SpectralConditionViolated { value, .. } if value >= 1.0));
    }

    #[test]
    fn convergence_error_decreases_with_horizon() {
        let pts = rate_convergence(&second_model(), 0.2, &[1.0, 2.0, 4.0], 40.0, &RateConfig::default()).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].rel_error < w[0].rel_error);
        }
        assert!(pts[2].rel_error < 0.1);
    }

    #[test]
    fn eigenbasis_properties() {
        let ss = second_model();
        let g = TimeGrid::new(2.0, 60).unwrap();
        let ops = build_operators(&ss, &g, 0.3).unwrap();
        let b = eigenbasis(&ops, 1e-8).unwrap();
        assert!(b.pairing_defect < 1e-10);
        assert_eq!(b.pairs.len(), 60);
        assert!(orthonormality_residual(&b.pairs, g.dt(), 10) < 1e-10);
        for p in b.pairs.iter().take(5) {
            let lf = to_complex(&ops.l) * p.f();
            let r = (lf - p.f().map(|z| z * Complex64::new(0.0, p.omega))).norm();
            assert!(r < 1e-10 * p.f().norm());
        }
        let full = eigenbasis(&ops, 0.0).unwrap();
        assert!(mercer_residual(&ops, &full.pairs, full.pairs.len()) < 1e-10);
        let r: Vec<f64> = [1, 4, 16].iter().map(|&m| mercer_residual(&ops, &b.pairs, m)).collect();
        assert!(r[0] > r[1] && r[1] > r[2]);
    }

    #[test]
    fn trace_formula_matches_direct_matrix_function() {
        let ss = second_model();
        let g = TimeGrid::new(2.0, 50).unwrap();
        let theta = 0.4;
        let ops = build_operators(&ss, &g, theta).unwrap();
        let b = eigenbasis(&ops, 1e-8).unwrap();
        let from_pairs: f64 = b.pairs.iter().map(|p| 2.0 * ln_cosh(theta * p.omega)).sum();
        let direct = apply_skew_function(&to_complex(&ops.l.scale(theta)), ScalarFn::LnCos, 1.0).unwrap();
        let tr: f64 = direct.diagonal().iter().map(|z| z.re).sum();
        assert!((from_pairs - tr).abs() < 1e-8);
        assert!((ops.ln_cos_trace() - tr).abs() < 1e-8);
    }

    #[test]
    fn hilbert_schmidt_identity() {
        let ss = test_model();
        let g = TimeGrid::new(2.0, 100).unwrap();
        let ops = build_operators(&ss, &g, 0.1).unwrap();
        let b = eigenbasis(&ops, 1e-8).unwrap();
        let hs = hilbert_schmidt(&ss, &ops, &b).unwrap();
        assert!((hs.eigen_sum - hs.discrete_sum).abs() < 1e-10 * hs.discrete_sum);
        assert!((hs.eigen_sum - hs.continuum).abs() < 0.01 * hs.continuum);
    }

    #[test]
    fn rank_deficient_output_triggers_zero_eigenvalue() {
        let t = test_model();
        let s = RMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let ss = StateSpace::explicit(t.a.clone(), t.b.clone(), s, t.theta.clone()).unwrap();
        let ops = build_operators(&ss, &TimeGrid::new(2.0, 40).unwrap(), 0.1).unwrap();
        assert!(matches!(eigenbasis(&ops, 1e-8), Err(Error::ZeroEigenvalue { .. })));
    }

    #[test]
    fn bvp_residual_converges() {
        let ss = test_model();
        let mut prev = None;
        for nn in [100, 200] {
            let g = TimeGrid::new(2.0, nn).unwrap();
            let ops = build_operators(&ss, &g, 0.1).unwrap();
            let b = eigenbasis(&ops, 1e-8).unwrap();
            let r = bvp_residual(&ss, &b.pairs[0], &g).unwrap();
            assert!(r.bc() < 1e-2);
            if let Some(p) = prev {
                assert!(p / r.ode > 3.0, "{p} -> {}", r.ode);
            }
            prev = Some(r.ode);
        }
    }

    #[test]
    fn bvp_preconditions() {
        let ss = test_model();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let zero = EigenPair {
            omega: 1.0,
            phi: DVector::zeros(20),
            psi: DVector::zeros(20),
        };
        assert_eq!(bvp_residual(&ss, &zero, &g).unwrap_err().field(), Some("pair"));
        let narrow = StateSpace::build(&OqhoParams {
            s: RMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            ..OqhoParams::one_mode()
        })
        .unwrap();
        let p = EigenPair {
            omega: 1.0,
            phi: DVector::from_element(10, 1.0),
            psi: DVector::zeros(10),
        };
        assert_eq!(bvp_residual(&narrow, &p, &g).unwrap_err(), Error::NonSquareS);
    }

    #[test]
    fn covariance_operator_is_majorized() {
        let g = TimeGrid::new(2.0, 40).unwrap();
        let ops = build_operators(&second_model(), &g, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = DVector::from_fn(80, |_, _| rng.random_range(-1.0..1.0));
            let quad = f.dot(&(&ops.k * &f)) * g.dt();
            assert!(quad > 0.0 && quad <= f.norm_squared() * g.dt());
        }
    }

    #[test]
    fn csv_dump_shape() {
        let ops = build_operators(&test_model(), &TimeGrid::new(1.0, 4).unwrap(), 0.1).unwrap();
        let b = eigenbasis(&ops, 1e-8).unwrap();
        let mut buf = Vec::new();
        write_eigenpairs_csv(&mut buf, &b.pairs, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + b.pairs.len());
        assert!(lines[0].starts_with("k,omega,phi_0_0,phi_0_1"));
        assert_eq!(lines[1].split(',').count(), 2 + 16);
    }
}
