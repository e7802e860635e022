//! Dense matrix functions and structured linear algebra.
//!
//! Functions of skew-Hermitian arguments go through the Hermitian
//! eigendecomposition of `-i·Psi`: with real eigenvalues `h`, the matrix
//! `theta·Psi` has eigenvalues `i·theta·h`, so `cos`, `sinc`, `tanc` and
//! `ln∘cos` become `cosh`, `sinhc`, `tanhc` and `ln cosh` on the real line.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type RMatrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;
pub type RVector = DVector<f64>;

const EIG_EPS: f64 = f64::EPSILON;
const EIG_MAX_ITER: usize = 10_000;

/// Tolerances used by the structural checks in this module.
#[derive(Debug, Clone, Copy)]
pub struct MatTolerances {
    /// Relative defect allowed in `Psi + Psi^*` before rejecting a skew-Hermitian input.
    pub structural: f64,
    /// Relative residual required from the Lyapunov solver.
    pub lyapunov: f64,
}

impl Default for MatTolerances {
    fn default() -> Self {
        Self {
            structural: 1e-9,
            lyapunov: 1e-10,
        }
    }
}

/// Eigendecomposition of a Hermitian (or real symmetric) matrix with the
/// spectrum sorted ascending.
#[derive(Debug, Clone)]
pub struct HermitianEig<T: ComplexField<RealField = f64>> {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<T>,
}

impl<T: ComplexField<RealField = f64>> HermitianEig<T> {
    /// Decomposes the Hermitian part `(M + M^*)/2` of `m`.
    pub fn new(m: &DMatrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::EigFailure("matrix is not square".into()));
        }
        let sym = (m + m.adjoint()).scale(0.5);
        let eig = nalgebra::SymmetricEigen::try_new(sym, EIG_EPS, EIG_MAX_ITER)
            .ok_or_else(|| Error::EigFailure("symmetric QR iteration did not converge".into()))?;
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut eigenvectors = DMatrix::<T>::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V · diag(f(w)) · V^*` with a real scalar function.
    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> DMatrix<T> {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for k in 0..n {
            scaled.column_mut(k).scale_mut(f(self.eigenvalues[k]));
        }
        &scaled * self.eigenvectors.adjoint()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }
}

impl HermitianEig<Complex64> {
    /// `V · diag(g(w)) · V^*` with a complex-valued scalar function.
    pub fn map_complex(&self, g: impl Fn(f64) -> Complex64) -> CMatrix {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for k in 0..n {
            let gk = g(self.eigenvalues[k]);
            for v in scaled.column_mut(k).iter_mut() {
                *v *= gk;
            }
        }
        &scaled * self.eigenvectors.adjoint()
    }
}

/// Scalar functions that can be lifted to skew-Hermitian matrix arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarFn {
    Cos,
    Sinc,
    Tanc,
    LnCos,
    Exp,
}

impl ScalarFn {
    /// Value of the function at the purely imaginary point `i·x`.
    pub fn at_imaginary(self, x: f64) -> Complex64 {
        match self {
            ScalarFn::Cos => Complex64::new(x.cosh(), 0.0),
            ScalarFn::Sinc => Complex64::new(sinhc(x), 0.0),
            ScalarFn::Tanc => Complex64::new(tanhc(x), 0.0),
            ScalarFn::LnCos => Complex64::new(ln_cosh(x), 0.0),
            ScalarFn::Exp => Complex64::new(x.cos(), x.sin()),
        }
    }

    pub fn is_even(self) -> bool {
        !matches!(self, ScalarFn::Exp)
    }
}

/// `sinh(x)/x`, equal to 1 at the origin.
pub fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 + x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sinh() / x
    }
}

/// `tanh(x)/x`, equal to 1 at the origin; takes values in (0, 1].
pub fn tanhc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0
    } else {
        x.tanh() / x
    }
}

/// `cosh(x) − 1` without cancellation.
pub fn coshm1(x: f64) -> f64 {
    let h = (0.5 * x).sinh();
    2.0 * h * h
}

/// `sinh(x)/x − 1` without cancellation.
pub fn sinhcm1(x: f64) -> f64 {
    if x.abs() < 0.5 {
        // Σ_{j≥1} x^{2j}/(2j+1)!
        let x2 = x * x;
        let mut term = x2 / 6.0;
        let mut sum = 0.0;
        let mut j = 1.0;
        while term > f64::EPSILON * 1e-3 * sum || sum == 0.0 {
            sum += term;
            term *= x2 / ((2.0 * j + 2.0) * (2.0 * j + 3.0));
            j += 1.0;
            if term == 0.0 {
                break;
            }
        }
        sum
    } else {
        x.sinh() / x - 1.0
    }
}

/// `Re[ln det(I + E) − Tr E]`, accurate when `E` is small.
pub fn log_det_1p_minus_trace(e: &CMatrix) -> Result<f64> {
    let n = e.nrows();
    if !e.is_square() || n == 0 {
        return Err(Error::SingularMatrix);
    }
    let im_tol = 1e-8 * n as f64;
    let tr = e.trace();
    if frobenius_c(e) > 0.25 {
        let d = CMatrix::identity(n, n) + e;
        let ld = log_det_real_with(&d, f64::INFINITY)?;
        let im = wrap_angle(ld.im_residual - tr.im);
        if im.abs() > im_tol {
            return Err(Error::ImaginaryResidual { imag: im, tol: im_tol });
        }
        return Ok(ld.value - tr.re);
    }
    // ln det(I + E) − Tr E = Σ_{k≥2} (−1)^{k+1} Tr(E^k)/k.
    let mut pow = e * e;
    let mut sum = Complex64::new(0.0, 0.0);
    for k in 2..200 {
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        let term = pow.trace() * (sign / k as f64);
        sum += term;
        if term.norm() <= f64::EPSILON * sum.norm() * 0.01 || term.norm() == 0.0 {
            break;
        }
        pow = &pow * e;
    }
    if sum.im.abs() > im_tol {
        return Err(Error::ImaginaryResidual { imag: sum.im, tol: im_tol });
    }
    Ok(sum.re)
}

/// `ln cosh(x)` without overflow for large arguments.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    if a < 20.0 {
        a.cosh().ln()
    } else {
        a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
    }
}

pub fn to_complex(m: &RMatrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn frobenius_c(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Relative skew-Hermitian defect `‖Psi + Psi^*‖ / ‖Psi‖` (zero for the zero matrix).
pub fn skew_defect(psi: &CMatrix) -> f64 {
    let scale = frobenius_c(psi);
    if scale == 0.0 {
        return 0.0;
    }
    frobenius_c(&(psi + psi.adjoint())) / scale
}

pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let scale = frobenius_c(m);
    if scale == 0.0 {
        return 0.0;
    }
    frobenius_c(&(m - m.adjoint())) / scale
}

/// Spectrum of a skew-Hermitian matrix, held as the Hermitian eigendecomposition
/// of `-i·Psi`. Several functions of the same `Psi` reuse one decomposition.
#[derive(Debug, Clone)]
pub struct SkewSpectrum {
    eig: HermitianEig<Complex64>,
}

impl SkewSpectrum {
    pub fn new(psi: &CMatrix, tol: f64) -> Result<Self> {
        if !psi.is_square() {
            return Err(Error::NotSkewHermitian { defect: f64::INFINITY });
        }
        let defect = skew_defect(psi);
        if defect > tol {
            return Err(Error::NotSkewHermitian { defect });
        }
        let h = psi.map(|z| Complex64::new(z.im, -z.re));
        Ok(Self {
            eig: HermitianEig::new(&h)?,
        })
    }

    /// Real eigenvalues `h` of `-i·Psi`.
    pub fn frequencies(&self) -> &DVector<f64> {
        &self.eig.eigenvalues
    }

    /// `fn(theta·Psi)`.
    pub fn apply(&self, f: ScalarFn, theta: f64) -> CMatrix {
        let m = self.eig.map_complex(|h| f.at_imaginary(theta * h));
        if f.is_even() {
            (&m + m.adjoint()).scale(0.5)
        } else {
            m
        }
    }

    /// `sin(theta·Psi)`; skew-Hermitian.
    pub fn sin(&self, theta: f64) -> CMatrix {
        self.eig
            .map_complex(|h| Complex64::new(0.0, (theta * h).sinh()))
    }

    /// `g(-i·Psi)` for a real function `g`; Hermitian.
    pub fn map_real(&self, g: impl Fn(f64) -> f64) -> CMatrix {
        let m = self.eig.map_real(g);
        (&m + m.adjoint()).scale(0.5)
    }

    /// `Psi^2` (Hermitian negative semidefinite).
    pub fn square(&self) -> CMatrix {
        self.eig.map_complex(|h| Complex64::new(-h * h, 0.0))
    }
}

/// `fn(theta·Psi)` for a skew-Hermitian `Psi`.
pub fn apply_skew_function(psi: &CMatrix, f: ScalarFn, theta: f64) -> Result<CMatrix> {
    apply_skew_function_with(psi, f, theta, &MatTolerances::default())
}

pub fn apply_skew_function_with(
    psi: &CMatrix,
    f: ScalarFn,
    theta: f64,
    tol: &MatTolerances,
) -> Result<CMatrix> {
    Ok(SkewSpectrum::new(psi, tol.structural)?.apply(f, theta))
}

/// Real part of `ln det D` together with the discarded imaginary part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDet {
    pub value: f64,
    pub im_residual: f64,
}

/// `Re(ln det D)` via LU with partial pivoting; the argument of the
/// determinant is accumulated from pivot phases and must be negligible.
pub fn log_det_real(d: &CMatrix) -> Result<LogDet> {
    log_det_real_with(d, 1e-8 * d.nrows().max(1) as f64)
}

pub fn log_det_real_with(d: &CMatrix, im_tol: f64) -> Result<LogDet> {
    if !d.is_square() || d.nrows() == 0 {
        return Err(Error::SingularMatrix);
    }
    let lu = d.clone().lu();
    let u = lu.u();
    let mut re = 0.0;
    let mut arg = 0.0;
    for k in 0..u.nrows() {
        let p = u[(k, k)];
        let r = p.norm();
        if r == 0.0 || !r.is_finite() {
            return Err(Error::SingularMatrix);
        }
        re += r.ln();
        arg += p.arg();
    }
    let sign: f64 = lu.p().determinant();
    if sign < 0.0 {
        arg += std::f64::consts::PI;
    }
    let im = wrap_angle(arg);
    if im.abs() > im_tol {
        return Err(Error::ImaginaryResidual {
            imag: im,
            tol: im_tol,
        });
    }
    Ok(LogDet {
        value: re,
        im_residual: im,
    })
}

fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Hurwitz flag and spectral abscissa `max Re eig(A)`.
pub fn stability_and_radius(a: &RMatrix) -> Result<(bool, f64)> {
    let abscissa = spectral_abscissa(a)?;
    Ok((abscissa < 0.0, abscissa))
}

pub fn spectral_abscissa(a: &RMatrix) -> Result<f64> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::EigFailure("matrix is not square".into()));
    }
    let schur = a
        .clone()
        .try_schur(EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::EigFailure("Schur iteration did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `A·X + X·A^T + Q = 0` for Hurwitz `A`.
pub fn solve_lyapunov(a: &RMatrix, q: &RMatrix) -> Result<RMatrix> {
    solve_lyapunov_with(a, q, &MatTolerances::default())
}

pub fn solve_lyapunov_with(a: &RMatrix, q: &RMatrix, tol: &MatTolerances) -> Result<RMatrix> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(Error::invalid("q", "dimension mismatch with A"));
    }
    let (hurwitz, abscissa) = stability_and_radius(a)?;
    if !hurwitz {
        return Err(Error::NotHurwitz { abscissa });
    }
    let schur = to_complex(a)
        .try_schur(EIG_EPS, EIG_MAX_ITER)
        .ok_or_else(|| Error::EigFailure("complex Schur iteration did not converge".into()))?;
    let (unitary, tri) = schur.unpack();

    let solve = |rhs: &RMatrix| -> RMatrix {
        let c = unitary.adjoint() * to_complex(rhs) * &unitary;
        let y = triangular_lyapunov(&tri, &c);
        let x = &unitary * y * unitary.adjoint();
        let re = x.map(|z| z.re);
        (&re + re.transpose()).scale(0.5)
    };

    let residual = |x: &RMatrix| a * x + x * a.transpose() + q;
    let mut x = solve(q);
    let mut r = residual(&x);
    let target = tol.lyapunov * q.norm().max(f64::MIN_POSITIVE);
    // One refinement sweep recovers most of the accuracy lost in the Schur basis change.
    if r.norm() > 0.1 * target {
        x += solve(&r);
        x = (&x + x.transpose()).scale(0.5);
        r = residual(&x);
    }
    if r.norm() > target && q.norm() > 0.0 {
        return Err(Error::IllConditioned {
            residual: r.norm() / q.norm(),
            tol: tol.lyapunov,
        });
    }
    Ok(x)
}

/// Solves `T·Y + Y·T^* = -C` for upper triangular `T` whose diagonal satisfies
/// `Re(t_ii + conj(t_jj)) < 0`.
fn triangular_lyapunov(t: &CMatrix, c: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let mut y = CMatrix::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs: Vec<Complex64> = (0..n).map(|i| -c[(i, j)]).collect();
        for k in (j + 1)..n {
            let w = t[(j, k)].conj();
            for (i, r) in rhs.iter_mut().enumerate() {
                *r -= w * y[(i, k)];
            }
        }
        let shift = t[(j, j)].conj();
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for k in (i + 1)..n {
                acc -= t[(i, k)] * y[(k, j)];
            }
            y[(i, j)] = acc / (t[(i, i)] + shift);
        }
    }
    y
}

/// Matrix exponential by scaling and squaring.
pub fn expm(m: &RMatrix) -> RMatrix {
    m.clone().exp()
}
