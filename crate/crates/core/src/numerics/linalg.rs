use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::Real;

/// Dense complex matrix.
pub type CMat<T> = DMatrix<Complex<T>>;
/// Dense real matrix.
pub type RMat<T> = DMatrix<T>;

/// Relative singular-value cutoff used by [`pinv_default`].
pub const PINV_DEFAULT_TOL: f64 = 1e-12;

pub fn identity<E: ComplexField>(n: usize) -> DMatrix<E> {
    DMatrix::identity(n, n)
}

/// Frobenius norm.
pub fn frobenius<E: ComplexField>(a: &DMatrix<E>) -> E::RealField {
    a.iter()
        .fold(E::RealField::zero(), |acc, x| {
            acc + x.clone().modulus_squared()
        })
        .sqrt()
}

/// Entrywise real part, kept in the complex type.
pub fn real_part<T: Real>(a: &CMat<T>) -> CMat<T> {
    a.map(|z| Complex::new(z.re, T::zero()))
}

/// `‖A − Aᴴ‖_F`.
pub fn hermitian_defect<E: ComplexField>(a: &DMatrix<E>) -> E::RealField {
    frobenius(&(a - a.adjoint()))
}

/// Hermitian check with relative tolerance `rtol·‖A‖_F`.
pub fn is_hermitian<E: ComplexField>(a: &DMatrix<E>, rtol: E::RealField) -> bool {
    a.is_square() && hermitian_defect(a) <= rtol * frobenius(a)
}

/// Inverse of a square matrix; `what` names the block for the error.
pub fn inverse<E: ComplexField>(a: &DMatrix<E>, what: &'static str) -> Result<DMatrix<E>> {
    if !a.is_square() || a.is_empty() {
        return Err(Error::InvalidDimension(format!(
            "{what}: cannot invert {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let inv = a
        .clone()
        .try_inverse()
        .ok_or(Error::SingularNetwork(what))?;
    if inv.iter().all(|x| x.clone().is_finite()) {
        Ok(inv)
    } else {
        Err(Error::SingularNetwork(what))
    }
}

/// `A⁻¹ B` through an LU factorisation.
pub fn solve<E: ComplexField>(
    a: &DMatrix<E>,
    b: &DMatrix<E>,
    what: &'static str,
) -> Result<DMatrix<E>> {
    if !a.is_square() || a.is_empty() || a.nrows() != b.nrows() {
        return Err(Error::InvalidDimension(format!(
            "{what}: cannot solve {}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularNetwork(what))?;
    if x.iter().all(|v| v.clone().is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularNetwork(what))
    }
}

/// Moore–Penrose pseudo-inverse via SVD.
///
/// Singular values below `tol·σ_max` are treated as zero.
pub fn pinv<E, T>(a: &DMatrix<E>, tol: T) -> Result<DMatrix<E>>
where
    E: ComplexField<RealField = T>,
    T: Real,
{
    if a.is_empty() {
        return Err(Error::InvalidDimension("pinv of an empty matrix".into()));
    }
    if tol <= T::zero() {
        return Err(Error::InvalidHyperparameter(
            "pinv tolerance must be > 0".into(),
        ));
    }
    let svd = a
        .clone()
        .try_svd(true, true, T::eps(), 0)
        .ok_or_else(|| Error::InvalidDimension("SVD did not converge".into()))?;
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let sv = &svd.singular_values;
    let smax = sv
        .iter()
        .copied()
        .fold(T::zero(), |m, s| if s > m { s } else { m });
    let cut = tol * smax;
    // pinv = V · diag(1/σ) · Uᴴ
    let mut out = DMatrix::<E>::zeros(a.ncols(), a.nrows());
    for (i, &s) in sv.iter().enumerate() {
        if s <= cut || s == T::zero() {
            continue;
        }
        let inv_s = E::from_real(T::one() / s);
        let v_col = vt.row(i).adjoint();
        let u_col = u.column(i);
        out += (v_col * inv_s) * u_col.adjoint();
    }
    Ok(out)
}

/// [`pinv`] with the default relative cutoff of 1e−12.
pub fn pinv_default<E, T>(a: &DMatrix<E>) -> Result<DMatrix<E>>
where
    E: ComplexField<RealField = T>,
    T: Real,
{
    pinv(a, T::lit(PINV_DEFAULT_TOL))
}

/// Numerical rank using the same cutoff convention as [`pinv`].
pub fn rank<E, T>(a: &DMatrix<E>, tol: T) -> usize
where
    E: ComplexField<RealField = T>,
    T: Real,
{
    let sv = a.clone().singular_values();
    let smax = sv
        .iter()
        .copied()
        .fold(T::zero(), |m, s| if s > m { s } else { m });
    sv.iter().filter(|&&s| s > tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{complex_normal, realization_rng};
    use num_complex::Complex64;

    fn random(r: usize, c: usize, seed: u64) -> CMat<f64> {
        let mut rng = realization_rng(seed, 0);
        DMatrix::from_fn(r, c, |_, _| complex_normal(&mut rng, 1.0))
    }

    #[test]
    fn pinv_identity() {
        let i = identity::<Complex64>(3);
        let p = pinv_default(&i).unwrap();
        assert!(frobenius(&(p - &i)) < 1e-14);
    }

    #[test]
    fn pinv_rank_deficient_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv_default(&a).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!(frobenius(&(p - want)) < 1e-15);
    }

    #[test]
    fn pinv_right_inverse_for_full_row_rank() {
        let a = random(4, 6, 11);
        let p = pinv_default(&a).unwrap();
        let err = frobenius(&(&a * &p - identity::<Complex64>(4)));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn pinv_penrose_identities() {
        for seed in 0..10 {
            let a = random(6, 8, seed);
            let p = pinv_default(&a).unwrap();
            let n = frobenius(&a);
            let np = frobenius(&p);
            assert!(frobenius(&(&a * &p * &a - &a)) < 1e-7 * n);
            assert!(frobenius(&(&p * &a * &p - &p)) < 1e-7 * np);
            assert!(hermitian_defect(&(&a * &p)) < 1e-7);
            assert!(hermitian_defect(&(&p * &a)) < 1e-7);
        }
    }

    #[test]
    fn pinv_empty_is_error() {
        let a = CMat::<f64>::zeros(0, 3);
        assert!(matches!(pinv_default(&a), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn pinv_f32() {
        let a = DMatrix::<f32>::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        let p = pinv(&a, 1e-6f32).unwrap();
        let e = frobenius(&(&a * &p - identity::<f32>(2)));
        assert!(e < 1e-5);
    }

    #[test]
    fn inverse_reports_singularity() {
        let a = CMat::<f64>::zeros(3, 3);
        assert!(matches!(inverse(&a, "Z"), Err(Error::SingularNetwork("Z"))));
    }
}
