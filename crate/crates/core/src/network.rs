//! Multi-port circuit description of the transmitter, the reconfigurable
//! elements and the users, and the quantities derived from it: equivalent
//! channels, transmit/supply power matrices, reflection coefficients and
//! per-user SINR.
//!
//! Port groups are `t` (RF-chain inputs, `N_RF`), `s` (DMA elements, `M`)
//! and `r` (users, `K`). For a fully-digital array the `s` group is empty
//! and the `t` ports are the antennas themselves.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{frobenius, identity, inverse, solve, CMat};
use crate::Real;

/// Base-station architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Dma,
    Fd,
    HybridFc,
    HybridSc,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Dma => "dma",
            Arch::Fd => "fd",
            Arch::HybridFc => "hybrid_fc",
            Arch::HybridSc => "hybrid_sc",
        }
    }
}

/// All admittance blocks of the multi-port network.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpedanceNetwork<T: Real> {
    /// Between RF-chain ports, `N_RF×N_RF`.
    pub z_tt: CMat<T>,
    /// RF chains to elements, `M×N_RF`.
    pub z_st: CMat<T>,
    /// RF chains to users, `K×N_RF`.
    pub z_rt: CMat<T>,
    /// Among elements, `M×M`.
    pub z_ss: CMat<T>,
    /// Elements to users (wireless channel), `K×M`.
    pub z_rs: CMat<T>,
    /// Among users, `K×K`.
    pub z_rr: CMat<T>,
    /// Element load admittances, diagonal `M×M`.
    pub z_s: CMat<T>,
    /// User load admittances, diagonal `K×K`.
    pub z_r: CMat<T>,
    /// Source characteristic admittance.
    pub z0: Complex<T>,
}

fn is_diagonal<T: Real>(a: &CMat<T>) -> bool {
    a.is_square()
        && a.iter().enumerate().all(|(idx, z)| {
            idx % a.nrows() == idx / a.nrows() || (z.re == T::zero() && z.im == T::zero())
        })
}

impl<T: Real> ImpedanceNetwork<T> {
    /// `(N_RF, M, K)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.z_tt.nrows(), self.z_ss.nrows(), self.z_rr.nrows())
    }

    /// Checks block shapes, diagonal loads, a common element resistance and
    /// `Re{Z_r} > 0`.
    pub fn validate(&self) -> Result<()> {
        let (n, m, k) = self.dims();
        let shape = |name: &str, a: &CMat<T>, r: usize, c: usize| -> Result<()> {
            if a.shape() != (r, c) {
                return Err(Error::InvalidDimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            Ok(())
        };
        shape("Z_tt", &self.z_tt, n, n)?;
        shape("Z_st", &self.z_st, m, n)?;
        shape("Z_rt", &self.z_rt, k, n)?;
        shape("Z_ss", &self.z_ss, m, m)?;
        shape("Z_rs", &self.z_rs, k, m)?;
        shape("Z_rr", &self.z_rr, k, k)?;
        shape("Z_s", &self.z_s, m, m)?;
        shape("Z_r", &self.z_r, k, k)?;
        if !is_diagonal(&self.z_s) || !is_diagonal(&self.z_r) {
            return Err(Error::InvalidDimension(
                "Z_s and Z_r must be diagonal".into(),
            ));
        }
        if m > 0 {
            let rs = self.z_s[(0, 0)].re;
            if self.z_s.diagonal().iter().any(|z| z.re != rs) {
                return Err(Error::InvalidDimension(
                    "Re{Z_s} must equal the same parasitic resistance on every element".into(),
                ));
            }
        }
        if self.z_r.diagonal().iter().any(|z| z.re <= T::zero()) {
            return Err(Error::InvalidDimension("Re{Z_r} must be positive".into()));
        }
        Ok(())
    }

    /// Parasitic resistance `R_s` shared by all elements.
    pub fn r_s(&self) -> T {
        if self.z_s.nrows() == 0 {
            T::zero()
        } else {
            self.z_s[(0, 0)].re
        }
    }

    /// Tuning vector `τ = Im diag(Z_s)`.
    pub fn tuning(&self) -> Vec<T> {
        self.z_s.diagonal().iter().map(|z| z.im).collect()
    }

    /// Copy with `Z_s = R_s·I + i·diag(τ)`.
    pub fn with_tuning(&self, tau: &[T]) -> Self {
        assert_eq!(tau.len(), self.z_s.nrows(), "tuning length must equal M");
        let rs = self.r_s();
        let mut out = self.clone();
        out.z_s = load_matrix(rs, tau);
        out
    }
}

/// Diagonal load matrix `R_s·I + i·diag(τ)`.
pub fn load_matrix<T: Real>(r_s: T, tau: &[T]) -> CMat<T> {
    let n = tau.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex::new(r_s, tau[i])
        } else {
            Complex::new(T::zero(), T::zero())
        }
    })
}

/// Architecture-tagged equivalent channel with its power matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization<T: Real> {
    pub h: CMat<T>,
    /// Transmit power matrix.
    pub zp: CMat<T>,
    /// Supplied power matrix.
    pub zq: CMat<T>,
    pub arch: Arch,
}

/// `Z̃_r = sqrt(Re{Z_r}/2)·(Z_r + Z_rr)⁻¹`.
pub fn receive_scaling<T: Real>(z_r: &CMat<T>, z_rr: &CMat<T>) -> Result<CMat<T>> {
    let inv = inverse(&(z_r + z_rr), "Z_r + Z_rr")?;
    let half = T::lit(0.5);
    let k = z_r.nrows();
    let mut out = inv;
    for i in 0..k {
        let s = (z_r[(i, i)].re * half).sqrt();
        out.row_mut(i).scale_mut(s);
    }
    Ok(out)
}

/// `Z_p = Z_tt − Z_stᵀ (Z_s + Z_ss)⁻¹ Z_st`.
pub fn transmit_matrix<T: Real>(net: &ImpedanceNetwork<T>) -> Result<CMat<T>> {
    let prop = solve(&(&net.z_s + &net.z_ss), &net.z_st, "Z_s + Z_ss")?;
    Ok(&net.z_tt - net.z_st.transpose() * prop)
}

/// Equivalent channel and power matrices for a DMA transmitter.
///
/// `H = Z̃_r Z_rs (Z_s + Z_ss)⁻¹ Z_st` (the RF-chain/user block `Z_rt` is
/// taken as zero for this architecture).
pub fn dma_channel<T: Real>(net: &ImpedanceNetwork<T>) -> Result<ChannelRealization<T>> {
    let zr_t = receive_scaling(&net.z_r, &net.z_rr)?;
    let prop = solve(&(&net.z_s + &net.z_ss), &net.z_st, "Z_s + Z_ss")?;
    let h = zr_t * (&net.z_rs * &prop);
    let zp = &net.z_tt - net.z_st.transpose() * prop;
    let zq = supply_matrix(&zp, net.z0)?;
    Ok(ChannelRealization {
        h,
        zp,
        zq,
        arch: Arch::Dma,
    })
}

/// Equivalent channel for a fully-digital (or hybrid) array:
/// `H = −Z̃_r Z_rt`, with `Z_p ≈ Z_tt`.
pub fn fd_channel<T: Real>(net: &ImpedanceNetwork<T>) -> Result<ChannelRealization<T>> {
    let zr_t = receive_scaling(&net.z_r, &net.z_rr)?;
    let h = -(zr_t * &net.z_rt);
    let zp = net.z_tt.clone();
    let zq = supply_matrix(&zp, net.z0)?;
    Ok(ChannelRealization {
        h,
        zp,
        zq,
        arch: Arch::Fd,
    })
}

/// `(σ_x²/2)·Tr{Re{Fᴴ Z F}}`.
pub fn quadratic_power<T: Real>(f: &CMat<T>, z: &CMat<T>, sigma_x2: T) -> Result<T> {
    if f.ncols() == 0 || !z.is_square() || z.nrows() != f.nrows() {
        return Err(Error::InvalidDimension(format!(
            "power matrix {}x{} does not match precoder {}x{}",
            z.nrows(),
            z.ncols(),
            f.nrows(),
            f.ncols()
        )));
    }
    let zf = z * f;
    let tr = f
        .iter()
        .zip(zf.iter())
        .fold(T::zero(), |acc, (a, b)| acc + (a.conj() * b).re);
    Ok(sigma_x2 * T::lit(0.5) * tr)
}

/// Radiated (transmit) power of precoder `F`.
pub fn transmit_power<T: Real>(f: &CMat<T>, zp: &CMat<T>, sigma_x2: T) -> Result<T> {
    quadratic_power(f, zp, sigma_x2)
}

/// Power supplied to the structure, including what is reflected at the
/// inputs.
pub fn supplied_power<T: Real>(f: &CMat<T>, zq: &CMat<T>, sigma_x2: T) -> Result<T> {
    quadratic_power(f, zq, sigma_x2)
}

/// Diagonal reflection coefficients at the RF-chain inputs:
/// `Λ = (Z_in − Z_0 I)(Z_in + Z_0 I)⁻¹` with `Z_in = Z_p ∘ I`.
pub fn reflection_matrix<T: Real>(zp: &CMat<T>, z0: Complex<T>) -> Result<CMat<T>> {
    if !zp.is_square() {
        return Err(Error::InvalidDimension("Z_p must be square".into()));
    }
    let n = zp.nrows();
    let mut lam = CMat::<T>::zeros(n, n);
    for i in 0..n {
        let zin = zp[(i, i)];
        let den = zin + z0;
        if den.norm_sqr() == T::zero() {
            return Err(Error::SingularNetwork("Z_in + Z_0 I"));
        }
        lam[(i, i)] = (zin - z0) / den;
    }
    Ok(lam)
}

/// `Z_q = (I − ΛᴴΛ)⁻¹ Z_p` for a given diagonal `Λ`.
pub fn supply_matrix_from_reflection<T: Real>(zp: &CMat<T>, lam: &CMat<T>) -> Result<CMat<T>> {
    let n = zp.nrows();
    let mut out = zp.clone();
    for i in 0..n {
        let mag2 = lam[(i, i)].norm_sqr();
        if mag2 >= T::one() {
            return Err(Error::ReflectionOverflow(mag2.sqrt().as_f64()));
        }
        out.row_mut(i).scale_mut(T::one() / (T::one() - mag2));
    }
    Ok(out)
}

/// Supplied-power matrix `Z_q` computed from `Z_p` and the source admittance.
pub fn supply_matrix<T: Real>(zp: &CMat<T>, z0: Complex<T>) -> Result<CMat<T>> {
    let lam = reflection_matrix(zp, z0)?;
    supply_matrix_from_reflection(zp, &lam)
}

/// Per-user SINR `|h_kᴴ f_k|² / (Σ_{m≠k} |h_kᴴ f_m|² + σ_n²/σ_x²)`.
///
/// `H` is `K×N` with rows `h_kᴴ`; `F` is `N×K`.
pub fn sinr<T: Real>(h: &CMat<T>, f: &CMat<T>, noise_ratio: T) -> Result<Vec<T>> {
    if h.nrows() != f.ncols() || h.ncols() != f.nrows() {
        return Err(Error::InvalidDimension(format!(
            "H is {}x{}, F is {}x{}",
            h.nrows(),
            h.ncols(),
            f.nrows(),
            f.ncols()
        )));
    }
    if noise_ratio <= T::zero() {
        return Err(Error::InvalidHyperparameter(
            "noise ratio must be positive".into(),
        ));
    }
    let g = h * f;
    let k = g.nrows();
    Ok((0..k)
        .map(|i| {
            let row_power = g.row(i).iter().fold(T::zero(), |a, z| a + z.norm_sqr());
            let sig = g[(i, i)].norm_sqr();
            sig / (row_power - sig + noise_ratio)
        })
        .collect())
}

/// `Σ_k log2(1 + γ_k)`.
pub fn spectral_efficiency<T: Real>(gammas: &[T]) -> T {
    gammas
        .iter()
        .fold(T::zero(), |a, &g| a + (T::one() + g).log2())
}

/// SE of precoder `F` on channel `H`.
pub fn se<T: Real>(h: &CMat<T>, f: &CMat<T>, noise_ratio: T) -> Result<T> {
    Ok(spectral_efficiency(&sinr(h, f, noise_ratio)?))
}

/// Smallest eigenvalue of the Hermitian part of `Re{Z}` relative to `‖Z‖_F`;
/// nonnegative (up to roundoff) for passive power matrices.
pub fn passivity_margin<T: Real>(z: &CMat<T>) -> T {
    let herm = (z + z.adjoint()) * Complex::new(T::lit(0.5), T::zero());
    let eig = herm.symmetric_eigenvalues();
    let min = eig
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |m, v| m.min(v));
    let scale = frobenius(z);
    if scale == T::zero() {
        T::zero()
    } else {
        min / scale
    }
}

/// Identity-sized helper used by tests and callers building FD networks.
pub fn empty_element_blocks<T: Real>(
    n_rf: usize,
    k: usize,
) -> (CMat<T>, CMat<T>, CMat<T>, CMat<T>) {
    (
        CMat::zeros(0, n_rf),
        CMat::zeros(0, 0),
        CMat::zeros(k, 0),
        identity::<Complex<T>>(0),
    )
}
