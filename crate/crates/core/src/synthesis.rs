//! Generation of impedance networks: array geometry, stochastic far-field
//! wireless blocks, parameterised coupling kernels and user placement, plus
//! a bit-exact channel dump format.
//!
//! The array lies in the `z = 0` plane. Waveguide `n` runs along `x` at
//! `y = n·a`; element `j` on it sits at `x = j·d`, so its distance from the
//! feed is `j·d`.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{load_matrix, ImpedanceNetwork};
use crate::numerics::{complex_normal, CMat};
use crate::Real;

/// Vacuum permittivity in F/m.
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Element layout of a DMA (or of an FD array occupying the same sites).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry<T: Real> {
    pub positions: Vec<[T; 3]>,
    /// Waveguide index of every element.
    pub waveguide: Vec<usize>,
    /// Distance from the waveguide feed of every element.
    pub feed_distance: Vec<T>,
    pub n_rf: usize,
    pub n_mu: usize,
    pub width: T,
    pub height: T,
    pub length: T,
    pub wavelength: T,
    pub spacing: T,
}

impl<T: Real> ArrayGeometry<T> {
    /// Regular layout of `n_rf` waveguides with `n_mu` elements each.
    pub fn dma(
        frequency: T,
        n_rf: usize,
        n_mu: usize,
        spacing: T,
        width: T,
        height: T,
        length: T,
    ) -> Result<Self> {
        if n_rf == 0 || n_mu == 0 {
            return Err(Error::InvalidGeometry(
                "need at least one waveguide and one element".into(),
            ));
        }
        if !(frequency > T::zero()
            && spacing > T::zero()
            && width > T::zero()
            && height > T::zero())
        {
            return Err(Error::InvalidGeometry(
                "frequency, spacing and waveguide size must be positive".into(),
            ));
        }
        let wavelength = T::lit(SPEED_OF_LIGHT) / frequency;
        let mut positions = Vec::with_capacity(n_rf * n_mu);
        let mut waveguide = Vec::with_capacity(n_rf * n_mu);
        let mut feed_distance = Vec::with_capacity(n_rf * n_mu);
        for n in 0..n_rf {
            for j in 0..n_mu {
                let x = T::lit(j as f64) * spacing;
                positions.push([x, T::lit(n as f64) * width, T::zero()]);
                waveguide.push(n);
                feed_distance.push(x);
            }
        }
        Ok(Self {
            positions,
            waveguide,
            feed_distance,
            n_rf,
            n_mu,
            width,
            height,
            length,
            wavelength,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn wavenumber(&self) -> T {
        T::two_pi() / self.wavelength
    }

    /// Guide wavenumber of the TE10 mode, `2π/λ_g` with
    /// `λ_g = λ / sqrt(1 − (λ/2a)²)`.
    pub fn guide_wavenumber(&self) -> Result<T> {
        let ratio = self.wavelength / (T::lit(2.0) * self.width);
        let arg = T::one() - ratio * ratio;
        if arg <= T::zero() {
            return Err(Error::InvalidGeometry("waveguide below TE10 cutoff".into()));
        }
        Ok(self.wavenumber() * arg.sqrt())
    }

    pub fn centroid(&self) -> [T; 3] {
        let n = T::lit(self.len() as f64);
        let mut c = [T::zero(); 3];
        for p in &self.positions {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }
}

fn distance<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Coupling-kernel parameters for the element, feed, antenna and user blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams<T: Real> {
    pub frequency: T,
    /// Source characteristic admittance `Z0`.
    pub z0: T,
    /// Element self term added to the diagonal of `Z_ss`.
    pub element_self: Complex<T>,
    /// Intra-waveguide coupling strength `c_w`.
    pub waveguide_coeff: Complex<T>,
    /// Waveguide attenuation `κ_a` in Np/m.
    pub attenuation: T,
    /// Air coupling strength `c_air`.
    pub air_coeff: Complex<T>,
    pub waveguide_coupling: bool,
    pub air_coupling: bool,
    /// Element parasitic resistance `R_s`.
    pub r_s: T,
    /// User load admittance (`Z_r = user_load·I`).
    pub user_load: T,
    /// Air coupling strength between users.
    pub user_air_coeff: Complex<T>,
    /// Air coupling strength between FD antennas.
    pub antenna_air_coeff: Complex<T>,
    /// Polarization mismatch factor `S_p`.
    pub polarization: T,
}

impl<T: Real> CouplingParams<T> {
    /// Defaults at 10 GHz with a 35.3387 S source.
    pub fn standard() -> Self {
        let z0 = T::lit(35.3387);
        Self {
            frequency: T::lit(10e9),
            z0,
            element_self: Complex::new(T::lit(0.5), T::zero()),
            waveguide_coeff: Complex::new(T::lit(0.1), T::zero()),
            attenuation: T::lit(20.0),
            air_coeff: Complex::new(T::zero(), T::lit(0.5)),
            waveguide_coupling: true,
            air_coupling: true,
            r_s: T::zero(),
            user_load: z0,
            user_air_coeff: Complex::new(T::zero(), T::lit(0.5)),
            antenna_air_coeff: Complex::new(T::zero(), z0 * T::lit(0.1)),
            polarization: T::one(),
        }
    }

    /// Copy with both element coupling mechanisms switched off.
    pub fn uncoupled(&self) -> Self {
        Self {
            waveguide_coupling: false,
            air_coupling: false,
            ..self.clone()
        }
    }

    /// Copy with only the air mechanism switched off.
    pub fn without_air(&self) -> Self {
        Self {
            air_coupling: false,
            ..self.clone()
        }
    }
}

/// The transmit-side and user-side blocks produced by the kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlocks<T: Real> {
    pub z_ss: CMat<T>,
    pub z_st: CMat<T>,
    pub z_tt: CMat<T>,
}

/// `c·exp(−i·k·r)/(k·r)` for `r > 0`.
fn air_kernel<T: Real>(coeff: Complex<T>, k: T, r: T) -> Complex<T> {
    let kr = k * r;
    coeff * Complex::new(kr.cos(), -kr.sin()) / kr
}

/// `exp(−(κ + iβ)·Δ)`.
fn guided<T: Real>(kappa: T, beta: T, delta: T) -> Complex<T> {
    let mag = (-kappa * delta).exp();
    Complex::new(mag * (beta * delta).cos(), -mag * (beta * delta).sin())
}

/// Element, feed and RF-port blocks of a DMA.
///
/// `Z_ss` carries the element self term on its diagonal, the guided-mode
/// kernel between elements on the same waveguide and the air kernel between
/// elements on different waveguides. With both mechanisms off it is
/// diagonal.
pub fn coupling_kernels<T: Real>(
    geom: &ArrayGeometry<T>,
    params: &CouplingParams<T>,
) -> Result<CouplingBlocks<T>> {
    let m = geom.len();
    let k = geom.wavenumber();
    let beta = geom.guide_wavenumber()?;
    let zero = Complex::new(T::zero(), T::zero());
    let mut z_ss = CMat::<T>::from_element(m, m, zero);
    for i in 0..m {
        for j in 0..m {
            let same = geom.waveguide[i] == geom.waveguide[j];
            let mut v = zero;
            if i == j {
                v += params.element_self;
            }
            if same && params.waveguide_coupling {
                let delta = (geom.feed_distance[i] - geom.feed_distance[j]).abs();
                v += params.waveguide_coeff * guided(params.attenuation, beta, delta);
            }
            if !same && params.air_coupling {
                let r = distance(&geom.positions[i], &geom.positions[j]);
                v += air_kernel(params.air_coeff, k, r);
            }
            z_ss[(i, j)] = v;
        }
    }
    let z_st = DMatrix::from_fn(m, geom.n_rf, |i, n| {
        if geom.waveguide[i] == n {
            guided(params.attenuation, beta, geom.feed_distance[i])
        } else {
            zero
        }
    });
    let z_tt =
        DMatrix::from_diagonal_element(geom.n_rf, geom.n_rf, Complex::new(params.z0, T::zero()));
    Ok(CouplingBlocks { z_ss, z_st, z_tt })
}

/// Mutual block among point ports: `self_term` on the diagonal and the air
/// kernel elsewhere.
pub fn dipole_coupling<T: Real>(
    positions: &[[T; 3]],
    self_term: Complex<T>,
    coeff: Complex<T>,
    wavenumber: T,
) -> Result<CMat<T>> {
    let n = positions.len();
    let mut out = CMat::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = if i == j {
                self_term
            } else {
                let r = distance(&positions[i], &positions[j]);
                if r <= T::zero() {
                    return Err(Error::InvalidGeometry(format!(
                        "ports {i} and {j} coincide"
                    )));
                }
                air_kernel(coeff, wavenumber, r)
            };
        }
    }
    Ok(out)
}

/// `Z_rr` for users at the given positions.
pub fn user_coupling<T: Real>(users: &[[T; 3]], params: &CouplingParams<T>) -> Result<CMat<T>> {
    let k = T::two_pi() * params.frequency / T::lit(SPEED_OF_LIGHT);
    dipole_coupling(
        users,
        Complex::new(params.user_load, T::zero()),
        params.user_air_coeff,
        k,
    )
}

/// `Z_tt` of a fully-digital array on the element sites.
pub fn antenna_coupling<T: Real>(
    geom: &ArrayGeometry<T>,
    params: &CouplingParams<T>,
) -> Result<CMat<T>> {
    dipole_coupling(
        &geom.positions,
        Complex::new(params.z0, T::zero()),
        params.antenna_air_coeff,
        geom.wavenumber(),
    )
}

/// Path-gain variance `(2ωε/(4π·r))²·S_p` at distance `r`.
pub fn path_variance<T: Real>(frequency: T, distance: T, polarization: T) -> Result<T> {
    if !(distance > T::zero()) {
        return Err(Error::InvalidGeometry(
            "user distance must be positive".into(),
        ));
    }
    let omega = T::two_pi() * frequency;
    let amp = T::lit(2.0) * omega * T::lit(EPSILON_0) / (T::lit(4.0 * PI) * distance);
    Ok(amp * amp * polarization)
}

/// Steering vector with entries `exp(i·k(α,β)·r_m)`.
pub fn steering_vector<T: Real>(geom: &ArrayGeometry<T>, alpha: T, beta: T) -> CMat<T> {
    let k = geom.wavenumber();
    let dir = [
        alpha.sin() * beta.cos(),
        alpha.sin() * beta.sin(),
        alpha.cos(),
    ];
    DMatrix::from_iterator(
        geom.len(),
        1,
        geom.positions.iter().map(|p| {
            let ph = k * (dir[0] * p[0] + dir[1] * p[1] + dir[2] * p[2]);
            Complex::new(ph.cos(), ph.sin())
        }),
    )
}

/// Angles and gain of one propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSample<T> {
    pub alpha: T,
    pub beta: T,
    pub zeta: T,
    pub gain: Complex<T>,
}

/// `L_p` independent paths for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble<T> {
    pub paths: Vec<PathSample<T>>,
}

impl<T: Real> PathEnsemble<T> {
    /// Uniform angles on their domains and `CN(0, variance)` gains.
    pub fn sample<R: Rng + ?Sized>(lp: usize, variance: T, rng: &mut R) -> Self {
        let paths = (0..lp)
            .map(|_| {
                let alpha = T::lit(rng.random::<f64>() * PI);
                let beta = T::lit(rng.random::<f64>() * 2.0 * PI);
                let zeta = T::lit(rng.random::<f64>() * PI);
                PathSample {
                    alpha,
                    beta,
                    zeta,
                    gain: complex_normal(rng, variance),
                }
            })
            .collect();
        Self { paths }
    }

    /// Row `z_kᵀ = Σ_l φ_l/√L_p · sin α_l · sin ζ_l · a_t(α_l, β_l)ᵀ`.
    pub fn row(&self, geom: &ArrayGeometry<T>) -> CMat<T> {
        let norm = T::one() / T::lit(self.paths.len() as f64).sqrt();
        let mut out = CMat::<T>::zeros(1, geom.len());
        for p in &self.paths {
            let w = p.gain * (norm * p.alpha.sin() * p.zeta.sin());
            let a = steering_vector(geom, p.alpha, p.beta);
            for (o, v) in out.iter_mut().zip(a.iter()) {
                *o += w * v;
            }
        }
        out
    }
}

/// Draws the `K×M` wireless block for users at the given positions; the
/// gain variance of each user follows from its distance to the array
/// centroid.
pub fn sample_zrs<T: Real, R: Rng + ?Sized>(
    geom: &ArrayGeometry<T>,
    users: &[[T; 3]],
    lp: usize,
    frequency: T,
    polarization: T,
    rng: &mut R,
) -> Result<CMat<T>> {
    if lp == 0 {
        return Err(Error::InvalidHyperparameter(
            "path count must be at least 1".into(),
        ));
    }
    let c = geom.centroid();
    let mut out = CMat::<T>::zeros(users.len(), geom.len());
    for (k, u) in users.iter().enumerate() {
        let var = path_variance(frequency, distance(&c, u), polarization)?;
        let row = PathEnsemble::sample(lp, var, rng).row(geom);
        out.row_mut(k).copy_from(&row);
    }
    Ok(out)
}

/// Angle law used by [`covariance`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AngleDistribution<T> {
    /// Uniform `α ∈ [0, π]`, `β ∈ [0, 2π)`, integrated with `n_alpha`
    /// Gauss–Legendre nodes and `n_beta` trapezoid nodes.
    Uniform { n_alpha: usize, n_beta: usize },
    /// All mass at one direction.
    Point { alpha: T, beta: T },
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Closed-form covariance `ε²·E[sin²α·a aᴴ]·E[sin²ζ]` of one user's row,
/// with `ζ` uniform on `[0, π]`.
pub fn covariance<T: Real>(
    geom: &ArrayGeometry<T>,
    variance: T,
    dist: AngleDistribution<T>,
) -> CMat<T> {
    let m = geom.len();
    let half = T::lit(0.5);
    let mut acc = CMat::<T>::zeros(m, m);
    let mut add = |alpha: T, beta: T, w: T| {
        let a = steering_vector(geom, alpha, beta);
        let s = w * alpha.sin() * alpha.sin();
        acc.gerc(
            Complex::new(s, T::zero()),
            &a.column(0),
            &a.column(0),
            Complex::new(T::one(), T::zero()),
        );
    };
    match dist {
        AngleDistribution::Point { alpha, beta } => add(alpha, beta, T::one()),
        AngleDistribution::Uniform { n_alpha, n_beta } => {
            let (x, wx) = gauss_legendre(n_alpha);
            for (xi, wi) in x.iter().zip(&wx) {
                let alpha = T::lit(0.5 * PI * (xi + 1.0));
                for b in 0..n_beta {
                    let beta = T::lit(2.0 * PI * b as f64 / n_beta as f64);
                    // mean over α: ∫ dα/π = Σ w·(π/2)/π
                    add(alpha, beta, T::lit(0.5 * wi / n_beta as f64));
                }
            }
        }
    }
    acc * Complex::new(variance * half, T::zero())
}

/// `k` users at random angles on a circle of the given radius around the
/// array centroid, in the `x–z` plane.
pub fn ring_users<T: Real, R: Rng + ?Sized>(
    geom: &ArrayGeometry<T>,
    k: usize,
    radius: T,
    rng: &mut R,
) -> Result<Vec<[T; 3]>> {
    if !(radius > T::zero()) {
        return Err(Error::InvalidGeometry(
            "user ring radius must be positive".into(),
        ));
    }
    let c = geom.centroid();
    Ok((0..k)
        .map(|_| {
            let th = T::lit(rng.random::<f64>() * 2.0 * PI);
            [c[0] + radius * th.cos(), c[1], c[2] + radius * th.sin()]
        })
        .collect())
}

/// Assembles a DMA network from its parts with loads `R_s + i·τ`.
pub fn dma_network<T: Real>(
    blocks: &CouplingBlocks<T>,
    z_rs: &CMat<T>,
    z_rr: &CMat<T>,
    params: &CouplingParams<T>,
    tau: &[T],
) -> ImpedanceNetwork<T> {
    let k = z_rs.nrows();
    let n = blocks.z_tt.nrows();
    ImpedanceNetwork {
        z_tt: blocks.z_tt.clone(),
        z_st: blocks.z_st.clone(),
        z_rt: CMat::zeros(k, n),
        z_ss: blocks.z_ss.clone(),
        z_rs: z_rs.clone(),
        z_rr: z_rr.clone(),
        z_s: load_matrix(params.r_s, tau),
        z_r: DMatrix::from_diagonal_element(k, k, Complex::new(params.user_load, T::zero())),
        z0: Complex::new(params.z0, T::zero()),
    }
}

/// Assembles a fully-digital network whose antennas are wired straight to
/// RF chains.
pub fn fd_network<T: Real>(
    z_tt: &CMat<T>,
    z_rt: &CMat<T>,
    z_rr: &CMat<T>,
    params: &CouplingParams<T>,
) -> ImpedanceNetwork<T> {
    let k = z_rt.nrows();
    let n = z_tt.nrows();
    ImpedanceNetwork {
        z_tt: z_tt.clone(),
        z_st: CMat::zeros(0, n),
        z_rt: z_rt.clone(),
        z_ss: CMat::zeros(0, 0),
        z_rs: CMat::zeros(k, 0),
        z_rr: z_rr.clone(),
        z_s: CMat::zeros(0, 0),
        z_r: DMatrix::from_diagonal_element(k, k, Complex::new(params.user_load, T::zero())),
        z0: Complex::new(params.z0, T::zero()),
    }
}

const CMAT_MAGIC: &[u8; 4] = b"CMAT";
const CMAT_VERSION: u32 = 1;

/// Writes a complex matrix as `CMAT`, version, rows, cols, then row-major
/// `(re, im)` pairs, all little-endian.
pub fn write_cmat(path: &Path, a: &CMat<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 16 * a.len());
    buf.extend_from_slice(CMAT_MAGIC);
    buf.extend_from_slice(&CMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            buf.extend_from_slice(&a[(i, j)].re.to_le_bytes());
            buf.extend_from_slice(&a[(i, j)].im.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_cmat(path: &Path) -> Result<CMat<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 24 || &buf[..4] != CMAT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a CMAT file",
            path.display()
        )));
    }
    let word = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CMAT_VERSION {
        return Err(Error::Format(format!("unsupported CMAT version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    if buf.len() != 24 + 16 * rows * cols {
        return Err(Error::Format(format!(
            "{}: truncated CMAT payload",
            path.display()
        )));
    }
    let f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let o = 24 + 16 * (i * cols + j);
        Complex::new(f(o), f(o + 8))
    }))
}

/// JSON sidecar written next to a channel dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSidecar {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub index: u64,
    pub geometry: ArrayGeometry<f64>,
    pub coupling: CouplingParams<f64>,
    pub users: Vec<[f64; 3]>,
    /// Block name to file name, in write order.
    pub blocks: Vec<(String, String)>,
}

/// Writes every block as `<stem>.<name>.cmat` plus `<stem>.json`.
pub fn dump_channel(
    dir: &Path,
    stem: &str,
    blocks: &[(&str, &CMat<f64>)],
    mut sidecar: ChannelSidecar,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    sidecar.blocks.clear();
    for (name, m) in blocks {
        let file = format!("{stem}.{name}.cmat");
        write_cmat(&dir.join(&file), m)?;
        sidecar.blocks.push((name.to_string(), file));
    }
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Reloads a dump written by [`dump_channel`].
pub fn load_channel(dir: &Path, stem: &str) -> Result<(ChannelSidecar, Vec<(String, CMat<f64>)>)> {
    let sidecar: ChannelSidecar =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let blocks = sidecar
        .blocks
        .iter()
        .map(|(name, file)| Ok((name.clone(), read_cmat(&dir.join(file))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((sidecar, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{dma_channel, passivity_margin};
    use crate::numerics::{frobenius, hermitian_defect, realization_rng};
    use proptest::prelude::*;

    fn reference_geom(n_rf: usize, n_mu: usize, spacing_wl: f64) -> ArrayGeometry<f64> {
        let lambda = SPEED_OF_LIGHT / 10e9;
        ArrayGeometry::dma(
            10e9,
            n_rf,
            n_mu,
            spacing_wl * lambda,
            0.73 * lambda,
            0.167 * lambda,
            0.11,
        )
        .unwrap()
    }

    #[test]
    fn layout_counts() {
        let g = reference_geom(6, 20, 0.5);
        assert_eq!(g.len(), 120);
        assert_eq!(g.waveguide.iter().filter(|&&w| w == 3).count(), 20);
        let d: Vec<f64> = g.positions[20..23]
            .windows(2)
            .map(|w| w[1][0] - w[0][0])
            .collect();
        assert!(d.iter().all(|x| (x - g.spacing).abs() < 1e-15));
        assert!(ArrayGeometry::<f64>::dma(10e9, 0, 3, 0.01, 0.02, 0.005, 0.1).is_err());
    }

    #[test]
    fn steering_at_origin_is_ones() {
        let mut g = reference_geom(1, 3, 0.5);
        g.positions.iter_mut().for_each(|p| *p = [0.0; 3]);
        let a = steering_vector(&g, 0.7, 1.9);
        assert!(a
            .iter()
            .all(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn steering_broadside_uses_z_only() {
        let mut g = reference_geom(1, 3, 0.5);
        let zs = [0.001, 0.004, -0.002];
        for (p, z) in g.positions.iter_mut().zip(zs) {
            p[2] = z;
        }
        let k = g.wavenumber();
        let a = steering_vector(&g, 0.0, 1.3);
        for (v, z) in a.iter().zip(zs) {
            assert!((v - Complex::new((k * z).cos(), (k * z).sin())).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn steering_unit_modulus(alpha in 0.0..PI, beta in 0.0..(2.0 * PI), n_mu in 1usize..6, sp in 0.1f64..0.8) {
            let g = reference_geom(2, n_mu, sp);
            let a = steering_vector(&g, alpha, beta);
            for z in a.iter() {
                prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            }
            prop_assert!((frobenius(&a).powi(2) - g.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn path_variance_inverse_square() {
        let a = path_variance::<f64>(10e9, 10.0, 1.0).unwrap();
        let b = path_variance(10e9, 20.0, 1.0).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        assert!(path_variance(10e9, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_distance_user_rejected() {
        let g = reference_geom(1, 2, 0.5);
        let mut rng = realization_rng(0, 0);
        assert!(matches!(
            sample_zrs(&g, &[g.centroid()], 4, 10e9, 1.0, &mut rng),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn sample_zrs_deterministic() {
        let g = reference_geom(2, 3, 0.5);
        let users = [[0.0, 0.0, 50.0], [50.0, 0.0, 0.0]];
        let a = sample_zrs(&g, &users, 20, 10e9, 1.0, &mut realization_rng(9, 3)).unwrap();
        let b = sample_zrs(&g, &users, 20, 10e9, 1.0, &mut realization_rng(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let int = |p: i32| {
            x.iter()
                .zip(&w)
                .map(|(xi, wi)| wi * xi.powi(p))
                .sum::<f64>()
        };
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!((int(12) - 2.0 / 13.0).abs() < 1e-13);
        assert!(int(5).abs() < 1e-14);
    }

    #[test]
    fn point_covariance_rank_one() {
        let g = reference_geom(2, 3, 0.5);
        let (alpha, beta) = (0.9, 2.1);
        let s = covariance(&g, 2.0, AngleDistribution::Point { alpha, beta });
        let a = steering_vector(&g, alpha, beta);
        let want = &a * a.adjoint() * Complex::new(2.0 * alpha.sin().powi(2) * 0.5, 0.0);
        assert!(frobenius(&(&s - want)) < 1e-12);
        let sv = s.singular_values();
        assert!(sv[1] < 1e-10 * sv[0]);
    }

    #[test]
    fn uniform_covariance_hermitian_with_known_trace() {
        let g = reference_geom(2, 4, 0.5);
        let s = covariance(
            &g,
            3.0,
            AngleDistribution::Uniform {
                n_alpha: 40,
                n_beta: 64,
            },
        );
        assert!(hermitian_defect(&s) < 1e-12 * frobenius(&s));
        // E[sin²α] = 1/2 for uniform α, E[sin²ζ] = 1/2.
        let tr: f64 = s.diagonal().iter().map(|z| z.re).sum();
        assert!((tr - 3.0 * 0.25 * g.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn sample_covariance_matches_quadrature() {
        let g = reference_geom(2, 3, 0.5);
        let user = [[g.centroid()[0], 0.0, 30.0]];
        let var = path_variance(10e9, 30.0, 1.0).unwrap();
        let sigma = covariance(
            &g,
            var,
            AngleDistribution::Uniform {
                n_alpha: 48,
                n_beta: 96,
            },
        );
        let draws = 4000;
        let mut emp = CMat::<f64>::zeros(g.len(), g.len());
        let mut rng = realization_rng(17, 0);
        for _ in 0..draws {
            let z = sample_zrs(&g, &user, 50, 10e9, 1.0, &mut rng)
                .unwrap()
                .transpose();
            emp += &z * z.adjoint();
        }
        emp /= Complex::new(draws as f64, 0.0);
        let rel = frobenius(&(&emp - &sigma)) / frobenius(&sigma);
        assert!(rel < 0.05, "relative covariance error {rel}");
        let tr_e: f64 = emp.diagonal().iter().map(|z| z.re).sum();
        let tr_s: f64 = sigma.diagonal().iter().map(|z| z.re).sum();
        assert!((tr_e / tr_s - 1.0).abs() < 0.02);
    }

    #[test]
    fn uncoupled_kernels_are_diagonal() {
        let g = reference_geom(3, 5, 0.5);
        let b = coupling_kernels(&g, &CouplingParams::standard().uncoupled()).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                if i != j {
                    assert_eq!(b.z_ss[(i, j)], Complex::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn feed_kernel_unit_at_origin_and_zero_off_guide() {
        let g = reference_geom(3, 4, 0.5);
        let b = coupling_kernels(&g, &CouplingParams::standard()).unwrap();
        assert!((b.z_st[(4, 1)].norm() - 1.0).abs() < 1e-15);
        assert_eq!(b.z_st[(4, 0)], Complex::new(0.0, 0.0));
        assert!(b.z_st[(5, 1)].norm() < 1.0);
    }

    #[test]
    fn kernels_reciprocal_and_air_only_cross_guide() {
        let g = reference_geom(3, 4, 0.2);
        let p = CouplingParams::standard();
        let full = coupling_kernels(&g, &p).unwrap();
        assert_eq!(full.z_ss, full.z_ss.transpose());
        let users = [[1.0, 0.0, 40.0], [-3.0, 0.0, 39.0], [0.0, 2.0, -45.0]];
        let zrr = user_coupling(&users, &p).unwrap();
        assert_eq!(zrr, zrr.transpose());
        let no_air = coupling_kernels(&g, &p.without_air()).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                if g.waveguide[i] == g.waveguide[j] {
                    assert_eq!(full.z_ss[(i, j)], no_air.z_ss[(i, j)]);
                }
            }
        }
        assert!(frobenius(&(&full.z_ss - &no_air.z_ss)) > 0.0);
    }

    #[test]
    fn default_element_block_is_passive() {
        for sp in [0.3, 0.5, 0.6] {
            let g = reference_geom(6, 20, sp);
            let b = coupling_kernels(&g, &CouplingParams::standard()).unwrap();
            assert!(passivity_margin(&b.z_ss) > -1e-9, "spacing {sp}");
        }
    }

    #[test]
    fn default_network_transmit_matrix_passive() {
        let g = reference_geom(6, 20, 0.5);
        let p = CouplingParams::standard();
        let b = coupling_kernels(&g, &p).unwrap();
        let mut rng = realization_rng(1, 0);
        let users = ring_users(&g, 6, 50.0, &mut rng).unwrap();
        let zrs = sample_zrs(&g, &users, 20, p.frequency, 1.0, &mut rng).unwrap();
        let zrr = user_coupling(&users, &p).unwrap();
        let tau = vec![0.0; g.len()];
        let ch = dma_channel(&dma_network(&b, &zrs, &zrr, &p, &tau)).unwrap();
        assert!(passivity_margin(&ch.zp) > -1e-9);
        assert!(ch.zq.iter().all(|z| z.re.is_finite()));
    }

    #[test]
    fn cmat_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = realization_rng(3, 1);
        let a = CMat::<f64>::from_fn(3, 5, |_, _| complex_normal(&mut rng, 1.0));
        let path = dir.path().join("a.cmat");
        write_cmat(&path, &a).unwrap();
        let b = read_cmat(&path).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
        fs::write(&path, b"junk").unwrap();
        assert!(read_cmat(&path).is_err());
    }

    #[test]
    fn channel_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = reference_geom(2, 3, 0.5);
        let p = CouplingParams::standard();
        let b = coupling_kernels(&g, &p).unwrap();
        let side = ChannelSidecar {
            format: "multiport-channel".into(),
            version: 1,
            seed: 5,
            index: 2,
            geometry: g.clone(),
            coupling: p.clone(),
            users: vec![[0.0, 0.0, 50.0]],
            blocks: vec![],
        };
        dump_channel(
            dir.path(),
            "r2",
            &[("z_ss", &b.z_ss), ("z_st", &b.z_st)],
            side.clone(),
        )
        .unwrap();
        let (s2, blocks) = load_channel(dir.path(), "r2").unwrap();
        assert_eq!(s2.geometry, g);
        assert_eq!(s2.coupling, p);
        assert_eq!(blocks[0].1, b.z_ss);
        assert_eq!(blocks[1].1, b.z_st);
    }
}
