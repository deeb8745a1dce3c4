//! Zero-forcing precoders for fully-digital and DMA transmitters and
//! Nesterov-accelerated tuning of the DMA element loads.

use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{dma_channel, quadratic_power, ChannelRealization, ImpedanceNetwork};
use crate::numerics::{identity, pinv_default, CMat, GradTape, NodeId};
use crate::Real;

/// Precoder scaled to a power budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ZfResult<T: Real> {
    pub f: CMat<T>,
    /// Power control factor `ξ`.
    pub xi: T,
    pub budget: T,
}

fn right_inverse<T: Real>(h: &CMat<T>) -> Result<CMat<T>> {
    if h.nrows() == 0 || h.nrows() > h.ncols() {
        return Err(Error::RankDeficient("channel has more users than columns"));
    }
    let p = pinv_default(h)?;
    let check = h * &p;
    let err = (check - identity::<Complex<T>>(h.nrows()))
        .iter()
        .fold(T::zero(), |m, z| m.max(z.norm_sqr()));
    if !(err < T::lit(1e-12)) {
        return Err(Error::RankDeficient("channel is not full row rank"));
    }
    Ok(p)
}

fn scaled_zf<T: Real>(h: &CMat<T>, power: &CMat<T>, budget: T, sigma_x2: T) -> Result<ZfResult<T>> {
    if !(budget > T::zero()) {
        return Err(Error::InvalidHyperparameter(
            "power budget must be positive".into(),
        ));
    }
    let hp = right_inverse(h)?;
    let base = quadratic_power(&hp, power, sigma_x2)?;
    if !(base > T::zero()) {
        return Err(Error::RankDeficient("precoder carries no power"));
    }
    let xi = (budget / base).sqrt();
    Ok(ZfResult {
        f: hp * Complex::new(xi, T::zero()),
        xi,
        budget,
    })
}

/// `F = ξ·H†` with transmit power `P_max` on `Z_p` (or `Z_tt`).
pub fn zf_fd<T: Real>(h: &CMat<T>, zp: &CMat<T>, p_max: T, sigma_x2: T) -> Result<ZfResult<T>> {
    scaled_zf(h, zp, p_max, sigma_x2)
}

/// `F = ξ·H†` with supplied power `P_s_max` on `Z_q`.
pub fn zf_dma<T: Real>(ch: &ChannelRealization<T>, p_s_max: T, sigma_x2: T) -> Result<ZfResult<T>> {
    scaled_zf(&ch.h, &ch.zq, p_s_max, sigma_x2)
}

/// Common per-user SINR of a ZF DMA precoder: `ξ²/noise_ratio`.
pub fn zf_sinr<T: Real>(zf: &ZfResult<T>, noise_ratio: T) -> T {
    zf.xi * zf.xi / noise_ratio
}

/// Budget and noise level shared by every γ evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkBudget<T> {
    pub power: T,
    pub sigma_x2: T,
    pub noise_ratio: T,
    /// When false the waveguide inputs are treated as matched (`Λ = 0`), so
    /// the supplied power equals the transmitted power.
    pub insertion_loss: bool,
}

impl<T: Real> LinkBudget<T> {
    pub fn new(power: T, sigma_x2: T, noise_ratio: T) -> Self {
        Self {
            power,
            sigma_x2,
            noise_ratio,
            insertion_loss: true,
        }
    }
}

/// γ for the network as loaded, without the tape.
pub fn dma_gamma<T: Real>(net: &ImpedanceNetwork<T>, link: &LinkBudget<T>) -> Result<T> {
    let mut ch = dma_channel(net)?;
    if !link.insertion_loss {
        ch.zq = ch.zp.clone();
    }
    let zf = zf_dma(&ch, link.power, link.sigma_x2)?;
    Ok(zf_sinr(&zf, link.noise_ratio))
}

/// γ(τ) and its gradient with respect to the tuning vector.
///
/// Only the propagation block `P = (Z_s + Z_ss)⁻¹ Z_st` is recorded on the
/// tape. With `A = Z_ss + R_s + i·diag(τ)` and `G` the tape gradient at `P`,
/// `∂γ/∂τ_m = Im Σ_n P_mn·conj(W_mn)` where `W = A⁻ᴴ G`.
pub fn gamma_and_grad<T: Real>(
    net: &ImpedanceNetwork<T>,
    tau: &[T],
    link: &LinkBudget<T>,
) -> Result<(T, Vec<T>)> {
    let (_, m, _) = net.dims();
    if tau.len() != m {
        return Err(Error::InvalidDimension(format!(
            "tuning has {} entries, network has {m} elements",
            tau.len()
        )));
    }
    let loaded = net.with_tuning(tau);
    let a = &loaded.z_s + &loaded.z_ss;
    let lu = a.clone().lu();
    let singular = || Error::SingularNetwork("Z_s + Z_ss");
    let p = lu.solve(&net.z_st).ok_or_else(singular)?;
    if p.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(singular());
    }
    let (gamma, g) = gamma_from_propagation(net, &p, link)?;
    let symmetric = a.iter().zip(a.transpose().iter()).all(|(x, y)| x == y);
    let w = if symmetric {
        lu.solve(&g.map(|v| v.conj()))
            .ok_or_else(singular)?
            .map(|v| v.conj())
    } else {
        a.adjoint().lu().solve(&g).ok_or_else(singular)?
    };
    let grad = (0..m)
        .map(|i| {
            p.row(i)
                .iter()
                .zip(w.row(i).iter())
                .fold(T::zero(), |s, (x, y)| s + (*x * y.conj()).im)
        })
        .collect();
    Ok((gamma, grad))
}

/// γ as a function of the propagation block, with its tape gradient.
fn gamma_from_propagation<T: Real>(
    net: &ImpedanceNetwork<T>,
    p: &CMat<T>,
    link: &LinkBudget<T>,
) -> Result<(T, CMat<T>)> {
    let c = |x: T| Complex::new(x, T::zero());
    let mut tp: GradTape<Complex<T>> = GradTape::new();
    let prop = tp.leaf(p.clone());
    let zr_t = crate::network::receive_scaling(&net.z_r, &net.z_rr)?;
    let left = tp.constant(zr_t * &net.z_rs);
    let z_st_t = tp.constant(net.z_st.transpose());
    let h = tp.matmul(left, prop);
    let h_adj = tp.adjoint(h);
    let gram = tp.matmul(h, h_adj);
    let gram_inv = tp.inverse(gram, "H Hᴴ")?;
    let h_pinv = tp.matmul(h_adj, gram_inv);

    let coupled = tp.matmul(z_st_t, prop);
    let z_tt = tp.constant(net.z_tt.clone());
    let zp = tp.sub(z_tt, coupled);

    let zq = if link.insertion_loss {
        supply_node(&mut tp, zp, net.z0)?
    } else {
        zp
    };

    let zq_h = tp.matmul(zq, h_pinv);
    let hp_adj = tp.adjoint(h_pinv);
    let quad = tp.matmul(hp_adj, zq_h);
    let tr = tp.trace(quad);
    let re = tp.real_part(tr);
    let power = tp.scale(re, c(link.sigma_x2 * T::lit(0.5)));
    let inv_power = tp.recip(power);
    let gamma = tp.scale(inv_power, c(link.power / link.noise_ratio));

    let value = tp.scalar(gamma).re;
    if !value.is_finite() || !(tp.scalar(power).re > T::zero()) {
        return Err(Error::DivergedOptimization(format!(
            "γ evaluated to {value}"
        )));
    }
    let mut g = tp.grad(gamma, &[prop])?;
    Ok((value, g.remove(0)))
}

/// `diag(1/(1 − |λ_n|²))·Z_p` with `λ = (z_in − Z0)/(z_in + Z0)` on the tape.
fn supply_node<T: Real>(
    tp: &mut GradTape<Complex<T>>,
    zp: NodeId,
    z0: Complex<T>,
) -> Result<NodeId> {
    let one = Complex::new(T::one(), T::zero());
    let zin = tp.diag(zp);
    let num = tp.add_scalar(zin, -z0);
    let den = tp.add_scalar(zin, z0);
    let den_inv = tp.recip(den);
    let lam = tp.mul(num, den_inv);
    let lam_d = tp.diag_embed(lam);
    let lam_adj = tp.adjoint(lam_d);
    let lam_sq = tp.matmul(lam_d, lam_adj);
    let lam_mag = tp.diag(lam_sq);
    if let Some(bad) = tp.value(lam_mag).iter().find(|v| v.re >= T::one()) {
        return Err(Error::ReflectionOverflow(bad.re.sqrt().as_f64()));
    }
    let neg_mag = tp.neg(lam_mag);
    let keep = tp.add_scalar(neg_mag, one);
    let gain = tp.recip(keep);
    let gain_d = tp.diag_embed(gain);
    Ok(tp.matmul(gain_d, zp))
}

/// Nesterov settings: momentum `θ`, step `α`, iteration budget `J`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NagConfig<T> {
    pub theta: T,
    pub alpha: T,
    pub iters: usize,
}

impl<T: Real> Default for NagConfig<T> {
    fn default() -> Self {
        Self {
            theta: T::lit(0.9),
            alpha: T::lit(0.01),
            iters: 200,
        }
    }
}

/// Iterate of the tuning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct NagState<T> {
    pub tau: Vec<T>,
    pub momentum: Vec<T>,
    pub gamma: T,
}

/// Result of [`nag_tune`].
#[derive(Clone, Debug)]
pub struct NagOutcome<T: Real> {
    pub net: ImpedanceNetwork<T>,
    pub gamma_initial: T,
    pub gamma_final: T,
    /// Accepted iterates, starting with the initial point.
    pub trajectory: Vec<NagState<T>>,
    /// Number of step-size halvings caused by rejected iterates.
    pub halvings: usize,
}

/// Maximises γ over `Im{Z_s}` with Nesterov momentum:
/// `Δ_j = θΔ_{j−1} − α∇(γ/γ_0)(τ_{j−1} − θΔ_{j−1})`, `τ_j = τ_{j−1} − Δ_j`.
///
/// The objective is normalised by its initial value so that `α` does not
/// depend on the SNR. Rejected iterates (non-finite γ, rank loss, total
/// reflection) halve `α`, clear the momentum and restart from the best
/// point. The best iterate is returned; `Re{Z_s}` is never touched.
pub fn nag_tune<T: Real>(
    net: &ImpedanceNetwork<T>,
    cfg: &NagConfig<T>,
    link: &LinkBudget<T>,
) -> Result<NagOutcome<T>> {
    if !(cfg.theta >= T::zero() && cfg.theta < T::one()) || !(cfg.alpha > T::zero()) {
        return Err(Error::InvalidHyperparameter(
            "NAG needs 0 ≤ θ < 1 and α > 0".into(),
        ));
    }
    let tau0 = net.tuning();
    let m = tau0.len();
    let gamma0 = dma_gamma(net, link)?;
    let scale = T::one() / gamma0;
    let mut best = NagState {
        tau: tau0.clone(),
        momentum: vec![T::zero(); m],
        gamma: gamma0,
    };
    let mut cur = best.clone();
    let mut trajectory = vec![best.clone()];
    let mut alpha = cfg.alpha;
    let mut halvings = 0;
    let mut j = 0;
    while j < cfg.iters {
        let look: Vec<T> = cur
            .tau
            .iter()
            .zip(&cur.momentum)
            .map(|(&t, &d)| t - cfg.theta * d)
            .collect();
        let step = gamma_and_grad(net, &look, link).and_then(|(_, g)| {
            let momentum: Vec<T> = cur
                .momentum
                .iter()
                .zip(&g)
                .map(|(&d, &gi)| cfg.theta * d - alpha * scale * gi)
                .collect();
            let tau: Vec<T> = cur
                .tau
                .iter()
                .zip(&momentum)
                .map(|(&t, &d)| t - d)
                .collect();
            let gamma = dma_gamma(&net.with_tuning(&tau), link)?;
            if !gamma.is_finite() {
                return Err(Error::DivergedOptimization("non-finite γ".into()));
            }
            Ok(NagState {
                tau,
                momentum,
                gamma,
            })
        });
        match step {
            Ok(next) => {
                if next.gamma > best.gamma {
                    best = next.clone();
                }
                trajectory.push(next.clone());
                cur = next;
                j += 1;
            }
            Err(
                Error::DivergedOptimization(_)
                | Error::RankDeficient(_)
                | Error::SingularNetwork(_)
                | Error::ReflectionOverflow(_),
            ) => {
                alpha *= T::lit(0.5);
                halvings += 1;
                if alpha < cfg.alpha * T::lit(1e-12) {
                    break;
                }
                cur = NagState {
                    momentum: vec![T::zero(); m],
                    ..best.clone()
                };
            }
            Err(e) => return Err(e),
        }
    }
    Ok(NagOutcome {
        net: net.with_tuning(&best.tau),
        gamma_initial: gamma0,
        gamma_final: best.gamma,
        trajectory,
        halvings,
    })
}

/// Tuning vector drawn uniformly from `[lo, hi]`.
pub fn random_tuning<T: Real, R: Rng + ?Sized>(m: usize, lo: T, hi: T, rng: &mut R) -> Vec<T> {
    (0..m)
        .map(|_| lo + (hi - lo) * T::lit(rng.random::<f64>()))
        .collect()
}
