//! Uplink sum-rate power control: WMMSE, equal power and the unfolded
//! AO-Net whose per-layer correction scalars come from a small graph network.
//!
//! Gains are stored receiver-major: `gains[(k, m)] = |g_kᴴ h_m|` is user
//! `m`'s amplitude at user `k`'s combiner output.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{inverse, realization_rng, Adam, CMat, GradTape, NodeId, RMat};
use crate::pgd::LayerWeighting;
use crate::Real;

/// Floor for the real diagonal of the receive coupling matrix used in the
/// combiner normalisation.
pub const DIAGONAL_FLOOR: f64 = 1e-6;
/// Smallest admissible denominator of the weight update.
pub const WEIGHT_DENOMINATOR_FLOOR: f64 = 1e-12;
const POWER_DENOMINATOR_FLOOR: f64 = 1e-30;

/// How receive combiners are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerRule {
    /// LMMSE at equal full power, falling back to matched filtering when the
    /// covariance cannot be inverted.
    #[default]
    Mmse,
    MatchedFilter,
}

/// One uplink power-control instance.
#[derive(Clone, Debug, PartialEq)]
pub struct UplinkScenario<T: Real> {
    /// Per-user channels as columns (`M×K`); empty for gain-only scenarios.
    pub h: CMat<T>,
    pub z_rr: CMat<T>,
    pub p_max: T,
    pub noise_ratio: T,
    pub sigma_x2: T,
    /// Combiners as columns (`M×K`).
    pub g: CMat<T>,
    pub gains: RMat<T>,
}

/// Combiners for `h` normalised so that `(σ_x²/2)·Re{gᴴ Z g} = 1`.
pub fn build_scenario<T: Real>(
    h: &CMat<T>,
    z_rr: &CMat<T>,
    p_max: T,
    noise_ratio: T,
    sigma_x2: T,
    rule: CombinerRule,
) -> Result<UplinkScenario<T>> {
    let (m, k) = h.shape();
    if k == 0 || m == 0 {
        return Err(Error::InvalidDimension(
            "uplink scenario needs at least one user and antenna".into(),
        ));
    }
    if z_rr.shape() != (m, m) {
        return Err(Error::InvalidDimension(format!(
            "Z_rr is {:?}, expected {m}x{m}",
            z_rr.shape()
        )));
    }
    if !(p_max > T::zero()) || !(noise_ratio > T::zero()) || !(sigma_x2 > T::zero()) {
        return Err(Error::InvalidHyperparameter(
            "p_max, noise ratio and σ_x² must be positive".into(),
        ));
    }
    let raw = match rule {
        CombinerRule::MatchedFilter => h.clone(),
        CombinerRule::Mmse => {
            let cov = h * h.adjoint() * Complex::new(p_max, T::zero())
                + CMat::<T>::identity(m, m) * Complex::new(noise_ratio, T::zero());
            match inverse(&cov, "combiner covariance") {
                Ok(inv) => inv * h,
                Err(_) => h.clone(),
            }
        }
    };
    let mut z = z_rr.clone();
    let floor = T::lit(DIAGONAL_FLOOR);
    for i in 0..m {
        let d = z[(i, i)];
        z[(i, i)] = Complex::new(d.re.max(floor), d.im);
    }
    let half = sigma_x2 * T::lit(0.5);
    let mut g = raw;
    for mut col in g.column_iter_mut() {
        let energy = col.iter().fold(T::zero(), |s, c| s + c.norm_sqr());
        let q = (col.adjoint() * &z * &col)[(0, 0)].re.max(floor * energy);
        if q > T::zero() {
            col *= Complex::new((T::one() / (half * q)).sqrt(), T::zero());
        }
    }
    let cross = g.adjoint() * h;
    let gains = cross.map(|c| c.norm_sqr().sqrt());
    Ok(UplinkScenario {
        h: h.clone(),
        z_rr: z_rr.clone(),
        p_max,
        noise_ratio,
        sigma_x2,
        g,
        gains,
    })
}

impl<T: Real> UplinkScenario<T> {
    /// Scenario defined directly by its `K×K` gain matrix.
    pub fn from_gains(gains: RMat<T>, p_max: T, noise_ratio: T) -> Result<Self> {
        if !gains.is_square() || gains.nrows() == 0 {
            return Err(Error::InvalidDimension(
                "gain matrix must be square and nonempty".into(),
            ));
        }
        if gains.iter().any(|g| !(*g >= T::zero())) {
            return Err(Error::InvalidHyperparameter(
                "gains must be nonnegative".into(),
            ));
        }
        let k = gains.nrows();
        Ok(Self {
            h: CMat::zeros(0, k),
            z_rr: CMat::zeros(0, 0),
            p_max,
            noise_ratio,
            sigma_x2: T::one(),
            g: CMat::zeros(0, k),
            gains,
        })
    }

    pub fn users(&self) -> usize {
        self.gains.nrows()
    }

    /// `(σ_x²/2)·Re{g_kᴴ Z_rr g_k}` per user, with the floored diagonal.
    pub fn combiner_norms(&self) -> Vec<T> {
        let mut z = self.z_rr.clone();
        for i in 0..z.nrows() {
            let d = z[(i, i)];
            z[(i, i)] = Complex::new(d.re.max(T::lit(DIAGONAL_FLOOR)), d.im);
        }
        self.g
            .column_iter()
            .map(|c| (c.adjoint() * &z * c)[(0, 0)].re * self.sigma_x2 * T::lit(0.5))
            .collect()
    }

    /// SINR per user from the gain matrix.
    pub fn sinr(&self, rho: &[T]) -> Vec<T> {
        let k = self.users();
        (0..k)
            .map(|i| {
                let interference = (0..k)
                    .filter(|&j| j != i)
                    .fold(T::zero(), |s, j| s + rho[j] * self.gains[(i, j)].powi(2));
                rho[i] * self.gains[(i, i)].powi(2) / (interference + self.noise_ratio)
            })
            .collect()
    }

    /// SINR per user evaluated from the channels and combiners.
    pub fn sinr_direct(&self, rho: &[T]) -> Vec<T> {
        let k = self.users();
        (0..k)
            .map(|i| {
                let gk = self.g.column(i);
                let amp = |j: usize| (gk.adjoint() * self.h.column(j))[(0, 0)].norm_sqr();
                let interference = (0..k)
                    .filter(|&j| j != i)
                    .fold(T::zero(), |s, j| s + rho[j] * amp(j));
                rho[i] * amp(i) / (interference + self.noise_ratio)
            })
            .collect()
    }

    pub fn sum_rate(&self, rho: &[T]) -> T {
        crate::network::spectral_efficiency(&self.sinr(rho))
    }

    /// The same scenario with users relabelled so that new user `i` is old
    /// user `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.users();
        let gains = DMatrix::from_fn(k, k, |i, j| self.gains[(perm[i], perm[j])]);
        let pick = |m: &CMat<T>| {
            if m.ncols() == 0 || m.nrows() == 0 {
                m.clone()
            } else {
                DMatrix::from_fn(m.nrows(), k, |r, c| m[(r, perm[c])])
            }
        };
        Self {
            h: pick(&self.h),
            g: pick(&self.g),
            gains,
            ..self.clone()
        }
    }

    fn allocation(&self, q: Vec<T>) -> PowerAllocation<T> {
        let rho: Vec<T> = q.iter().map(|v| *v * *v).collect();
        let sum_rate = self.sum_rate(&rho);
        PowerAllocation { q, rho, sum_rate }
    }
}

/// Per-user amplitudes, powers and the resulting sum rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation<T> {
    pub q: Vec<T>,
    pub rho: Vec<T>,
    pub sum_rate: T,
}

/// Every user at full power.
pub fn equal_power<T: Real>(sc: &UplinkScenario<T>) -> PowerAllocation<T> {
    sc.allocation(vec![sc.p_max.sqrt(); sc.users()])
}

/// `[x]_0^{√p_max}`.
pub fn saturate<T: Real>(x: T, p_max: T) -> T {
    x.max(T::zero()).min(p_max.sqrt())
}

/// One corrected WMMSE sweep; returns the new amplitudes and whether a
/// weight denominator had to be floored.
pub fn wmmse_step<T: Real>(
    sc: &UplinkScenario<T>,
    q_prev: &[T],
    a: &[T],
    b: &[T],
) -> (Vec<T>, bool) {
    let k = sc.users();
    let g2 = sc.gains.map(|g| g * g);
    let d: Vec<T> = (0..k).map(|i| sc.gains[(i, i)]).collect();
    let q2: Vec<T> = q_prev.iter().map(|v| *v * *v).collect();
    let mut flagged = false;
    let u: Vec<T> = (0..k)
        .map(|i| {
            let s = (0..k).fold(T::zero(), |s, m| s + g2[(i, m)] * q2[m]);
            d[i] * q_prev[i] / (sc.noise_ratio + s)
        })
        .collect();
    let w: Vec<T> = (0..k)
        .map(|i| {
            let mut den = T::one() - u[i] * d[i] * q_prev[i];
            if den < T::lit(WEIGHT_DENOMINATOR_FLOOR) {
                den = T::lit(WEIGHT_DENOMINATOR_FLOOR);
                flagged = true;
            }
            a[i] / den + b[i]
        })
        .collect();
    let q = (0..k)
        .map(|i| {
            let den = (0..k).fold(T::zero(), |s, m| s + g2[(m, i)] * u[m] * u[m] * w[m]);
            let den = den.max(T::lit(POWER_DENOMINATOR_FLOOR));
            saturate(u[i] * d[i] * w[i] / den, sc.p_max)
        })
        .collect();
    (q, flagged)
}

/// WMMSE iterations with their sum rates.
#[derive(Clone, Debug, PartialEq)]
pub struct WmmseRun<T> {
    pub allocation: PowerAllocation<T>,
    /// Amplitudes after each iteration.
    pub iterates: Vec<Vec<T>>,
    /// Sum rate of the start point followed by each iterate.
    pub rates: Vec<T>,
}

/// WMMSE from `q0` until `max |Δq| < tol` or `max_iter` sweeps.
pub fn wmmse_from<T: Real>(
    sc: &UplinkScenario<T>,
    q0: &[T],
    max_iter: usize,
    tol: T,
) -> Result<WmmseRun<T>> {
    if max_iter == 0 {
        return Err(Error::InvalidHyperparameter(
            "WMMSE needs at least one iteration".into(),
        ));
    }
    let k = sc.users();
    let (ones, zeros) = (vec![T::one(); k], vec![T::zero(); k]);
    let mut q: Vec<T> = q0.iter().map(|&v| saturate(v, sc.p_max)).collect();
    let rate = |q: &[T]| sc.sum_rate(&q.iter().map(|v| *v * *v).collect::<Vec<_>>());
    let mut rates = vec![rate(&q)];
    let mut iterates = Vec::new();
    for _ in 0..max_iter {
        let (next, _) = wmmse_step(sc, &q, &ones, &zeros);
        let delta = next
            .iter()
            .zip(&q)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        q = next;
        rates.push(rate(&q));
        iterates.push(q.clone());
        if delta < tol {
            break;
        }
    }
    Ok(WmmseRun {
        allocation: sc.allocation(q),
        iterates,
        rates,
    })
}

/// Best WMMSE fixed point over `K + 1` starts: full power, then each user
/// alone at full power.
///
/// A user started at zero stays there, so the single-user starts reach the
/// vertices that a full-power start misses under strong interference.
pub fn wmmse<T: Real>(
    sc: &UplinkScenario<T>,
    max_iter: usize,
    tol: T,
) -> Result<PowerAllocation<T>> {
    let k = sc.users();
    let full = sc.p_max.sqrt();
    let mut best = wmmse_from(sc, &vec![full; k], max_iter, tol)?.allocation;
    if k < 2 {
        return Ok(best);
    }
    for user in 0..k {
        let mut q0 = vec![T::zero(); k];
        q0[user] = full;
        let alloc = wmmse_from(sc, &q0, max_iter, tol)?.allocation;
        if alloc.sum_rate > best.sum_rate {
            best = alloc;
        }
    }
    Ok(best)
}

/// Shape of the per-layer graph networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnShape {
    pub width: usize,
    pub rounds: usize,
}

const NODE_FEATURES: usize = 3;

impl GnnShape {
    /// `(rows, cols)` of every weight block, in storage order.
    fn blocks(self) -> Vec<(usize, usize)> {
        let w = self.width;
        let mut out = vec![(w, NODE_FEATURES), (w, 1)];
        for _ in 0..self.rounds {
            out.extend([(w, w), (w, w), (w, 1)]);
        }
        out.extend([(1, w), (1, 1)]);
        out
    }

    fn len(self) -> usize {
        self.blocks().iter().map(|(r, c)| r * c).sum()
    }
}

/// Weights of all layers: for layer `ℓ`, a scale head and an offset head,
/// each a complete graph network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoNetParams<T> {
    pub layers: usize,
    pub shape: GnnShape,
    pub weights: Vec<T>,
}

/// Output head of a graph network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Scale,
    Offset,
}

const SCALE_FLOOR: f64 = 1e-3;

fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Real> AoNetParams<T> {
    /// Random hidden weights and zero readouts biased so that every layer
    /// outputs `a = 1`, `b = 0` (plain WMMSE).
    pub fn identity(layers: usize, shape: GnnShape, seed: u64) -> Self {
        let mut weights = Vec::with_capacity(2 * layers * shape.len());
        let blocks = shape.blocks();
        let bias_for_one = T::lit((1.0f64 - SCALE_FLOOR).exp_m1().ln());
        for net in 0..2 * layers {
            let mut rng = realization_rng(seed, net as u64);
            let head = if net % 2 == 0 {
                Head::Scale
            } else {
                Head::Offset
            };
            for (i, &(r, c)) in blocks.iter().enumerate() {
                let is_readout = i + 2 >= blocks.len();
                let is_bias = c == 1 && !is_readout;
                let std = (1.0 / c as f64).sqrt();
                for _ in 0..r * c {
                    let v = if is_readout {
                        if i + 1 == blocks.len() && head == Head::Scale {
                            bias_for_one
                        } else {
                            T::zero()
                        }
                    } else if is_bias {
                        T::zero()
                    } else {
                        T::lit(std * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt() * 0.5)
                    };
                    weights.push(v);
                }
            }
        }
        Self {
            layers,
            shape,
            weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.shape.width == 0 {
            return Err(Error::InvalidHyperparameter(
                "AO-Net needs layers and a positive width".into(),
            ));
        }
        if self.weights.len() != 2 * self.layers * self.shape.len() {
            return Err(Error::InvalidDimension(
                "weight vector does not match the network shape".into(),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidHyperparameter(
                "weights must be finite".into(),
            ));
        }
        Ok(())
    }

    fn net(&self, layer: usize, head: Head) -> Vec<RMat<T>> {
        let per = self.shape.len();
        let idx = 2 * layer + usize::from(head == Head::Offset);
        let mut slice = &self.weights[idx * per..(idx + 1) * per];
        self.shape
            .blocks()
            .into_iter()
            .map(|(r, c)| {
                let (head, rest) = slice.split_at(r * c);
                slice = rest;
                DMatrix::from_column_slice(r, c, head)
            })
            .collect()
    }
}

/// Node features `log(1 + snr·x)` for the direct gain, the interference
/// received and the interference caused.
pub fn node_features<T: Real>(sc: &UplinkScenario<T>) -> RMat<T> {
    let k = sc.users();
    let snr = sc.p_max / sc.noise_ratio;
    let g2 = sc.gains.map(|g| g * g);
    DMatrix::from_fn(NODE_FEATURES, k, |f, i| {
        let x = match f {
            0 => g2[(i, i)],
            1 => (0..k)
                .filter(|&m| m != i)
                .fold(T::zero(), |s, m| s + g2[(i, m)]),
            _ => (0..k)
                .filter(|&m| m != i)
                .fold(T::zero(), |s, m| s + g2[(m, i)]),
        };
        (snr * x).ln_1p()
    })
}

/// Messages are averaged over the other users.
fn neighbour_weight<T: Real>(k: usize) -> T {
    T::one() / T::lit(k.saturating_sub(1).max(1) as f64)
}

fn relu_mat<T: Real>(m: RMat<T>) -> RMat<T> {
    m.map(|v| v.max(T::zero()))
}

fn gnn_forward<T: Real>(blocks: &[RMat<T>], x: &RMat<T>, rounds: usize, head: Head) -> Vec<T> {
    let k = x.ncols();
    let ones = RMat::<T>::from_element(1, k, T::one());
    let mut h = relu_mat(&blocks[0] * x + &blocks[1] * &ones);
    for r in 0..rounds {
        let (self_w, msg_w, bias) = (&blocks[2 + 3 * r], &blocks[3 + 3 * r], &blocks[4 + 3 * r]);
        let total = h.column_sum();
        let others = DMatrix::from_fn(h.nrows(), k, |i, j| {
            (total[i] - h[(i, j)]) * neighbour_weight(k)
        });
        h = relu_mat(self_w * &h + msg_w * others + bias * &ones);
    }
    let n = blocks.len();
    let s = &blocks[n - 2] * h + &blocks[n - 1] * ones;
    s.iter()
        .map(|&v| match head {
            Head::Scale => softplus(v) + T::lit(SCALE_FLOOR),
            Head::Offset => v,
        })
        .collect()
}

/// Per-layer `(a_ℓ, b_ℓ)` for one scenario.
pub fn correction_scalars<T: Real>(
    sc: &UplinkScenario<T>,
    params: &AoNetParams<T>,
) -> Vec<(Vec<T>, Vec<T>)> {
    let x = node_features(sc);
    (0..params.layers)
        .map(|l| {
            let a = gnn_forward(
                &params.net(l, Head::Scale),
                &x,
                params.shape.rounds,
                Head::Scale,
            );
            let b = gnn_forward(
                &params.net(l, Head::Offset),
                &x,
                params.shape.rounds,
                Head::Offset,
            );
            (a, b)
        })
        .collect()
}

/// Result of an AO-Net pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AoNetOutput<T> {
    pub allocation: PowerAllocation<T>,
    /// Amplitudes after each layer.
    pub layers: Vec<Vec<T>>,
    /// Whether any weight denominator was floored.
    pub flagged: bool,
}

/// Runs all layers from `q0`.
pub fn aonet_forward<T: Real>(
    sc: &UplinkScenario<T>,
    params: &AoNetParams<T>,
    q0: &[T],
) -> Result<AoNetOutput<T>> {
    params.validate()?;
    if q0.len() != sc.users() || q0.iter().any(|&v| v < T::zero() || v > sc.p_max.sqrt()) {
        return Err(Error::InvalidHyperparameter(
            "q0 must hold one amplitude in [0, √p_max] per user".into(),
        ));
    }
    let mut q = q0.to_vec();
    let mut layers = Vec::with_capacity(params.layers);
    let mut flagged = false;
    for (a, b) in correction_scalars(sc, params) {
        let (next, f) = wmmse_step(sc, &q, &a, &b);
        flagged |= f;
        q = next;
        layers.push(q.clone());
    }
    Ok(AoNetOutput {
        allocation: sc.allocation(q),
        layers,
        flagged,
    })
}

/// `−Σ_ℓ w(ℓ)·Σ_k log2(1 + γ_{k,ℓ})` and its gradient with respect to
/// [`AoNetParams::weights`].
pub fn aonet_loss_and_grad<T: Real>(
    sc: &UplinkScenario<T>,
    params: &AoNetParams<T>,
    q0: &[T],
    weighting: LayerWeighting,
) -> Result<(T, Vec<T>)> {
    params.validate()?;
    let k = sc.users();
    let mut tape = GradTape::<T>::new();
    let col = |v: Vec<T>| DMatrix::from_vec(v.len(), 1, v);
    let x = tape.constant(node_features(sc));
    let ones_row = tape.constant(RMat::from_element(1, k, T::one()));
    let others = tape.constant(RMat::from_fn(k, k, |i, j| {
        if i == j {
            T::zero()
        } else {
            neighbour_weight(k)
        }
    }));
    let g2_mat = sc.gains.map(|g| g * g);
    let g2 = tape.constant(g2_mat.clone());
    let g2_t = tape.constant(g2_mat.transpose());
    let d = tape.constant(col((0..k).map(|i| sc.gains[(i, i)]).collect()));
    let d2 = tape.constant(col((0..k).map(|i| g2_mat[(i, i)]).collect()));
    let mut q = tape.constant(col(q0.to_vec()));
    let mut leaves: Vec<NodeId> = Vec::new();
    let mut loss: Option<NodeId> = None;
    let big = T::lit(f64::MAX);

    let gnn = |tape: &mut GradTape<T>,
               leaves: &mut Vec<NodeId>,
               blocks: Vec<RMat<T>>,
               head: Head|
     -> NodeId {
        let ids: Vec<NodeId> = blocks.into_iter().map(|b| tape.leaf(b)).collect();
        leaves.extend(&ids);
        let pre = tape.matmul(ids[0], x);
        let bias = tape.matmul(ids[1], ones_row);
        let s = tape.add(pre, bias);
        let mut h = tape.relu(s);
        for r in 0..params.shape.rounds {
            let own = tape.matmul(ids[2 + 3 * r], h);
            let agg = tape.matmul(h, others);
            let msg = tape.matmul(ids[3 + 3 * r], agg);
            let bias = tape.matmul(ids[4 + 3 * r], ones_row);
            let s = tape.add(own, msg);
            let s = tape.add(s, bias);
            h = tape.relu(s);
        }
        let n = ids.len();
        let out = tape.matmul(ids[n - 2], h);
        let bias = tape.matmul(ids[n - 1], ones_row);
        let s = tape.add(out, bias);
        let s = tape.transpose(s);
        match head {
            Head::Scale => {
                let sp = tape.softplus(s);
                tape.add_scalar(sp, T::lit(SCALE_FLOOR))
            }
            Head::Offset => s,
        }
    };

    for l in 0..params.layers {
        let a = gnn(
            &mut tape,
            &mut leaves,
            params.net(l, Head::Scale),
            Head::Scale,
        );
        let b = gnn(
            &mut tape,
            &mut leaves,
            params.net(l, Head::Offset),
            Head::Offset,
        );
        let q2 = tape.mul(q, q);
        let rx = tape.matmul(g2, q2);
        let rx = tape.add_scalar(rx, sc.noise_ratio);
        let rx_inv = tape.recip(rx);
        let dq = tape.mul(d, q);
        let u = tape.mul(dq, rx_inv);
        let udq = tape.mul(u, dq);
        let den = tape.neg(udq);
        let den = tape.add_scalar(den, T::one());
        let den = tape.clamp(den, T::lit(WEIGHT_DENOMINATOR_FLOOR), big);
        let den_inv = tape.recip(den);
        let aw = tape.mul(a, den_inv);
        let w = tape.add(aw, b);
        let uw = tape.mul(u, w);
        let uuw = tape.mul(u, uw);
        let pden = tape.matmul(g2_t, uuw);
        let pden = tape.clamp(pden, T::lit(POWER_DENOMINATOR_FLOOR), big);
        let pden_inv = tape.recip(pden);
        let num = tape.mul(d, uw);
        let ratio = tape.mul(num, pden_inv);
        q = tape.clamp(ratio, T::zero(), sc.p_max.sqrt());

        let weight = weighting.weight::<T>(l + 1);
        if weight == T::zero() {
            continue;
        }
        let rho = tape.mul(q, q);
        let signal = tape.mul(d2, rho);
        let total = tape.matmul(g2, rho);
        let interf = tape.sub(total, signal);
        let interf = tape.add_scalar(interf, sc.noise_ratio);
        let inv = tape.recip(interf);
        let sinr = tape.mul(signal, inv);
        let one_plus = tape.add_scalar(sinr, T::one());
        let logs = tape.ln(one_plus);
        let rate = tape.sum(logs);
        let term = tape.scale(rate, -weight / T::lit(std::f64::consts::LN_2));
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let Some(loss) = loss else {
        return Ok((T::zero(), vec![T::zero(); params.weights.len()]));
    };
    let value = tape.scalar(loss);
    let grads = tape.grad(loss, &leaves)?;
    let flat: Vec<T> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    Ok((value, flat))
}

/// Offline training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoTrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub weighting: LayerWeighting,
    pub seed: u64,
}

impl<T: Real> Default for AoTrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            weighting: LayerWeighting::Log,
            seed: 0,
        }
    }
}

/// Mean per-scenario loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AoTrainReport<T> {
    pub epoch_loss: Vec<T>,
}

/// Unsupervised training from full-power starts; batch gradients are
/// reduced in index order.
pub fn aonet_train<T: Real>(
    scenarios: &[UplinkScenario<T>],
    init: AoNetParams<T>,
    cfg: &AoTrainConfig<T>,
) -> Result<(AoNetParams<T>, AoTrainReport<T>)> {
    init.validate()?;
    if scenarios.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidHyperparameter(
            "training needs scenarios and a batch size".into(),
        ));
    }
    let mut params = init;
    let mut opt = Adam::new(params.weights.len(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut report = AoTrainReport::default();
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut realization_rng(cfg.seed, epoch as u64));
        let mut sum = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(T, Vec<T>)>> = batch
                .par_iter()
                .map(|&i| {
                    let sc = &scenarios[i];
                    aonet_loss_and_grad(
                        sc,
                        &params,
                        &vec![sc.p_max.sqrt(); sc.users()],
                        cfg.weighting,
                    )
                })
                .collect();
            let mut loss = T::zero();
            let mut grad = vec![T::zero(); params.weights.len()];
            for r in results {
                let (l, g) = r?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            grad.iter_mut().for_each(|v| *v *= inv);
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergedTraining(format!(
                    "non-finite AO-Net loss in epoch {epoch}"
                )));
            }
            opt.step(&mut params.weights, &grad);
            sum += loss;
        }
        report.epoch_loss.push(sum / T::lit(scenarios.len() as f64));
    }
    Ok((params, report))
}

/// Mean sum rate of a set of allocations.
pub fn mean_rate<T: Real>(allocs: &[PowerAllocation<T>]) -> T {
    allocs.iter().fold(T::zero(), |s, a| s + a.sum_rate) / T::lit(allocs.len().max(1) as f64)
}

/// Rayleigh channels `h_k ~ CN(0, I)` as columns.
pub fn rayleigh_channels<T: Real, R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> CMat<T> {
    DMatrix::from_fn(m, k, |_, _| crate::numerics::complex_normal(rng, T::one()))
}

/// Column `k` of `H` as a vector.
pub fn user_channel<T: Real>(h: &CMat<T>, k: usize) -> DVector<Complex<T>> {
    h.column(k).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_check_with;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn scenario_with(
        m: usize,
        k: usize,
        seed: u64,
        snr_db: f64,
        rule: CombinerRule,
    ) -> UplinkScenario<f64> {
        let mut rng = realization_rng(seed, 0);
        let h = rayleigh_channels(m, k, &mut rng);
        let z = CMat::<f64>::identity(m, m) * Complex::new(2.0, 0.0);
        build_scenario(&h, &z, 1.0, 10f64.powf(-snr_db / 10.0), 1.0, rule).unwrap()
    }

    fn scenario(m: usize, k: usize, seed: u64, snr_db: f64) -> UplinkScenario<f64> {
        scenario_with(m, k, seed, snr_db, CombinerRule::Mmse)
    }

    #[test]
    fn combiner_normalisation_holds() {
        let sc = scenario(8, 4, 1, 10.0);
        for n in sc.combiner_norms() {
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(sc.gains.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn orthogonal_channels_with_matched_filters() {
        let mut h = CMat::<f64>::zeros(4, 3);
        for k in 0..3 {
            h[(k, k)] = Complex::new(1.0 + k as f64, 0.5);
        }
        let z = CMat::<f64>::identity(4, 4);
        let sc = build_scenario(&h, &z, 1.0, 0.1, 1.0, CombinerRule::MatchedFilter).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(sc.gains[(i, j)] < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sinr_paths_agree() {
        let sc = scenario(6, 4, 2, 5.0);
        let rho = [0.3, 1.0, 0.7, 0.05];
        for (a, b) in sc.sinr(&rho).iter().zip(sc.sinr_direct(&rho)) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = CMat::<f64>::zeros(3, 0);
        assert!(
            build_scenario(&h, &CMat::identity(3, 3), 1.0, 1.0, 1.0, CombinerRule::Mmse).is_err()
        );
        let h = CMat::<f64>::identity(3, 2);
        assert!(
            build_scenario(&h, &CMat::identity(2, 2), 1.0, 1.0, 1.0, CombinerRule::Mmse).is_err()
        );
        assert!(UplinkScenario::from_gains(RMat::from_element(2, 2, -1.0), 1.0, 1.0).is_err());
    }

    #[test]
    fn single_user_uses_full_power() {
        let sc =
            UplinkScenario::<f64>::from_gains(RMat::from_element(1, 1, 0.8), 2.0, 0.1).unwrap();
        let a = wmmse(&sc, 50, 1e-12).unwrap();
        assert!((a.rho[0] - 2.0).abs() < 1e-12);
        assert_eq!(equal_power(&sc), a);
    }

    #[test]
    fn strong_interference_switches_a_user_off() {
        let gains = RMat::<f64>::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 0.95]);
        let sc = UplinkScenario::from_gains(gains, 1.0, 0.01).unwrap();
        let a = wmmse(&sc, 2000, 1e-12).unwrap();
        let mut best = f64::MIN;
        for i in 0..=200 {
            for j in 0..=200 {
                best = best.max(sc.sum_rate(&[i as f64 / 200.0, j as f64 / 200.0]));
            }
        }
        assert!(a.rho.iter().any(|r| *r < 1e-3), "{:?}", a.rho);
        assert!(a.sum_rate >= best - 1e-3, "{} vs {best}", a.sum_rate);
    }

    #[test]
    fn wmmse_escapes_full_power_stationary_point() {
        // Full power satisfies the box KKT conditions here, but switching
        // user 0 off is better.
        let gains = RMat::<f64>::from_column_slice(2, 2, &[0.5535, 0.7568, 0.2591, 1.2163]);
        let sc = UplinkScenario::from_gains(gains, 1.0, 0.023).unwrap();
        let plain = wmmse_from(&sc, &[1.0, 1.0], 2000, 1e-12)
            .unwrap()
            .allocation;
        let best = wmmse(&sc, 2000, 1e-12).unwrap();
        assert_eq!(plain.rho, vec![1.0, 1.0]);
        assert!(
            best.rho[0] < 1e-9 && best.sum_rate > plain.sum_rate + 1.0,
            "{best:?}"
        );
    }

    #[test]
    fn interference_free_equal_power_is_optimal() {
        let gains = RMat::<f64>::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 2.0]));
        let sc = UplinkScenario::from_gains(gains, 1.0, 0.1).unwrap();
        let a = wmmse(&sc, 500, 1e-14).unwrap();
        assert!((a.sum_rate - equal_power(&sc).sum_rate).abs() < 1e-6);
    }

    #[test]
    fn wmmse_is_monotone_and_beats_equal_power() {
        for seed in 0..20 {
            let sc = scenario_with(8, 6, 100 + seed, 10.0, CombinerRule::MatchedFilter);
            let run = wmmse_from(&sc, &[1.0; 6], 200, 1e-9).unwrap();
            for w in run.rates.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", run.rates);
            }
            assert!(run.allocation.sum_rate >= equal_power(&sc).sum_rate - 1e-9);
        }
    }

    fn small_shape() -> GnnShape {
        GnnShape {
            width: 4,
            rounds: 2,
        }
    }

    #[test]
    fn identity_network_reproduces_wmmse() {
        let sc = scenario(8, 5, 3, 10.0);
        let params = AoNetParams::<f64>::identity(
            6,
            GnnShape {
                width: 32,
                rounds: 2,
            },
            7,
        );
        let q0 = vec![1.0; 5];
        let out = aonet_forward(&sc, &params, &q0).unwrap();
        let run = wmmse_from(&sc, &q0, 6, 0.0).unwrap();
        for (a, b) in out.layers.iter().zip(&run.iterates) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_start_is_well_defined() {
        let sc = scenario(6, 3, 4, 10.0);
        let params = AoNetParams::<f64>::identity(3, small_shape(), 1);
        let out = aonet_forward(&sc, &params, &[0.0; 3]).unwrap();
        assert!(out.allocation.q.iter().all(|v| v.is_finite()));
        assert!(!out.flagged);
    }

    fn perturbed(params: &AoNetParams<f64>, seed: u64, amount: f64) -> AoNetParams<f64> {
        let mut p = params.clone();
        let mut rng = realization_rng(seed, 99);
        for w in &mut p.weights {
            *w += amount * (rng.random::<f64>() - 0.5);
        }
        p
    }

    #[test]
    fn permutation_equivariance() {
        let sc = scenario(8, 5, 5, 10.0);
        let params = perturbed(&AoNetParams::identity(3, small_shape(), 2), 3, 0.4);
        let perm = [3, 0, 4, 1, 2];
        let q0 = vec![1.0; 5];
        let base = aonet_forward(&sc, &params, &q0).unwrap();
        let moved = aonet_forward(&sc.permuted(&perm), &params, &q0).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((moved.allocation.q[i] - base.allocation.q[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let sc = scenario(8, 4, 6, 10.0);
        let params = perturbed(&AoNetParams::identity(3, small_shape(), 4), 5, 0.3);
        let q0 = vec![1.0; 4];
        let (loss, _) = aonet_loss_and_grad(&sc, &params, &q0, LayerWeighting::LogPlusOne).unwrap();
        let out = aonet_forward(&sc, &params, &q0).unwrap();
        let want: f64 = out
            .layers
            .iter()
            .enumerate()
            .map(|(l, q)| {
                -((l + 2) as f64).ln() * sc.sum_rate(&q.iter().map(|v| v * v).collect::<Vec<_>>())
            })
            .sum();
        assert!((loss - want).abs() < 1e-10 * want.abs());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sc = scenario(6, 3, 7, 0.0);
        let params = perturbed(
            &AoNetParams::identity(
                3,
                GnnShape {
                    width: 3,
                    rounds: 2,
                },
                8,
            ),
            9,
            0.3,
        );
        let q0 = vec![0.4; 3];
        let vg = |w: &[f64]| {
            let p = AoNetParams {
                weights: w.to_vec(),
                ..params.clone()
            };
            aonet_loss_and_grad(&sc, &p, &q0, LayerWeighting::Log).unwrap()
        };
        let err = fd_check_with(&vg, &params.weights, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_improves_rate_and_is_deterministic() {
        let mf = CombinerRule::MatchedFilter;
        let train: Vec<_> = (0..48)
            .map(|i| scenario_with(8, 6, 200 + i, 10.0, mf))
            .collect();
        let held: Vec<_> = (0..24)
            .map(|i| scenario_with(8, 6, 400 + i, 10.0, mf))
            .collect();
        let init = AoNetParams::identity(
            2,
            GnnShape {
                width: 8,
                rounds: 2,
            },
            11,
        );
        let cfg = AoTrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
            weighting: LayerWeighting::LogPlusOne,
            ..Default::default()
        };
        let (p, rep) = aonet_train(&train, init.clone(), &cfg).unwrap();
        assert!(rep.epoch_loss.last() < rep.epoch_loss.first());
        let (p2, _) = aonet_train(&train, init.clone(), &cfg).unwrap();
        assert_eq!(p, p2);
        let rate = |params: &AoNetParams<f64>| {
            let r: Vec<_> = held
                .iter()
                .map(|s| aonet_forward(s, params, &[1.0; 6]).unwrap().allocation)
                .collect();
            mean_rate(&r)
        };
        assert!(rate(&p) > rate(&init), "{} vs {}", rate(&p), rate(&init));
    }

    proptest! {
        #[test]
        fn saturation_is_idempotent(x in -10.0f64..10.0, p in 0.01f64..4.0) {
            let y = saturate(x, p);
            prop_assert!(y >= 0.0 && y <= p.sqrt());
            prop_assert_eq!(saturate(y, p), y);
        }

        #[test]
        fn allocations_are_feasible(seed in 0u64..40) {
            let sc = scenario(6, 4, 1000 + seed, 10.0);
            let p = perturbed(&AoNetParams::identity(2, small_shape(), seed), seed, 2.0);
            for a in [wmmse(&sc, 30, 1e-9).unwrap(), equal_power(&sc), aonet_forward(&sc, &p, &[1.0; 4]).unwrap().allocation] {
                prop_assert!(a.rho.iter().all(|r| *r >= 0.0 && *r <= sc.p_max + 1e-12));
            }
        }
    }
}
