//! Deep-unfolded projected gradient descent for hybrid precoding.
//!
//! The analog factor `F_A` (`M×N_RF`) is handled in the real vectorisation
//! `n = [Re vec F_A; Im vec F_A]`. With `F_D` fixed, the fitting error
//! `‖F_opt − F_A F_D‖²` equals `‖m − D n‖²`, whose gradient is `2(D̄n − m̄)`.
//! Every layer applies `D̄ = DᵀD` through its matrix form
//! `V⁻¹(v) ↦ V⁻¹(v)·F_D F_Dᴴ`, so a layer costs `M·N_RF²` complex
//! multiplies instead of a dense `(2MN_RF)²` product.

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::quadratic_power;
use crate::numerics::{
    frobenius, matmul, pinv_default, rank, realization_rng, Adam, CMat, RMat, PINV_DEFAULT_TOL,
};
use crate::Real;

/// `V(F) = [Re vec F; Im vec F]` with column-major `vec`.
pub fn to_real<T: Real>(f: &CMat<T>) -> Vec<T> {
    let mut out: Vec<T> = f.iter().map(|z| z.re).collect();
    out.extend(f.iter().map(|z| z.im));
    out
}

/// Inverse of [`to_real`].
pub fn from_real<T: Real>(n: &[T], rows: usize, cols: usize) -> CMat<T> {
    let len = rows * cols;
    assert_eq!(
        n.len(),
        2 * len,
        "vector length does not match {rows}x{cols}"
    );
    DMatrix::from_iterator(rows, cols, (0..len).map(|i| Complex::new(n[i], n[len + i])))
}

/// Dense real vectorisation of one fitting problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RealVectorization<T: Real> {
    pub n: Vec<T>,
    pub m: Vec<T>,
    pub d: RMat<T>,
    pub dbar: RMat<T>,
    pub mbar: Vec<T>,
}

/// Builds `n`, `m`, `D = real form of (F_Dᵀ ⊗ I_M)`, `D̄ = DᵀD` and `m̄ = Dᵀm`.
pub fn vectorize<T: Real>(
    f_a: &CMat<T>,
    f_opt: &CMat<T>,
    f_d: &CMat<T>,
) -> Result<RealVectorization<T>> {
    let (m_ant, n_rf) = f_a.shape();
    let k = f_opt.ncols();
    if f_opt.nrows() != m_ant || f_d.shape() != (n_rf, k) {
        return Err(Error::InvalidDimension(format!(
            "F_A {m_ant}x{n_rf}, F_D {}x{}, F_opt {}x{}",
            f_d.nrows(),
            f_d.ncols(),
            f_opt.nrows(),
            f_opt.ncols()
        )));
    }
    let (rk, cn) = (m_ant * k, m_ant * n_rf);
    let mut d = RMat::<T>::zeros(2 * rk, 2 * cn);
    for kk in 0..k {
        for b in 0..n_rf {
            let w = f_d[(b, kk)];
            for a in 0..m_ant {
                let (r, c) = (a + m_ant * kk, a + m_ant * b);
                d[(r, c)] = w.re;
                d[(r, cn + c)] = -w.im;
                d[(rk + r, c)] = w.im;
                d[(rk + r, cn + c)] = w.re;
            }
        }
    }
    let m = to_real(f_opt);
    let mv = nalgebra::DVector::from_column_slice(&m);
    let mbar = (d.transpose() * mv).as_slice().to_vec();
    Ok(RealVectorization {
        n: to_real(f_a),
        m,
        dbar: d.transpose() * &d,
        d,
        mbar,
    })
}

impl<T: Real> RealVectorization<T> {
    /// `‖m − D n‖²` for an arbitrary `n`.
    pub fn residual(&self, n: &[T]) -> T {
        let nv = nalgebra::DVector::from_column_slice(n);
        let r = nalgebra::DVector::from_column_slice(&self.m) - &self.d * nv;
        r.norm_squared()
    }
}

/// Structured `D̄`/`m̄` for one outer iteration: `F_D F_Dᴴ`, `V(F_opt F_Dᴴ)`
/// and `‖F_opt‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOperator<T: Real> {
    rows: usize,
    cols: usize,
    gram: CMat<T>,
    mbar: Vec<T>,
    m_norm2: T,
}

impl<T: Real> LayerOperator<T> {
    pub fn new(f_opt: &CMat<T>, f_d: &CMat<T>) -> Result<Self> {
        if f_d.ncols() != f_opt.ncols() {
            return Err(Error::InvalidDimension(
                "F_D and F_opt disagree on the user count".into(),
            ));
        }
        let f_d_adj = f_d.adjoint();
        Ok(Self {
            rows: f_opt.nrows(),
            cols: f_d.nrows(),
            gram: f_d * &f_d_adj,
            mbar: to_real(&(f_opt * f_d_adj)),
            m_norm2: frobenius(f_opt).powi(2),
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.rows * self.cols
    }

    pub fn mbar(&self) -> &[T] {
        &self.mbar
    }

    /// `D̄ v`, counted as `M·N_RF²` complex multiplies.
    pub fn apply_dbar(&self, v: &[T]) -> Vec<T> {
        to_real(&matmul(&from_real(v, self.rows, self.cols), &self.gram))
    }

    /// `x = D̄ n − m̄` and the residual `‖m − D n‖² = nᵀD̄n − 2nᵀm̄ + ‖m‖²`.
    pub fn gradient_input(&self, n: &[T]) -> (Vec<T>, T) {
        let dn = self.apply_dbar(n);
        let quad = dot(n, &dn);
        let lin = dot(n, &self.mbar);
        let x: Vec<T> = dn.iter().zip(&self.mbar).map(|(&a, &b)| a - b).collect();
        let r = quad - lin - lin + self.m_norm2;
        (x, r.max(T::zero()))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// `ψ(t, x) = −1 + (ReLU(x + t) − ReLU(x − t))/|t|`.
pub fn activation<T: Real>(t: T, x: T) -> Result<T> {
    if t == T::zero() {
        return Err(Error::InvalidHyperparameter(
            "activation width t must be nonzero".into(),
        ));
    }
    Ok(psi(t, x))
}

fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

fn psi<T: Real>(t: T, x: T) -> T {
    (-T::one() + (relu(x + t) - relu(x - t)) / t.abs()).clamp(-T::one(), T::one())
}

fn psi_slope<T: Real>(t: T, x: T) -> T {
    let step = |v: T| if v > T::zero() { T::one() } else { T::zero() };
    (step(x + t) - step(x - t)) / t.abs()
}

/// One unfolded layer: `ψ(t, θ1⊙n + θ2⊙(D̄n − m̄))`.
pub fn layer_forward<T: Real>(
    n_prev: &[T],
    op: &LayerOperator<T>,
    theta1: &[T],
    theta2: &[T],
    t: T,
) -> Vec<T> {
    let (x, _) = op.gradient_input(n_prev);
    n_prev
        .iter()
        .zip(&x)
        .zip(theta1.iter().zip(theta2))
        .map(|((&n, &xi), (&a, &b))| psi(t, a * n + b * xi))
        .collect()
}

/// Per-layer loss weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeighting {
    /// `log(ℓ)`: the first layer does not contribute.
    #[default]
    Log,
    /// `log(ℓ + 1)`.
    LogPlusOne,
}

impl LayerWeighting {
    pub fn weight<T: Real>(self, layer: usize) -> T {
        match self {
            LayerWeighting::Log => T::lit(layer as f64).ln(),
            LayerWeighting::LogPlusOne => T::lit(layer as f64 + 1.0).ln(),
        }
    }
}

/// `Σ_ℓ w(ℓ)·r_ℓ` over per-layer residuals `r_1..r_L`.
pub fn net_loss<T: Real>(residuals: &[T], weighting: LayerWeighting) -> T {
    residuals
        .iter()
        .enumerate()
        .fold(T::zero(), |s, (i, &r)| s + weighting.weight::<T>(i + 1) * r)
}

/// Learnable per-layer elementwise weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdNetParams<T: Real> {
    pub layers: usize,
    pub t: T,
    pub theta1: Vec<Vec<T>>,
    pub theta2: Vec<Vec<T>>,
}

impl<T: Real> PgdNetParams<T> {
    /// Weights reproducing projected gradient descent with step `mu`:
    /// `θ1 = 1`, `θ2 = −2μ`.
    pub fn vanilla(layers: usize, dim: usize, mu: T, t: T) -> Self {
        Self {
            layers,
            t,
            theta1: vec![vec![T::one(); dim]; layers],
            theta2: vec![vec![-(mu + mu); dim]; layers],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta1.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > T::zero()) {
            return Err(Error::InvalidHyperparameter(
                "activation width t must be positive".into(),
            ));
        }
        if self.theta1.len() != self.layers || self.theta2.len() != self.layers {
            return Err(Error::InvalidDimension(
                "weight count does not match layer count".into(),
            ));
        }
        let d = self.dim();
        if self
            .theta1
            .iter()
            .chain(&self.theta2)
            .any(|v| v.len() != d || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::InvalidHyperparameter(
                "weights must be finite and equally sized".into(),
            ));
        }
        Ok(())
    }

    /// `[θ1 of every layer, θ2 of every layer]`.
    pub fn flatten(&self) -> Vec<T> {
        self.theta1
            .iter()
            .chain(&self.theta2)
            .flatten()
            .copied()
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        let d = self.dim();
        for (i, chunk) in flat.chunks(d).enumerate() {
            let dst = if i < self.layers {
                &mut self.theta1[i]
            } else {
                &mut self.theta2[i - self.layers]
            };
            dst.copy_from_slice(chunk);
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `n_0 … n_L`.
    pub states: Vec<Vec<T>>,
    /// `x_0 … x_L`.
    pub grads: Vec<Vec<T>>,
    /// Pre-activations `n̂_1 … n̂_L`.
    pub pre: Vec<Vec<T>>,
    /// `r_1 … r_L`.
    pub residuals: Vec<T>,
}

/// Runs all layers from `n0`.
pub fn forward<T: Real>(
    params: &PgdNetParams<T>,
    op: &LayerOperator<T>,
    n0: &[T],
) -> ForwardTrace<T> {
    let mut states = vec![n0.to_vec()];
    let (x0, _) = op.gradient_input(n0);
    let mut grads = vec![x0];
    let mut pre = Vec::with_capacity(params.layers);
    let mut residuals = Vec::with_capacity(params.layers);
    for l in 0..params.layers {
        let (n, x) = (&states[l], &grads[l]);
        let hat: Vec<T> = (0..n.len())
            .map(|i| params.theta1[l][i] * n[i] + params.theta2[l][i] * x[i])
            .collect();
        let next: Vec<T> = hat.iter().map(|&h| psi(params.t, h)).collect();
        let (xn, r) = op.gradient_input(&next);
        pre.push(hat);
        states.push(next);
        grads.push(xn);
        residuals.push(r);
    }
    ForwardTrace {
        states,
        grads,
        pre,
        residuals,
    }
}

/// Weighted loss and its gradient with respect to `[θ1…, θ2…]`.
pub fn loss_and_grad<T: Real>(
    params: &PgdNetParams<T>,
    op: &LayerOperator<T>,
    n0: &[T],
    weighting: LayerWeighting,
) -> (T, Vec<T>, ForwardTrace<T>) {
    let tr = forward(params, op, n0);
    let loss = net_loss(&tr.residuals, weighting);
    let (layers, d) = (params.layers, params.dim());
    let mut grad = vec![T::zero(); 2 * layers * d];
    let mut g = vec![T::zero(); d];
    let two = T::lit(2.0);
    for l in (1..=layers).rev() {
        let w = weighting.weight::<T>(l) * two;
        for (gi, &xi) in g.iter_mut().zip(&tr.grads[l]) {
            *gi += w * xi;
        }
        let hat_g: Vec<T> = g
            .iter()
            .zip(&tr.pre[l - 1])
            .map(|(&gi, &h)| gi * psi_slope(params.t, h))
            .collect();
        let (n_prev, x_prev) = (&tr.states[l - 1], &tr.grads[l - 1]);
        let off1 = (l - 1) * d;
        let off2 = (layers + l - 1) * d;
        for i in 0..d {
            grad[off1 + i] = hat_g[i] * n_prev[i];
            grad[off2 + i] = hat_g[i] * x_prev[i];
        }
        if l > 1 {
            let scaled: Vec<T> = hat_g
                .iter()
                .zip(&params.theta2[l - 1])
                .map(|(&a, &b)| a * b)
                .collect();
            let back = op.apply_dbar(&scaled);
            g = (0..d)
                .map(|i| params.theta1[l - 1][i] * hat_g[i] + back[i])
                .collect();
        }
    }
    (loss, grad, tr)
}

/// `F_opt·sqrt(MK)/‖F_opt‖` and the factor used.
pub fn normalize_target<T: Real>(f_opt: &CMat<T>) -> Result<(CMat<T>, T)> {
    let norm = frobenius(f_opt);
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::InvalidDimension(
            "F_opt must be nonzero and finite".into(),
        ));
    }
    let s = T::lit((f_opt.len()) as f64).sqrt() / norm;
    Ok((f_opt * Complex::new(s, T::zero()), s))
}

/// Uniform random phases.
pub fn random_phases<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let p = T::lit(rng.random::<f64>() * std::f64::consts::TAU);
        Complex::new(p.cos(), p.sin())
    })
}

/// Entrywise nearest unit-modulus matrix; zero entries map to 1.
pub fn project_unit_modulus<T: Real>(f: &CMat<T>) -> CMat<T> {
    f.map(|z| {
        let r = z.norm_sqr().sqrt();
        if r > T::zero() {
            z / r
        } else {
            Complex::new(T::one(), T::zero())
        }
    })
}

/// `F_D = F_A† F_opt`; a rank-deficient `F_A` is phase-perturbed by 1e−6 once.
pub fn least_squares_digital<T: Real>(f_a: &CMat<T>, f_opt: &CMat<T>) -> Result<CMat<T>> {
    let full =
        |a: &CMat<T>| rank(a, T::lit(PINV_DEFAULT_TOL).max(T::eps() * T::lit(100.0))) == a.ncols();
    if full(f_a) {
        return Ok(pinv_default(f_a)? * f_opt);
    }
    let mut rng = realization_rng(0x5eed, f_a.len() as u64);
    let nudged = f_a.map(|z| {
        let p = T::lit(1e-6 * (rng.random::<f64>() - 0.5));
        z * Complex::new(p.cos(), p.sin())
    });
    if full(&nudged) {
        return Ok(pinv_default(&nudged)? * f_opt);
    }
    Err(Error::RankDeficient("analog precoder"))
}

/// Hybrid precoder with its fitting history.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridBeamformer<T: Real> {
    pub f_a: CMat<T>,
    pub f_d: CMat<T>,
    /// `‖F_opt − F_A F_D‖_F` after projection and the final LS fit, before
    /// power scaling.
    pub residual: T,
    /// `‖F_opt − F_A F_D‖_F` after each outer iteration (box-valued `F_A`).
    pub history: Vec<T>,
}

impl<T: Real> HybridBeamformer<T> {
    pub fn precoder(&self) -> CMat<T> {
        &self.f_a * &self.f_d
    }
}

/// Online settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig<T> {
    pub outer_iters: usize,
    /// Relative change of the residual below which iterations stop early.
    pub tol: T,
    pub p_max: T,
    pub sigma_x2: T,
}

impl<T: Real> Default for InferConfig<T> {
    fn default() -> Self {
        Self {
            outer_iters: 10,
            tol: T::lit(1e-6),
            p_max: T::one(),
            sigma_x2: T::one(),
        }
    }
}

/// Alternates the unfolded layers (on `F_A`) with LS updates of `F_D`,
/// projects `F_A` onto unit modulus and scales `F_D` so the transmit power
/// on `z_tt` equals `p_max`.
pub fn infer<T: Real>(
    f_opt: &CMat<T>,
    params: &PgdNetParams<T>,
    z_tt: &CMat<T>,
    cfg: &InferConfig<T>,
    f_a0: &CMat<T>,
) -> Result<HybridBeamformer<T>> {
    params.validate()?;
    if cfg.outer_iters == 0 {
        return Err(Error::InvalidHyperparameter(
            "at least one outer iteration is required".into(),
        ));
    }
    if params.dim() != 2 * f_a0.len() || f_a0.nrows() != f_opt.nrows() {
        return Err(Error::InvalidDimension(
            "weights do not match M·N_RF".into(),
        ));
    }
    let (target, s) = normalize_target(f_opt)?;
    let (rows, cols) = f_a0.shape();
    let mut f_a = f_a0.clone();
    let mut f_d = least_squares_digital(&f_a, &target)?;
    let unscale = T::one() / s;
    let fit = |a: &CMat<T>, d: &CMat<T>| frobenius(&(&target - a * d)) * unscale;
    let mut history = vec![fit(&f_a, &f_d)];
    for _ in 0..cfg.outer_iters {
        let op = LayerOperator::new(&target, &f_d)?;
        let tr = forward(params, &op, &to_real(&f_a));
        f_a = from_real(tr.states.last().unwrap(), rows, cols);
        f_d = least_squares_digital(&f_a, &target)?;
        let r = fit(&f_a, &f_d);
        let prev = *history.last().unwrap();
        history.push(r);
        if (prev - r).abs() <= cfg.tol * prev.max(T::eps()) {
            break;
        }
    }
    let f_a = project_unit_modulus(&f_a);
    let f_d = least_squares_digital(&f_a, &target)?;
    let residual = fit(&f_a, &f_d);
    let p = quadratic_power(&(&f_a * &f_d), z_tt, cfg.sigma_x2)?;
    if !(p > T::zero()) {
        return Err(Error::RankDeficient("hybrid precoder carries no power"));
    }
    let f_d = f_d * Complex::new((cfg.p_max / p).sqrt(), T::zero());
    Ok(HybridBeamformer {
        f_a,
        f_d,
        residual,
        history,
    })
}

/// Offline training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight updates per batch (`I_train`).
    pub iters: usize,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub weighting: LayerWeighting,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            iters: 1,
            lr: T::lit(0.01),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            weighting: LayerWeighting::Log,
            seed: 0,
        }
    }
}

/// Loss history of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport<T> {
    /// Mean per-sample loss of every epoch.
    pub epoch_loss: Vec<T>,
    /// Mean per-sample loss of every optimizer step.
    pub step_loss: Vec<T>,
    /// Batches restarted at a halved rate after a non-finite loss.
    pub restarts: usize,
}

struct SampleState<T: Real> {
    target: CMat<T>,
    f_a: CMat<T>,
    f_d: CMat<T>,
}

/// Trains the layer weights on a set of fully-digital targets `F_opt`.
///
/// Each epoch shuffles the set, and every batch starts from random
/// analog phases with LS digital weights. Gradients are averaged over the
/// batch in index order so the result does not depend on thread count.
pub fn train<T: Real>(
    targets: &[CMat<T>],
    n_rf: usize,
    init: PgdNetParams<T>,
    cfg: &TrainConfig<T>,
) -> Result<(PgdNetParams<T>, TrainReport<T>)> {
    init.validate()?;
    if targets.is_empty() || cfg.batch_size == 0 || cfg.iters == 0 {
        return Err(Error::InvalidHyperparameter(
            "training needs data, a batch size and iterations".into(),
        ));
    }
    let m_ant = targets[0].nrows();
    if init.dim() != 2 * m_ant * n_rf {
        return Err(Error::InvalidDimension(
            "weights do not match M·N_RF".into(),
        ));
    }
    let scaled: Vec<CMat<T>> = targets
        .iter()
        .map(|f| normalize_target(f).map(|p| p.0))
        .collect::<Result<_>>()?;
    let mut params = init;
    let mut flat = params.flatten();
    let mut opt = Adam::new(flat.len(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut realization_rng(cfg.seed, epoch as u64));
        let mut epoch_sum = T::zero();
        let mut epoch_count = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let stream = ((epoch as u64) << 32) | b as u64;
            let init_states = |params: &PgdNetParams<T>| -> Result<Vec<SampleState<T>>> {
                let _ = params;
                batch
                    .iter()
                    .enumerate()
                    .map(|(j, &idx)| {
                        let mut rng = realization_rng(
                            cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
                            stream * 4096 + j as u64,
                        );
                        let target = scaled[idx].clone();
                        let f_a = random_phases(m_ant, n_rf, &mut rng);
                        let f_d = least_squares_digital(&f_a, &target)?;
                        Ok(SampleState { target, f_a, f_d })
                    })
                    .collect()
            };
            let mut attempt = 0;
            loop {
                let saved_flat = flat.clone();
                let saved_opt = opt.clone();
                let mut states = init_states(&params)?;
                let mut ok = true;
                let mut batch_losses = Vec::with_capacity(cfg.iters);
                for _ in 0..cfg.iters {
                    let results: Vec<Result<(T, Vec<T>, Vec<T>)>> = states
                        .par_iter()
                        .map(|s| {
                            let op = LayerOperator::new(&s.target, &s.f_d)?;
                            let (loss, grad, tr) =
                                loss_and_grad(&params, &op, &to_real(&s.f_a), cfg.weighting);
                            Ok((loss, grad, tr.states.last().unwrap().clone()))
                        })
                        .collect();
                    let results: Vec<(T, Vec<T>, Vec<T>)> =
                        results.into_iter().collect::<Result<_>>()?;
                    let inv = T::one() / T::lit(states.len() as f64);
                    let mut mean_grad = vec![T::zero(); flat.len()];
                    let mut loss = T::zero();
                    for (l, g, _) in &results {
                        loss += *l;
                        for (a, &v) in mean_grad.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    loss *= inv;
                    mean_grad.iter_mut().for_each(|v| *v *= inv);
                    if !loss.is_finite() || mean_grad.iter().any(|v| !v.is_finite()) {
                        ok = false;
                        break;
                    }
                    opt.step(&mut flat, &mean_grad);
                    params.unflatten(&flat);
                    batch_losses.push(loss);
                    for (s, (_, _, n_last)) in states.iter_mut().zip(results) {
                        s.f_a = from_real(&n_last, m_ant, n_rf);
                        s.f_d = least_squares_digital(&s.f_a, &s.target)?;
                    }
                }
                if ok {
                    for l in batch_losses {
                        report.step_loss.push(l);
                        epoch_sum += l;
                        epoch_count += 1;
                    }
                    break;
                }
                attempt += 1;
                report.restarts += 1;
                if attempt > 5 {
                    return Err(Error::DivergedTraining(format!(
                        "non-finite loss in epoch {epoch}, batch {b}"
                    )));
                }
                flat = saved_flat;
                params.unflatten(&flat);
                opt = saved_opt;
                opt.lr *= T::lit(0.5);
            }
        }
        report
            .epoch_loss
            .push(epoch_sum / T::lit(epoch_count.max(1) as f64));
    }
    Ok((params, report))
}

/// Mean final residual of fixed-step PGD for each candidate step.
pub fn line_search_step<T: Real>(
    targets: &[CMat<T>],
    starts: &[CMat<T>],
    z_tt: &CMat<T>,
    layers: usize,
    t: T,
    steps: &[T],
    cfg: &InferConfig<T>,
) -> Result<Vec<(T, T)>> {
    let dim = 2 * starts[0].len();
    steps
        .iter()
        .map(|&mu| {
            let params = PgdNetParams::vanilla(layers, dim, mu, t);
            let total = mean_residual(targets, starts, z_tt, &params, cfg)?;
            Ok((mu, total))
        })
        .collect()
}

/// Mean of [`HybridBeamformer::residual`] over a set of targets.
pub fn mean_residual<T: Real>(
    targets: &[CMat<T>],
    starts: &[CMat<T>],
    z_tt: &CMat<T>,
    params: &PgdNetParams<T>,
    cfg: &InferConfig<T>,
) -> Result<T> {
    let res: Vec<Result<T>> = targets
        .par_iter()
        .zip(starts.par_iter())
        .map(|(f, a0)| infer(f, params, z_tt, cfg, a0).map(|h| h.residual))
        .collect();
    let mut sum = T::zero();
    for r in res {
        sum += r?;
    }
    Ok(sum / T::lit(targets.len() as f64))
}
