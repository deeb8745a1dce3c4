//! The numerical side of every subcommand, returning plain rows.

use num_complex::Complex;
use rayon::prelude::*;

use super::config::{DesignModel, ExperimentConfig};
use crate::beamforming::{dma_gamma, nag_tune, zf_dma, zf_fd, LinkBudget, NagConfig};
use crate::error::{Error, Result};
use crate::metrics::{energy_efficiency, ComplexityParams, ComplexityReport, PowerModel};
use crate::network::{dma_channel, fd_channel, se, supplied_power, Arch, ImpedanceNetwork};
use crate::numerics::{realization_rng, CMat, Rng64};
use crate::pgd::{self, infer, random_phases, InferConfig, PgdNetParams, TrainConfig, TrainReport};
use crate::power::{
    self, aonet_forward, build_scenario, equal_power, rayleigh_channels, wmmse, AoNetParams,
    AoTrainConfig, AoTrainReport, GnnShape, UplinkScenario,
};
use crate::synthesis::{
    antenna_coupling, coupling_kernels, dma_network, fd_network, ring_users, sample_zrs,
    user_coupling, ArrayGeometry, CouplingParams, SPEED_OF_LIGHT,
};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Reference = 0,
    Channel = 1,
    PgdTrain = 2,
    PgdTest = 3,
    PhasesTrain = 4,
    PhasesTest = 5,
    PowerTrain = 6,
    PowerTest = 7,
}

pub fn stream_rng(seed: u64, stream: Stream, index: usize) -> Rng64 {
    realization_rng(seed, ((stream as u64) << 40) | index as u64)
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.unwrap_or_default()
}

pub fn coupling(cfg: &ExperimentConfig) -> CouplingParams<f64> {
    cfg.coupling.params(cfg.scenario.frequency)
}

/// Array layout with the configured waveguides and `n_mu` elements each.
pub fn geometry(cfg: &ExperimentConfig, n_mu: usize) -> Result<ArrayGeometry<f64>> {
    let s = &cfg.scenario;
    let lambda = SPEED_OF_LIGHT / s.frequency;
    ArrayGeometry::dma(
        s.frequency,
        s.n_rf,
        n_mu,
        s.spacing_wavelengths * lambda,
        s.width_wavelengths * lambda,
        s.height_wavelengths * lambda,
        s.waveguide_length,
    )
}

/// User positions and the user–site block for one realization.
#[derive(Clone, Debug)]
pub struct Draw {
    pub users: Vec<[f64; 3]>,
    pub z_rs: CMat<f64>,
}

pub fn draw(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry<f64>,
    stream: Stream,
    index: usize,
) -> Result<Draw> {
    let s = &cfg.scenario;
    let mut rng = stream_rng(seed(cfg), stream, index);
    let users = ring_users(geom, s.users, s.ring_radius, &mut rng)?;
    let z_rs = sample_zrs(geom, &users, s.paths, s.frequency, s.polarization, &mut rng)?;
    Ok(Draw { users, z_rs })
}

fn untuned_dma(
    geom: &ArrayGeometry<f64>,
    params: &CouplingParams<f64>,
    d: &Draw,
) -> Result<ImpedanceNetwork<f64>> {
    let blocks = coupling_kernels(geom, params)?;
    let z_rr = user_coupling(&d.users, params)?;
    Ok(dma_network(
        &blocks,
        &d.z_rs,
        &z_rr,
        params,
        &vec![0.0; geom.len()],
    ))
}

/// Noise-to-signal ratio that puts the untuned reference DMA at the
/// configured SNR.
pub fn noise_ratio(cfg: &ExperimentConfig) -> Result<f64> {
    let s = &cfg.scenario;
    let geom = geometry(cfg, s.n_mu)?;
    let d = draw(cfg, &geom, Stream::Reference, 0)?;
    let net = untuned_dma(&geom, &coupling(cfg), &d)?;
    let mut link = LinkBudget::new(s.power, s.sigma_x2, 1.0);
    link.insertion_loss = cfg.coupling.insertion_loss;
    Ok(dma_gamma(&net, &link)? / 10f64.powf(s.snr_db / 10.0))
}

fn nag_config(cfg: &ExperimentConfig) -> NagConfig<f64> {
    NagConfig {
        theta: cfg.nag.momentum,
        alpha: cfg.nag.step,
        iters: cfg.nag.iters,
    }
}

/// Result of tuning one DMA.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmaOutcome {
    pub gamma_initial: f64,
    pub gamma_final: f64,
    /// Evaluated on the true network.
    pub se: f64,
    pub halvings: usize,
}

/// Tunes the loads and forms ZF on `model`, then rescales the precoder to
/// the true supplied budget and evaluates SE on the true network.
pub fn design_dma(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry<f64>,
    d: &Draw,
    model: DesignModel,
    noise_ratio: f64,
) -> Result<DmaOutcome> {
    let s = &cfg.scenario;
    let truth = coupling(cfg);
    let design = match model {
        DesignModel::Full | DesignModel::WithoutLoss => truth.clone(),
        DesignModel::WithoutAir => truth.without_air(),
        DesignModel::WithoutCoupling => truth.uncoupled(),
    };
    let true_loss = cfg.coupling.insertion_loss;
    let mut link = LinkBudget::new(s.power, s.sigma_x2, noise_ratio);
    link.insertion_loss = true_loss && model != DesignModel::WithoutLoss;
    let out = nag_tune(&untuned_dma(geom, &design, d)?, &nag_config(cfg), &link)?;
    let mut ch = dma_channel(&out.net)?;
    if !link.insertion_loss {
        ch.zq = ch.zp.clone();
    }
    let zf = zf_dma(&ch, s.power, s.sigma_x2)?;
    let tau = out.net.tuning();
    let real = if design == truth {
        out.net.clone()
    } else {
        untuned_dma(geom, &truth, d)?.with_tuning(&tau)
    };
    let tch = dma_channel(&real)?;
    let zq = if true_loss { &tch.zq } else { &tch.zp };
    let ps = supplied_power(&zf.f, zq, s.sigma_x2)?;
    if !(ps > 0.0) {
        return Err(Error::RankDeficient(
            "precoder supplies no power to the true network",
        ));
    }
    let f = zf.f * Complex::new((s.power / ps).sqrt(), 0.0);
    Ok(DmaOutcome {
        gamma_initial: out.gamma_initial,
        gamma_final: out.gamma_final,
        se: se(&tch.h, &f, noise_ratio)?,
        halvings: out.halvings,
    })
}

/// One `synth-channel` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRow {
    pub realization: usize,
    pub network: ImpedanceNetwork<f64>,
    pub users: Vec<[f64; 3]>,
    pub gamma_untuned: f64,
}

pub fn synth_channels(cfg: &ExperimentConfig) -> Result<Vec<SynthRow>> {
    let geom = geometry(cfg, cfg.scenario.n_mu)?;
    let nr = noise_ratio(cfg)?;
    let params = coupling(cfg);
    (0..cfg.realizations)
        .into_par_iter()
        .map(|r| {
            let d = draw(cfg, &geom, Stream::Channel, r)?;
            let network = untuned_dma(&geom, &params, &d)?;
            let mut link = LinkBudget::new(cfg.scenario.power, cfg.scenario.sigma_x2, nr);
            link.insertion_loss = cfg.coupling.insertion_loss;
            let gamma_untuned = dma_gamma(&network, &link)?;
            Ok(SynthRow {
                realization: r,
                network,
                users: d.users,
                gamma_untuned,
            })
        })
        .collect()
}

/// `tune-dma`: one outcome per realization on the configured model.
pub fn tune_dma(cfg: &ExperimentConfig) -> Result<Vec<DmaOutcome>> {
    let geom = geometry(cfg, cfg.scenario.n_mu)?;
    let nr = noise_ratio(cfg)?;
    (0..cfg.realizations)
        .into_par_iter()
        .map(|r| {
            design_dma(
                cfg,
                &geom,
                &draw(cfg, &geom, Stream::Channel, r)?,
                DesignModel::Full,
                nr,
            )
        })
        .collect()
}

/// One sweep point for one realization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub model: DesignModel,
    pub n_mu: usize,
    pub realization: usize,
    pub se: f64,
}

/// SE against elements per waveguide. Users and paths are shared across
/// element counts within a realization.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let nr = noise_ratio(cfg)?;
    let points: Vec<(usize, usize)> = cfg
        .sweep
        .n_mu
        .iter()
        .flat_map(|&n| (0..cfg.realizations).map(move |r| (n, r)))
        .collect();
    let per_point: Vec<Result<Vec<SweepRow>>> = points
        .par_iter()
        .map(|&(n_mu, r)| {
            let geom = geometry(cfg, n_mu)?;
            let d = draw(cfg, &geom, Stream::Channel, r)?;
            cfg.sweep
                .variants
                .iter()
                .map(|&model| {
                    let o = design_dma(cfg, &geom, &d, model, nr)?;
                    Ok(SweepRow {
                        model,
                        n_mu,
                        realization: r,
                        se: o.se,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(points.len() * cfg.sweep.variants.len());
    for p in per_point {
        rows.extend(p?);
    }
    rows.sort_by_key(|r| {
        (
            cfg.sweep.variants.iter().position(|v| *v == r.model),
            r.n_mu,
            r.realization,
        )
    });
    Ok(rows)
}

/// Mean SE per `(model, n_mu)` in sweep order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(DesignModel, usize, f64)> {
    let mut out: Vec<(DesignModel, usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.0 == r.model && o.1 == r.n_mu) {
            Some(o) => {
                o.2 += r.se;
                o.3 += 1;
            }
            None => out.push((r.model, r.n_mu, r.se, 1)),
        }
    }
    out.into_iter()
        .map(|(m, n, s, c)| (m, n, s / c as f64))
        .collect()
}

/// A fully-digital channel on the element sites with its ZF precoder.
#[derive(Clone, Debug)]
pub struct FdSample {
    pub h: CMat<f64>,
    pub z_tt: CMat<f64>,
    pub f_opt: CMat<f64>,
}

fn fd_sample(
    cfg: &ExperimentConfig,
    z_tt: &CMat<f64>,
    params: &CouplingParams<f64>,
    d: &Draw,
) -> Result<FdSample> {
    let z_rr = user_coupling(&d.users, params)?;
    let ch = fd_channel(&fd_network(z_tt, &d.z_rs, &z_rr, params))?;
    let zf = zf_fd(&ch.h, &ch.zp, cfg.scenario.power, cfg.scenario.sigma_x2)?;
    Ok(FdSample {
        h: ch.h,
        z_tt: ch.zp,
        f_opt: zf.f,
    })
}

fn fd_samples(cfg: &ExperimentConfig, stream: Stream, count: usize) -> Result<Vec<FdSample>> {
    let geom = geometry(cfg, cfg.scenario.n_mu)?;
    let params = coupling(cfg);
    let z_tt = antenna_coupling(&geom, &params)?;
    (0..count)
        .into_par_iter()
        .map(|i| fd_sample(cfg, &z_tt, &params, &draw(cfg, &geom, stream, i)?))
        .collect()
}

fn phase_starts(cfg: &ExperimentConfig, stream: Stream, count: usize) -> Vec<CMat<f64>> {
    let (m, n) = (cfg.scenario.n_rf * cfg.scenario.n_mu, cfg.scenario.n_rf);
    (0..count)
        .map(|i| random_phases(m, n, &mut stream_rng(seed(cfg), stream, i)))
        .collect()
}

fn infer_config(cfg: &ExperimentConfig) -> InferConfig<f64> {
    InferConfig {
        outer_iters: cfg.pgd.outer_iters,
        p_max: cfg.scenario.power,
        sigma_x2: cfg.scenario.sigma_x2,
        ..InferConfig::default()
    }
}

/// Trained weights with the data behind them.
#[derive(Clone, Debug)]
pub struct PgdTraining {
    pub params: PgdNetParams<f64>,
    pub report: TrainReport<f64>,
    /// `(step, mean residual)` on the first training channels.
    pub line_search: Vec<(f64, f64)>,
}

fn best_step(search: &[(f64, f64)]) -> (f64, f64) {
    search.iter().copied().fold(
        (f64::NAN, f64::INFINITY),
        |b, s| if s.1 < b.1 { s } else { b },
    )
}

/// Trains PGD-Net starting from the best fixed step on a training subset.
pub fn train_pgd(cfg: &ExperimentConfig) -> Result<PgdTraining> {
    let p = &cfg.pgd;
    let data = fd_samples(cfg, Stream::PgdTrain, p.train_channels)?;
    let probe = data.len().min(200);
    let starts = phase_starts(cfg, Stream::PhasesTrain, probe);
    let targets: Vec<CMat<f64>> = data.iter().map(|s| s.f_opt.clone()).collect();
    let line_search = pgd::line_search_step(
        &targets[..probe],
        &starts,
        &data[0].z_tt,
        p.layers,
        p.t,
        &p.baseline_steps,
        &infer_config(cfg),
    )?;
    let (mu, _) = best_step(&line_search);
    let dim = 2 * starts[0].len();
    let init = PgdNetParams::vanilla(p.layers, dim, mu, p.t);
    let tc = TrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        iters: p.train_iters,
        lr: p.lr,
        beta1: p.beta1,
        beta2: p.beta2,
        weighting: p.weighting,
        seed: seed(cfg),
    };
    let (params, report) = pgd::train(&targets, cfg.scenario.n_rf, init, &tc)?;
    Ok(PgdTraining {
        params,
        report,
        line_search,
    })
}

/// One held-out channel under the trained and the best vanilla weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdEvalRow {
    pub realization: usize,
    pub residual_net: f64,
    pub residual_vanilla: f64,
    pub se_fd: f64,
    pub se_hybrid: f64,
}

/// Evaluation with the baseline step line-searched on the held-out set.
pub fn eval_pgd(
    cfg: &ExperimentConfig,
    params: &PgdNetParams<f64>,
) -> Result<(Vec<PgdEvalRow>, Vec<(f64, f64)>)> {
    let p = &cfg.pgd;
    let nr = noise_ratio(cfg)?;
    let data = fd_samples(cfg, Stream::PgdTest, p.test_channels)?;
    let starts = phase_starts(cfg, Stream::PhasesTest, data.len());
    let targets: Vec<CMat<f64>> = data.iter().map(|s| s.f_opt.clone()).collect();
    let ic = infer_config(cfg);
    let search = pgd::line_search_step(
        &targets,
        &starts,
        &data[0].z_tt,
        p.layers,
        p.t,
        &p.baseline_steps,
        &ic,
    )?;
    let vanilla = PgdNetParams::vanilla(p.layers, params.dim(), best_step(&search).0, p.t);
    let rows = data
        .par_iter()
        .zip(starts.par_iter())
        .enumerate()
        .map(|(i, (s, a0))| {
            let net = infer(&s.f_opt, params, &s.z_tt, &ic, a0)?;
            let van = infer(&s.f_opt, &vanilla, &s.z_tt, &ic, a0)?;
            Ok(PgdEvalRow {
                realization: i,
                residual_net: net.residual,
                residual_vanilla: van.residual,
                se_fd: se(&s.h, &s.f_opt, nr)?,
                se_hybrid: se(&s.h, &net.precoder(), nr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, search))
}

/// Uplink scenario for the power-control study.
pub fn power_scenario(
    cfg: &ExperimentConfig,
    stream: Stream,
    index: usize,
) -> Result<UplinkScenario<f64>> {
    let w = &cfg.power;
    let mut rng = stream_rng(seed(cfg), stream, index);
    let h = rayleigh_channels(w.antennas, w.users, &mut rng);
    let z = CMat::<f64>::identity(w.antennas, w.antennas) * Complex::new(2.0, 0.0);
    build_scenario(&h, &z, 1.0, 10f64.powf(-w.snr_db / 10.0), 1.0, w.combiner)
}

fn power_scenarios(
    cfg: &ExperimentConfig,
    stream: Stream,
    count: usize,
) -> Result<Vec<UplinkScenario<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|i| power_scenario(cfg, stream, i))
        .collect()
}

/// Trains one AO-Net per configured depth.
pub fn train_ao(cfg: &ExperimentConfig) -> Result<Vec<(AoNetParams<f64>, AoTrainReport<f64>)>> {
    let w = &cfg.power;
    let data = power_scenarios(cfg, Stream::PowerTrain, w.train_scenarios)?;
    let shape = GnnShape {
        width: w.width,
        rounds: w.rounds,
    };
    let tc = AoTrainConfig {
        epochs: w.epochs,
        batch_size: w.batch_size,
        lr: w.lr,
        weighting: w.weighting,
        seed: seed(cfg),
        ..AoTrainConfig::default()
    };
    w.layers
        .iter()
        .map(|&l| power::aonet_train(&data, AoNetParams::identity(l, shape, seed(cfg)), &tc))
        .collect()
}

/// Sum rates of one test scenario: equal power, WMMSE, then every AO-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerRow {
    pub scenario: usize,
    pub equal: f64,
    pub wmmse: f64,
    pub ao_net: Vec<f64>,
}

pub fn eval_power(cfg: &ExperimentConfig, nets: &[AoNetParams<f64>]) -> Result<Vec<PowerRow>> {
    let w = &cfg.power;
    (0..w.test_scenarios)
        .into_par_iter()
        .map(|i| {
            let sc = power_scenario(cfg, Stream::PowerTest, i)?;
            let q0 = vec![sc.p_max.sqrt(); sc.users()];
            let ao_net = nets
                .iter()
                .map(|p| aonet_forward(&sc, p, &q0).map(|o| o.allocation.sum_rate))
                .collect::<Result<Vec<_>>>()?;
            Ok(PowerRow {
                scenario: i,
                equal: equal_power(&sc).sum_rate,
                wmmse: wmmse(&sc, w.wmmse_iters, w.wmmse_tol)?.sum_rate,
                ao_net,
            })
        })
        .collect()
}

/// Complexity rows over the configured antenna counts plus the scenario's
/// operating point.
pub fn complexity(cfg: &ExperimentConfig) -> ComplexityReport {
    let s = &cfg.scenario;
    let mut ms = cfg.complexity.antennas.clone();
    ms.push(s.antennas);
    let params: Vec<ComplexityParams> = ms
        .iter()
        .map(|&m| {
            ComplexityParams::matched(m, s.n_rf, s.users, cfg.pgd.layers, cfg.pgd.outer_iters)
        })
        .collect();
    ComplexityReport::evaluate(&params)
}

/// Per-realization SE of the three architectures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EeRow {
    pub realization: usize,
    pub se_fd: f64,
    pub se_fc: f64,
    pub se_dma: f64,
}

/// Architecture, mean SE, total power and energy efficiency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EeSummary {
    pub arch: Arch,
    pub se: f64,
    pub total_power: f64,
    pub ee: f64,
}

pub fn power_model(cfg: &ExperimentConfig, arch: Arch) -> PowerModel<f64> {
    let s = &cfg.scenario;
    PowerModel {
        arch,
        radiated: s.power,
        rf_chain: s.rf_chain_power,
        phase_shifter: s.phase_shifter_power,
        antennas: s.n_rf * s.n_mu,
        rf_chains: s.n_rf,
    }
}

/// The FD array, the FC hybrid (PGD-Net) and the DMA see the same users
/// and paths in each realization.
pub fn ee_report(
    cfg: &ExperimentConfig,
    params: &PgdNetParams<f64>,
) -> Result<(Vec<EeRow>, Vec<EeSummary>)> {
    let geom = geometry(cfg, cfg.scenario.n_mu)?;
    let coupling = coupling(cfg);
    let z_tt = antenna_coupling(&geom, &coupling)?;
    let nr = noise_ratio(cfg)?;
    let ic = infer_config(cfg);
    let starts = phase_starts(cfg, Stream::PhasesTest, cfg.realizations);
    let rows = (0..cfg.realizations)
        .into_par_iter()
        .map(|r| {
            let d = draw(cfg, &geom, Stream::Channel, r)?;
            let fd = fd_sample(cfg, &z_tt, &coupling, &d)?;
            let hybrid = infer(&fd.f_opt, params, &fd.z_tt, &ic, &starts[r])?;
            let dma = design_dma(cfg, &geom, &d, DesignModel::Full, nr)?;
            Ok(EeRow {
                realization: r,
                se_fd: se(&fd.h, &fd.f_opt, nr)?,
                se_fc: se(&fd.h, &hybrid.precoder(), nr)?,
                se_dma: dma.se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EeRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = [
        (Arch::Fd, mean(|r| r.se_fd)),
        (Arch::HybridFc, mean(|r| r.se_fc)),
        (Arch::Dma, mean(|r| r.se_dma)),
    ]
    .into_iter()
    .map(|(arch, se)| {
        let pm = power_model(cfg, arch);
        Ok(EeSummary {
            arch,
            se,
            total_power: pm.total()?,
            ee: energy_efficiency(se, &pm)?,
        })
    })
    .collect::<Result<Vec<_>>>()?;
    Ok((rows, summary))
}
