//! Energy efficiency and complexity accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Arch;
use crate::numerics::{count_multiplies, realization_rng, CMat};
use crate::pgd::{layer_forward, LayerOperator};
use crate::Real;

/// Hardware power consumption of one architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel<T> {
    pub arch: Arch,
    /// Transmit power, or supplied power for a DMA (watts).
    pub radiated: T,
    /// Per RF chain (watts).
    pub rf_chain: T,
    /// Per phase shifter (watts).
    pub phase_shifter: T,
    pub antennas: usize,
    pub rf_chains: usize,
}

impl<T: Real> PowerModel<T> {
    /// 1 W budget, 250 mW per RF chain, 10 mW per shifter, 120 antennas fed
    /// by 6 chains.
    pub fn reference(arch: Arch) -> Self {
        Self {
            arch,
            radiated: T::one(),
            rf_chain: T::lit(0.25),
            phase_shifter: T::lit(0.01),
            antennas: 120,
            rf_chains: 6,
        }
    }

    /// Total consumed power in watts.
    pub fn total(&self) -> Result<T> {
        if [self.radiated, self.rf_chain, self.phase_shifter]
            .iter()
            .any(|p| !(*p >= T::zero()))
        {
            return Err(Error::InvalidPowerModel(
                "power terms must be nonnegative".into(),
            ));
        }
        let m = T::lit(self.antennas as f64);
        let n = T::lit(self.rf_chains as f64);
        let total = match self.arch {
            Arch::Fd => self.radiated + m * self.rf_chain,
            Arch::HybridFc => self.radiated + n * self.rf_chain + n * m * self.phase_shifter,
            Arch::HybridSc => self.radiated + n * self.rf_chain + m * self.phase_shifter,
            Arch::Dma => self.radiated + n * self.rf_chain,
        };
        if total > T::zero() {
            Ok(total)
        } else {
            Err(Error::InvalidPowerModel(format!(
                "total power {total} is not positive"
            )))
        }
    }
}

/// Spectral efficiency per consumed watt.
pub fn energy_efficiency<T: Real>(se: T, pm: &PowerModel<T>) -> Result<T> {
    Ok(se / pm.total()?)
}

/// Algorithms with closed-form complexity estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    PgdNet,
    MoAltMin,
    SdrAltMin,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::PgdNet => "pgd_net",
            Algorithm::MoAltMin => "mo_altmin",
            Algorithm::SdrAltMin => "sdr_altmin",
        }
    }
}

/// Sizes and iteration counts entering the complexity formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityParams {
    pub antennas: usize,
    pub rf_chains: usize,
    pub users: usize,
    pub layers: usize,
    /// PGD-Net outer iterations.
    pub outer_iters: usize,
    /// Manifold-optimisation outer and inner iterations.
    pub mo_outer: usize,
    pub mo_inner: usize,
    pub sdr_iters: usize,
}

impl ComplexityParams {
    /// Manifold-optimisation iterations matched to PGD-Net: `(I_net, L)`.
    pub fn matched(
        antennas: usize,
        rf_chains: usize,
        users: usize,
        layers: usize,
        outer_iters: usize,
    ) -> Self {
        Self {
            antennas,
            rf_chains,
            users,
            layers,
            outer_iters,
            mo_outer: outer_iters,
            mo_inner: layers,
            sdr_iters: outer_iters,
        }
    }
}

/// Leading-order multiply counts with unit constants and every additive
/// term kept.
pub fn predicted_complexity(alg: Algorithm, p: &ComplexityParams) -> u128 {
    let (m, n, k) = (p.antennas as u128, p.rf_chains as u128, p.users as u128);
    match alg {
        Algorithm::PgdNet => {
            let i = p.outer_iters as u128;
            i.saturating_sub(1) * m * n * n
                + m * n
                + i * (2 * n * n * k + p.layers as u128 * pgd_layer_term(p))
        }
        Algorithm::MoAltMin => {
            p.mo_outer as u128
                * (m * n * n + p.mo_inner as u128 * (3 * m * n + 2 * (n * n + n) * k))
        }
        Algorithm::SdrAltMin => p.sdr_iters as u128 * (m * k + (k * n).pow(3)),
    }
}

/// Per-layer term `3·M·N_RF + 2·N_RF·K` of the PGD-Net estimate.
pub fn pgd_layer_term(p: &ComplexityParams) -> u128 {
    let (m, n, k) = (p.antennas as u128, p.rf_chains as u128, p.users as u128);
    3 * m * n + 2 * n * k
}

/// Instrumented complex multiplies of one PGD-Net layer at these sizes.
pub fn measured_pgd_layer(p: &ComplexityParams) -> u64 {
    let mut rng = realization_rng(0, 0);
    let random = |r: usize, c: usize, rng: &mut crate::numerics::Rng64| -> CMat<f64> {
        CMat::from_fn(r, c, |_, _| crate::numerics::complex_normal(rng, 1.0))
    };
    let f_opt = random(p.antennas, p.users, &mut rng);
    let f_d = random(p.rf_chains, p.users, &mut rng);
    let n = crate::pgd::to_real(&random(p.antennas, p.rf_chains, &mut rng));
    let op = LayerOperator::new(&f_opt, &f_d).expect("shapes agree by construction");
    let ones = vec![1.0; op.dim()];
    count_multiplies(|| layer_forward(&n, &op, &ones, &ones, 1.0)).1
}

/// One row of a complexity report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub algorithm: Algorithm,
    pub params: ComplexityParams,
    pub predicted: u128,
    /// Instrumented count where one is available.
    pub measured: Option<u64>,
}

/// Predicted counts for every algorithm and the measured PGD-Net layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
}

impl ComplexityReport {
    pub fn evaluate(params: &[ComplexityParams]) -> Self {
        let rows = params
            .iter()
            .flat_map(|p| {
                [Algorithm::PgdNet, Algorithm::MoAltMin, Algorithm::SdrAltMin].map(|alg| {
                    ComplexityRow {
                        algorithm: alg,
                        params: *p,
                        predicted: predicted_complexity(alg, p),
                        measured: (alg == Algorithm::PgdNet).then(|| measured_pgd_layer(p)),
                    }
                })
            })
            .collect();
        Self { rows }
    }
}
