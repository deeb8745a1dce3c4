//! Simulation and optimization toolkit for multi-port matching-network MIMO
//! systems.
//!
//! The crate models a base station (dynamic metasurface antenna, fully
//! digital array, or hybrid analog/digital array) and its users as a
//! multi-port circuit described by admittance blocks, derives equivalent
//! channels and power matrices from it, and provides:
//!
//! * zero-forcing precoders and Nesterov-accelerated tuning of DMA loads
//!   ([`beamforming`]),
//! * an unfolded projected-gradient network for hybrid beamforming
//!   ([`pgd`]),
//! * uplink power control with WMMSE and a GNN-parameterised unfolded
//!   WMMSE ([`power`]),
//! * spectral/energy-efficiency and complexity accounting ([`metrics`]),
//! * a reproducible, config-driven experiment runner ([`harness`]).
//!
//! Every algorithm is generic over the scalar type through [`Real`]; the
//! aliases at the crate root fix it to `f64`, which the experiment layer
//! uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod beamforming;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod pgd;
pub mod power;
pub mod scalar;
pub mod synthesis;

pub use error::{Error, Result};
pub use scalar::Real;

/// Complex matrix in double precision.
pub type CMatrix = numerics::CMat<f64>;
/// Real matrix in double precision.
pub type RMatrix = numerics::RMat<f64>;
/// Complex scalar in double precision.
pub type Complex64 = num_complex::Complex<f64>;

pub type ImpedanceNetwork = network::ImpedanceNetwork<f64>;
pub type ChannelRealization = network::ChannelRealization<f64>;
pub type ArrayGeometry = synthesis::ArrayGeometry<f64>;
pub type CouplingParams = synthesis::CouplingParams<f64>;
pub type ZfResult = beamforming::ZfResult<f64>;
pub type HybridBeamformer = pgd::HybridBeamformer<f64>;
pub type PgdNetParams = pgd::PgdNetParams<f64>;
pub type RealVectorization = pgd::RealVectorization<f64>;
pub type UplinkScenario = power::UplinkScenario<f64>;
pub type AoNetParams = power::AoNetParams<f64>;
pub type PowerAllocation = power::PowerAllocation<f64>;
pub use harness::ExperimentConfig;
