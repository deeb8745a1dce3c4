//! Experiment configuration, overrides and validation.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::Arch;
use crate::pgd::LayerWeighting;
use crate::power::CombinerRule;
use crate::synthesis::CouplingParams;
use num_complex::Complex;

/// Complete description of an experiment run.
///
/// Every section falls back to its defaults when absent; `seed` has no
/// default and must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub nag: NagSection,
    #[serde(default)]
    pub pgd: PgdSection,
    #[serde(default)]
    pub power: PowerSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub complexity: ComplexitySection,
}

fn default_realizations() -> usize {
    100
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: Some(1),
            realizations: default_realizations(),
            out_dir: default_out_dir(),
            scenario: ScenarioConfig::default(),
            coupling: CouplingConfig::default(),
            nag: NagSection::default(),
            pgd: PgdSection::default(),
            power: PowerSection::default(),
            sweep: SweepSection::default(),
            complexity: ComplexitySection::default(),
        }
    }
}

/// Array, users and link budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub arch: Arch,
    /// Hz.
    pub frequency: f64,
    pub n_rf: usize,
    pub n_mu: usize,
    pub antennas: usize,
    pub users: usize,
    /// Element pitch along a waveguide, in wavelengths.
    pub spacing_wavelengths: f64,
    pub width_wavelengths: f64,
    pub height_wavelengths: f64,
    /// Waveguide length in metres.
    pub waveguide_length: f64,
    /// Metres.
    pub ring_radius: f64,
    pub paths: usize,
    pub polarization: f64,
    /// Transmit (FD, hybrid) or supplied (DMA) power budget in watts.
    pub power: f64,
    pub sigma_x2: f64,
    /// SINR of the untuned reference DMA, which fixes the noise level.
    pub snr_db: f64,
    /// Watts per RF chain.
    pub rf_chain_power: f64,
    /// Watts per phase shifter.
    pub phase_shifter_power: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Dma,
            frequency: 10e9,
            n_rf: 6,
            n_mu: 20,
            antennas: 120,
            users: 6,
            spacing_wavelengths: 0.5,
            width_wavelengths: 0.73,
            height_wavelengths: 0.167,
            waveguide_length: 0.11,
            ring_radius: 50.0,
            paths: 20,
            polarization: 1.0,
            power: 1.0,
            sigma_x2: 1.0,
            snr_db: 10.0,
            rf_chain_power: 0.25,
            phase_shifter_power: 0.01,
        }
    }
}

/// Which physical effects the true network contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub air_coupling: bool,
    pub waveguide_coupling: bool,
    /// Reflection at the waveguide inputs counts against the budget.
    pub insertion_loss: bool,
    /// Np/m.
    pub attenuation: f64,
    pub waveguide_coeff: f64,
    pub element_self: f64,
    /// Imaginary air-coupling strength between elements.
    pub air_coeff: f64,
    /// Siemens.
    pub z0: f64,
    pub r_s: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        let p = CouplingParams::<f64>::standard();
        Self {
            air_coupling: true,
            waveguide_coupling: true,
            insertion_loss: true,
            attenuation: p.attenuation,
            waveguide_coeff: p.waveguide_coeff.re,
            element_self: p.element_self.re,
            air_coeff: p.air_coeff.im,
            z0: p.z0,
            r_s: p.r_s,
        }
    }
}

impl CouplingConfig {
    pub fn params(&self, frequency: f64) -> CouplingParams<f64> {
        let base = CouplingParams::<f64>::standard();
        CouplingParams {
            frequency,
            z0: self.z0,
            element_self: Complex::new(self.element_self, 0.0),
            waveguide_coeff: Complex::new(self.waveguide_coeff, 0.0),
            attenuation: self.attenuation,
            air_coeff: Complex::new(0.0, self.air_coeff),
            waveguide_coupling: self.waveguide_coupling,
            air_coupling: self.air_coupling,
            r_s: self.r_s,
            user_load: self.z0,
            antenna_air_coeff: Complex::new(0.0, self.z0 * 0.1),
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NagSection {
    pub momentum: f64,
    pub step: f64,
    pub iters: usize,
}

impl Default for NagSection {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            step: 0.01,
            iters: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdSection {
    pub layers: usize,
    /// Activation half-width.
    pub t: f64,
    pub outer_iters: usize,
    pub train_channels: usize,
    pub test_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight updates per batch.
    pub train_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weighting: LayerWeighting,
    /// Fixed steps tried by the vanilla baseline and for initialisation.
    pub baseline_steps: Vec<f64>,
    /// Relative to `out_dir`.
    pub checkpoint: PathBuf,
}

impl Default for PgdSection {
    fn default() -> Self {
        Self {
            layers: 4,
            t: 1.0,
            outer_iters: 10,
            train_channels: 2000,
            test_channels: 200,
            epochs: 10,
            batch_size: 32,
            train_iters: 1,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weighting: LayerWeighting::Log,
            baseline_steps: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            checkpoint: PathBuf::from("pgd_net.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub antennas: usize,
    pub users: usize,
    pub snr_db: f64,
    pub combiner: CombinerRule,
    /// One AO-Net is trained per entry.
    pub layers: Vec<usize>,
    pub width: usize,
    pub rounds: usize,
    pub train_scenarios: usize,
    pub test_scenarios: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: LayerWeighting,
    pub wmmse_iters: usize,
    pub wmmse_tol: f64,
    /// Checkpoints are `<prefix>_l<layers>.json` in `out_dir`.
    pub checkpoint_prefix: String,
}

impl Default for PowerSection {
    fn default() -> Self {
        Self {
            antennas: 36,
            users: 30,
            snr_db: 10.0,
            combiner: CombinerRule::MatchedFilter,
            layers: vec![4, 6],
            width: 16,
            rounds: 2,
            train_scenarios: 512,
            test_scenarios: 500,
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            weighting: LayerWeighting::LogPlusOne,
            wmmse_iters: 500,
            wmmse_tol: 1e-6,
            checkpoint_prefix: "ao_net".into(),
        }
    }
}

/// Design model used when tuning a DMA; the result is always evaluated on
/// the true network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignModel {
    Full,
    WithoutLoss,
    WithoutAir,
    WithoutCoupling,
}

impl DesignModel {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignModel::Full => "full",
            DesignModel::WithoutLoss => "without_loss",
            DesignModel::WithoutAir => "without_air",
            DesignModel::WithoutCoupling => "without_coupling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_mu: Vec<usize>,
    pub variants: Vec<DesignModel>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_mu: vec![5, 10, 15, 20, 25, 30, 35, 40],
            variants: vec![
                DesignModel::Full,
                DesignModel::WithoutLoss,
                DesignModel::WithoutAir,
                DesignModel::WithoutCoupling,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexitySection {
    pub antennas: Vec<usize>,
}

impl Default for ComplexitySection {
    fn default() -> Self {
        Self {
            antennas: vec![32, 64, 128, 256],
        }
    }
}

/// One validation finding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based line in the source document, when known.
    pub line: Option<usize>,
    /// Dotted path of the offending field(s).
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document, applies `key=value` overrides and returns the
    /// config with every diagnostic. Line numbers refer to `source`.
    pub fn parse(source: &str, overrides: &[String]) -> Result<(Self, Vec<Diagnostic>)> {
        let mut doc: Value = if source.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(source)
                .map_err(|e| Error::Config(format!("line {}: {e}", e.line())))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| {
            let msg = e.to_string();
            let line = unknown_field(&msg).and_then(|k| locate(source, &[k]));
            Error::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        let mut diags = cfg.validate();
        for d in &mut diags {
            d.line = locate_fields(source, &d.field);
        }
        Ok((cfg, diags))
    }

    /// Parses, and fails with all diagnostics joined when any are found.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let (cfg, diags) = Self::parse(source, overrides)?;
        if diags.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(
                diags
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("\n"),
            ))
        }
    }

    /// Every violation, without line information.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| {
            out.push(Diagnostic {
                line: None,
                field: field.into(),
                message,
            })
        };
        let s = &self.scenario;
        if self.seed.is_none() {
            bad("seed", "a seed is required for reproducible runs".into());
        }
        if self.realizations == 0 {
            bad("realizations", "must be at least 1".into());
        }
        if s.arch == Arch::Dma && s.antennas != s.n_rf * s.n_mu {
            bad(
                "scenario.antennas, scenario.n_rf, scenario.n_mu",
                format!(
                    "a DMA needs antennas = n_rf·n_mu, got {} ≠ {}·{}",
                    s.antennas, s.n_rf, s.n_mu
                ),
            );
        }
        if s.n_rf == 0 || s.n_mu == 0 {
            bad(
                "scenario.n_rf",
                "waveguide and element counts must be positive".into(),
            );
        }
        if s.users == 0 || s.users > s.n_rf {
            bad(
                "scenario.users",
                format!("need 1 ≤ users ≤ n_rf = {}", s.n_rf),
            );
        }
        for (name, v) in [
            ("scenario.frequency", s.frequency),
            ("scenario.spacing_wavelengths", s.spacing_wavelengths),
            ("scenario.width_wavelengths", s.width_wavelengths),
            ("scenario.height_wavelengths", s.height_wavelengths),
            ("scenario.ring_radius", s.ring_radius),
            ("scenario.power", s.power),
            ("scenario.sigma_x2", s.sigma_x2),
            ("scenario.polarization", s.polarization),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad(name, format!("must be positive and finite, got {v}"));
            }
        }
        if s.width_wavelengths <= 0.5 {
            bad(
                "scenario.width_wavelengths",
                "waveguide is below the TE10 cutoff (needs > 0.5)".into(),
            );
        }
        if !s.snr_db.is_finite() {
            bad("scenario.snr_db", "must be finite".into());
        }
        if s.rf_chain_power < 0.0 || s.phase_shifter_power < 0.0 {
            bad(
                "scenario.rf_chain_power",
                "hardware powers must be nonnegative".into(),
            );
        }
        if s.paths == 0 {
            bad(
                "scenario.paths",
                "need at least one propagation path".into(),
            );
        }
        let c = &self.coupling;
        if !(c.attenuation >= 0.0) || !(c.z0 > 0.0) || !(c.r_s >= 0.0) {
            bad(
                "coupling.attenuation",
                "attenuation and r_s must be nonnegative and z0 positive".into(),
            );
        }
        let n = &self.nag;
        if !(0.0..1.0).contains(&n.momentum) {
            bad(
                "nag.momentum",
                format!("must lie in [0, 1), got {}", n.momentum),
            );
        }
        if !(n.step > 0.0) {
            bad("nag.step", "must be positive".into());
        }
        let p = &self.pgd;
        if !(p.t > 0.0) {
            bad(
                "pgd.t",
                format!(
                    "activation half-width must be nonzero and positive, got {}",
                    p.t
                ),
            );
        }
        if p.layers == 0 || p.outer_iters == 0 {
            bad(
                "pgd.layers",
                "layers and outer_iters must be at least 1".into(),
            );
        }
        if p.train_channels == 0 || p.test_channels == 0 || p.batch_size == 0 || p.train_iters == 0
        {
            bad(
                "pgd.train_channels",
                "channel counts, batch size and train_iters must be positive".into(),
            );
        }
        if !(p.lr >= 0.0) || !(0.0..1.0).contains(&p.beta1) || !(0.0..1.0).contains(&p.beta2) {
            bad("pgd.lr", "need lr ≥ 0 and moment decays in [0, 1)".into());
        }
        if p.baseline_steps.is_empty() || p.baseline_steps.iter().any(|v| !(*v > 0.0)) {
            bad(
                "pgd.baseline_steps",
                "need at least one positive step".into(),
            );
        }
        let w = &self.power;
        if w.users == 0 || w.antennas == 0 {
            bad("power.users", "users and antennas must be positive".into());
        }
        if w.layers.is_empty() || w.layers.contains(&0) || w.width == 0 {
            bad(
                "power.layers",
                "need at least one positive layer count and a positive width".into(),
            );
        }
        if w.train_scenarios == 0 || w.test_scenarios == 0 || w.batch_size == 0 {
            bad(
                "power.train_scenarios",
                "scenario counts and batch size must be positive".into(),
            );
        }
        if !(w.lr >= 0.0) || !w.snr_db.is_finite() {
            bad("power.lr", "need lr ≥ 0 and a finite SNR".into());
        }
        if self.sweep.n_mu.is_empty() || self.sweep.n_mu.contains(&0) {
            bad(
                "sweep.n_mu",
                "need at least one positive element count".into(),
            );
        }
        if self.sweep.variants.is_empty() {
            bad("sweep.variants", "need at least one design model".into());
        }
        if self.complexity.antennas.contains(&0) {
            bad(
                "complexity.antennas",
                "antenna counts must be positive".into(),
            );
        }
        out
    }
}

/// Sets a dotted `path=value` in a JSON document; the value is parsed as
/// JSON and falls back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{path}': '{key}' is not inside an object"
            ))
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn unknown_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

/// Earliest line among comma-separated dotted fields, falling back to the
/// enclosing section.
fn locate_fields(source: &str, fields: &str) -> Option<usize> {
    let paths: Vec<Vec<&str>> = fields
        .split(',')
        .map(|f| f.trim().split('.').collect())
        .collect();
    paths
        .iter()
        .filter_map(|p| locate(source, p))
        .min()
        .or_else(|| paths.iter().filter_map(|p| locate(source, &p[..1])).min())
}

/// Line of the last key in `path`, searching for each key after the line
/// of the previous one.
fn locate(source: &str, path: &[&str]) -> Option<usize> {
    let mut start = 0;
    let mut found = None;
    for key in path {
        let needle = format!("\"{key}\"");
        let (idx, _) = source
            .lines()
            .enumerate()
            .skip(start)
            .find(|(_, l)| l.contains(&needle))?;
        start = idx;
        found = Some(idx + 1);
    }
    found
}
