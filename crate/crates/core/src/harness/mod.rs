//! Config-driven experiment runner writing CSV tables, checkpoints and a
//! JSON manifest per run.
//!
//! Every CSV has a fixed header and rows in realization order, so a run
//! repeated with the same config and seed reproduces its files byte for
//! byte. Thread count follows `RAYON_NUM_THREADS`.

pub mod config;
pub mod experiments;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{DesignModel, Diagnostic, ExperimentConfig};

use crate::checkpoint::{config_hash, Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::pgd::PgdNetParams;
use crate::power::AoNetParams;
use crate::synthesis::{dump_channel, ChannelSidecar};

/// Version of every CSV layout and of the manifest.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    SynthChannel,
    TuneDma,
    TrainPgd,
    EvalPgd,
    TrainAo,
    EvalPower,
    Sweep,
    Complexity,
    EeReport,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::SynthChannel,
        Command::TuneDma,
        Command::TrainPgd,
        Command::EvalPgd,
        Command::TrainAo,
        Command::EvalPower,
        Command::Sweep,
        Command::Complexity,
        Command::EeReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::SynthChannel => "synth-channel",
            Command::TuneDma => "tune-dma",
            Command::TrainPgd => "train-pgd",
            Command::EvalPgd => "eval-pgd",
            Command::TrainAo => "train-ao",
            Command::EvalPower => "eval-power",
            Command::Sweep => "sweep",
            Command::Complexity => "complexity",
            Command::EeReport => "ee-report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand '{s}'")))
    }
}

/// Files written by a run and short human-readable results.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    seed: Option<u64>,
    config_hash: String,
    config: &'a ExperimentConfig,
    outputs: Vec<OutputEntry>,
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

struct Writer<'a> {
    dir: &'a Path,
    report: RunReport,
}

impl Writer<'_> {
    fn csv<R: IntoIterator<Item = Vec<String>>>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: R,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
        w.write_record(header).map_err(csv_error)?;
        for row in rows {
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        self.report.files.push(path);
        Ok(())
    }

    fn checkpoint<P: Serialize + serde::de::DeserializeOwned>(
        &mut self,
        path: PathBuf,
        ck: &Checkpoint<P>,
    ) -> Result<()> {
        ck.save(&path)?;
        self.report.files.push(path);
        Ok(())
    }

    fn note(&mut self, line: String) {
        self.report.summary.push(line);
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn pgd_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.pgd.checkpoint)
}

fn ao_checkpoint(cfg: &ExperimentConfig, layers: usize) -> PathBuf {
    cfg.out_dir
        .join(format!("{}_l{layers}.json", cfg.power.checkpoint_prefix))
}

/// Hash of every setting that shapes PGD-Net training.
fn pgd_training_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut pgd = serde_json::to_value(&cfg.pgd)?;
    if let Some(o) = pgd.as_object_mut() {
        for k in ["test_channels", "outer_iters", "checkpoint"] {
            o.remove(k);
        }
    }
    config_hash(&(&cfg.seed, &cfg.scenario, &cfg.coupling, pgd))
}

fn ao_training_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut power = serde_json::to_value(&cfg.power)?;
    if let Some(o) = power.as_object_mut() {
        for k in [
            "test_scenarios",
            "wmmse_iters",
            "wmmse_tol",
            "checkpoint_prefix",
        ] {
            o.remove(k);
        }
    }
    config_hash(&(&cfg.seed, power))
}

fn load_checked<P: Serialize + serde::de::DeserializeOwned>(
    path: &Path,
    kind: CheckpointKind,
    hash: &str,
    trainer: Command,
) -> Result<P> {
    let ck = Checkpoint::<P>::load(path, kind).map_err(|e| match e {
        Error::Format(msg) if msg.contains("not found") => {
            Error::Format(format!("{msg}; run '{trainer}' with this config first"))
        }
        other => other,
    })?;
    if ck.config_hash != hash {
        return Err(Error::Format(format!(
            "checkpoint {} was trained with a different configuration; rerun '{trainer}'",
            path.display()
        )));
    }
    Ok(ck.params)
}

/// Runs one subcommand and writes its artifacts plus
/// `manifest_<command>.json` into `cfg.out_dir`.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<RunReport> {
    let diags = cfg.validate();
    if !diags.is_empty() {
        return Err(Error::Config(
            diags
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("\n"),
        ));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = Writer {
        dir: &cfg.out_dir,
        report: RunReport::default(),
    };
    match command {
        Command::SynthChannel => synth_channel(cfg, &mut w)?,
        Command::TuneDma => {
            let rows = experiments::tune_dma(cfg)?;
            let mean = rows.iter().map(|r| r.se).sum::<f64>() / rows.len() as f64;
            w.note(format!("mean SE after tuning: {mean:.4} bps/Hz"));
            w.csv(
                "tune_dma.csv",
                &[
                    "realization",
                    "gamma_initial",
                    "gamma_final",
                    "se",
                    "halvings",
                ],
                rows.iter().enumerate().map(|(i, r)| {
                    vec![
                        i.to_string(),
                        num(r.gamma_initial),
                        num(r.gamma_final),
                        num(r.se),
                        r.halvings.to_string(),
                    ]
                }),
            )?;
        }
        Command::TrainPgd => {
            let t = experiments::train_pgd(cfg)?;
            let loss: Vec<f64> = t.report.epoch_loss.clone();
            w.csv(
                "pgd_line_search.csv",
                &["step", "mean_residual"],
                t.line_search.iter().map(|(s, r)| vec![num(*s), num(*r)]),
            )?;
            w.csv(
                "pgd_train.csv",
                &["epoch", "loss"],
                loss.iter()
                    .enumerate()
                    .map(|(e, l)| vec![(e + 1).to_string(), num(*l)]),
            )?;
            w.note(format!(
                "final epoch loss: {:.6e}",
                loss.last().copied().unwrap_or(f64::NAN)
            ));
            let ck = Checkpoint::new(
                CheckpointKind::PgdNet,
                pgd_training_hash(cfg)?,
                t.params,
                loss,
            );
            w.checkpoint(pgd_checkpoint(cfg), &ck)?;
        }
        Command::EvalPgd => {
            let params: PgdNetParams<f64> = load_checked(
                &pgd_checkpoint(cfg),
                CheckpointKind::PgdNet,
                &pgd_training_hash(cfg)?,
                Command::TrainPgd,
            )?;
            let (rows, search) = experiments::eval_pgd(cfg, &params)?;
            let n = rows.len() as f64;
            w.note(format!(
                "mean residual: net {:.6e}, best vanilla {:.6e}",
                rows.iter().map(|r| r.residual_net).sum::<f64>() / n,
                rows.iter().map(|r| r.residual_vanilla).sum::<f64>() / n
            ));
            w.csv(
                "pgd_baseline.csv",
                &["step", "mean_residual"],
                search.iter().map(|(s, r)| vec![num(*s), num(*r)]),
            )?;
            w.csv(
                "pgd_eval.csv",
                &[
                    "realization",
                    "residual_net",
                    "residual_vanilla",
                    "se_fd",
                    "se_hybrid",
                ],
                rows.iter().map(|r| {
                    vec![
                        r.realization.to_string(),
                        num(r.residual_net),
                        num(r.residual_vanilla),
                        num(r.se_fd),
                        num(r.se_hybrid),
                    ]
                }),
            )?;
        }
        Command::TrainAo => {
            let trained = experiments::train_ao(cfg)?;
            let hash = ao_training_hash(cfg)?;
            let mut rows = Vec::new();
            for (params, report) in trained {
                let l = params.layers;
                rows.extend(
                    report
                        .epoch_loss
                        .iter()
                        .enumerate()
                        .map(|(e, v)| vec![l.to_string(), (e + 1).to_string(), num(*v)]),
                );
                let ck = Checkpoint::new(
                    CheckpointKind::AoNet,
                    hash.clone(),
                    params,
                    report.epoch_loss,
                );
                w.checkpoint(ao_checkpoint(cfg, l), &ck)?;
            }
            w.csv("ao_train.csv", &["layers", "epoch", "loss"], rows)?;
        }
        Command::EvalPower => {
            let hash = ao_training_hash(cfg)?;
            let nets = cfg
                .power
                .layers
                .iter()
                .map(|&l| {
                    load_checked::<AoNetParams<f64>>(
                        &ao_checkpoint(cfg, l),
                        CheckpointKind::AoNet,
                        &hash,
                        Command::TrainAo,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = experiments::eval_power(cfg, &nets)?;
            let mut header = vec!["scenario".to_string(), "equal_power".into(), "wmmse".into()];
            header.extend(cfg.power.layers.iter().map(|l| format!("ao_net_l{l}")));
            let n = rows.len() as f64;
            let mut means = vec![
                (
                    "equal_power".to_string(),
                    rows.iter().map(|r| r.equal).sum::<f64>() / n,
                ),
                (
                    "wmmse".to_string(),
                    rows.iter().map(|r| r.wmmse).sum::<f64>() / n,
                ),
            ];
            for (i, l) in cfg.power.layers.iter().enumerate() {
                means.push((
                    format!("ao_net_l{l}"),
                    rows.iter().map(|r| r.ao_net[i]).sum::<f64>() / n,
                ));
            }
            for (m, v) in &means {
                w.note(format!("{m}: {v:.4} bps/Hz"));
            }
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            w.csv(
                "power_eval.csv",
                &h,
                rows.iter().map(|r| {
                    let mut v = vec![r.scenario.to_string(), num(r.equal), num(r.wmmse)];
                    v.extend(r.ao_net.iter().map(|x| num(*x)));
                    v
                }),
            )?;
            w.csv(
                "power_summary.csv",
                &["method", "mean_sum_rate"],
                means.into_iter().map(|(m, v)| vec![m, num(v)]),
            )?;
        }
        Command::Sweep => {
            let rows = experiments::sweep(cfg)?;
            w.csv(
                "sweep.csv",
                &["model", "n_mu", "realization", "se"],
                rows.iter().map(|r| {
                    vec![
                        r.model.as_str().into(),
                        r.n_mu.to_string(),
                        r.realization.to_string(),
                        num(r.se),
                    ]
                }),
            )?;
            let means = experiments::sweep_means(&rows);
            for (m, n, v) in &means {
                w.note(format!("{} n_mu={n}: {v:.4} bps/Hz", m.as_str()));
            }
            w.csv(
                "sweep_summary.csv",
                &["model", "n_mu", "mean_se"],
                means
                    .iter()
                    .map(|(m, n, v)| vec![m.as_str().into(), n.to_string(), num(*v)]),
            )?;
        }
        Command::Complexity => {
            let report = experiments::complexity(cfg);
            w.csv(
                "complexity.csv",
                &[
                    "algorithm",
                    "antennas",
                    "rf_chains",
                    "users",
                    "layers",
                    "outer_iters",
                    "predicted",
                    "measured_layer",
                ],
                report.rows.iter().map(|r| {
                    let p = &r.params;
                    vec![
                        r.algorithm.as_str().into(),
                        p.antennas.to_string(),
                        p.rf_chains.to_string(),
                        p.users.to_string(),
                        p.layers.to_string(),
                        p.outer_iters.to_string(),
                        r.predicted.to_string(),
                        r.measured.map(|m| m.to_string()).unwrap_or_default(),
                    ]
                }),
            )?;
        }
        Command::EeReport => {
            let params: PgdNetParams<f64> = load_checked(
                &pgd_checkpoint(cfg),
                CheckpointKind::PgdNet,
                &pgd_training_hash(cfg)?,
                Command::TrainPgd,
            )?;
            let (rows, summary) = experiments::ee_report(cfg, &params)?;
            w.csv(
                "ee_realizations.csv",
                &["realization", "se_fd", "se_hybrid_fc", "se_dma"],
                rows.iter().map(|r| {
                    vec![
                        r.realization.to_string(),
                        num(r.se_fd),
                        num(r.se_fc),
                        num(r.se_dma),
                    ]
                }),
            )?;
            for s in &summary {
                w.note(format!(
                    "{}: SE {:.4}, {:.3} W, EE {:.4}",
                    s.arch.as_str(),
                    s.se,
                    s.total_power,
                    s.ee
                ));
            }
            w.csv(
                "ee_summary.csv",
                &["arch", "mean_se", "total_power_w", "ee"],
                summary.iter().map(|s| {
                    vec![
                        s.arch.as_str().into(),
                        num(s.se),
                        num(s.total_power),
                        num(s.ee),
                    ]
                }),
            )?;
        }
    }
    write_manifest(command, cfg, &mut w)?;
    Ok(w.report)
}

fn synth_channel(cfg: &ExperimentConfig, w: &mut Writer<'_>) -> Result<()> {
    let rows = experiments::synth_channels(cfg)?;
    let geom = experiments::geometry(cfg, cfg.scenario.n_mu)?;
    let dir = cfg.out_dir.join("channels");
    for r in &rows {
        let stem = format!("r{:04}", r.realization);
        let n = &r.network;
        let sidecar = ChannelSidecar {
            format: "multiport-channel".into(),
            version: 1,
            seed: cfg.seed.unwrap_or_default(),
            index: r.realization as u64,
            geometry: geom.clone(),
            coupling: experiments::coupling(cfg),
            users: r.users.clone(),
            blocks: Vec::new(),
        };
        dump_channel(
            &dir,
            &stem,
            &[
                ("z_tt", &n.z_tt),
                ("z_st", &n.z_st),
                ("z_ss", &n.z_ss),
                ("z_rs", &n.z_rs),
                ("z_rr", &n.z_rr),
            ],
            sidecar,
        )?;
        w.report.files.push(dir.join(format!("{stem}.json")));
    }
    w.csv(
        "channels.csv",
        &["realization", "users", "elements", "gamma_untuned"],
        rows.iter().map(|r| {
            vec![
                r.realization.to_string(),
                r.users.len().to_string(),
                r.network.z_ss.nrows().to_string(),
                num(r.gamma_untuned),
            ]
        }),
    )
}

fn write_manifest(command: Command, cfg: &ExperimentConfig, w: &mut Writer<'_>) -> Result<()> {
    let outputs = w
        .report
        .files
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            let file = p
                .strip_prefix(&cfg.out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned();
            Ok(OutputEntry {
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.as_str(),
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        config: cfg,
        outputs,
    };
    let path = cfg.out_dir.join(format!(
        "manifest_{}.json",
        command.as_str().replace('-', "_")
    ));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    w.report.files.push(path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            out_dir: dir.to_path_buf(),
            ..Default::default()
        };
        cfg.scenario.n_mu = 3;
        cfg.scenario.antennas = 18;
        cfg.realizations = 2;
        cfg.nag.iters = 5;
        cfg.pgd.train_channels = 16;
        cfg.pgd.test_channels = 4;
        cfg.pgd.epochs = 2;
        cfg.pgd.batch_size = 8;
        cfg.power.antennas = 6;
        cfg.power.users = 4;
        cfg.power.layers = vec![2];
        cfg.power.width = 4;
        cfg.power.train_scenarios = 8;
        cfg.power.test_scenarios = 4;
        cfg.power.epochs = 1;
        cfg.sweep.n_mu = vec![2, 3];
        cfg.sweep.variants = vec![DesignModel::Full, DesignModel::WithoutAir];
        cfg.complexity.antennas = vec![16];
        cfg
    }

    #[test]
    fn commands_round_trip_names() {
        for c in Command::ALL {
            assert_eq!(c.as_str().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn eval_without_checkpoint_fails_explicitly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        for c in [Command::EvalPgd, Command::EvalPower, Command::EeReport] {
            let err = run(c, &cfg).unwrap_err().to_string();
            assert!(err.contains("not found") && err.contains("train-"), "{err}");
        }
    }

    #[test]
    fn every_command_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        for c in Command::ALL {
            let rep = run(c, &cfg).unwrap();
            let manifest = rep.files.last().unwrap();
            let v: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
            assert_eq!(v["schema_version"], SCHEMA_VERSION);
            assert_eq!(v["command"], c.as_str());
            assert_eq!(v["outputs"].as_array().unwrap().len(), rep.files.len() - 1);
        }
    }

    #[test]
    fn stale_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        run(Command::TrainPgd, &cfg).unwrap();
        cfg.pgd.epochs = 3;
        let err = run(Command::EvalPgd, &cfg).unwrap_err().to_string();
        assert!(err.contains("different configuration"), "{err}");
    }

    #[test]
    fn invalid_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.scenario.antennas = 7;
        assert!(matches!(
            run(Command::Complexity, &cfg),
            Err(Error::Config(_))
        ));
    }
}
