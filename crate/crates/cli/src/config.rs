//! Run configuration: named presets, JSON files layered on top of a preset,
//! and command-line overrides layered on top of that.

use std::path::{Path, PathBuf};

use hyperfscil::data::{self, EmbeddingDataset, SplitSpec, SyntheticConfig};
use hyperfscil::hyperbolic::Curvature;
use hyperfscil::protocol::{PhaseSchedule, TrainConfig, DEFAULT_MOMENTUM};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "HYPERFSCIL_SEED";
pub const DEFAULT_PRESET: &str = "synthetic-fine";

pub const PRESETS: [&str; 8] = [
    "cub200",
    "cars",
    "aircraft",
    "inf200",
    "cifar100",
    "miniimagenet",
    "synthetic-fine",
    "synthetic-coarse",
];

/// Fully resolved configuration of one run; also the config echo format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Bundle directory; synthetic presets generate their data when absent.
    pub dataset: Option<PathBuf>,
    pub ssp: bool,
    pub hyp: bool,
    pub c: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rank: usize,
    pub momentum: f64,
    pub base: PhaseSchedule,
    pub incremental: PhaseSchedule,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn sched(epochs: usize, lr: f64, batch_size: usize) -> PhaseSchedule {
    PhaseSchedule {
        epochs,
        lr,
        batch_size,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        // (alpha, beta, gamma, c, tau, base, incremental)
        let (alpha, beta, gamma, c, tau, base, incremental) = match name {
            "cub200" => (
                10.0,
                25.0,
                30.0,
                0.5,
                0.05,
                sched(30, 0.0025, 4),
                sched(20, 0.002, 4),
            ),
            "cars" => (
                10.0,
                25.0,
                40.0,
                0.8,
                0.05,
                sched(100, 0.0025, 4),
                sched(20, 0.002, 4),
            ),
            "aircraft" => (
                10.0,
                25.0,
                20.0,
                0.5,
                0.05,
                sched(100, 0.0025, 32),
                sched(10, 0.002, 4),
            ),
            "inf200" => (
                10.0,
                25.0,
                40.0,
                0.5,
                0.05,
                sched(30, 0.0025, 4),
                sched(30, 0.01, 4),
            ),
            "cifar100" => (
                0.0,
                0.0,
                20.0,
                0.5,
                0.02,
                sched(15, 0.0025, 32),
                sched(10, 0.0001, 4),
            ),
            "miniimagenet" => (
                10.0,
                25.0,
                30.0,
                0.8,
                0.02,
                sched(5, 0.0025, 32),
                sched(5, 0.0002, 4),
            ),
            "synthetic-fine" | "synthetic-coarse" => (
                0.04,
                0.1,
                30.0,
                0.5,
                0.05,
                sched(30, 0.025, 32),
                sched(20, 0.002, 4),
            ),
            _ => return None,
        };
        Some(Self {
            preset: name.into(),
            dataset: None,
            ssp: true,
            hyp: true,
            c,
            tau,
            alpha,
            beta,
            gamma,
            rank: hyperfscil::encoder::DEFAULT_RANK,
            momentum: DEFAULT_MOMENTUM,
            base,
            incremental,
            seed: 0,
            out: None,
        })
    }

    pub fn is_synthetic(&self) -> bool {
        self.preset.starts_with("synthetic-")
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let curvature = Curvature::new(self.c).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = TrainConfig {
            ssp: self.ssp,
            hyp: self.hyp,
            curvature,
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            rank: self.rank,
            momentum: self.momentum,
            base: self.base,
            incremental: self.incremental,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if RunConfig::preset(&self.preset).is_none() {
            return Err(CliError::Config(format!(
                "unknown preset {:?}",
                self.preset
            )));
        }
        if self.dataset.is_none() && !self.is_synthetic() {
            return Err(CliError::Config(format!(
                "preset {} needs a dataset bundle (--dataset)",
                self.preset
            )));
        }
        self.train_config().map(|_| ())
    }

    /// The bundle at `dataset`, or freshly generated synthetic data.
    pub fn load_dataset(&self) -> CliResult<EmbeddingDataset> {
        match &self.dataset {
            Some(path) => Ok(data::load_bundle(path)?),
            None => synthetic_dataset(&self.preset, self.seed),
        }
    }
}

/// Generates and splits a synthetic preset.
pub fn synthetic_dataset(preset: &str, seed: u64) -> CliResult<EmbeddingDataset> {
    let sc = SyntheticConfig::preset(preset, seed)
        .ok_or_else(|| CliError::Config(format!("{preset:?} is not a synthetic preset")))?;
    let spec = SplitSpec::preset(preset).expect("synthetic presets have a split");
    Ok(data::make_splits(&data::gen_synthetic(&sc)?, spec, seed)?)
}

/// Command-line values that override the file and preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ssp: Option<bool>,
    pub hyp: Option<bool>,
    pub c: Option<f64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub base_epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub base_batch: Option<usize>,
    pub inc_epochs: Option<usize>,
    pub inc_lr: Option<f64>,
    pub inc_batch: Option<usize>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

pub fn parse_seed(raw: &str, source: &str) -> CliResult<u64> {
    raw.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{source}: {raw:?} is not a u64 seed")))
}

/// Seed from the flag, else the environment, else `None`.
pub fn seed_fallback(flag: Option<u64>, env: Option<&str>) -> CliResult<Option<u64>> {
    match (flag, env) {
        (Some(s), _) => Ok(Some(s)),
        (None, Some(raw)) => parse_seed(raw, SEED_ENV).map(Some),
        (None, None) => Ok(None),
    }
}

/// Preset, then the JSON file, then the flags. The environment seed applies
/// only when neither the file nor the flags set one.
pub fn resolve(
    file: Option<&Path>,
    ov: &Overrides,
    env_seed: Option<&str>,
) -> CliResult<RunConfig> {
    let patch = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(CliError::Config(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    let preset_name = ov
        .preset
        .clone()
        .or_else(|| {
            patch
                .get("preset")
                .and_then(Value::as_str)
                .map(String::from)
        })
        .unwrap_or_else(|| DEFAULT_PRESET.into());
    let preset = RunConfig::preset(&preset_name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown preset {preset_name:?}; known: {}",
            PRESETS.join(", ")
        ))
    })?;
    let file_sets_seed = patch.get("seed").is_some();
    let mut merged = serde_json::to_value(&preset).expect("config serializes");
    merge(&mut merged, patch);
    let mut cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.preset = preset_name;

    if let Some(s) = ov.seed {
        cfg.seed = s;
    } else if !file_sets_seed {
        if let Some(s) = seed_fallback(None, env_seed)? {
            cfg.seed = s;
        }
    }
    if let Some(v) = &ov.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &ov.out {
        cfg.out = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident).+ <- $src:ident) => {
            if let Some(v) = ov.$src {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(ssp <- ssp);
    set!(hyp <- hyp);
    set!(c <- c);
    set!(tau <- tau);
    set!(alpha <- alpha);
    set!(beta <- beta);
    set!(gamma <- gamma);
    set!(rank <- rank);
    set!(base.epochs <- base_epochs);
    set!(base.lr <- base_lr);
    set!(base.batch_size <- base_batch);
    set!(incremental.epochs <- inc_epochs);
    set!(incremental.lr <- inc_lr);
    set!(incremental.batch_size <- inc_batch);
    cfg.validate()?;
    Ok(cfg)
}
