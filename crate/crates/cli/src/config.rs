//! Flat dotted-key experiment configuration.
//!
//! One `key = value` pair per line, `#` comments, no nesting. Every seed is
//! explicit. `parse` and `render` round-trip losslessly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pipa_core::losses::{LossKind, ZMode};
use pipa_core::seqdata::Level;
use pipa_core::trainer::OptimKind;
use pipa_core::verify::PriorMode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Malformed { line: usize, text: String },
    #[error("key `{key}`: {msg}")]
    Bad { key: &'static str, msg: String },
}

/// Which generative world construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldKind {
    /// Fully random components.
    Random,
    /// Negatives share every conditional except the final token and always
    /// go wrong at the last step.
    Changepoint,
}

impl WorldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorldKind::Random => "random",
            WorldKind::Changepoint => "changepoint",
        }
    }
}

/// Dataset annotation granularity requested from gen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSpec {
    Answer,
    Step,
    Both,
}

impl LevelSpec {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelSpec::Answer => "answer",
            LevelSpec::Step => "step",
            LevelSpec::Both => "both",
        }
    }

    pub fn levels(self) -> Vec<Level> {
        match self {
            LevelSpec::Answer => vec![Level::Answer],
            LevelSpec::Step => vec![Level::Step],
            LevelSpec::Both => vec![Level::Answer, Level::Step],
        }
    }
}

/// The full experiment description; one file drives gen, train, verify, and
/// report.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world_seed: u64,
    pub world_prompts: usize,
    pub world_vocab: usize,
    pub world_answer_len: usize,
    pub world_kind: WorldKind,

    pub data_seed: u64,
    pub data_n: usize,
    pub data_level: LevelSpec,
    pub data_pairing: bool,
    pub data_pair_seed: Option<u64>,

    pub model_window: usize,
    pub model_init_seed: u64,

    pub prior_mode: PriorMode,
    pub prior_epochs: usize,
    pub prior_lr: f64,

    pub train_loss: LossKind,
    pub train_beta: f64,
    pub train_epsilon: f64,
    pub train_sft_coeff: f64,
    pub train_z_mode: ZMode,
    pub train_z0: Option<f64>,
    pub train_optimizer: OptimKind,
    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_epochs: usize,
    pub train_seed: u64,
    pub train_grid: Option<Vec<f64>>,
    pub train_probe_size: usize,

    pub verify_seed: u64,
    pub verify_trials: usize,
    pub verify_checks: Vec<String>,

    pub out_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "world.seed",
    "world.prompts",
    "world.vocab",
    "world.answer_len",
    "world.kind",
    "data.seed",
    "data.n",
    "data.level",
    "data.pairing",
    "data.pair_seed",
    "model.window",
    "model.init_seed",
    "prior.mode",
    "prior.epochs",
    "prior.lr",
    "train.loss",
    "train.beta",
    "train.epsilon",
    "train.sft_coeff",
    "train.z_mode",
    "train.z0",
    "train.optimizer",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.grid",
    "train.probe_size",
    "verify.seed",
    "verify.trials",
    "verify.checks",
    "out.dir",
];

fn get_req<'a>(
    map: &'a BTreeMap<String, String>,
    key: &'static str,
) -> Result<&'a str, ConfigError> {
    map.get(key).map(String::as_str).ok_or(ConfigError::Missing(key))
}

fn parse_num<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Bad {
        key,
        msg: format!("cannot parse `{value}`"),
    })
}

fn opt_num<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &'static str,
    default: T,
) -> Result<T, ConfigError> {
    match map.get(key) {
        Some(v) => parse_num(key, v),
        None => Ok(default),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::Unknown(key));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }

        let world_kind = match map.get("world.kind").map(String::as_str).unwrap_or("random") {
            "random" => WorldKind::Random,
            "changepoint" => WorldKind::Changepoint,
            other => {
                return Err(ConfigError::Bad {
                    key: "world.kind",
                    msg: format!("expected random|changepoint, found `{other}`"),
                })
            }
        };
        let data_level = match map.get("data.level").map(String::as_str).unwrap_or("answer") {
            "answer" => LevelSpec::Answer,
            "step" => LevelSpec::Step,
            "both" => LevelSpec::Both,
            other => {
                return Err(ConfigError::Bad {
                    key: "data.level",
                    msg: format!("expected answer|step|both, found `{other}`"),
                })
            }
        };
        let data_pairing = match map.get("data.pairing").map(String::as_str).unwrap_or("false") {
            "true" => true,
            "false" => false,
            other => {
                return Err(ConfigError::Bad {
                    key: "data.pairing",
                    msg: format!("expected true|false, found `{other}`"),
                })
            }
        };
        let data_pair_seed = match map.get("data.pair_seed") {
            Some(v) => Some(parse_num("data.pair_seed", v)?),
            None => None,
        };
        if data_pairing && data_pair_seed.is_none() {
            return Err(ConfigError::Missing("data.pair_seed"));
        }
        let prior_mode = {
            let raw = map
                .get("prior.mode")
                .map(String::as_str)
                .unwrap_or("sft-positive");
            PriorMode::parse(raw).ok_or(ConfigError::Bad {
                key: "prior.mode",
                msg: format!("unknown prior mode `{raw}`"),
            })?
        };
        let train_loss = {
            let raw = map.get("train.loss").map(String::as_str).unwrap_or("pipa-m");
            LossKind::parse(raw).ok_or(ConfigError::Bad {
                key: "train.loss",
                msg: format!("unknown loss kind `{raw}`"),
            })?
        };
        let train_z_mode = {
            let raw = map.get("train.z_mode").map(String::as_str).unwrap_or("batch");
            ZMode::parse(raw).ok_or(ConfigError::Bad {
                key: "train.z_mode",
                msg: format!("expected exact|batch, found `{raw}`"),
            })?
        };
        let train_z0 = match map.get("train.z0").map(String::as_str) {
            None | Some("auto") => None,
            Some(v) => Some(parse_num("train.z0", v)?),
        };
        let train_optimizer = {
            let raw = map
                .get("train.optimizer")
                .map(String::as_str)
                .unwrap_or("adam");
            OptimKind::parse(raw).ok_or(ConfigError::Bad {
                key: "train.optimizer",
                msg: format!("expected adam|sgd, found `{raw}`"),
            })?
        };
        let train_grid = match map.get("train.grid").map(String::as_str) {
            None | Some("") => None,
            Some(v) => {
                let values: Result<Vec<f64>, _> = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect();
                Some(values.map_err(|_| ConfigError::Bad {
                    key: "train.grid",
                    msg: format!("expected comma-separated floats, found `{v}`"),
                })?)
            }
        };
        let verify_checks: Vec<String> = map
            .get("verify.checks")
            .map(String::as_str)
            .unwrap_or("dpo-equivalence,kto-equivalence")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();

        let cfg = ExperimentConfig {
            world_seed: parse_num("world.seed", get_req(&map, "world.seed")?)?,
            world_prompts: opt_num(&map, "world.prompts", 4)?,
            world_vocab: opt_num(&map, "world.vocab", 4)?,
            world_answer_len: opt_num(&map, "world.answer_len", 2)?,
            world_kind,
            data_seed: parse_num("data.seed", get_req(&map, "data.seed")?)?,
            data_n: opt_num(&map, "data.n", 1000)?,
            data_level,
            data_pairing,
            data_pair_seed,
            model_window: opt_num(&map, "model.window", 2)?,
            model_init_seed: parse_num("model.init_seed", get_req(&map, "model.init_seed")?)?,
            prior_mode,
            prior_epochs: opt_num(&map, "prior.epochs", 400)?,
            prior_lr: opt_num(&map, "prior.lr", 0.5)?,
            train_loss,
            train_beta: opt_num(&map, "train.beta", 0.1)?,
            train_epsilon: opt_num(&map, "train.epsilon", 1e-6)?,
            train_sft_coeff: opt_num(&map, "train.sft_coeff", 0.0)?,
            train_z_mode,
            train_z0,
            train_optimizer,
            train_lr: opt_num(&map, "train.lr", 0.01)?,
            train_batch_size: opt_num(&map, "train.batch_size", 256)?,
            train_epochs: opt_num(&map, "train.epochs", 8)?,
            train_seed: parse_num("train.seed", get_req(&map, "train.seed")?)?,
            train_grid,
            train_probe_size: opt_num(&map, "train.probe_size", 64)?,
            verify_seed: parse_num("verify.seed", get_req(&map, "verify.seed")?)?,
            verify_trials: opt_num(&map, "verify.trials", 1000)?,
            verify_checks,
            out_dir: PathBuf::from(
                map.get("out.dir").map(String::as_str).unwrap_or("out"),
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.world_prompts == 0 || self.world_vocab == 0 || self.world_answer_len == 0 {
            return Err(ConfigError::Bad {
                key: "world.prompts",
                msg: "world sizes must be positive".into(),
            });
        }
        if self.data_n == 0 {
            return Err(ConfigError::Bad {
                key: "data.n",
                msg: "dataset size must be positive".into(),
            });
        }
        if self.train_batch_size == 0 || self.train_epochs == 0 {
            return Err(ConfigError::Bad {
                key: "train.batch_size",
                msg: "batch size and epochs must be positive".into(),
            });
        }
        if self.world_kind == WorldKind::Changepoint && self.world_answer_len < 2 {
            return Err(ConfigError::Bad {
                key: "world.kind",
                msg: "changepoint worlds need answer_len >= 2".into(),
            });
        }
        Ok(())
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(&format!("{key} = {value}\n"));
        };
        push("world.seed", self.world_seed.to_string());
        push("world.prompts", self.world_prompts.to_string());
        push("world.vocab", self.world_vocab.to_string());
        push("world.answer_len", self.world_answer_len.to_string());
        push("world.kind", self.world_kind.as_str().to_string());
        push("data.seed", self.data_seed.to_string());
        push("data.n", self.data_n.to_string());
        push("data.level", self.data_level.as_str().to_string());
        push("data.pairing", self.data_pairing.to_string());
        if let Some(seed) = self.data_pair_seed {
            push("data.pair_seed", seed.to_string());
        }
        push("model.window", self.model_window.to_string());
        push("model.init_seed", self.model_init_seed.to_string());
        push("prior.mode", self.prior_mode.as_str().to_string());
        push("prior.epochs", self.prior_epochs.to_string());
        push("prior.lr", self.prior_lr.to_string());
        push("train.loss", self.train_loss.as_str().to_string());
        push("train.beta", self.train_beta.to_string());
        push("train.epsilon", self.train_epsilon.to_string());
        push("train.sft_coeff", self.train_sft_coeff.to_string());
        push("train.z_mode", self.train_z_mode.as_str().to_string());
        push(
            "train.z0",
            self.train_z0.map(|z| z.to_string()).unwrap_or_else(|| "auto".into()),
        );
        push("train.optimizer", self.train_optimizer.as_str().to_string());
        push("train.lr", self.train_lr.to_string());
        push("train.batch_size", self.train_batch_size.to_string());
        push("train.epochs", self.train_epochs.to_string());
        push("train.seed", self.train_seed.to_string());
        if let Some(grid) = &self.train_grid {
            let body: Vec<String> = grid.iter().map(|v| v.to_string()).collect();
            push("train.grid", body.join(","));
        }
        push("train.probe_size", self.train_probe_size.to_string());
        push("verify.seed", self.verify_seed.to_string());
        push("verify.trials", self.verify_trials.to_string());
        push("verify.checks", self.verify_checks.join(","));
        push("out.dir", self.out_dir.display().to_string());
        out
    }

    /// Re-derive every seed from one override, deterministically.
    pub fn apply_seed_override(&mut self, seed: u64) {
        self.world_seed = seed;
        self.data_seed = seed.wrapping_add(1);
        if self.data_pair_seed.is_some() || self.data_pairing {
            self.data_pair_seed = Some(seed.wrapping_add(2));
        }
        self.model_init_seed = seed.wrapping_add(3);
        self.train_seed = seed.wrapping_add(4);
        self.verify_seed = seed.wrapping_add(5);
    }
}
