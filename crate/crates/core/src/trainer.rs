//! Mini-batch first-order optimization with per-step diagnostics.
//!
//! Each batch builds one tape per record, sums the exact gradients into a
//! dense vector over the bundle's trainable parameters, records a metrics row
//! (computed before the update), and applies one optimizer step. Reward
//! trajectories are measured on a fixed probe batch selected up front, so the
//! curves are not confounded by batch sampling noise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::grad::{backward, GradError, Tape};
use crate::losses::{
    build_record_loss, estimate_kl_z, per_token_terms, LossConfig, LossError, LossKind, RecordRef,
};
use crate::models::{ModelBundle, ModelError};
use crate::seqdata::{DataError, Dataset, Example, Level, Token};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss `{kind}` is incompatible with the dataset: {reason}")]
    Incompatible { kind: LossKind, reason: String },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("metrics csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> OptimKind {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam { .. } => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<OptimKind> {
        match s {
            "sgd" => Some(OptimKind::Sgd),
            "adam" => Some(OptimKind::adam()),
            _ => None,
        }
    }
}

/// Optimizer with per-parameter state over the dense parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, dim: usize) -> Optimizer {
        Optimizer {
            kind,
            lr,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One in-place update of `params` from the summed gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Training recipe.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional learning-rate grid for [`grid_search`].
    pub grid: Option<Vec<f64>>,
    /// Seed for selecting the fixed probe batch.
    pub probe_seed: u64,
    /// Probe batch size (split between positive and negative probes).
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> TrainConfig {
        TrainConfig {
            loss,
            optimizer: OptimKind::adam(),
            lr: 0.05,
            batch_size: 64,
            epochs: 3,
            seed: 0,
            grid: None,
            probe_seed: 0,
            probe_size: 64,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One diagnostics row, recorded per optimization step before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean loss over the batch.
    pub loss: f64,
    /// Mean over batch examples of (prod_t p(c_t | x, y_{<t}))^(1/T) under
    /// the value model.
    pub value_geo_mean: f64,
    /// Mean implicit reward log(f(y|x) / prior(y|x)) on positive probes.
    pub reward_pos: f64,
    /// Same on negative probes.
    pub reward_neg: f64,
    /// Fraction of batch tokens where PIPA-M's clip was active.
    pub clip_rate: f64,
}

/// Append-only per-step metrics with the epoch stride retained.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub steps_per_epoch: usize,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str =
        "step,loss,value_geo_mean,reward_pos,reward_neg,clip_rate";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.value_geo_mean, r.reward_pos, r.reward_neg, r.clip_rate
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog, TrainError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != Self::CSV_HEADER {
                    return Err(TrainError::Csv {
                        line: 1,
                        msg: format!("unexpected header `{line}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(TrainError::Csv {
                    line: i + 1,
                    msg: format!("expected 6 fields, found {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, TrainError> {
                s.parse().map_err(|_| TrainError::Csv {
                    line: i + 1,
                    msg: format!("bad float `{s}`"),
                })
            };
            rows.push(MetricsRow {
                step: fields[0].parse().map_err(|_| TrainError::Csv {
                    line: i + 1,
                    msg: format!("bad step `{}`", fields[0]),
                })?,
                loss: parse(fields[1])?,
                value_geo_mean: parse(fields[2])?,
                reward_pos: parse(fields[3])?,
                reward_neg: parse(fields[4])?,
                clip_rate: parse(fields[5])?,
            });
        }
        Ok(MetricsLog {
            rows,
            steps_per_epoch: 0,
        })
    }

    fn epoch_means(&self, pick: impl Fn(&MetricsRow) -> f64) -> Vec<f64> {
        if self.steps_per_epoch == 0 || self.rows.is_empty() {
            return Vec::new();
        }
        self.rows
            .chunks(self.steps_per_epoch)
            .map(|chunk| chunk.iter().map(&pick).sum::<f64>() / chunk.len() as f64)
            .collect()
    }

    pub fn loss_epoch_means(&self) -> Vec<f64> {
        self.epoch_means(|r| r.loss)
    }

    pub fn value_epoch_means(&self) -> Vec<f64> {
        self.epoch_means(|r| r.value_geo_mean)
    }

    pub fn clip_epoch_means(&self) -> Vec<f64> {
        self.epoch_means(|r| r.clip_rate)
    }

    pub fn final_epoch_mean_loss(&self) -> f64 {
        self.loss_epoch_means().last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
struct ProbeEntry {
    prompt: Vec<Token>,
    answer: Vec<Token>,
    positive: bool,
}

struct ProbeSetup {
    entries: Vec<ProbeEntry>,
    excluded: Vec<usize>,
}

fn select_probes(dataset: &Dataset, cfg: &TrainConfig) -> ProbeSetup {
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.probe_seed);
    indices.shuffle(&mut rng);
    let half = (cfg.probe_size / 2).max(1);
    let mut entries = Vec::new();
    let mut used = Vec::new();
    match dataset {
        Dataset::Unpaired { examples, .. } => {
            let mut pos = 0;
            let mut neg = 0;
            for &i in &indices {
                let ex = &examples[i];
                if ex.is_positive() && pos < half {
                    pos += 1;
                } else if !ex.is_positive() && neg < half {
                    neg += 1;
                } else {
                    continue;
                }
                entries.push(ProbeEntry {
                    prompt: ex.prompt.clone(),
                    answer: ex.answer.clone(),
                    positive: ex.is_positive(),
                });
                used.push(i);
                if pos >= half && neg >= half {
                    break;
                }
            }
        }
        Dataset::Paired { pairs, .. } => {
            for &i in indices.iter().take(half) {
                let pair = &pairs[i];
                entries.push(ProbeEntry {
                    prompt: pair.prompt().to_vec(),
                    answer: pair.chosen.answer.clone(),
                    positive: true,
                });
                entries.push(ProbeEntry {
                    prompt: pair.prompt().to_vec(),
                    answer: pair.rejected.answer.clone(),
                    positive: false,
                });
                used.push(i);
            }
        }
    }
    // Hold probes out of the training stream only when the dataset can
    // spare them; tiny datasets train on everything.
    let excluded = if dataset.len() > 4 * cfg.probe_size.max(1) {
        used
    } else {
        Vec::new()
    };
    ProbeSetup { entries, excluded }
}

fn probe_rewards(bundle: &ModelBundle, probes: &[ProbeEntry]) -> Result<(f64, f64), TrainError> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for probe in probes {
        let reward = bundle.policy.sequence_logprob(&probe.prompt, &probe.answer)?
            - bundle.prior.sequence_logprob(&probe.prompt, &probe.answer)?;
        let slot = usize::from(!probe.positive);
        sums[slot] += reward;
        counts[slot] += 1;
    }
    let mean = |slot: usize| {
        if counts[slot] == 0 {
            f64::NAN
        } else {
            sums[slot] / counts[slot] as f64
        }
    };
    Ok((mean(0), mean(1)))
}

/// Geometric mean of the value model's label likelihood over one example.
fn value_geo_mean(bundle: &ModelBundle, ex: &Example) -> Result<f64, TrainError> {
    let mut log_sum = 0.0;
    for t in 0..ex.answer.len() {
        let g = bundle.value.g(&ex.prompt, &ex.answer[..t])?;
        let p = if ex.labels[t] == 1 { g } else { 1.0 - g };
        log_sum += p.ln();
    }
    Ok((log_sum / ex.answer.len() as f64).exp())
}

fn validate_compat(cfg: &TrainConfig, dataset: &Dataset) -> Result<(), TrainError> {
    let kind = cfg.loss.kind;
    if kind.is_paired() != dataset.is_paired() {
        let reason = if kind.is_paired() {
            "paired loss requires a paired dataset"
        } else {
            "unpaired loss requires an unpaired dataset (decouple pairs first)"
        };
        return Err(TrainError::Incompatible {
            kind,
            reason: reason.into(),
        });
    }
    if kind == LossKind::Kto && dataset.level() != Level::Answer {
        return Err(TrainError::Incompatible {
            kind,
            reason: "kto needs answer-level labels; use step-kto for step-level data".into(),
        });
    }
    if kind == LossKind::Sft {
        let any_positive = dataset
            .examples()?
            .iter()
            .any(|e| e.is_positive());
        if !any_positive {
            return Err(TrainError::Incompatible {
                kind,
                reason: "sft needs at least one positive example".into(),
            });
        }
    }
    if dataset.is_empty() {
        return Err(TrainError::Incompatible {
            kind,
            reason: "dataset is empty".into(),
        });
    }
    Ok(())
}

fn record_ref(dataset: &Dataset, index: usize) -> RecordRef<'_> {
    match dataset {
        Dataset::Unpaired { examples, .. } => RecordRef::Unpaired(&examples[index]),
        Dataset::Paired { pairs, .. } => RecordRef::Paired(&pairs[index]),
    }
}

/// Sum of per-record gradients over one batch, as a dense vector. Records
/// are processed in slice order; each parameter slot is touched once per
/// record, so the result does not depend on map iteration order.
pub(crate) fn sum_batch_gradients(
    bundle: &ModelBundle,
    dataset: &Dataset,
    batch: &[usize],
    cfg: &LossConfig,
    zs: Option<&[f64]>,
) -> Result<(Vec<f64>, f64), TrainError> {
    let mut dense = vec![0.0; bundle.dense_len()];
    let mut loss_sum = 0.0;
    for (bi, &idx) in batch.iter().enumerate() {
        let record = record_ref(dataset, idx);
        let mut tape = Tape::new();
        let z = zs.map(|z| z[bi]);
        let root = build_record_loss(&mut tape, bundle, record, cfg, z)?;
        loss_sum += tape.value(root);
        let grads = backward(&tape, root)?;
        for (id, g) in grads.iter() {
            if let Some(slot) = bundle.dense_index(id) {
                dense[slot] += g;
            }
        }
    }
    Ok((dense, loss_sum))
}

fn batch_z(
    bundle: &ModelBundle,
    dataset: &Dataset,
    batch: &[usize],
    cfg: &LossConfig,
) -> Result<Option<Vec<f64>>, TrainError> {
    if !cfg.kind.needs_reference() {
        return Ok(None);
    }
    let examples = dataset.examples()?;
    let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
    Ok(Some(estimate_kl_z(bundle, &refs, cfg.z_mode)?))
}

/// Train the bundle in place. Deterministic given (cfg, dataset order): the
/// epoch shuffle, probe selection, and batch gradients all run on seeded
/// streams, and the prior is never touched.
pub fn train(
    bundle: &mut ModelBundle,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsLog, TrainError> {
    cfg.validate()?;
    validate_compat(cfg, dataset)?;
    let probes = select_probes(dataset, cfg);
    let mut train_indices: Vec<usize> = (0..dataset.len())
        .filter(|i| !probes.excluded.contains(i))
        .collect();
    if cfg.loss.kind == LossKind::Sft {
        let examples = dataset.examples()?;
        train_indices.retain(|&i| examples[i].is_positive());
        if train_indices.is_empty() {
            return Err(TrainError::Incompatible {
                kind: cfg.loss.kind,
                reason: "sft selection is empty after probe exclusion".into(),
            });
        }
    }
    let steps_per_epoch = train_indices.len().div_ceil(cfg.batch_size);
    let mut log = MetricsLog {
        rows: Vec::with_capacity(steps_per_epoch * cfg.epochs),
        steps_per_epoch,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, bundle.dense_len());
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order = train_indices.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let zs = batch_z(bundle, dataset, batch, &cfg.loss)?;
            let (dense_grad, loss_sum) =
                sum_batch_gradients(bundle, dataset, batch, &cfg.loss, zs.as_deref())?;

            // Diagnostics on the pre-update parameters.
            let mut value_sum = 0.0;
            let mut value_count = 0usize;
            let mut clip_hits = 0usize;
            let mut clip_total = 0usize;
            for &idx in batch {
                match record_ref(dataset, idx) {
                    RecordRef::Unpaired(ex) => {
                        value_sum += value_geo_mean(bundle, ex)?;
                        value_count += 1;
                        if cfg.loss.kind == LossKind::PipaM {
                            for term in per_token_terms(bundle, ex, &cfg.loss)? {
                                clip_total += 1;
                                clip_hits += usize::from(term.clipped);
                            }
                        }
                    }
                    RecordRef::Paired(pair) => {
                        value_sum += 0.5 * value_geo_mean(bundle, &pair.chosen)?;
                        value_sum += 0.5 * value_geo_mean(bundle, &pair.rejected)?;
                        value_count += 1;
                    }
                }
            }
            let (reward_pos, reward_neg) = probe_rewards(bundle, &probes.entries)?;
            log.rows.push(MetricsRow {
                step,
                loss: loss_sum / batch.len() as f64,
                value_geo_mean: value_sum / value_count.max(1) as f64,
                reward_pos,
                reward_neg,
                clip_rate: if clip_total == 0 {
                    0.0
                } else {
                    clip_hits as f64 / clip_total as f64
                },
            });

            let mut params = bundle.dense_values();
            optimizer.step(&mut params, &dense_grad);
            bundle.apply_dense(&params)?;
            step += 1;
        }
    }
    Ok(log)
}

/// One grid-search run.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub lr: f64,
    pub final_loss: f64,
    pub log: MetricsLog,
}

/// Grid-search outcome: the winning run's bundle plus every log.
#[derive(Debug)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best_bundle: ModelBundle,
    pub runs: Vec<GridRun>,
}

/// Index of the winning (lr, final loss) entry: lowest loss, ties broken
/// toward the smaller learning rate.
pub fn pick_best(results: &[(f64, f64)]) -> usize {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[a]
            .0
            .partial_cmp(&results[b].0)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut best = order[0];
    for &i in &order[1..] {
        if results[i].1 < results[best].1 {
            best = i;
        }
    }
    best
}

/// Run one independent seeded training per learning rate in `cfg.grid` and
/// keep the run with the lowest final-epoch mean loss.
pub fn grid_search<F>(
    factory: F,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<GridOutcome, TrainError>
where
    F: Fn() -> ModelBundle,
{
    let grid = cfg
        .grid
        .clone()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| TrainError::BadConfig("grid_search needs a non-empty grid".into()))?;
    let mut runs = Vec::with_capacity(grid.len());
    let mut bundles = Vec::with_capacity(grid.len());
    for &lr in &grid {
        let mut run_cfg = cfg.clone();
        run_cfg.lr = lr;
        run_cfg.grid = None;
        let mut bundle = factory();
        let log = train(&mut bundle, dataset, &run_cfg)?;
        runs.push(GridRun {
            lr,
            final_loss: log.final_epoch_mean_loss(),
            log,
        });
        bundles.push(bundle);
    }
    let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (r.lr, r.final_loss)).collect();
    let best_index = pick_best(&pairs);
    let best_bundle = bundles.swap_remove(best_index);
    Ok(GridOutcome {
        best_index,
        best_bundle,
        runs,
    })
}
