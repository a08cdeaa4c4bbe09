//! Implementations of the gen / train / verify / report subcommands.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use pipa_core::grad::GradError;
use pipa_core::losses::{LossConfig, LossError, LossKind};
use pipa_core::models::{fit_sft, ModelBundle, ModelError, SftSelector, TabularPolicy, ValueTable};
use pipa_core::seqdata::{
    decouple_pairs, pair_by_problem, read_jsonl, DataError, Dataset, Level,
};
use pipa_core::synthworld::{World, WorldError};
use pipa_core::trainer::{grid_search, train, MetricsLog, TrainConfig, TrainError};
use pipa_core::verify::{
    check_dpo_equivalence, check_kto_equivalence, gradient_check_suite, recovery_experiment,
    step_vs_answer_ablation, threshold_sweep, PriorMode, RecoverySpec, VerificationReport,
    VerifyError,
};

use crate::config::{ConfigError, ExperimentConfig, WorldKind};
use crate::plot::{line_plot, Series};

/// Errors carrying their process exit code: 2 for usage/config problems,
/// 3 for numeric failures. Check failures exit 1 via [`cmd_verify`]'s flag.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

fn grad_is_numeric(e: &GradError) -> bool {
    matches!(e, GradError::Domain { .. } | GradError::NonFinite { .. })
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> CliError {
        if grad_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Grad(g) => g.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> CliError {
        match e {
            LossError::PriorUnderflow { .. } => CliError::Numeric(e.to_string()),
            LossError::Grad(g) => g.into(),
            LossError::Model(m) => m.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        CliError::Invalid(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Loss(l) => l.into(),
            TrainError::Grad(g) => g.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> CliError {
        match e {
            WorldError::Model(m) => m.into(),
            WorldError::Data(d) => d.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> CliError {
        match e {
            VerifyError::Train(t) => t.into(),
            VerifyError::Model(m) => m.into(),
            VerifyError::World(w) => w.into(),
            VerifyError::Data(d) => d.into(),
            VerifyError::Loss(l) => l.into(),
            VerifyError::Grad(g) => g.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn build_world(cfg: &ExperimentConfig) -> Result<World, CliError> {
    let world = match cfg.world_kind {
        WorldKind::Random => World::make(
            cfg.world_seed,
            cfg.world_prompts,
            cfg.world_vocab,
            cfg.world_answer_len,
        )?,
        WorldKind::Changepoint => World::make_changepoint(
            cfg.world_seed,
            cfg.world_prompts,
            cfg.world_vocab,
            cfg.world_answer_len,
        )?,
    };
    Ok(world)
}

fn dataset_file(level: Level, paired: bool) -> String {
    let base = match level {
        Level::Answer => "data_answer",
        Level::Step => "data_step",
    };
    if paired {
        format!("{base}_paired.jsonl")
    } else {
        format!("{base}.jsonl")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate the world and dataset files plus a digest manifest.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();

    let world = build_world(cfg)?;
    artifacts.push(("world.txt".into(), world.to_text().into_bytes()));

    for level in cfg.data_level.levels() {
        let data = world.sample_dataset(cfg.data_n, level, cfg.data_seed)?;
        artifacts.push((
            dataset_file(level, false),
            pipa_core::seqdata::to_jsonl(&data).into_bytes(),
        ));
        if cfg.data_pairing {
            let seed = cfg.data_pair_seed.expect("validated by config");
            let paired = pair_by_problem(&data, seed)?;
            artifacts.push((
                dataset_file(level, true),
                pipa_core::seqdata::to_jsonl(&paired).into_bytes(),
            ));
        }
    }

    artifacts.sort_by(|a, b| a.0.cmp(&b.0));
    let mut manifest = String::new();
    for (name, bytes) in &artifacts {
        std::fs::write(out.join(name), bytes)?;
        manifest.push_str(&format!("{}  {}\n", sha256_hex(bytes), name));
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    Ok(())
}

fn read_artifact(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|_| {
        CliError::MissingArtifact(format!("{} (run `pipa gen` first)", path.display()))
    })
}

fn pick_level(cfg: &ExperimentConfig) -> Level {
    let step_kinds = [
        LossKind::StepDpoL0,
        LossKind::StepDpoL1,
        LossKind::StepKto,
        LossKind::StepKtoL1,
    ];
    match cfg.data_level.levels().as_slice() {
        [single] => *single,
        _ => {
            if step_kinds.contains(&cfg.train_loss) {
                Level::Step
            } else {
                Level::Answer
            }
        }
    }
}

fn load_training_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let level = pick_level(cfg);
    let kind = cfg.train_loss;
    let out = &cfg.out_dir;
    if kind.is_paired() {
        let path = out.join(dataset_file(level, true));
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "{} (paired losses need `data.pairing = true` at gen time)",
                path.display()
            )));
        }
        return Ok(read_jsonl(&path)?);
    }
    if cfg.data_pairing {
        // Unpaired losses on the paired subset mirror the decoupling recipe.
        let path = out.join(dataset_file(level, true));
        if path.exists() {
            let paired = read_jsonl(&path)?;
            return Ok(decouple_pairs(&paired)?);
        }
    }
    let path = out.join(dataset_file(level, false));
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!("{}", path.display())));
    }
    Ok(read_jsonl(&path)?)
}

fn loss_config(cfg: &ExperimentConfig) -> LossConfig {
    let mut loss = LossConfig::new(cfg.train_loss);
    loss.beta = cfg.train_beta;
    loss.epsilon = cfg.train_epsilon;
    loss.sft_coeff = cfg.train_sft_coeff;
    loss.z_mode = cfg.train_z_mode;
    loss.z0 = cfg.train_z0;
    loss
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        loss: loss_config(cfg),
        optimizer: cfg.train_optimizer,
        lr: cfg.train_lr,
        batch_size: cfg.train_batch_size,
        epochs: cfg.train_epochs,
        seed: cfg.train_seed,
        grid: cfg.train_grid.clone(),
        probe_seed: cfg.model_init_seed,
        probe_size: cfg.train_probe_size,
    }
}

fn build_training_bundle(
    cfg: &ExperimentConfig,
    world: &World,
    dataset: &Dataset,
) -> Result<ModelBundle, CliError> {
    let prompts = world.prompts();
    let shape = (world.vocab(), world.answer_len(), cfg.model_window);
    if cfg.train_loss == LossKind::Sft {
        // The SFT stage itself: train from a uniform start; the prior slot is
        // an unused uniform placeholder.
        let policy = TabularPolicy::uniform(prompts, shape.0, shape.1, shape.2)?;
        let value = ValueTable::new(prompts, shape.0, shape.1, shape.2)?;
        let prior = TabularPolicy::uniform(prompts, shape.0, shape.1, shape.2)?.frozen_copy();
        return Ok(ModelBundle::new(policy, value, prior)?);
    }
    let fit_data;
    let unpaired: &Dataset = if dataset.is_paired() {
        fit_data = decouple_pairs(dataset)?;
        &fit_data
    } else {
        dataset
    };
    let prior = match cfg.prior_mode {
        PriorMode::ExactMarginal => world.marginal_policy(cfg.model_window)?,
        PriorMode::ExactNegative => world.conditional_policy(false, cfg.model_window)?,
        mode => {
            let selector = match mode {
                PriorMode::SftPositive => SftSelector::PositiveOnly,
                PriorMode::SftAll => SftSelector::All,
                _ => SftSelector::NegativeOnly,
            };
            let init = TabularPolicy::uniform(prompts, shape.0, shape.1, shape.2)?;
            fit_sft(&init, unpaired, selector, cfg.prior_epochs, cfg.prior_lr)?
        }
    };
    Ok(ModelBundle::fresh_from_prior(prior)?)
}

/// Train per the config and write checkpoints plus the metrics CSV.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let world = World::from_text(&read_artifact(&out.join("world.txt"))?)?;
    let dataset = load_training_dataset(cfg)?;
    let bundle = build_training_bundle(cfg, &world, &dataset)?;
    let tcfg = train_config(cfg);

    let (trained, log) = if cfg.train_grid.is_some() {
        let outcome = grid_search(|| bundle.clone(), &dataset, &tcfg)?;
        let mut grid_csv = String::from("lr,final_loss\n");
        for run in &outcome.runs {
            grid_csv.push_str(&format!("{},{}\n", run.lr, run.final_loss));
        }
        std::fs::write(out.join("grid.csv"), grid_csv)?;
        let best = outcome.runs[outcome.best_index].log.clone();
        (outcome.best_bundle, best)
    } else {
        let mut bundle = bundle;
        let log = train(&mut bundle, &dataset, &tcfg)?;
        (bundle, log)
    };

    std::fs::write(out.join("policy.txt"), trained.policy.to_text())?;
    std::fs::write(out.join("value.txt"), trained.value.to_text())?;
    std::fs::write(out.join("prior.txt"), trained.prior.to_text())?;
    std::fs::write(out.join("metrics.csv"), log.to_csv())?;
    Ok(())
}

pub const KNOWN_CHECKS: &[&str] = &[
    "dpo-equivalence",
    "kto-equivalence",
    "gradient-check",
    "recovery-m",
    "recovery-n",
    "clip-rate",
    "step-vs-answer",
    "threshold-sweep",
];

fn run_check(cfg: &ExperimentConfig, name: &str) -> Result<VerificationReport, CliError> {
    let recovery = |kind: LossKind, prior: PriorMode| -> Result<_, CliError> {
        let world = World::make(
            cfg.world_seed,
            cfg.world_prompts,
            cfg.world_vocab,
            cfg.world_answer_len,
        )?;
        let spec = RecoverySpec {
            kind,
            n: cfg.data_n,
            data_seed: cfg.data_seed,
            prior,
            window: cfg.model_window,
            freeze_value: false,
        };
        let mut tcfg = train_config(cfg);
        tcfg.loss.kind = kind;
        Ok(recovery_experiment(&world, &spec, &tcfg)?)
    };
    let report = match name {
        "dpo-equivalence" => check_dpo_equivalence(cfg.verify_seed, cfg.verify_trials),
        "kto-equivalence" => check_kto_equivalence(cfg.verify_seed, cfg.verify_trials),
        "gradient-check" => gradient_check_suite(100, 1e-5, cfg.verify_seed)?,
        "recovery-m" => recovery(LossKind::PipaM, PriorMode::ExactMarginal)?.report,
        "recovery-n" => recovery(LossKind::PipaN, PriorMode::ExactNegative)?.report,
        "clip-rate" => {
            let outcome = recovery(LossKind::PipaM, PriorMode::ExactMarginal)?;
            let clip = outcome
                .log
                .clip_epoch_means()
                .last()
                .copied()
                .unwrap_or(0.0);
            VerificationReport::gated("clip-rate", cfg.data_n, clip, 0.05)
                .with_stat("clip_rate_final", clip)
                .with_stat("tv_model", outcome.tv_model)
        }
        "step-vs-answer" => {
            let world = World::make_changepoint(
                cfg.world_seed,
                cfg.world_prompts,
                cfg.world_vocab,
                cfg.world_answer_len.max(2),
            )?;
            let seeds: Vec<u64> = (0..5).map(|i| cfg.verify_seed.wrapping_add(i)).collect();
            let mut tcfg = train_config(cfg);
            tcfg.loss.kind = LossKind::Dpo;
            step_vs_answer_ablation(&world, cfg.data_n, &seeds, &tcfg, cfg.model_window)?.report
        }
        "threshold-sweep" => {
            let world = World::make_changepoint(
                cfg.world_seed,
                cfg.world_prompts,
                cfg.world_vocab,
                cfg.world_answer_len.max(2),
            )?;
            let mut tcfg = train_config(cfg);
            tcfg.loss.kind = LossKind::PipaM;
            threshold_sweep(
                &world,
                &[-0.5, 0.0, 0.5, 0.9],
                cfg.data_n,
                &tcfg,
                cfg.model_window,
                cfg.data_seed,
            )?
            .1
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown check `{other}`; known checks: {}",
                KNOWN_CHECKS.join(", ")
            )))
        }
    };
    Ok(report)
}

/// Run the selected verification checks; returns whether all passed. The
/// report CSV lands in the output directory either way.
pub fn cmd_verify(cfg: &ExperimentConfig, only: Option<&str>) -> Result<bool, CliError> {
    let checks: Vec<String> = match only {
        Some(name) => vec![name.to_string()],
        None => cfg.verify_checks.clone(),
    };
    if checks.is_empty() {
        return Err(CliError::Usage("no verification checks selected".into()));
    }
    for check in &checks {
        if !KNOWN_CHECKS.contains(&check.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown check `{check}`; known checks: {}",
                KNOWN_CHECKS.join(", ")
            )));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from(VerificationReport::CSV_HEADER);
    csv.push('\n');
    let mut all_passed = true;
    for check in &checks {
        let report = run_check(cfg, check)?;
        println!("{}", report.summary_line());
        csv.push_str(&report.csv_row());
        csv.push('\n');
        all_passed &= report.passed;
    }
    std::fs::write(cfg.out_dir.join("verify_report.csv"), csv)?;
    Ok(all_passed)
}

/// Plot value/reward trajectories for one or more run directories and write
/// a text summary of the final metrics.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut value_series = Vec::new();
    let mut reward_series = Vec::new();
    let mut summary = String::new();
    for run in runs {
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let csv_path = run.join("metrics.csv");
        let text = std::fs::read_to_string(&csv_path).map_err(|_| {
            CliError::MissingArtifact(format!("{} (run `pipa train` first)", csv_path.display()))
        })?;
        let log = MetricsLog::from_csv(&text).map_err(|e| CliError::Invalid(e.to_string()))?;
        value_series.push(Series {
            name: name.clone(),
            points: log
                .rows
                .iter()
                .map(|r| (r.step as f64, r.value_geo_mean))
                .collect(),
            dashed: false,
        });
        reward_series.push(Series {
            name: format!("{name} reward+"),
            points: log.rows.iter().map(|r| (r.step as f64, r.reward_pos)).collect(),
            dashed: false,
        });
        reward_series.push(Series {
            name: format!("{name} reward-"),
            points: log.rows.iter().map(|r| (r.step as f64, r.reward_neg)).collect(),
            dashed: true,
        });
        match log.rows.last() {
            Some(last) => summary.push_str(&format!(
                "run {name}: steps={} loss={} value_geo_mean={} reward_pos={} reward_neg={} clip_rate={}\n",
                log.rows.len(), last.loss, last.value_geo_mean, last.reward_pos,
                last.reward_neg, last.clip_rate
            )),
            None => summary.push_str(&format!("run {name}: no recorded steps\n")),
        }
    }
    std::fs::write(
        out.join("value_trajectory.svg"),
        line_plot(
            "value likelihood trajectory",
            "step",
            "geometric mean p(c|x,y)",
            &value_series,
        ),
    )?;
    std::fs::write(
        out.join("reward_trajectory.svg"),
        line_plot(
            "implicit reward trajectory",
            "step",
            "log(f/prior) on probes",
            &reward_series,
        ),
    )?;
    std::fs::write(out.join("summary.txt"), summary)?;
    Ok(())
}
