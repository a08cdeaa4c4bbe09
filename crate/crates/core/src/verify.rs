//! Numeric verification of the equivalence identities and statistical
//! recovery claims backing the loss zoo.
//!
//! The two theorem checks isolate the algebra on raw positive reals: the
//! pairwise logistic loss must equal the Bayes-form negative log posterior
//! under the negative-conditional prior constraint, and the KTO sigmoid form
//! must equal the Bayes form with class-odds e^z. Recovery experiments train
//! PIPA on samples from a known world and compare the learned conditional
//! and value tables against the world's exact oracles, with a count-based
//! MLE as the tolerance calibration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::grad::{check_gradient, sigmoid, GradError, Tape};
use crate::losses::{build_record_loss, LossConfig, LossError, LossKind, RecordRef};
use crate::models::{fit_sft, ModelBundle, ModelError, SftSelector, TabularPolicy, ValueTable};
use crate::seqdata::{
    expand_step_labels, labels_from_q, pair_by_problem, DataError, Dataset, Example, Level,
    PairedExample, Token,
};
use crate::synthworld::{World, WorldError};
use crate::trainer::{train, MetricsLog, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("verification not applicable: {0}")]
    Unsupported(String),
    #[error("count oracle undefined: prompt {0:?} has no positive samples")]
    OracleUndefined(Vec<Token>),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// One check's outcome: pass iff the worst discrepancy clears the tolerance
/// (auxiliary gates fold into `max_discrepancy` where a check has several).
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub name: String,
    pub trials: usize,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub stats: Vec<(String, f64)>,
}

impl VerificationReport {
    pub fn gated(name: &str, trials: usize, discrepancy: f64, tolerance: f64) -> Self {
        VerificationReport {
            name: name.to_string(),
            trials,
            max_discrepancy: discrepancy,
            tolerance,
            passed: discrepancy <= tolerance,
            stats: Vec::new(),
        }
    }

    pub fn with_stat(mut self, key: &str, value: f64) -> Self {
        self.stats.push((key.to_string(), value));
        self
    }

    pub fn summary_line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let stats = if self.stats.is_empty() {
            String::new()
        } else {
            let body: Vec<String> = self
                .stats
                .iter()
                .map(|(k, v)| format!("{k}={v:.6}"))
                .collect();
            format!(" [{}]", body.join(", "))
        };
        format!(
            "{status} {name}: max discrepancy {disc:.3e} vs tolerance {tol:.3e} over {trials} trials{stats}",
            name = self.name,
            disc = self.max_discrepancy,
            tol = self.tolerance,
            trials = self.trials,
        )
    }

    pub const CSV_HEADER: &'static str = "check,trials,max_discrepancy,tolerance,passed,stats";

    pub fn csv_row(&self) -> String {
        let stats: Vec<String> = self.stats.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{},{},{},{},{},{}",
            self.name,
            self.trials,
            self.max_discrepancy,
            self.tolerance,
            self.passed,
            stats.join(";")
        )
    }
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Pairwise logistic loss vs Bayes-form negative log posterior on random
/// positive reals standing in for the four sequence probabilities.
pub fn check_dpo_equivalence(seed: u64, trials: usize) -> VerificationReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p_plus: f64 = rng.random_range(1e-3..1.0);
        let p_minus: f64 = rng.random_range(1e-3..1.0);
        let q_plus: f64 = rng.random_range(1e-3..1.0);
        let q_minus: f64 = rng.random_range(1e-3..1.0);
        let margin = (p_plus * q_minus).ln() - (p_minus * q_plus).ln();
        let logistic = -sigmoid(margin).ln();
        let bayes = -(p_plus * q_minus / (p_plus * q_minus + q_plus * p_minus)).ln();
        worst = worst.max((logistic - bayes).abs());
    }
    VerificationReport::gated("dpo-equivalence", trials, worst, 1e-10)
}

/// KTO's sigmoid form vs the Bayes form with class odds e^z, both labels.
pub fn check_kto_equivalence(seed: u64, trials: usize) -> VerificationReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f: f64 = rng.random_range(1e-4..1.0);
        let p: f64 = rng.random_range(1e-4..1.0);
        let z: f64 = rng.random_range(-1.0..2.0);
        let h = (f / p).ln();
        let sig_pos = sigmoid(h - z);
        let bayes_pos = f / (f + p * z.exp());
        worst = worst.max((sig_pos - bayes_pos).abs());
        let sig_neg = sigmoid(-h + z);
        let bayes_neg = 1.0 - bayes_pos;
        worst = worst.max((sig_neg - bayes_neg).abs());
    }
    VerificationReport::gated("kto-equivalence", trials, worst, 1e-10)
}

fn random_step_starts<R: Rng>(rng: &mut R, answer_len: usize) -> Vec<usize> {
    let mut starts = vec![0usize];
    for t in 1..answer_len {
        if rng.random::<f64>() < 0.5 {
            starts.push(t);
        }
    }
    starts
}

/// Random bundle plus a kind-compatible random record, for gradient checks.
fn random_grad_case(
    kind: LossKind,
    seed: u64,
) -> Result<(ModelBundle, Dataset, LossConfig, Option<f64>), VerifyError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let prompts: Vec<Vec<Token>> = vec![vec![0]];
    let (vocab, answer_len, window) = (3usize, 3usize, 2usize);
    let policy = TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, rng.random())?;
    let prior = TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, rng.random())?
        .frozen_copy();
    let value = ValueTable::random(&prompts, vocab, answer_len, window, 1.0, rng.random())?;
    let bundle = ModelBundle::new(policy, value, prior)?;

    let mut cfg = LossConfig::new(kind);
    cfg.beta = 0.1;
    let random_answer = |rng: &mut ChaCha12Rng| -> Vec<Token> {
        (0..answer_len)
            .map(|_| rng.random_range(0..vocab as u32))
            .collect()
    };
    let z = Some(rng.random_range(-0.5..1.5));
    let dataset = if kind.is_paired() {
        let chosen = Example::new(
            vec![0],
            random_answer(&mut rng),
            vec![1; answer_len],
            None,
        )?;
        let labels: Vec<u8> = (0..answer_len).map(|_| rng.random_range(0..2) as u8).collect();
        let rejected = Example::new(vec![0], random_answer(&mut rng), labels, None)?;
        Dataset::paired(Level::Step, vec![PairedExample::new(chosen, rejected)?])?
    } else {
        let (labels, starts) = match kind {
            LossKind::Kto => {
                let c = rng.random_range(0..2) as u8;
                (vec![c; answer_len], None)
            }
            LossKind::StepKto => {
                let starts = random_step_starts(&mut rng, answer_len);
                let step_labels: Vec<u8> =
                    (0..starts.len()).map(|_| rng.random_range(0..2) as u8).collect();
                (
                    expand_step_labels(&step_labels, &starts, answer_len)?,
                    Some(starts),
                )
            }
            LossKind::Sft => (vec![1; answer_len], None),
            _ => (
                (0..answer_len).map(|_| rng.random_range(0..2) as u8).collect(),
                None,
            ),
        };
        let ex = Example::new(vec![0], random_answer(&mut rng), labels, starts)?;
        Dataset::unpaired(
            if ex.has_constant_labels() { Level::Answer } else { Level::Step },
            vec![ex],
        )?
    };
    Ok((bundle, dataset, cfg, z))
}

/// Central-difference gradient check of every loss kind over seeded random
/// parameterizations; the reported discrepancy is the worst relative error.
pub fn gradient_check_suite(
    cases_per_kind: usize,
    eps: f64,
    seed: u64,
) -> Result<VerificationReport, VerifyError> {
    let mut worst = 0.0f64;
    let mut report = VerificationReport::gated(
        "gradient-check",
        cases_per_kind * LossKind::ALL.len(),
        0.0,
        1e-5,
    );
    for kind in LossKind::ALL {
        let mut kind_worst = 0.0f64;
        for case in 0..cases_per_kind {
            let case_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((case * LossKind::ALL.len()) as u64)
                .wrapping_add(kind as u64);
            let (bundle, dataset, cfg, z) = random_grad_case(kind, case_seed)?;
            let record = match &dataset {
                Dataset::Unpaired { examples, .. } => RecordRef::Unpaired(&examples[0]),
                Dataset::Paired { pairs, .. } => RecordRef::Paired(&pairs[0]),
            };
            let mut tape = Tape::new();
            let root = build_record_loss(&mut tape, &bundle, record, &cfg, z)?;
            let err = check_gradient(&tape, root, eps)?;
            kind_worst = kind_worst.max(err);
        }
        report = report.with_stat(kind.as_str(), kind_worst);
        worst = worst.max(kind_worst);
    }
    report.max_discrepancy = worst;
    report.passed = worst <= report.tolerance;
    Ok(report)
}

/// Where the bundle's frozen prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// The world's true marginal p(y|x), injected exactly.
    ExactMarginal,
    /// The world's true negative conditional p(y|x,c=0), injected exactly.
    ExactNegative,
    /// SFT fit on positive samples (the default two-stage recipe).
    SftPositive,
    /// SFT fit on all samples (marginal approximation).
    SftAll,
    /// SFT fit on negative samples (negative-conditional approximation).
    SftNegative,
}

impl PriorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMode::ExactMarginal => "exact-marginal",
            PriorMode::ExactNegative => "exact-negative",
            PriorMode::SftPositive => "sft-positive",
            PriorMode::SftAll => "sft-all",
            PriorMode::SftNegative => "sft-negative",
        }
    }

    pub fn parse(s: &str) -> Option<PriorMode> {
        match s {
            "exact-marginal" => Some(PriorMode::ExactMarginal),
            "exact-negative" => Some(PriorMode::ExactNegative),
            "sft-positive" => Some(PriorMode::SftPositive),
            "sft-all" => Some(PriorMode::SftAll),
            "sft-negative" => Some(PriorMode::SftNegative),
            _ => None,
        }
    }
}

/// Build a frozen prior for the given mode; SFT modes fit a uniform-init
/// policy on the dataset with the matching selector.
pub fn build_prior(
    world: &World,
    data: &Dataset,
    mode: PriorMode,
    window: usize,
    fit_epochs: usize,
    fit_lr: f64,
) -> Result<TabularPolicy, VerifyError> {
    let prior = match mode {
        PriorMode::ExactMarginal => world.marginal_policy(window)?,
        PriorMode::ExactNegative => world.conditional_policy(false, window)?,
        PriorMode::SftPositive | PriorMode::SftAll | PriorMode::SftNegative => {
            let selector = match mode {
                PriorMode::SftPositive => SftSelector::PositiveOnly,
                PriorMode::SftAll => SftSelector::All,
                _ => SftSelector::NegativeOnly,
            };
            let init =
                TabularPolicy::uniform(world.prompts(), world.vocab(), world.answer_len(), window)?;
            fit_sft(&init, data, selector, fit_epochs, fit_lr)?
        }
    };
    Ok(prior)
}

/// Mean total-variation distance between the policy's sequence distribution
/// and the world's true positive conditional, averaged over prompts.
pub fn mean_tv_to_positive(world: &World, policy: &TabularPolicy) -> Result<f64, VerifyError> {
    let t = world.answer_len();
    let mut total = 0.0;
    for prompt in world.prompts() {
        let model = policy.enumerate_sequences(prompt, t)?;
        let truth = world.positive_policy().enumerate_sequences(prompt, t)?;
        let tv: f64 = model
            .iter()
            .zip(truth.iter())
            .map(|((_, p), (_, q))| (p - q).abs())
            .sum::<f64>()
            * 0.5;
        total += tv;
    }
    Ok(total / world.num_prompts() as f64)
}

/// Count-based brute-force MLE of p(y|x,c=1) from the positive samples,
/// scored as mean TV against the truth. This calibrates the recovery
/// tolerance: a gate PIPA must clear is only meaningful if plain counting
/// clears it on the same samples.
pub fn count_mle_tv(world: &World, data: &Dataset) -> Result<f64, VerifyError> {
    let t = world.answer_len();
    let examples = data.examples()?;
    let mut total = 0.0;
    for prompt in world.prompts() {
        let truth = world.positive_policy().enumerate_sequences(prompt, t)?;
        let mine: Vec<&Example> = examples
            .iter()
            .filter(|e| &e.prompt == prompt && e.is_positive())
            .collect();
        if mine.is_empty() {
            return Err(VerifyError::OracleUndefined(prompt.clone()));
        }
        let n = mine.len() as f64;
        let tv: f64 = truth
            .iter()
            .map(|(answer, q)| {
                let count = mine.iter().filter(|e| &e.answer == answer).count() as f64;
                (count / n - q).abs()
            })
            .sum::<f64>()
            * 0.5;
        total += tv;
    }
    Ok(total / world.num_prompts() as f64)
}

/// Mean absolute error of the value table against the world's exact
/// prefix posterior, over the prefixes of up to `cap` dataset examples.
pub fn value_table_error(
    world: &World,
    bundle: &ModelBundle,
    data: &Dataset,
    level: Level,
    cap: usize,
) -> Result<f64, VerifyError> {
    let examples = data.examples()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples.iter().take(cap) {
        for t in 0..ex.answer.len() {
            let g = bundle.value.g(&ex.prompt, &ex.answer[..t])?;
            let oracle = world.value_posterior(&ex.prompt, &ex.answer[..t], level)?;
            total += (g - oracle).abs();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// The same error with the value model pinned at 0.5 (the no-value ablation).
pub fn fixed_half_value_error(
    world: &World,
    data: &Dataset,
    level: Level,
    cap: usize,
) -> Result<f64, VerifyError> {
    let examples = data.examples()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples.iter().take(cap) {
        for t in 0..ex.answer.len() {
            let oracle = world.value_posterior(&ex.prompt, &ex.answer[..t], level)?;
            total += (0.5 - oracle).abs();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Recovery experiment setup.
#[derive(Debug, Clone)]
pub struct RecoverySpec {
    pub kind: LossKind,
    pub n: usize,
    pub data_seed: u64,
    pub prior: PriorMode,
    pub window: usize,
    /// Pin g at 0.5 (value table frozen) for the no-value ablation.
    pub freeze_value: bool,
}

/// Recovery experiment result bundle.
#[derive(Debug)]
pub struct RecoveryOutcome {
    pub report: VerificationReport,
    pub tv_model: f64,
    pub tv_count_oracle: f64,
    pub g_mae: f64,
    pub log: MetricsLog,
    pub bundle: ModelBundle,
}

/// Train PIPA on samples from the world and score the learned conditional
/// against the exact oracles. The report folds the count-oracle calibration
/// into the gate: both the model TV and the oracle TV must clear 0.05.
pub fn recovery_experiment(
    world: &World,
    spec: &RecoverySpec,
    cfg: &TrainConfig,
) -> Result<RecoveryOutcome, VerifyError> {
    if !spec.kind.uses_value_model() {
        return Err(VerifyError::Unsupported(format!(
            "recovery experiment targets the PIPA losses, not `{}`",
            spec.kind
        )));
    }
    let data = world.sample_dataset(spec.n, Level::Answer, spec.data_seed)?;
    let prior = build_prior(world, &data, spec.prior, spec.window, 400, 0.5)?;
    let mut bundle = ModelBundle::fresh_from_prior(prior)?;
    if spec.freeze_value {
        bundle.value.set_frozen(true);
    }
    let mut run_cfg = cfg.clone();
    run_cfg.loss.kind = spec.kind;
    let log = train(&mut bundle, &data, &run_cfg)?;
    let tv_model = mean_tv_to_positive(world, &bundle.policy)?;
    let tv_count_oracle = count_mle_tv(world, &data)?;
    let g_mae = value_table_error(world, &bundle, &data, Level::Answer, 1000)?;
    let clip_final = log.clip_epoch_means().last().copied().unwrap_or(0.0);
    let value_epochs = log.value_epoch_means();
    let name = format!("recovery-{}-{}", spec.kind, spec.prior.as_str());
    let report = VerificationReport::gated(
        &name,
        spec.n,
        tv_model.max(tv_count_oracle),
        0.05,
    )
    .with_stat("tv_model", tv_model)
    .with_stat("tv_count_oracle", tv_count_oracle)
    .with_stat("g_mae", g_mae)
    .with_stat("clip_rate_final", clip_final)
    .with_stat("value_first_step", log.rows.first().map(|r| r.value_geo_mean).unwrap_or(f64::NAN))
    .with_stat("value_first_epoch", value_epochs.first().copied().unwrap_or(f64::NAN))
    .with_stat("value_final_epoch", value_epochs.last().copied().unwrap_or(f64::NAN));
    Ok(RecoveryOutcome {
        report,
        tv_model,
        tv_count_oracle,
        g_mae,
        log,
        bundle,
    })
}

/// Per-epoch PIPA-M clip-activation rates from a training log.
pub fn clip_rate_survey(log: &MetricsLog) -> Vec<f64> {
    log.clip_epoch_means()
}

/// Ablation outcome: per-seed final positive-probe rewards for the two arms.
#[derive(Debug)]
pub struct AblationOutcome {
    pub per_seed: Vec<(f64, f64)>,
    pub median_answer_dpo: f64,
    pub median_step_dpo_l1: f64,
    pub report: VerificationReport,
}

/// Train answer-level DPO and Step-DPO-L1 on identical paired samples and
/// compare the final implicit reward on positive probes (median over seeds).
pub fn step_vs_answer_ablation(
    world: &World,
    n: usize,
    seeds: &[u64],
    cfg: &TrainConfig,
    window: usize,
) -> Result<AblationOutcome, VerifyError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = world.sample_dataset(n, Level::Step, seed)?;
        let paired = pair_by_problem(&data, seed.wrapping_mul(0x9e37_79b9))?;
        if paired.is_empty() {
            return Err(VerifyError::Unsupported(
                "pairing produced no pairs; the world is too imbalanced".into(),
            ));
        }
        let prior = build_prior(world, &data, PriorMode::SftPositive, window, 400, 0.5)?;
        let mut finals = Vec::with_capacity(2);
        for kind in [LossKind::Dpo, LossKind::StepDpoL1] {
            let mut bundle = ModelBundle::fresh_from_prior(prior.clone())?;
            let mut run_cfg = cfg.clone();
            run_cfg.loss.kind = kind;
            let log = train(&mut bundle, &paired, &run_cfg)?;
            finals.push(log.rows.last().map(|r| r.reward_pos).unwrap_or(f64::NAN));
        }
        per_seed.push((finals[0], finals[1]));
    }
    let dpo: Vec<f64> = per_seed.iter().map(|&(d, _)| d).collect();
    let step: Vec<f64> = per_seed.iter().map(|&(_, s)| s).collect();
    let median_answer_dpo = median(&dpo);
    let median_step_dpo_l1 = median(&step);
    let discrepancy = median_answer_dpo - median_step_dpo_l1;
    let mut report =
        VerificationReport::gated("step-vs-answer", seeds.len(), discrepancy, 0.0)
            .with_stat("median_reward_pos_dpo", median_answer_dpo)
            .with_stat("median_reward_pos_step_dpo_l1", median_step_dpo_l1);
    // The claim is strictly directional.
    report.passed = median_step_dpo_l1 > median_answer_dpo;
    Ok(AblationOutcome {
        per_seed,
        median_answer_dpo,
        median_step_dpo_l1,
        report,
    })
}

/// One threshold sweep point: relabel negatives by thresholding the
/// oracle-derived q values, retrain, and score recovery.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tv: f64,
}

/// Sweep the q-value threshold used to mark correct steps inside incorrect
/// answers (the labels of correct answers never change). Reports the
/// recovery TV per threshold and whether the best point is interior.
pub fn threshold_sweep(
    world: &World,
    thresholds: &[f64],
    n: usize,
    cfg: &TrainConfig,
    window: usize,
    data_seed: u64,
) -> Result<(Vec<SweepPoint>, VerificationReport), VerifyError> {
    let data = world.sample_dataset(n, Level::Step, data_seed)?;
    let examples = data.examples()?;
    let prior = build_prior(world, &data, PriorMode::ExactMarginal, window, 0, 0.0)?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut relabeled = Vec::with_capacity(examples.len());
        for ex in examples {
            let q = ex
                .q_values
                .as_ref()
                .ok_or_else(|| VerifyError::Unsupported("sweep needs q values".into()))?;
            let step_labels = labels_from_q(q, ex.is_positive(), threshold)?;
            let starts = ex
                .step_starts
                .clone()
                .unwrap_or_else(|| (0..ex.answer.len()).collect());
            let labels = expand_step_labels(&step_labels, &starts, ex.answer.len())?;
            relabeled.push(
                Example::new(ex.prompt.clone(), ex.answer.clone(), labels, Some(starts))?
                    .with_q_values(q.clone())?,
            );
        }
        let sweep_data = Dataset::unpaired(Level::Step, relabeled)?;
        let mut bundle = ModelBundle::fresh_from_prior(prior.clone())?;
        let mut run_cfg = cfg.clone();
        run_cfg.loss.kind = LossKind::PipaM;
        train(&mut bundle, &sweep_data, &run_cfg)?;
        points.push(SweepPoint {
            threshold,
            tv: mean_tv_to_positive(world, &bundle.policy)?,
        });
    }
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.tv.partial_cmp(&b.1.tv).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let interior = best > 0 && best + 1 < points.len();
    let worst_tv = points.iter().map(|p| p.tv).fold(0.0f64, f64::max);
    let mut report = VerificationReport::gated("threshold-sweep", thresholds.len(), worst_tv, 1.0)
        .with_stat("best_threshold", points[best].threshold)
        .with_stat("best_tv", points[best].tv)
        .with_stat("interior_optimum", f64::from(u8::from(interior)));
    for p in &points {
        report = report.with_stat(&format!("tv_at_{}", p.threshold), p.tv);
    }
    Ok((points, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::sigmoid;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dpo_identity_holds_and_is_scale_free() {
        let report = check_dpo_equivalence(7, 1000);
        assert!(report.passed, "{}", report.summary_line());
        assert!(report.max_discrepancy < 1e-10);

        // Symmetric inputs give ln 2 on both sides.
        let margin = 0.0f64;
        assert_abs_diff_eq!(-sigmoid(margin).ln(), 2.0f64.ln(), epsilon = 1e-15);

        // Scaling all four probabilities by a common factor changes nothing.
        let (a, b, c, d) = (0.2, 0.05, 0.5, 0.3);
        let value = |s: f64| {
            let m = ((a * s) * (d * s)).ln() - ((b * s) * (c * s)).ln();
            -sigmoid(m).ln()
        };
        assert_abs_diff_eq!(value(1.0), value(37.5), epsilon = 1e-12);
    }

    #[test]
    fn kto_identity_holds_with_complement() {
        let report = check_kto_equivalence(11, 1000);
        assert!(report.passed, "{}", report.summary_line());

        // z = 0 and f = prior pin both sides at one half.
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
        let f = 0.125;
        let p = 0.125;
        assert_abs_diff_eq!(f / (f + p * 1.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gradient_suite_small_sample() {
        let report = gradient_check_suite(10, 1e-5, 5).unwrap();
        assert!(report.passed, "{}", report.summary_line());
        assert_eq!(report.stats.len(), LossKind::ALL.len());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn model_backed_dpo_equivalence() {
        // The tape-built DPO loss at beta = 1 equals the Bayes form computed
        // from sequence probabilities.
        use crate::losses::dpo_loss;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let prompts: Vec<Vec<Token>> = vec![vec![0]];
            let policy =
                TabularPolicy::random(&prompts, 3, 2, 2, 1.0, trial as u64).unwrap();
            let prior = TabularPolicy::random(&prompts, 3, 2, 2, 1.0, 10_000 + trial as u64)
                .unwrap()
                .frozen_copy();
            let value = ValueTable::new(&prompts, 3, 2, 2).unwrap();
            let bundle = ModelBundle::new(policy, value, prior).unwrap();
            let answer = |rng: &mut ChaCha12Rng| -> Vec<Token> {
                (0..2).map(|_| rng.random_range(0..3u32)).collect()
            };
            let chosen = Example::new(vec![0], answer(&mut rng), vec![1, 1], None).unwrap();
            let rejected = Example::new(vec![0], answer(&mut rng), vec![0, 0], None).unwrap();
            let pair = PairedExample::new(chosen, rejected).unwrap();

            let mut cfg = LossConfig::new(LossKind::Dpo);
            cfg.beta = 1.0;
            let mut tape = Tape::new();
            let root = dpo_loss(&mut tape, &bundle, &pair, &cfg).unwrap();
            let logistic = tape.value(root);

            let pp = bundle
                .policy
                .sequence_prob(&[0], &pair.chosen.answer)
                .unwrap();
            let pm = bundle
                .policy
                .sequence_prob(&[0], &pair.rejected.answer)
                .unwrap();
            let qp = bundle.prior.sequence_prob(&[0], &pair.chosen.answer).unwrap();
            let qm = bundle
                .prior
                .sequence_prob(&[0], &pair.rejected.answer)
                .unwrap();
            let bayes = -(pp * qm / (pp * qm + qp * pm)).ln();
            worst = worst.max((logistic - bayes).abs());
        }
        assert!(worst < 1e-10, "model-backed identity broke: {worst:.3e}");
    }

    #[test]
    fn model_backed_kto_equivalence() {
        use crate::losses::kto_loss;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let prompts: Vec<Vec<Token>> = vec![vec![0]];
            let policy =
                TabularPolicy::random(&prompts, 3, 2, 2, 1.0, 777 + trial as u64).unwrap();
            let prior = TabularPolicy::random(&prompts, 3, 2, 2, 1.0, 70_000 + trial as u64)
                .unwrap()
                .frozen_copy();
            let value = ValueTable::new(&prompts, 3, 2, 2).unwrap();
            let bundle = ModelBundle::new(policy, value, prior).unwrap();
            let answer: Vec<Token> = (0..2).map(|_| rng.random_range(0..3u32)).collect();
            let z: f64 = rng.random_range(-1.0..2.0);
            let label = rng.random_range(0..2) as u8;
            let ex = Example::new(vec![0], answer.clone(), vec![label; 2], None).unwrap();

            let cfg = LossConfig::new(LossKind::Kto);
            let mut tape = Tape::new();
            let root = kto_loss(&mut tape, &bundle, &ex, z, &cfg).unwrap();
            let sigma_form = -tape.value(root);

            let f = bundle.policy.sequence_prob(&[0], &answer).unwrap();
            let p = bundle.prior.sequence_prob(&[0], &answer).unwrap();
            let bayes_pos = f / (f + p * z.exp());
            let bayes = if label == 1 { bayes_pos } else { 1.0 - bayes_pos };
            worst = worst.max((sigma_form - bayes).abs());
        }
        assert!(worst < 1e-10, "model-backed identity broke: {worst:.3e}");
    }
}
