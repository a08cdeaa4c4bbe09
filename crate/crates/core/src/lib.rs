//! Prior-informed preference alignment at desk scale.
//!
//! This crate implements a family of preference-alignment losses (PIPA-M,
//! PIPA-N, DPO, IPO, KTO, Step-DPO, Step-KTO, SFT) over exactly enumerable
//! tabular autoregressive models, together with the machinery needed to test
//! them end to end: a scalar reverse-mode tape with stop-gradient, synthetic
//! generative worlds with exact Bayes oracles, a mini-batch trainer with
//! diagnostic trajectories, and numeric verification of the equivalence
//! identities relating the losses.

pub mod grad;
pub mod losses;
pub mod models;
pub mod seqdata;
pub mod synthworld;
pub mod trainer;
pub mod verify;

pub use grad::{backward, check_gradient, GradError, GradMap, NodeIdx, ParamId, Tape};
pub use models::{
    fit_sft, sample_answer, Context, ModelBundle, ModelError, SftSelector, TabularPolicy,
    ValueTable, ENUM_BUDGET,
};
pub use seqdata::{
    decouple_pairs, expand_step_labels, from_jsonl, group_step_labels, labels_from_q,
    pair_by_problem, read_jsonl, to_jsonl, write_jsonl, DataError, Dataset, Example, Level,
    PairedExample, Token,
};
pub use losses::{
    build_record_loss, estimate_kl_z, per_token_terms, LossConfig, LossError, LossKind,
    PerTokenTerms, RecordRef, StepDpoVariant, StepKtoVariant, ZMode,
};
pub use synthworld::{World, WorldError};
pub use trainer::{
    grid_search, train, GridOutcome, GridRun, MetricsLog, MetricsRow, OptimKind, Optimizer,
    TrainConfig, TrainError,
};
pub use verify::{
    check_dpo_equivalence, check_kto_equivalence, clip_rate_survey, count_mle_tv,
    gradient_check_suite, mean_tv_to_positive, median, recovery_experiment,
    step_vs_answer_ablation, threshold_sweep, value_table_error, AblationOutcome, PriorMode,
    RecoveryOutcome, RecoverySpec, SweepPoint, VerificationReport, VerifyError,
};
