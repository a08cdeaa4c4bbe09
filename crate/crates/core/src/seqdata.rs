//! Data model for prompts, answers, and token-level correctness labels.
//!
//! The universal unit is an [`Example`]: a prompt, an answer token sequence,
//! and a binary label per answer token. Labels are constant inside step
//! spans, so answer-level data is just the special case where every label
//! agrees. Paired records hold a chosen (all-correct) and a rejected answer
//! for the same prompt.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Answer and prompt tokens are plain integer ids; no tokenizer is involved.
pub type Token = u32;

/// Errors raised by data construction, transforms, and dataset files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("answer must be non-empty")]
    EmptyAnswer,
    #[error("labels length {labels} does not match answer length {answer}")]
    LabelLengthMismatch { labels: usize, answer: usize },
    #[error("labels must be 0 or 1, found {0}")]
    BadLabel(u8),
    #[error("step starts {starts:?} invalid for answer length {answer_len}: must begin at 0, increase strictly, and stay below the answer length")]
    BadStepStarts {
        starts: Vec<usize>,
        answer_len: usize,
    },
    #[error("labels change inside the step starting at token {start}")]
    LabelNotConstantInStep { start: usize },
    #[error("q values length {q} does not match step count {steps}")]
    QLengthMismatch { q: usize, steps: usize },
    #[error("q value {0} outside [-1, 1]")]
    QOutOfRange(f64),
    #[error("threshold {0} outside (-1, 1]")]
    BadThreshold(f64),
    #[error("chosen answer must carry all-ones labels")]
    ChosenNotPositive,
    #[error("chosen and rejected halves must share a prompt")]
    PromptMismatch,
    #[error("operation requires a paired dataset")]
    ExpectedPaired,
    #[error("operation requires an unpaired dataset")]
    ExpectedUnpaired,
    #[error("answer-level dataset requires constant labels, record {0} mixes 0 and 1")]
    MixedAnswerLabels(usize),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Annotation granularity of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// One label for the whole answer (stored broadcast over tokens).
    Answer,
    /// Labels vary per step span.
    Step,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Answer => "answer",
            Level::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "answer" => Some(Level::Answer),
            "step" => Some(Level::Step),
            _ => None,
        }
    }
}

/// One (prompt, answer, token labels) record.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    /// One 0/1 label per answer token, constant within each step span.
    pub labels: Vec<u8>,
    /// Step start indices (`starts[0] == 0`); `None` means every token is its
    /// own step.
    pub step_starts: Option<Vec<usize>>,
    /// Optional per-step scalar annotations in [-1, 1], carried through from
    /// dataset files for threshold relabeling.
    pub q_values: Option<Vec<f64>>,
}

impl Example {
    pub fn new(
        prompt: Vec<Token>,
        answer: Vec<Token>,
        labels: Vec<u8>,
        step_starts: Option<Vec<usize>>,
    ) -> Result<Example, DataError> {
        if answer.is_empty() {
            return Err(DataError::EmptyAnswer);
        }
        if labels.len() != answer.len() {
            return Err(DataError::LabelLengthMismatch {
                labels: labels.len(),
                answer: answer.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(DataError::BadLabel(bad));
        }
        if let Some(starts) = &step_starts {
            validate_step_starts(starts, answer.len())?;
            for (start, end) in spans_of(starts, answer.len()) {
                let first = labels[start];
                if labels[start..end].iter().any(|&l| l != first) {
                    return Err(DataError::LabelNotConstantInStep { start });
                }
            }
        }
        Ok(Example {
            prompt,
            answer,
            labels,
            step_starts,
            q_values: None,
        })
    }

    /// Attach per-step q annotations; the length must match `num_steps`.
    pub fn with_q_values(mut self, q: Vec<f64>) -> Result<Example, DataError> {
        if q.len() != self.num_steps() {
            return Err(DataError::QLengthMismatch {
                q: q.len(),
                steps: self.num_steps(),
            });
        }
        if let Some(&bad) = q.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(DataError::QOutOfRange(bad));
        }
        self.q_values = Some(q);
        Ok(self)
    }

    pub fn answer_len(&self) -> usize {
        self.answer.len()
    }

    pub fn num_steps(&self) -> usize {
        match &self.step_starts {
            Some(starts) => starts.len(),
            None => self.answer.len(),
        }
    }

    /// Half-open `[start, end)` token spans of each step, in order.
    pub fn step_spans(&self) -> Vec<(usize, usize)> {
        match &self.step_starts {
            Some(starts) => spans_of(starts, self.answer.len()),
            None => (0..self.answer.len()).map(|t| (t, t + 1)).collect(),
        }
    }

    /// One label per step (labels are constant within spans).
    pub fn step_labels(&self) -> Vec<u8> {
        self.step_spans()
            .iter()
            .map(|&(start, _)| self.labels[start])
            .collect()
    }

    /// True when every token is labeled correct.
    pub fn is_positive(&self) -> bool {
        self.labels.iter().all(|&l| l == 1)
    }

    /// True when all labels agree (answer-level shape).
    pub fn has_constant_labels(&self) -> bool {
        self.labels.windows(2).all(|w| w[0] == w[1])
    }
}

/// A chosen/rejected answer pair for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub chosen: Example,
    pub rejected: Example,
}

impl PairedExample {
    pub fn new(chosen: Example, rejected: Example) -> Result<PairedExample, DataError> {
        if !chosen.is_positive() {
            return Err(DataError::ChosenNotPositive);
        }
        if chosen.prompt != rejected.prompt {
            return Err(DataError::PromptMismatch);
        }
        Ok(PairedExample { chosen, rejected })
    }

    pub fn prompt(&self) -> &[Token] {
        &self.chosen.prompt
    }
}

/// A homogeneous ordered collection of records with an annotation level.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Unpaired { level: Level, examples: Vec<Example> },
    Paired { level: Level, pairs: Vec<PairedExample> },
}

impl Dataset {
    pub fn unpaired(level: Level, examples: Vec<Example>) -> Result<Dataset, DataError> {
        if level == Level::Answer {
            for (i, ex) in examples.iter().enumerate() {
                if !ex.has_constant_labels() {
                    return Err(DataError::MixedAnswerLabels(i));
                }
            }
        }
        Ok(Dataset::Unpaired { level, examples })
    }

    pub fn paired(level: Level, pairs: Vec<PairedExample>) -> Result<Dataset, DataError> {
        if level == Level::Answer {
            for (i, pair) in pairs.iter().enumerate() {
                if !pair.chosen.has_constant_labels() || !pair.rejected.has_constant_labels() {
                    return Err(DataError::MixedAnswerLabels(i));
                }
            }
        }
        Ok(Dataset::Paired { level, pairs })
    }

    pub fn level(&self) -> Level {
        match self {
            Dataset::Unpaired { level, .. } | Dataset::Paired { level, .. } => *level,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Unpaired { examples, .. } => examples.len(),
            Dataset::Paired { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_paired(&self) -> bool {
        matches!(self, Dataset::Paired { .. })
    }

    pub fn examples(&self) -> Result<&[Example], DataError> {
        match self {
            Dataset::Unpaired { examples, .. } => Ok(examples),
            Dataset::Paired { .. } => Err(DataError::ExpectedUnpaired),
        }
    }

    pub fn pairs(&self) -> Result<&[PairedExample], DataError> {
        match self {
            Dataset::Paired { pairs, .. } => Ok(pairs),
            Dataset::Unpaired { .. } => Err(DataError::ExpectedPaired),
        }
    }
}

fn validate_step_starts(starts: &[usize], answer_len: usize) -> Result<(), DataError> {
    let ok = !starts.is_empty()
        && starts[0] == 0
        && starts.windows(2).all(|w| w[0] < w[1])
        && *starts.last().unwrap() < answer_len;
    if ok {
        Ok(())
    } else {
        Err(DataError::BadStepStarts {
            starts: starts.to_vec(),
            answer_len,
        })
    }
}

fn spans_of(starts: &[usize], answer_len: usize) -> Vec<(usize, usize)> {
    (0..starts.len())
        .map(|k| {
            let end = if k + 1 < starts.len() {
                starts[k + 1]
            } else {
                answer_len
            };
            (starts[k], end)
        })
        .collect()
}

/// Split every pair into its chosen and rejected halves: all chosen records
/// first, then all rejected records, each preserving input order. Labels are
/// copied verbatim.
pub fn decouple_pairs(paired: &Dataset) -> Result<Dataset, DataError> {
    let pairs = paired.pairs()?;
    let mut examples = Vec::with_capacity(pairs.len() * 2);
    examples.extend(pairs.iter().map(|p| p.chosen.clone()));
    examples.extend(pairs.iter().map(|p| p.rejected.clone()));
    Dataset::unpaired(paired.level(), examples)
}

/// Match correct to incorrect answers within each prompt by seeded uniform
/// matching. Each prompt contributes `min(#correct, #incorrect)` pairs;
/// surplus answers of either class are discarded. Prompts appear in sorted
/// order in the output.
pub fn pair_by_problem(unpaired: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    let examples = unpaired.examples()?;
    let mut groups: BTreeMap<&[Token], (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let entry = groups.entry(&ex.prompt).or_default();
        if ex.is_positive() {
            entry.0.push(i);
        } else {
            entry.1.push(i);
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (_, (mut correct, mut incorrect)) in groups {
        correct.shuffle(&mut rng);
        incorrect.shuffle(&mut rng);
        for (&c, &r) in correct.iter().zip(incorrect.iter()) {
            pairs.push(PairedExample::new(
                examples[c].clone(),
                examples[r].clone(),
            )?);
        }
    }
    Dataset::paired(unpaired.level(), pairs)
}

/// Convert per-step q values into step labels. Steps of a correct answer are
/// always correct; inside an incorrect answer a step is correct iff its q
/// value lies in the closed interval `[threshold, 1]`.
pub fn labels_from_q(
    q_values: &[f64],
    answer_correct: bool,
    threshold: f64,
) -> Result<Vec<u8>, DataError> {
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(DataError::BadThreshold(threshold));
    }
    for &q in q_values {
        if !q.is_finite() || !(-1.0..=1.0).contains(&q) {
            return Err(DataError::QOutOfRange(q));
        }
    }
    if answer_correct {
        return Ok(vec![1; q_values.len()]);
    }
    Ok(q_values
        .iter()
        .map(|&q| if q >= threshold { 1 } else { 0 })
        .collect())
}

/// Broadcast step labels onto tokens: token `t` gets the label of the step
/// containing `t`.
pub fn expand_step_labels(
    step_labels: &[u8],
    step_starts: &[usize],
    answer_len: usize,
) -> Result<Vec<u8>, DataError> {
    validate_step_starts(step_starts, answer_len)?;
    if step_labels.len() != step_starts.len() {
        return Err(DataError::LabelLengthMismatch {
            labels: step_labels.len(),
            answer: step_starts.len(),
        });
    }
    let mut out = vec![0u8; answer_len];
    for (k, (start, end)) in spans_of(step_starts, answer_len).into_iter().enumerate() {
        for slot in &mut out[start..end] {
            *slot = step_labels[k];
        }
    }
    Ok(out)
}

/// Recover step labels from token labels (inverse of [`expand_step_labels`]).
pub fn group_step_labels(
    token_labels: &[u8],
    step_starts: &[usize],
    answer_len: usize,
) -> Result<Vec<u8>, DataError> {
    validate_step_starts(step_starts, answer_len)?;
    if token_labels.len() != answer_len {
        return Err(DataError::LabelLengthMismatch {
            labels: token_labels.len(),
            answer: answer_len,
        });
    }
    Ok(step_starts.iter().map(|&s| token_labels[s]).collect())
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON record per line. Field names are stable. Paired
// datasets write the chosen line first, then the rejected line, both carrying
// the same pair_id; unpaired records carry pair_id null. Step-level records
// always carry explicit step_starts (absent in-memory starts canonicalize to
// one step per token on write).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawRecord {
    prompt: Vec<Token>,
    answer: Vec<Token>,
    labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    step_starts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    q_values: Option<Vec<f64>>,
    pair_id: Option<u64>,
}

fn raw_of(ex: &Example, level: Level, pair_id: Option<u64>) -> RawRecord {
    let step_starts = match (level, &ex.step_starts) {
        (Level::Step, None) => Some((0..ex.answer.len()).collect()),
        (_, starts) => starts.clone(),
    };
    RawRecord {
        prompt: ex.prompt.clone(),
        answer: ex.answer.clone(),
        labels: ex.labels.clone(),
        step_starts,
        q_values: ex.q_values.clone(),
        pair_id,
    }
}

fn example_of(raw: RawRecord, line: usize) -> Result<Example, DataError> {
    let ex = Example::new(raw.prompt, raw.answer, raw.labels, raw.step_starts)
        .map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
    match raw.q_values {
        Some(q) => ex.with_q_values(q).map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        }),
        None => Ok(ex),
    }
}

/// Render a dataset in the line-delimited record format.
pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    match dataset {
        Dataset::Unpaired { level, examples } => {
            for ex in examples {
                let raw = raw_of(ex, *level, None);
                out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
                out.push('\n');
            }
        }
        Dataset::Paired { level, pairs } => {
            for (id, pair) in pairs.iter().enumerate() {
                for half in [&pair.chosen, &pair.rejected] {
                    let raw = raw_of(half, *level, Some(id as u64));
                    out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Parse a dataset from the line-delimited record format. The level is
/// inferred: records with step_starts are step-level; mixing is an error.
pub fn from_jsonl(text: &str) -> Result<Dataset, DataError> {
    let mut raws = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        raws.push((i + 1, raw));
    }
    let with_starts = raws.iter().filter(|(_, r)| r.step_starts.is_some()).count();
    if with_starts != 0 && with_starts != raws.len() {
        return Err(DataError::Parse {
            line: 0,
            msg: "records mix step-level and answer-level annotations".into(),
        });
    }
    let level = if with_starts > 0 {
        Level::Step
    } else {
        Level::Answer
    };
    let paired_count = raws.iter().filter(|(_, r)| r.pair_id.is_some()).count();
    if paired_count != 0 && paired_count != raws.len() {
        return Err(DataError::Parse {
            line: 0,
            msg: "records mix null and non-null pair_id".into(),
        });
    }
    if paired_count == 0 {
        let mut examples = Vec::with_capacity(raws.len());
        for (line, raw) in raws {
            examples.push(example_of(raw, line)?);
        }
        return Dataset::unpaired(level, examples);
    }
    // Paired: group lines by pair_id, chosen line first.
    let mut by_id: BTreeMap<u64, Vec<(usize, RawRecord)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (line, raw) in raws {
        let id = raw.pair_id.unwrap();
        let entry = by_id.entry(id).or_default();
        if entry.is_empty() {
            order.push(id);
        }
        entry.push((line, raw));
    }
    let mut pairs = Vec::with_capacity(order.len());
    for id in order {
        let mut members = by_id.remove(&id).unwrap();
        if members.len() != 2 {
            return Err(DataError::Parse {
                line: members[0].0,
                msg: format!("pair_id {id} has {} records, expected 2", members.len()),
            });
        }
        let (line_r, raw_r) = members.pop().unwrap();
        let (line_c, raw_c) = members.pop().unwrap();
        let chosen = example_of(raw_c, line_c)?;
        let rejected = example_of(raw_r, line_r)?;
        pairs.push(PairedExample::new(chosen, rejected).map_err(|e| DataError::Parse {
            line: line_c,
            msg: e.to_string(),
        })?);
    }
    Dataset::paired(level, pairs)
}

/// Write a dataset file.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_jsonl(dataset))?;
    Ok(())
}

/// Read a dataset file.
pub fn read_jsonl(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(prompt: u32, answer: Vec<Token>, labels: Vec<u8>) -> Example {
        Example::new(vec![prompt], answer, labels, None).unwrap()
    }

    fn pair(prompt: u32, rejected_labels: Vec<u8>) -> PairedExample {
        let t = rejected_labels.len();
        PairedExample::new(
            ex(prompt, vec![0; t], vec![1; t]),
            ex(prompt, vec![1; t], rejected_labels),
        )
        .unwrap()
    }

    #[test]
    fn example_validation() {
        assert!(matches!(
            Example::new(vec![0], vec![], vec![], None),
            Err(DataError::EmptyAnswer)
        ));
        assert!(matches!(
            Example::new(vec![0], vec![1, 2], vec![1], None),
            Err(DataError::LabelLengthMismatch { .. })
        ));
        assert!(matches!(
            Example::new(vec![0], vec![1], vec![2], None),
            Err(DataError::BadLabel(2))
        ));
        // Step starts must begin at 0 and stay in range.
        assert!(matches!(
            Example::new(vec![0], vec![1, 2], vec![1, 1], Some(vec![1])),
            Err(DataError::BadStepStarts { .. })
        ));
        assert!(matches!(
            Example::new(vec![0], vec![1, 2], vec![1, 1], Some(vec![0, 2])),
            Err(DataError::BadStepStarts { .. })
        ));
        // Labels must be constant within a span.
        assert!(matches!(
            Example::new(vec![0], vec![1, 2, 3], vec![1, 0, 0], Some(vec![0, 2])),
            Err(DataError::LabelNotConstantInStep { start: 0 })
        ));
        let ok = Example::new(vec![0], vec![1, 2, 3], vec![1, 1, 0], Some(vec![0, 2])).unwrap();
        assert_eq!(ok.step_labels(), vec![1, 0]);
        assert_eq!(ok.step_spans(), vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn decouple_three_pairs() {
        let d = Dataset::paired(
            Level::Answer,
            vec![pair(0, vec![0, 0]), pair(1, vec![0, 0]), pair(2, vec![0, 0])],
        )
        .unwrap();
        let u = decouple_pairs(&d).unwrap();
        let examples = u.examples().unwrap();
        assert_eq!(examples.len(), 6);
        for e in &examples[..3] {
            assert!(e.is_positive());
        }
        for e in &examples[3..] {
            assert!(!e.is_positive());
        }
        // Order preserved within each class.
        assert_eq!(examples[0].prompt, vec![0]);
        assert_eq!(examples[2].prompt, vec![2]);
        assert_eq!(examples[3].prompt, vec![0]);
    }

    #[test]
    fn decouple_empty_and_errors() {
        let d = Dataset::paired(Level::Answer, vec![]).unwrap();
        assert_eq!(decouple_pairs(&d).unwrap().len(), 0);
        let u = Dataset::unpaired(Level::Answer, vec![ex(0, vec![1], vec![1])]).unwrap();
        assert!(matches!(decouple_pairs(&u), Err(DataError::ExpectedPaired)));
    }

    #[test]
    fn decouple_keeps_rejected_labels() {
        let d = Dataset::paired(Level::Step, vec![pair(0, vec![1, 1, 0])]).unwrap();
        let u = decouple_pairs(&d).unwrap();
        assert_eq!(u.examples().unwrap()[1].labels, vec![1, 1, 0]);
    }

    #[test]
    fn pairing_respects_min_class_counts() {
        let mut examples = Vec::new();
        for i in 0..2 {
            examples.push(ex(7, vec![i], vec![1]));
        }
        for i in 0..5 {
            examples.push(ex(7, vec![10 + i], vec![0]));
        }
        let d = Dataset::unpaired(Level::Answer, examples).unwrap();
        let p = pair_by_problem(&d, 3).unwrap();
        assert_eq!(p.len(), 2);
        // Prompt with no correct answers yields nothing.
        let d0 = Dataset::unpaired(
            Level::Answer,
            vec![ex(1, vec![0], vec![0]), ex(1, vec![1], vec![0])],
        )
        .unwrap();
        assert_eq!(pair_by_problem(&d0, 3).unwrap().len(), 0);
    }

    #[test]
    fn pairing_is_deterministic_per_seed() {
        let mut examples = Vec::new();
        for i in 0..6 {
            examples.push(ex(0, vec![i], vec![u8::from(i % 2 == 0)]));
            examples.push(ex(1, vec![i + 10], vec![u8::from(i % 3 == 0)]));
        }
        let d = Dataset::unpaired(Level::Answer, examples).unwrap();
        let a = pair_by_problem(&d, 42).unwrap();
        let b = pair_by_problem(&d, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn q_threshold_boundary_is_correct_side() {
        // Interval [threshold, 1] is labeled correct, [-1, threshold) incorrect.
        assert_eq!(
            labels_from_q(&[1.0, 0.6, 0.3], false, 0.5).unwrap(),
            vec![1, 1, 0]
        );
        assert_eq!(labels_from_q(&[0.5], false, 0.5).unwrap(), vec![1]);
        assert_eq!(
            labels_from_q(&[-1.0, 0.2, 0.9], true, 0.5).unwrap(),
            vec![1, 1, 1]
        );
        assert!(matches!(
            labels_from_q(&[1.5], false, 0.5),
            Err(DataError::QOutOfRange(_))
        ));
        assert!(matches!(
            labels_from_q(&[0.0], false, -1.0),
            Err(DataError::BadThreshold(_))
        ));
    }

    #[test]
    fn expand_and_group_labels() {
        assert_eq!(
            expand_step_labels(&[1, 0], &[0, 2], 4).unwrap(),
            vec![1, 1, 0, 0]
        );
        assert_eq!(expand_step_labels(&[0], &[0], 3).unwrap(), vec![0, 0, 0]);
        // One token per step: identity.
        assert_eq!(
            expand_step_labels(&[1, 0, 1], &[0, 1, 2], 3).unwrap(),
            vec![1, 0, 1]
        );
        assert!(matches!(
            expand_step_labels(&[1], &[1], 3),
            Err(DataError::BadStepStarts { .. })
        ));
        assert_eq!(
            group_step_labels(&[1, 1, 0, 0], &[0, 2], 4).unwrap(),
            vec![1, 0]
        );
    }

    #[test]
    fn jsonl_round_trip_unpaired() {
        let e1 = Example::new(vec![0], vec![1, 2, 3], vec![1, 1, 0], Some(vec![0, 2]))
            .unwrap()
            .with_q_values(vec![0.7, -0.2])
            .unwrap();
        let e2 = Example::new(vec![1], vec![2, 2, 2], vec![0, 0, 0], Some(vec![0, 1, 2])).unwrap();
        let d = Dataset::unpaired(Level::Step, vec![e1, e2]).unwrap();
        let text = to_jsonl(&d);
        assert!(text.lines().all(|l| l.contains("\"pair_id\":null")));
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn jsonl_round_trip_paired_and_level_inference() {
        let d = Dataset::paired(Level::Answer, vec![pair(0, vec![0, 0]), pair(1, vec![0, 0])])
            .unwrap();
        let text = to_jsonl(&d);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.level(), Level::Answer);

        // Step-level datasets canonicalize absent step_starts on write.
        let s = Dataset::unpaired(Level::Step, vec![ex(0, vec![1, 2], vec![1, 0])]).unwrap();
        let text = to_jsonl(&s);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back.level(), Level::Step);
        assert_eq!(
            back.examples().unwrap()[0].step_starts,
            Some(vec![0, 1])
        );
    }

    #[test]
    fn jsonl_rejects_mixed_records() {
        let mixed = concat!(
            "{\"prompt\":[0],\"answer\":[1],\"labels\":[1],\"pair_id\":null}\n",
            "{\"prompt\":[0],\"answer\":[1],\"labels\":[1],\"pair_id\":0}\n",
        );
        assert!(from_jsonl(mixed).is_err());
    }

    proptest! {
        #[test]
        fn decouple_doubles_record_count(n in 0usize..20) {
            let pairs: Vec<_> = (0..n).map(|i| pair(i as u32, vec![0, 0])).collect();
            let d = Dataset::paired(Level::Answer, pairs).unwrap();
            prop_assert_eq!(decouple_pairs(&d).unwrap().len(), 2 * n);
        }

        #[test]
        fn correct_answers_ignore_q(q in proptest::collection::vec(-1.0f64..=1.0, 1..8),
                                    threshold in -0.99f64..=1.0) {
            let labels = labels_from_q(&q, true, threshold).unwrap();
            prop_assert!(labels.iter().all(|&l| l == 1));
        }

        #[test]
        fn raising_threshold_never_flips_zero_to_one(
            q in proptest::collection::vec(-1.0f64..=1.0, 1..8),
            lo in -0.9f64..0.0, hi in 0.0f64..=1.0)
        {
            let low = labels_from_q(&q, false, lo).unwrap();
            let high = labels_from_q(&q, false, hi).unwrap();
            for (a, b) in low.iter().zip(high.iter()) {
                prop_assert!(b <= a);
            }
        }

        #[test]
        fn expand_then_group_recovers_labels(
            raw in proptest::collection::vec(0u8..2, 1..10),
            len_extra in 0usize..6)
        {
            let k = raw.len();
            let answer_len = k + len_extra;
            // Spread starts: first k-1 consecutive, last step absorbs the tail.
            let starts: Vec<usize> = (0..k).collect();
            let tokens = expand_step_labels(&raw, &starts, answer_len).unwrap();
            let back = group_step_labels(&tokens, &starts, answer_len).unwrap();
            prop_assert_eq!(back, raw);
        }
    }
}
