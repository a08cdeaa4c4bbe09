//! Tabular autoregressive policies and value tables.
//!
//! A [`TabularPolicy`] is a softmax next-token model whose context key is the
//! prompt plus a trailing window of answer tokens; every context reachable
//! within (max_len, window) has a logit row, so the parameter space is finite
//! and sequence distributions can be enumerated exactly. A [`ValueTable`]
//! shares the context keying and maps each context through a sigmoid to a
//! correctness probability in (0, 1). A [`ModelBundle`] groups the trainable
//! policy, the trainable value table, and a frozen prior policy.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grad::{sigmoid, GradError, NodeIdx, ParamId, Tape};
use crate::seqdata::{DataError, Dataset, Example, Token};

/// Default cap on exact sequence enumeration (number of sequences).
pub const ENUM_BUDGET: usize = 1_000_000;

/// Cap on total table entries so context enumeration stays desk-scale.
pub const TABLE_BUDGET: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(Vec<Token>),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("prefix/answer length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("enumerating {count} sequences exceeds the budget of {budget}")]
    EnumerationBudget { count: usize, budget: usize },
    #[error("table with {entries} entries exceeds the budget of {budget}")]
    TableBudget { entries: usize, budget: usize },
    #[error("policy is frozen")]
    Frozen,
    #[error("empty selection: no records match the SFT selector")]
    EmptySelection,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Context key: the prompt token sequence plus the trailing answer window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Context {
    pub prompt: Vec<Token>,
    pub window: Vec<Token>,
}

/// Which records SFT fitting keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftSelector {
    PositiveOnly,
    All,
    NegativeOnly,
}

impl SftSelector {
    pub fn keeps(self, ex: &Example) -> bool {
        match self {
            SftSelector::PositiveOnly => ex.is_positive(),
            SftSelector::All => true,
            SftSelector::NegativeOnly => !ex.is_positive(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SftSelector::PositiveOnly => "positive-only",
            SftSelector::All => "all",
            SftSelector::NegativeOnly => "negative-only",
        }
    }

    pub fn parse(s: &str) -> Option<SftSelector> {
        match s {
            "positive-only" => Some(SftSelector::PositiveOnly),
            "all" => Some(SftSelector::All),
            "negative-only" => Some(SftSelector::NegativeOnly),
            _ => None,
        }
    }
}

/// All context keys reachable within (max_len, window) for the given prompts,
/// indexed in sorted order.
fn enumerate_contexts(
    prompts: &[Vec<Token>],
    vocab: usize,
    max_len: usize,
    window: usize,
) -> Result<BTreeMap<Context, usize>, ModelError> {
    let max_window = window.min(max_len.saturating_sub(1));
    let mut per_prompt = 0usize;
    let mut pow = 1usize;
    for _ in 0..=max_window {
        per_prompt = per_prompt.saturating_add(pow);
        pow = pow.saturating_mul(vocab);
    }
    let entries = per_prompt
        .saturating_mul(prompts.len())
        .saturating_mul(vocab.max(1));
    if entries > TABLE_BUDGET {
        return Err(ModelError::TableBudget {
            entries,
            budget: TABLE_BUDGET,
        });
    }
    let mut keys = Vec::new();
    for prompt in prompts {
        for len in 0..=max_window {
            let count = vocab.pow(len as u32);
            for seq in 0..count {
                let mut window_tokens = vec![0 as Token; len];
                let mut rest = seq;
                for pos in (0..len).rev() {
                    window_tokens[pos] = (rest % vocab) as Token;
                    rest /= vocab;
                }
                keys.push(Context {
                    prompt: prompt.clone(),
                    window: window_tokens,
                });
            }
        }
    }
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let lse = m + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Softmax-parameterized next-token distribution over windowed contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: usize,
    max_len: usize,
    window: usize,
    prompts: Vec<Vec<Token>>,
    index: BTreeMap<Context, usize>,
    rows: Vec<Vec<f64>>,
    frozen: bool,
}

impl TabularPolicy {
    /// Zero logits everywhere: the uniform policy.
    pub fn uniform(
        prompts: &[Vec<Token>],
        vocab: usize,
        max_len: usize,
        window: usize,
    ) -> Result<TabularPolicy, ModelError> {
        if vocab == 0 || max_len == 0 {
            return Err(ModelError::Shape(
                "vocab and max_len must be positive".into(),
            ));
        }
        let index = enumerate_contexts(prompts, vocab, max_len, window)?;
        let rows = vec![vec![0.0; vocab]; index.len()];
        let mut prompts: Vec<Vec<Token>> = prompts.to_vec();
        prompts.sort();
        prompts.dedup();
        Ok(TabularPolicy {
            vocab,
            max_len,
            window,
            prompts,
            index,
            rows,
            frozen: false,
        })
    }

    /// Logits drawn iid from N(0, scale^2) under a seeded stream.
    pub fn random(
        prompts: &[Vec<Token>],
        vocab: usize,
        max_len: usize,
        window: usize,
        scale: f64,
        seed: u64,
    ) -> Result<TabularPolicy, ModelError> {
        let mut policy = TabularPolicy::uniform(prompts, vocab, max_len, window)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        for row in &mut policy.rows {
            for logit in row.iter_mut() {
                *logit = normal.sample(&mut rng);
            }
        }
        Ok(policy)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn frozen_copy(&self) -> TabularPolicy {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    pub fn unfrozen_copy(&self) -> TabularPolicy {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    pub fn prompts(&self) -> &[Vec<Token>] {
        &self.prompts
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_params(&self) -> usize {
        self.rows.len() * self.vocab
    }

    fn knows_prompt(&self, prompt: &[Token]) -> bool {
        self.prompts.binary_search_by(|p| p.as_slice().cmp(prompt)).is_ok()
    }

    /// Context key for predicting the token after `prefix`.
    pub fn context_for(&self, prompt: &[Token], prefix: &[Token]) -> Context {
        let start = prefix.len().saturating_sub(self.window);
        Context {
            prompt: prompt.to_vec(),
            window: prefix[start..].to_vec(),
        }
    }

    fn check_query(&self, prompt: &[Token], prefix: &[Token]) -> Result<(), ModelError> {
        if !self.knows_prompt(prompt) {
            return Err(ModelError::UnknownPrompt(prompt.to_vec()));
        }
        if prefix.len() >= self.max_len {
            return Err(ModelError::TooLong {
                len: prefix.len(),
                max: self.max_len - 1,
            });
        }
        for &t in prefix {
            if t as usize >= self.vocab {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// Logit row for a context; `None` falls back to uniform in the callers.
    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.index.get(ctx).map(|&i| self.rows[i].as_slice())
    }

    /// All context keys with their row indices, in sorted key order.
    pub fn contexts(&self) -> impl Iterator<Item = (&Context, usize)> {
        self.index.iter().map(|(c, &i)| (c, i))
    }

    pub fn row_index(&self, ctx: &Context) -> Option<usize> {
        self.index.get(ctx).copied()
    }

    fn logits_for(&self, prompt: &[Token], prefix: &[Token]) -> Vec<f64> {
        let ctx = self.context_for(prompt, prefix);
        match self.row(&ctx) {
            Some(row) => row.to_vec(),
            None => vec![0.0; self.vocab],
        }
    }

    /// Softmax next-token probabilities; positive and summing to one.
    pub fn next_token_dist(
        &self,
        prompt: &[Token],
        prefix: &[Token],
    ) -> Result<Vec<f64>, ModelError> {
        self.check_query(prompt, prefix)?;
        Ok(softmax(&self.logits_for(prompt, prefix)))
    }

    pub fn token_logprob(
        &self,
        prompt: &[Token],
        prefix: &[Token],
        token: Token,
    ) -> Result<f64, ModelError> {
        self.check_query(prompt, prefix)?;
        if token as usize >= self.vocab {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        Ok(log_softmax(&self.logits_for(prompt, prefix))[token as usize])
    }

    pub fn token_prob(
        &self,
        prompt: &[Token],
        prefix: &[Token],
        token: Token,
    ) -> Result<f64, ModelError> {
        self.check_query(prompt, prefix)?;
        if token as usize >= self.vocab {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        Ok(softmax(&self.logits_for(prompt, prefix))[token as usize])
    }

    /// Sum of per-token log probabilities of `answer`.
    pub fn sequence_logprob(&self, prompt: &[Token], answer: &[Token]) -> Result<f64, ModelError> {
        if answer.is_empty() {
            return Err(ModelError::Data(DataError::EmptyAnswer));
        }
        if answer.len() > self.max_len {
            return Err(ModelError::TooLong {
                len: answer.len(),
                max: self.max_len,
            });
        }
        let mut total = 0.0;
        for t in 0..answer.len() {
            total += self.token_logprob(prompt, &answer[..t], answer[t])?;
        }
        Ok(total)
    }

    pub fn sequence_prob(&self, prompt: &[Token], answer: &[Token]) -> Result<f64, ModelError> {
        Ok(self.sequence_logprob(prompt, answer)?.exp())
    }

    /// All `vocab^len` fixed-length answers with exact probabilities, in
    /// lexicographic token order. Probabilities sum to one up to roundoff.
    pub fn enumerate_sequences(
        &self,
        prompt: &[Token],
        len: usize,
    ) -> Result<Vec<(Vec<Token>, f64)>, ModelError> {
        if len == 0 || len > self.max_len {
            return Err(ModelError::TooLong {
                len,
                max: self.max_len,
            });
        }
        let count = self
            .vocab
            .checked_pow(len as u32)
            .unwrap_or(usize::MAX);
        if count > ENUM_BUDGET {
            return Err(ModelError::EnumerationBudget {
                count,
                budget: ENUM_BUDGET,
            });
        }
        let mut out = Vec::with_capacity(count);
        let mut prefix: Vec<Token> = Vec::with_capacity(len);
        self.enumerate_rec(prompt, len, &mut prefix, 1.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        prompt: &[Token],
        len: usize,
        prefix: &mut Vec<Token>,
        prob: f64,
        out: &mut Vec<(Vec<Token>, f64)>,
    ) -> Result<(), ModelError> {
        if prefix.len() == len {
            out.push((prefix.clone(), prob));
            return Ok(());
        }
        let dist = self.next_token_dist(prompt, prefix)?;
        for (v, &p) in dist.iter().enumerate() {
            prefix.push(v as Token);
            self.enumerate_rec(prompt, len, prefix, prob * p, out)?;
            prefix.pop();
        }
        Ok(())
    }

    /// Dense parameter index of one logit entry.
    pub fn param_index(&self, row: usize, token: usize) -> u32 {
        (row * self.vocab + token) as u32
    }

    /// Parameter ids of the logit row used to predict the token after
    /// `prefix` (empty for frozen policies, which expose no parameters).
    pub fn row_param_ids(
        &self,
        prompt: &[Token],
        prefix: &[Token],
    ) -> Result<Vec<ParamId>, ModelError> {
        self.check_query(prompt, prefix)?;
        if self.frozen {
            return Ok(Vec::new());
        }
        let ctx = self.context_for(prompt, prefix);
        match self.row_index(&ctx) {
            Some(row) => Ok((0..self.vocab)
                .map(|v| ParamId::Policy(self.param_index(row, v)))
                .collect()),
            None => Ok(Vec::new()),
        }
    }

    pub fn get_param(&self, index: u32) -> f64 {
        let row = index as usize / self.vocab;
        let tok = index as usize % self.vocab;
        self.rows[row][tok]
    }

    pub fn set_param(&mut self, index: u32, value: f64) -> Result<(), ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        let row = index as usize / self.vocab;
        let tok = index as usize % self.vocab;
        self.rows[row][tok] = value;
        Ok(())
    }

    /// Next-token probabilities as tape nodes. Trainable policies register
    /// their logit row as parameters; frozen policies contribute constants.
    pub fn dist_on_tape(
        &self,
        tape: &mut Tape,
        prompt: &[Token],
        prefix: &[Token],
    ) -> Result<Vec<NodeIdx>, ModelError> {
        self.check_query(prompt, prefix)?;
        let ctx = self.context_for(prompt, prefix);
        let row_idx = self.row_index(&ctx);
        if self.frozen || row_idx.is_none() {
            let probs = softmax(&self.logits_for(prompt, prefix));
            return Ok(probs.iter().map(|&p| tape.constant(p)).collect());
        }
        let row_idx = row_idx.unwrap();
        let logits = &self.rows[row_idx];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shift = tape.constant(-m);
        let mut exps = Vec::with_capacity(self.vocab);
        for (v, &logit) in logits.iter().enumerate() {
            let leaf = tape.param(ParamId::Policy(self.param_index(row_idx, v)), logit)?;
            let shifted = tape.add(leaf, shift);
            exps.push(tape.exp(shifted));
        }
        let total = tape.sum(&exps);
        exps.into_iter()
            .map(|e| tape.div(e, total).map_err(ModelError::from))
            .collect()
    }

    /// Re-key this policy onto a different trailing window. Exact only when
    /// the new window still sees the whole reachable prefix.
    pub fn rekeyed(&self, window: usize) -> Result<TabularPolicy, ModelError> {
        if window < self.window.min(self.max_len.saturating_sub(1)) {
            return Err(ModelError::Shape(format!(
                "cannot re-key onto window {window}: shorter than the source's effective window"
            )));
        }
        let mut out = TabularPolicy::uniform(&self.prompts, self.vocab, self.max_len, window)?;
        let contexts: Vec<(Context, usize)> =
            out.index.iter().map(|(c, &i)| (c.clone(), i)).collect();
        for (ctx, i) in contexts {
            let dist = self.next_token_dist(&ctx.prompt, &ctx.window)?;
            out.rows[i] = dist.iter().map(|&p| p.ln()).collect();
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "policy vocab={} max_len={} window={} frozen={}\n",
            self.vocab, self.max_len, self.window, self.frozen
        );
        for (ctx, &i) in &self.index {
            out.push_str(&row_line(ctx, &self.rows[i]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TabularPolicy, ModelError> {
        let lines: Vec<&str> = text.lines().collect();
        let (policy, used) = TabularPolicy::from_lines(&lines, 0)?;
        if lines[used..].iter().any(|l| !l.trim().is_empty()) {
            return Err(ModelError::Checkpoint {
                line: used + 1,
                msg: "trailing content after policy block".into(),
            });
        }
        Ok(policy)
    }

    /// Parse one policy block starting at `start`; returns the policy and the
    /// line index just past the block.
    pub fn from_lines(lines: &[&str], start: usize) -> Result<(TabularPolicy, usize), ModelError> {
        let header = lines.get(start).ok_or(ModelError::Checkpoint {
            line: start + 1,
            msg: "missing policy header".into(),
        })?;
        let fields = parse_header(header, "policy", start + 1)?;
        let vocab = field_usize(&fields, "vocab", start + 1)?;
        let max_len = field_usize(&fields, "max_len", start + 1)?;
        let window = field_usize(&fields, "window", start + 1)?;
        let frozen = field_bool(&fields, "frozen", start + 1)?;
        let mut entries = Vec::new();
        let mut i = start + 1;
        while i < lines.len() && lines[i].starts_with("row ") {
            let (ctx, values) = parse_row(lines[i], i + 1)?;
            if values.len() != vocab {
                return Err(ModelError::Checkpoint {
                    line: i + 1,
                    msg: format!("expected {} logits, found {}", vocab, values.len()),
                });
            }
            entries.push((ctx, values));
            i += 1;
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut prompts: Vec<Vec<Token>> = entries.iter().map(|(c, _)| c.prompt.clone()).collect();
        prompts.sort();
        prompts.dedup();
        let index: BTreeMap<Context, usize> = entries
            .iter()
            .enumerate()
            .map(|(idx, (c, _))| (c.clone(), idx))
            .collect();
        let rows: Vec<Vec<f64>> = entries.into_iter().map(|(_, v)| v).collect();
        Ok((
            TabularPolicy {
                vocab,
                max_len,
                window,
                prompts,
                index,
                rows,
                frozen,
            },
            i,
        ))
    }
}

/// Per-context correctness probability g = sigmoid(raw), strictly in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    vocab: usize,
    max_len: usize,
    window: usize,
    prompts: Vec<Vec<Token>>,
    index: BTreeMap<Context, usize>,
    raw: Vec<f64>,
    frozen: bool,
}

impl ValueTable {
    /// Raw zeros everywhere, so g starts at exactly 0.5.
    pub fn new(
        prompts: &[Vec<Token>],
        vocab: usize,
        max_len: usize,
        window: usize,
    ) -> Result<ValueTable, ModelError> {
        let index = enumerate_contexts(prompts, vocab, max_len, window)?;
        let raw = vec![0.0; index.len()];
        let mut prompts: Vec<Vec<Token>> = prompts.to_vec();
        prompts.sort();
        prompts.dedup();
        Ok(ValueTable {
            vocab,
            max_len,
            window,
            prompts,
            index,
            raw,
            frozen: false,
        })
    }

    /// Raw entries drawn iid from N(0, scale^2) under a seeded stream.
    pub fn random(
        prompts: &[Vec<Token>],
        vocab: usize,
        max_len: usize,
        window: usize,
        scale: f64,
        seed: u64,
    ) -> Result<ValueTable, ModelError> {
        let mut table = ValueTable::new(prompts, vocab, max_len, window)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        for raw in &mut table.raw {
            *raw = normal.sample(&mut rng);
        }
        Ok(table)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn num_params(&self) -> usize {
        self.raw.len()
    }

    fn context_for(&self, prompt: &[Token], prefix: &[Token]) -> Context {
        let start = prefix.len().saturating_sub(self.window);
        Context {
            prompt: prompt.to_vec(),
            window: prefix[start..].to_vec(),
        }
    }

    fn raw_for(&self, prompt: &[Token], prefix: &[Token]) -> (Option<usize>, f64) {
        let ctx = self.context_for(prompt, prefix);
        match self.index.get(&ctx) {
            Some(&i) => (Some(i), self.raw[i]),
            None => (None, 0.0),
        }
    }

    /// g(prompt, prefix) = sigmoid(raw); unseen contexts fall back to 0.5.
    pub fn g(&self, prompt: &[Token], prefix: &[Token]) -> Result<f64, ModelError> {
        if !self
            .prompts
            .binary_search_by(|p| p.as_slice().cmp(prompt))
            .is_ok()
        {
            return Err(ModelError::UnknownPrompt(prompt.to_vec()));
        }
        Ok(sigmoid(self.raw_for(prompt, prefix).1))
    }

    pub fn g_on_tape(
        &self,
        tape: &mut Tape,
        prompt: &[Token],
        prefix: &[Token],
    ) -> Result<NodeIdx, ModelError> {
        if !self
            .prompts
            .binary_search_by(|p| p.as_slice().cmp(prompt))
            .is_ok()
        {
            return Err(ModelError::UnknownPrompt(prompt.to_vec()));
        }
        let (idx, raw) = self.raw_for(prompt, prefix);
        match idx {
            Some(i) if !self.frozen => {
                let leaf = tape.param(ParamId::Value(i as u32), raw)?;
                Ok(tape.sigmoid(leaf))
            }
            _ => Ok(tape.constant(sigmoid(raw))),
        }
    }

    pub fn value_param_id(
        &self,
        prompt: &[Token],
        prefix: &[Token],
    ) -> Result<Option<ParamId>, ModelError> {
        if self.frozen {
            return Ok(None);
        }
        let ctx = self.context_for(prompt, prefix);
        Ok(self.index.get(&ctx).map(|&i| ParamId::Value(i as u32)))
    }

    pub fn get_param(&self, index: u32) -> f64 {
        self.raw[index as usize]
    }

    pub fn set_param(&mut self, index: u32, value: f64) -> Result<(), ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        self.raw[index as usize] = value;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "value vocab={} max_len={} window={} frozen={}\n",
            self.vocab, self.max_len, self.window, self.frozen
        );
        for (ctx, &i) in &self.index {
            out.push_str(&row_line(ctx, &[self.raw[i]]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ValueTable, ModelError> {
        let lines: Vec<&str> = text.lines().collect();
        let header = lines.first().ok_or(ModelError::Checkpoint {
            line: 1,
            msg: "missing value header".into(),
        })?;
        let fields = parse_header(header, "value", 1)?;
        let vocab = field_usize(&fields, "vocab", 1)?;
        let max_len = field_usize(&fields, "max_len", 1)?;
        let window = field_usize(&fields, "window", 1)?;
        let frozen = field_bool(&fields, "frozen", 1)?;
        let mut entries = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (ctx, values) = parse_row(line, i + 1)?;
            if values.len() != 1 {
                return Err(ModelError::Checkpoint {
                    line: i + 1,
                    msg: "expected a single raw value".into(),
                });
            }
            entries.push((ctx, values[0]));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut prompts: Vec<Vec<Token>> = entries.iter().map(|(c, _)| c.prompt.clone()).collect();
        prompts.sort();
        prompts.dedup();
        let index: BTreeMap<Context, usize> = entries
            .iter()
            .enumerate()
            .map(|(idx, (c, _))| (c.clone(), idx))
            .collect();
        let raw: Vec<f64> = entries.into_iter().map(|(_, v)| v).collect();
        Ok(ValueTable {
            vocab,
            max_len,
            window,
            prompts,
            index,
            raw,
            frozen,
        })
    }
}

fn row_line(ctx: &Context, values: &[f64]) -> String {
    let prompt: Vec<String> = ctx.prompt.iter().map(|t| t.to_string()).collect();
    let window: Vec<String> = ctx.window.iter().map(|t| t.to_string()).collect();
    let vals: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!(
        "row {} ; {} ; {}\n",
        prompt.join(" "),
        window.join(" "),
        vals.join(" ")
    )
}

fn parse_header(
    line: &str,
    expected: &str,
    line_no: usize,
) -> Result<BTreeMap<String, String>, ModelError> {
    let mut parts = line.split_whitespace();
    let tag = parts.next().unwrap_or("");
    if tag != expected {
        return Err(ModelError::Checkpoint {
            line: line_no,
            msg: format!("expected `{expected}` header, found `{tag}`"),
        });
    }
    let mut fields = BTreeMap::new();
    for part in parts {
        let (k, v) = part.split_once('=').ok_or(ModelError::Checkpoint {
            line: line_no,
            msg: format!("malformed header field `{part}`"),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(fields)
}

fn field_usize(
    fields: &BTreeMap<String, String>,
    key: &str,
    line: usize,
) -> Result<usize, ModelError> {
    fields
        .get(key)
        .ok_or(ModelError::Checkpoint {
            line,
            msg: format!("missing header field `{key}`"),
        })?
        .parse()
        .map_err(|_| ModelError::Checkpoint {
            line,
            msg: format!("header field `{key}` is not an integer"),
        })
}

fn field_bool(
    fields: &BTreeMap<String, String>,
    key: &str,
    line: usize,
) -> Result<bool, ModelError> {
    fields
        .get(key)
        .ok_or(ModelError::Checkpoint {
            line,
            msg: format!("missing header field `{key}`"),
        })?
        .parse()
        .map_err(|_| ModelError::Checkpoint {
            line,
            msg: format!("header field `{key}` is not a bool"),
        })
}

fn parse_row(line: &str, line_no: usize) -> Result<(Context, Vec<f64>), ModelError> {
    let body = line.strip_prefix("row").ok_or(ModelError::Checkpoint {
        line: line_no,
        msg: "expected `row` line".into(),
    })?;
    let parts: Vec<&str> = body.split(';').collect();
    if parts.len() != 3 {
        return Err(ModelError::Checkpoint {
            line: line_no,
            msg: "row line must have prompt ; window ; values".into(),
        });
    }
    let parse_tokens = |s: &str| -> Result<Vec<Token>, ModelError> {
        s.split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| ModelError::Checkpoint {
                    line: line_no,
                    msg: format!("bad token `{t}`"),
                })
            })
            .collect()
    };
    let prompt = parse_tokens(parts[0])?;
    let window = parse_tokens(parts[1])?;
    let values = parts[2]
        .split_whitespace()
        .map(|v| {
            v.parse().map_err(|_| ModelError::Checkpoint {
                line: line_no,
                msg: format!("bad value `{v}`"),
            })
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok((Context { prompt, window }, values))
}

/// Trainable policy f, trainable value table g, frozen prior policy.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub policy: TabularPolicy,
    pub value: ValueTable,
    pub prior: TabularPolicy,
}

impl ModelBundle {
    pub fn new(
        policy: TabularPolicy,
        value: ValueTable,
        prior: TabularPolicy,
    ) -> Result<ModelBundle, ModelError> {
        if !prior.is_frozen() {
            return Err(ModelError::Shape("prior policy must be frozen".into()));
        }
        let same = policy.vocab == value.vocab()
            && policy.vocab == prior.vocab
            && policy.max_len == value.max_len()
            && policy.max_len == prior.max_len
            && policy.window == value.window()
            && policy.window == prior.window;
        if !same {
            return Err(ModelError::Shape(
                "policy, value, and prior must share (vocab, max_len, window)".into(),
            ));
        }
        Ok(ModelBundle {
            policy,
            value,
            prior,
        })
    }

    /// Fresh trainable bundle: policy initialized from the (already frozen)
    /// prior's logits, value table at raw zero (g = 0.5).
    pub fn fresh_from_prior(prior: TabularPolicy) -> Result<ModelBundle, ModelError> {
        let policy = prior.unfrozen_copy();
        let value = ValueTable::new(
            prior.prompts(),
            prior.vocab(),
            prior.max_len(),
            prior.window(),
        )?;
        ModelBundle::new(policy, value, prior)
    }

    fn policy_span(&self) -> usize {
        if self.policy.is_frozen() {
            0
        } else {
            self.policy.num_params()
        }
    }

    fn value_span(&self) -> usize {
        if self.value.is_frozen() {
            0
        } else {
            self.value.num_params()
        }
    }

    /// Number of trainable scalars across the bundle.
    pub fn dense_len(&self) -> usize {
        self.policy_span() + self.value_span()
    }

    /// Dense slot of a parameter id; `None` when its table is frozen.
    pub fn dense_index(&self, id: ParamId) -> Option<usize> {
        match id {
            ParamId::Policy(i) => {
                if self.policy.is_frozen() {
                    None
                } else {
                    Some(i as usize)
                }
            }
            ParamId::Value(i) => {
                if self.value.is_frozen() {
                    None
                } else {
                    Some(self.policy_span() + i as usize)
                }
            }
        }
    }

    pub fn dense_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dense_len());
        if !self.policy.is_frozen() {
            for i in 0..self.policy.num_params() {
                out.push(self.policy.get_param(i as u32));
            }
        }
        if !self.value.is_frozen() {
            for i in 0..self.value.num_params() {
                out.push(self.value.get_param(i as u32));
            }
        }
        out
    }

    pub fn apply_dense(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.dense_len() {
            return Err(ModelError::Shape(format!(
                "expected {} dense values, got {}",
                self.dense_len(),
                values.len()
            )));
        }
        let mut cursor = 0;
        if !self.policy.is_frozen() {
            for i in 0..self.policy.num_params() {
                self.policy.set_param(i as u32, values[cursor])?;
                cursor += 1;
            }
        }
        if !self.value.is_frozen() {
            for i in 0..self.value.num_params() {
                self.value.set_param(i as u32, values[cursor])?;
                cursor += 1;
            }
        }
        Ok(())
    }

    /// All trainable parameter ids with their current values, sorted.
    pub fn all_params(&self) -> Vec<(ParamId, f64)> {
        let mut out = Vec::with_capacity(self.dense_len());
        if !self.policy.is_frozen() {
            for i in 0..self.policy.num_params() {
                out.push((ParamId::Policy(i as u32), self.policy.get_param(i as u32)));
            }
        }
        if !self.value.is_frozen() {
            for i in 0..self.value.num_params() {
                out.push((ParamId::Value(i as u32), self.value.get_param(i as u32)));
            }
        }
        out
    }
}

/// Draw one fixed-length answer from a policy under a seeded stream.
pub fn sample_answer<R: Rng>(
    policy: &TabularPolicy,
    prompt: &[Token],
    len: usize,
    rng: &mut R,
) -> Result<Vec<Token>, ModelError> {
    let mut answer = Vec::with_capacity(len);
    for _ in 0..len {
        let dist = policy.next_token_dist(prompt, &answer)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut picked = dist.len() - 1;
        for (v, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                picked = v;
                break;
            }
        }
        answer.push(picked as Token);
    }
    Ok(answer)
}

/// Fit a policy to the selected answers by full-batch gradient ascent on the
/// per-context mean log-likelihood (aggregated from counts; the maximizer is
/// the tabular MLE). Returns a frozen copy; the input policy is untouched.
pub fn fit_sft(
    init: &TabularPolicy,
    dataset: &Dataset,
    selector: SftSelector,
    epochs: usize,
    lr: f64,
) -> Result<TabularPolicy, ModelError> {
    let examples = dataset.examples()?;
    let selected: Vec<&Example> = examples.iter().filter(|e| selector.keeps(e)).collect();
    if selected.is_empty() {
        return Err(ModelError::EmptySelection);
    }
    let mut policy = init.unfrozen_copy();
    let mut counts: Vec<Vec<f64>> = vec![vec![0.0; policy.vocab]; policy.rows.len()];
    for ex in &selected {
        if ex.answer.len() > policy.max_len {
            return Err(ModelError::TooLong {
                len: ex.answer.len(),
                max: policy.max_len,
            });
        }
        for t in 0..ex.answer.len() {
            policy.check_query(&ex.prompt, &ex.answer[..t])?;
            let ctx = policy.context_for(&ex.prompt, &ex.answer[..t]);
            let row = policy.row_index(&ctx).ok_or_else(|| {
                ModelError::Shape("selected answer reaches a context outside the table".into())
            })?;
            counts[row][ex.answer[t] as usize] += 1.0;
        }
    }
    for _ in 0..epochs {
        for (row, count_row) in counts.iter().enumerate() {
            let total: f64 = count_row.iter().sum();
            if total == 0.0 {
                continue;
            }
            let probs = softmax(&policy.rows[row]);
            for v in 0..policy.vocab {
                policy.rows[row][v] += lr * (count_row[v] / total - probs[v]);
            }
        }
    }
    policy.frozen = true;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::Level;
    use approx::assert_abs_diff_eq;

    fn prompts(n: u32) -> Vec<Vec<Token>> {
        (0..n).map(|i| vec![i]).collect()
    }

    #[test]
    fn uniform_dist_and_closed_forms() {
        let p = TabularPolicy::uniform(&prompts(1), 4, 2, 2).unwrap();
        let dist = p.next_token_dist(&[0], &[]).unwrap();
        assert_eq!(dist, vec![0.25, 0.25, 0.25, 0.25]);

        let mut p = TabularPolicy::uniform(&prompts(1), 2, 1, 0).unwrap();
        let ctx = p.context_for(&[0], &[]);
        let row = p.row_index(&ctx).unwrap();
        p.rows[row] = vec![0.0, 3.0f64.ln()];
        let dist = p.next_token_dist(&[0], &[]).unwrap();
        assert_abs_diff_eq!(dist[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(dist[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rows_normalize_and_stay_positive() {
        let p = TabularPolicy::random(&prompts(2), 4, 3, 2, 2.0, 99).unwrap();
        for ctx in p.index.keys() {
            let dist = softmax(p.row(ctx).unwrap());
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(dist.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn unknown_prompt_is_rejected() {
        let p = TabularPolicy::uniform(&prompts(2), 3, 2, 1).unwrap();
        assert!(matches!(
            p.next_token_dist(&[9], &[]),
            Err(ModelError::UnknownPrompt(_))
        ));
    }

    #[test]
    fn sequence_logprob_matches_uniform_closed_form() {
        let p = TabularPolicy::uniform(&prompts(1), 2, 3, 2).unwrap();
        let lp = p.sequence_logprob(&[0], &[0, 1, 0]).unwrap();
        assert_abs_diff_eq!(lp, 3.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert!(p.sequence_logprob(&[0], &[]).is_err());
    }

    #[test]
    fn logprob_exponentiates_to_product_of_steps() {
        let p = TabularPolicy::random(&prompts(1), 3, 3, 2, 1.0, 5).unwrap();
        let answer = [2, 0, 1];
        let mut product = 1.0;
        for t in 0..answer.len() {
            product *= p.next_token_dist(&[0], &answer[..t]).unwrap()[answer[t] as usize];
        }
        assert_abs_diff_eq!(
            p.sequence_prob(&[0], &answer).unwrap(),
            product,
            epsilon = 1e-12
        );
    }

    #[test]
    fn enumeration_is_lexicographic_and_normalized() {
        let p = TabularPolicy::random(&prompts(1), 2, 2, 1, 1.0, 8).unwrap();
        let seqs = p.enumerate_sequences(&[0], 2).unwrap();
        assert_eq!(seqs.len(), 4);
        let keys: Vec<Vec<Token>> = seqs.iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(
            keys,
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        let total: f64 = seqs.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn enumeration_closed_form_and_budget() {
        let mut p = TabularPolicy::uniform(&prompts(1), 3, 1, 0).unwrap();
        let ctx = p.context_for(&[0], &[]);
        let row = p.row_index(&ctx).unwrap();
        p.rows[row] = vec![0.0, 0.0, 2.0f64.ln()];
        let seqs = p.enumerate_sequences(&[0], 1).unwrap();
        let probs: Vec<f64> = seqs.iter().map(|(_, p)| *p).collect();
        assert_abs_diff_eq!(probs[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[2], 0.5, epsilon = 1e-12);

        let big = TabularPolicy::uniform(&prompts(1), 10, 7, 1).unwrap();
        assert!(matches!(
            big.enumerate_sequences(&[0], 7),
            Err(ModelError::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn dist_on_tape_matches_plain_eval() {
        let p = TabularPolicy::random(&prompts(1), 4, 2, 2, 1.5, 21).unwrap();
        let mut tape = Tape::new();
        let nodes = p.dist_on_tape(&mut tape, &[0], &[2]).unwrap();
        let plain = p.next_token_dist(&[0], &[2]).unwrap();
        for (n, e) in nodes.iter().zip(plain.iter()) {
            assert_abs_diff_eq!(tape.value(*n), *e, epsilon = 1e-15);
        }
        assert_eq!(tape.registered_params().len(), 4);

        let frozen = p.frozen_copy();
        let mut tape = Tape::new();
        frozen.dist_on_tape(&mut tape, &[0], &[2]).unwrap();
        assert!(tape.registered_params().is_empty());
    }

    #[test]
    fn frozen_policy_rejects_updates() {
        let p = TabularPolicy::uniform(&prompts(1), 2, 1, 0).unwrap().frozen_copy();
        let mut p2 = p.clone();
        assert!(matches!(p2.set_param(0, 1.0), Err(ModelError::Frozen)));
        assert_eq!(p, p2);
    }

    #[test]
    fn fit_sft_degenerate_mle() {
        let p = TabularPolicy::uniform(&prompts(1), 4, 2, 2).unwrap();
        let ex = Example::new(vec![0], vec![2, 1], vec![1, 1], None).unwrap();
        let data = Dataset::unpaired(Level::Answer, vec![ex; 8]).unwrap();
        let fitted = fit_sft(&p, &data, SftSelector::PositiveOnly, 800, 1.0).unwrap();
        assert!(fitted.is_frozen());
        let prob = fitted.sequence_prob(&[0], &[2, 1]).unwrap();
        assert!(prob >= 0.99, "fitted probability {prob}");
    }

    #[test]
    fn fit_sft_empty_selection_and_paired_input() {
        let p = TabularPolicy::uniform(&prompts(1), 2, 1, 0).unwrap();
        let neg = Example::new(vec![0], vec![0], vec![0], None).unwrap();
        let data = Dataset::unpaired(Level::Answer, vec![neg]).unwrap();
        assert!(matches!(
            fit_sft(&p, &data, SftSelector::PositiveOnly, 10, 0.5),
            Err(ModelError::EmptySelection)
        ));
        let paired = Dataset::paired(Level::Answer, vec![]).unwrap();
        assert!(fit_sft(&p, &paired, SftSelector::All, 10, 0.5).is_err());
    }

    #[test]
    fn fit_sft_recovers_sampling_policy() {
        // Tabular MLE consistency: KL(true || fitted) shrinks with N.
        let truth = TabularPolicy::random(&prompts(1), 4, 2, 2, 1.0, 13).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut examples = Vec::new();
        for _ in 0..100_000 {
            let answer = sample_answer(&truth, &[0], 2, &mut rng).unwrap();
            examples.push(Example::new(vec![0], answer, vec![1, 1], None).unwrap());
        }
        let data = Dataset::unpaired(Level::Answer, examples).unwrap();
        let init = TabularPolicy::uniform(&prompts(1), 4, 2, 2).unwrap();
        let fitted = fit_sft(&init, &data, SftSelector::All, 400, 1.0).unwrap();

        let true_seqs = truth.enumerate_sequences(&[0], 2).unwrap();
        let fit_seqs = fitted.enumerate_sequences(&[0], 2).unwrap();
        let kl: f64 = true_seqs
            .iter()
            .zip(fit_seqs.iter())
            .map(|((_, p), (_, q))| if *p > 0.0 { p * (p / q).ln() } else { 0.0 })
            .sum();
        assert!(kl < 0.01, "KL(true || fitted) = {kl}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = TabularPolicy::random(&prompts(2), 3, 2, 1, 1.7, 33).unwrap();
        let text = p.to_text();
        let back = TabularPolicy::from_text(&text).unwrap();
        assert_eq!(p, back);
        assert_eq!(text, back.to_text());

        let mut v = ValueTable::new(&prompts(2), 3, 2, 1).unwrap();
        v.set_param(0, -0.75).unwrap();
        let back = ValueTable::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn missing_rows_fall_back_to_uniform() {
        let p = TabularPolicy::random(&prompts(1), 2, 2, 1, 1.0, 3).unwrap();
        let mut text: Vec<String> = p.to_text().lines().map(String::from).collect();
        text.retain(|l| !l.starts_with("row 0 ; 1 ;"));
        let truncated = TabularPolicy::from_text(&(text.join("\n") + "\n")).unwrap();
        let dist = truncated.next_token_dist(&[0], &[1]).unwrap();
        assert_eq!(dist, vec![0.5, 0.5]);
    }

    #[test]
    fn value_table_stays_strictly_inside_unit_interval() {
        // Beyond |raw| ~ 36 the sigmoid saturates in f64; probe the extremes
        // of the representable strict range.
        let mut v = ValueTable::new(&prompts(1), 2, 2, 1).unwrap();
        v.set_param(0, 30.0).unwrap();
        v.set_param(1, -30.0).unwrap();
        for i in 0..v.num_params() {
            let g = sigmoid(v.get_param(i as u32));
            assert!(g > 0.0 && g < 1.0);
        }
        assert_eq!(v.g(&[0], &[]).unwrap(), sigmoid(v.raw[0]));
    }

    #[test]
    fn bundle_shape_checks_and_dense_round_trip() {
        let prior = TabularPolicy::uniform(&prompts(1), 3, 2, 1).unwrap();
        assert!(ModelBundle::fresh_from_prior(prior.clone()).is_err()); // not frozen yet
        let mut bundle = ModelBundle::fresh_from_prior(prior.frozen_copy()).unwrap();
        let n = bundle.dense_len();
        assert_eq!(
            n,
            bundle.policy.num_params() + bundle.value.num_params()
        );
        let mut vals = bundle.dense_values();
        vals[0] = 0.5;
        vals[n - 1] = -0.25;
        bundle.apply_dense(&vals).unwrap();
        assert_eq!(bundle.dense_values(), vals);

        // Frozen value table drops out of the dense space.
        bundle.value.set_frozen(true);
        assert_eq!(bundle.dense_len(), bundle.policy.num_params());
    }
}
