//! Synthetic generative worlds with exact Bayes oracles.
//!
//! A [`World`] is the explicit data-generating law p(x) * p(c|x) * p(y|x,c):
//! a prompt distribution, a per-prompt class prior, one answer policy per
//! class, and a per-prompt changepoint ("fault") distribution that drives
//! step labels of negative answers: a changepoint k labels tokens before
//! position k-1 correct and the rest incorrect, so k = 1 means no correct
//! prefix. Everything is small enough to enumerate, which makes answer and
//! token posteriors exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::models::{sample_answer, ModelError, TabularPolicy, ENUM_BUDGET};
use crate::seqdata::{DataError, Dataset, Example, Level, Token};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("distribution not normalized: {0}")]
    NotNormalized(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("posterior undefined: the query has zero mass under the world")]
    UndefinedPosterior,
    #[error("prefix length {len} out of range for answer length {answer_len}")]
    BadPrefix { len: usize, answer_len: usize },
    #[error("world file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Ground-truth joint distribution with exact oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    prompt_probs: Vec<f64>,
    class_prior: Vec<f64>,
    positive: TabularPolicy,
    negative: TabularPolicy,
    /// Per prompt: distribution over changepoints k = 1..=answer_len
    /// (index i holds the probability of k = i + 1).
    fault: Vec<Vec<f64>>,
    answer_len: usize,
}

fn check_simplex(name: &str, probs: &[f64]) -> Result<(), WorldError> {
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(WorldError::NotNormalized(format!(
            "{name} has entries outside [0, 1]"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(WorldError::NotNormalized(format!(
            "{name} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn simplex_draw<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|&d| d / total).collect()
}

fn draw_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl World {
    pub fn new(
        prompt_probs: Vec<f64>,
        class_prior: Vec<f64>,
        positive: TabularPolicy,
        negative: TabularPolicy,
        fault: Vec<Vec<f64>>,
    ) -> Result<World, WorldError> {
        let prompts = positive.prompts().to_vec();
        if prompt_probs.len() != prompts.len()
            || class_prior.len() != prompts.len()
            || fault.len() != prompts.len()
        {
            return Err(WorldError::Shape(
                "prompt_probs, class_prior, and fault must have one entry per prompt".into(),
            ));
        }
        if negative.prompts() != prompts.as_slice() {
            return Err(WorldError::Shape(
                "positive and negative policies must share prompts".into(),
            ));
        }
        if positive.vocab() != negative.vocab() || positive.max_len() != negative.max_len() {
            return Err(WorldError::Shape(
                "positive and negative policies must share (vocab, answer_len)".into(),
            ));
        }
        let answer_len = positive.max_len();
        check_simplex("p(x)", &prompt_probs)?;
        if class_prior.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(WorldError::NotNormalized(
                "p(c=1|x) entries must lie in [0, 1]".into(),
            ));
        }
        for (i, row) in fault.iter().enumerate() {
            if row.len() != answer_len {
                return Err(WorldError::Shape(format!(
                    "fault row {i} has {} entries, expected {answer_len}",
                    row.len()
                )));
            }
            check_simplex(&format!("fault row {i}"), row)?;
        }
        Ok(World {
            prompt_probs,
            class_prior,
            positive,
            negative,
            fault,
            answer_len,
        })
    }

    /// Seeded random world over `num_prompts` single-token prompts.
    pub fn make(
        seed: u64,
        num_prompts: usize,
        vocab: usize,
        answer_len: usize,
    ) -> Result<World, WorldError> {
        let count = vocab
            .checked_pow(answer_len as u32)
            .unwrap_or(usize::MAX);
        if count > ENUM_BUDGET {
            return Err(WorldError::Model(ModelError::EnumerationBudget {
                count,
                budget: ENUM_BUDGET,
            }));
        }
        let prompts: Vec<Vec<Token>> = (0..num_prompts as u32).map(|i| vec![i]).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let prompt_probs = simplex_draw(&mut rng, num_prompts);
        let class_prior: Vec<f64> = (0..num_prompts)
            .map(|_| rng.random_range(0.25..0.75))
            .collect();
        let window = answer_len.saturating_sub(1);
        let pos_seed = rng.random::<u64>();
        let neg_seed = rng.random::<u64>();
        let positive =
            TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, pos_seed)?
                .frozen_copy();
        let negative =
            TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, neg_seed)?
                .frozen_copy();
        let fault: Vec<Vec<f64>> = (0..num_prompts)
            .map(|_| simplex_draw(&mut rng, answer_len))
            .collect();
        World::new(prompt_probs, class_prior, positive, negative, fault)
    }

    /// Seeded world built for step-label experiments: negative answers share
    /// every next-token conditional with the positive policy except at the
    /// final position, and the changepoint sits at k = answer_len with
    /// probability one. Negative answers therefore carry a correct prefix
    /// over the first answer_len - 1 tokens (half the tokens at length 2).
    pub fn make_changepoint(
        seed: u64,
        num_prompts: usize,
        vocab: usize,
        answer_len: usize,
    ) -> Result<World, WorldError> {
        if answer_len < 2 {
            return Err(WorldError::Shape(
                "changepoint worlds need answers of at least two tokens".into(),
            ));
        }
        let count = vocab
            .checked_pow(answer_len as u32)
            .unwrap_or(usize::MAX);
        if count > ENUM_BUDGET {
            return Err(WorldError::Model(ModelError::EnumerationBudget {
                count,
                budget: ENUM_BUDGET,
            }));
        }
        let prompts: Vec<Vec<Token>> = (0..num_prompts as u32).map(|i| vec![i]).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let window = answer_len - 1;
        let pos_seed = rng.random::<u64>();
        let positive =
            TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, pos_seed)?;
        let mut negative = positive.clone();
        let contexts: Vec<(usize, usize)> = negative
            .contexts()
            .map(|(c, i)| (c.window.len(), i))
            .collect();
        for (window_len, row) in contexts {
            if window_len == answer_len - 1 {
                for v in 0..vocab {
                    negative.set_param(
                        negative.param_index(row, v),
                        rng.random_range(-1.5..1.5),
                    )?;
                }
            }
        }
        let prompt_probs = vec![1.0 / num_prompts as f64; num_prompts];
        let class_prior: Vec<f64> = (0..num_prompts)
            .map(|_| rng.random_range(0.35..0.65))
            .collect();
        let mut fault_row = vec![0.0; answer_len];
        fault_row[answer_len - 1] = 1.0;
        let fault = vec![fault_row; num_prompts];
        World::new(
            prompt_probs,
            class_prior,
            positive.frozen_copy(),
            negative.frozen_copy(),
            fault,
        )
    }

    pub fn prompts(&self) -> &[Vec<Token>] {
        self.positive.prompts()
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt_probs.len()
    }

    pub fn vocab(&self) -> usize {
        self.positive.vocab()
    }

    pub fn answer_len(&self) -> usize {
        self.answer_len
    }

    pub fn prompt_probs(&self) -> &[f64] {
        &self.prompt_probs
    }

    pub fn class_prior(&self, prompt_index: usize) -> f64 {
        self.class_prior[prompt_index]
    }

    pub fn fault_row(&self, prompt_index: usize) -> &[f64] {
        &self.fault[prompt_index]
    }

    pub fn positive_policy(&self) -> &TabularPolicy {
        &self.positive
    }

    pub fn negative_policy(&self) -> &TabularPolicy {
        &self.negative
    }

    fn prompt_index(&self, prompt: &[Token]) -> Result<usize, WorldError> {
        self.prompts()
            .binary_search_by(|p| p.as_slice().cmp(prompt))
            .map_err(|_| WorldError::Model(ModelError::UnknownPrompt(prompt.to_vec())))
    }

    /// Probability of a (possibly empty) prefix under one class policy.
    fn prefix_prob(&self, policy: &TabularPolicy, prompt: &[Token], prefix: &[Token]) -> Result<f64, WorldError> {
        let mut prob = 1.0;
        for t in 0..prefix.len() {
            prob *= policy.token_prob(prompt, &prefix[..t], prefix[t])?;
        }
        Ok(prob)
    }

    /// Joint prefix masses (p(c=1|x)*p(prefix|x,1), p(c=0|x)*p(prefix|x,0)).
    fn prefix_parts(&self, prompt: &[Token], prefix: &[Token]) -> Result<(f64, f64), WorldError> {
        let idx = self.prompt_index(prompt)?;
        if prefix.len() > self.answer_len {
            return Err(WorldError::BadPrefix {
                len: prefix.len(),
                answer_len: self.answer_len,
            });
        }
        let pc = self.class_prior[idx];
        let a = pc * self.prefix_prob(&self.positive, prompt, prefix)?;
        let b = (1.0 - pc) * self.prefix_prob(&self.negative, prompt, prefix)?;
        Ok((a, b))
    }

    /// P(changepoint k > threshold) for the prompt, i.e. the chance that the
    /// token at 0-indexed position `threshold - 1` is still labeled correct.
    fn fault_tail(&self, prompt_index: usize, threshold: usize) -> f64 {
        self.fault[prompt_index]
            .iter()
            .enumerate()
            .filter(|(i, _)| i + 1 > threshold)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Exact answer-label posterior p(c=1 | x, y).
    pub fn exact_posterior(&self, prompt: &[Token], answer: &[Token]) -> Result<f64, WorldError> {
        let (a, b) = self.prefix_parts(prompt, answer)?;
        if a + b == 0.0 {
            return Err(WorldError::UndefinedPosterior);
        }
        Ok(a / (a + b))
    }

    /// Exact step-label posterior p(c_t=1 | x, y_{<=t}) under the changepoint
    /// label model; `t` is a 0-indexed token position within `answer`.
    pub fn exact_token_posterior(
        &self,
        prompt: &[Token],
        answer: &[Token],
        t: usize,
    ) -> Result<f64, WorldError> {
        if t >= answer.len() || t >= self.answer_len {
            return Err(WorldError::BadPrefix {
                len: t + 1,
                answer_len: self.answer_len.min(answer.len()),
            });
        }
        let idx = self.prompt_index(prompt)?;
        let (a, b) = self.prefix_parts(prompt, &answer[..=t])?;
        if a + b == 0.0 {
            return Err(WorldError::UndefinedPosterior);
        }
        Ok((a + b * self.fault_tail(idx, t + 1)) / (a + b))
    }

    /// Posterior that the *next* token's label is 1 given the prefix so far:
    /// the quantity the value model estimates. Answer-level data labels every
    /// token with the answer label, step-level data follows the changepoint.
    pub fn value_posterior(
        &self,
        prompt: &[Token],
        prefix: &[Token],
        level: Level,
    ) -> Result<f64, WorldError> {
        if prefix.len() >= self.answer_len {
            return Err(WorldError::BadPrefix {
                len: prefix.len(),
                answer_len: self.answer_len,
            });
        }
        let idx = self.prompt_index(prompt)?;
        let (a, b) = self.prefix_parts(prompt, prefix)?;
        if a + b == 0.0 {
            return Err(WorldError::UndefinedPosterior);
        }
        let tail = match level {
            Level::Answer => 0.0,
            Level::Step => self.fault_tail(idx, prefix.len() + 1),
        };
        Ok((a + b * tail) / (a + b))
    }

    /// The true marginal next-token policy p(y_t | x, y_{<t}), re-keyed onto
    /// the requested window (which must cover the full reachable prefix).
    pub fn marginal_policy(&self, window: usize) -> Result<TabularPolicy, WorldError> {
        if window + 1 < self.answer_len {
            return Err(WorldError::Shape(format!(
                "window {window} cannot represent the exact marginal for answer length {}",
                self.answer_len
            )));
        }
        let mut out = TabularPolicy::uniform(
            self.prompts(),
            self.vocab(),
            self.answer_len,
            window,
        )?;
        let contexts: Vec<crate::models::Context> = {
            let mut keys = Vec::new();
            for prompt in self.prompts() {
                for len in 0..self.answer_len {
                    collect_prefixes(self.vocab(), prompt, len, &mut keys);
                }
            }
            keys
        };
        for ctx in contexts {
            let (a, b) = self.prefix_parts(&ctx.prompt, &ctx.window)?;
            let denom = a + b;
            let mut logits = Vec::with_capacity(self.vocab());
            for v in 0..self.vocab() {
                let a2 = a * self.positive.token_prob(&ctx.prompt, &ctx.window, v as Token)?;
                let b2 = b * self.negative.token_prob(&ctx.prompt, &ctx.window, v as Token)?;
                logits.push(((a2 + b2) / denom).ln());
            }
            let row = out
                .row_index(&ctx)
                .ok_or_else(|| WorldError::Shape("marginal context missing".into()))?;
            for (v, &logit) in logits.iter().enumerate() {
                out.set_param(out.param_index(row, v), logit)?;
            }
        }
        Ok(out.frozen_copy())
    }

    /// The true class-conditional policy, re-keyed onto the model window.
    pub fn conditional_policy(
        &self,
        positive: bool,
        window: usize,
    ) -> Result<TabularPolicy, WorldError> {
        let source = if positive { &self.positive } else { &self.negative };
        Ok(source.rekeyed(window)?.frozen_copy())
    }

    /// Draw an i.i.d. dataset. Step-level sampling attaches per-token labels
    /// (changepoint model for negatives), explicit step starts, and oracle-
    /// derived q values 2 * p(c_t=1 | x, y_{<=t}) - 1.
    pub fn sample_dataset(
        &self,
        n: usize,
        level: Level,
        seed: u64,
    ) -> Result<Dataset, WorldError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut examples = Vec::with_capacity(n);
        let t_len = self.answer_len;
        for _ in 0..n {
            let x_idx = draw_index(&mut rng, &self.prompt_probs);
            let prompt = self.prompts()[x_idx].clone();
            let correct = rng.random::<f64>() < self.class_prior[x_idx];
            let policy = if correct { &self.positive } else { &self.negative };
            let answer = sample_answer(policy, &prompt, t_len, &mut rng)?;
            let ex = match level {
                Level::Answer => Example::new(
                    prompt,
                    answer,
                    vec![u8::from(correct); t_len],
                    None,
                )?,
                Level::Step => {
                    let labels = if correct {
                        vec![1; t_len]
                    } else {
                        let k = draw_index(&mut rng, &self.fault[x_idx]) + 1;
                        (0..t_len).map(|t| u8::from(t + 1 < k)).collect()
                    };
                    let mut q = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        q.push(2.0 * self.exact_token_posterior(&prompt, &answer, t)? - 1.0);
                    }
                    Example::new(prompt, answer, labels, Some((0..t_len).collect()))?
                        .with_q_values(q)?
                }
            };
            examples.push(ex);
        }
        Ok(Dataset::unpaired(level, examples)?)
    }

    pub fn to_text(&self) -> String {
        let fmt = |xs: &[f64]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = format!(
            "world prompts={} vocab={} answer_len={}\n",
            self.num_prompts(),
            self.vocab(),
            self.answer_len
        );
        out.push_str(&format!("px {}\n", fmt(&self.prompt_probs)));
        out.push_str(&format!("pc {}\n", fmt(&self.class_prior)));
        for row in &self.fault {
            out.push_str(&format!("fault {}\n", fmt(row)));
        }
        out.push_str("positive\n");
        out.push_str(&self.positive.to_text());
        out.push_str("negative\n");
        out.push_str(&self.negative.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<World, WorldError> {
        let lines: Vec<&str> = text.lines().collect();
        let parse_err = |line: usize, msg: &str| WorldError::Parse {
            line,
            msg: msg.to_string(),
        };
        let header = lines.first().ok_or(parse_err(1, "empty world file"))?;
        if !header.starts_with("world ") {
            return Err(parse_err(1, "expected `world` header"));
        }
        let mut num_prompts = None;
        for part in header.split_whitespace().skip(1) {
            if let Some((k, v)) = part.split_once('=') {
                if k == "prompts" {
                    num_prompts = v.parse::<usize>().ok();
                }
            }
        }
        let num_prompts = num_prompts.ok_or(parse_err(1, "missing prompts field"))?;
        let parse_floats = |line: usize, prefix: &str| -> Result<Vec<f64>, WorldError> {
            let text = lines
                .get(line)
                .ok_or(parse_err(line + 1, "unexpected end of file"))?;
            let body = text
                .strip_prefix(prefix)
                .ok_or(parse_err(line + 1, &format!("expected `{prefix}` line")))?;
            body.split_whitespace()
                .map(|v| {
                    v.parse()
                        .map_err(|_| parse_err(line + 1, &format!("bad float `{v}`")))
                })
                .collect()
        };
        let prompt_probs = parse_floats(1, "px ")?;
        let class_prior = parse_floats(2, "pc ")?;
        let mut fault = Vec::with_capacity(num_prompts);
        for i in 0..num_prompts {
            fault.push(parse_floats(3 + i, "fault ")?);
        }
        let mut cursor = 3 + num_prompts;
        if lines.get(cursor).copied() != Some("positive") {
            return Err(parse_err(cursor + 1, "expected `positive` marker"));
        }
        let (positive, next) = TabularPolicy::from_lines(&lines, cursor + 1)?;
        cursor = next;
        if lines.get(cursor).copied() != Some("negative") {
            return Err(parse_err(cursor + 1, "expected `negative` marker"));
        }
        let (negative, _) = TabularPolicy::from_lines(&lines, cursor + 1)?;
        World::new(prompt_probs, class_prior, positive, negative, fault)
    }
}

fn collect_prefixes(
    vocab: usize,
    prompt: &[Token],
    len: usize,
    out: &mut Vec<crate::models::Context>,
) {
    let count = vocab.pow(len as u32);
    for seq in 0..count {
        let mut window = vec![0 as Token; len];
        let mut rest = seq;
        for pos in (0..len).rev() {
            window[pos] = (rest % vocab) as Token;
            rest /= vocab;
        }
        out.push(crate::models::Context {
            prompt: prompt.to_vec(),
            window,
        });
    }
}
