//! Shared fixtures for the hot-path benchmarks.

use pipa_core::models::{ModelBundle, TabularPolicy, ValueTable};
use pipa_core::seqdata::{Dataset, Example, Level, Token};
use pipa_core::synthworld::World;

/// A small trainable bundle over one prompt.
pub fn bench_bundle(vocab: usize, answer_len: usize, seed: u64) -> ModelBundle {
    let prompts: Vec<Vec<Token>> = vec![vec![0]];
    let window = answer_len.saturating_sub(1).max(1);
    let policy = TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, seed).unwrap();
    let prior = TabularPolicy::random(&prompts, vocab, answer_len, window, 1.0, seed + 1)
        .unwrap()
        .frozen_copy();
    let value = ValueTable::new(&prompts, vocab, answer_len, window).unwrap();
    ModelBundle::new(policy, value, prior).unwrap()
}

/// A batch-sized answer-level dataset sampled from a seeded world.
pub fn bench_dataset(n: usize) -> (World, Dataset) {
    let world = World::make(9, 2, 4, 2).unwrap();
    let data = world.sample_dataset(n, Level::Answer, 17).unwrap();
    (world, data)
}

/// One answer-level example matching `bench_bundle(vocab, answer_len, _)`.
pub fn bench_example(answer_len: usize, label: u8) -> Example {
    Example::new(
        vec![0],
        (0..answer_len as Token).map(|t| t % 3).collect(),
        vec![label; answer_len],
        None,
    )
    .unwrap()
}
