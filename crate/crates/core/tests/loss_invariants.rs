//! Cross-cutting invariants of the loss zoo: posterior bounds, mask
//! reductions, stop-gradient masking, permutation invariance, and the
//! behavior of the batch KL estimator.

use pipa_core::grad::{backward, Tape};
use pipa_core::losses::{
    build_record_loss, dpo_loss, estimate_kl_z, kto_loss, per_token_terms, pipa_m_loss,
    step_dpo_loss, step_kto_loss, LossConfig, LossKind, RecordRef, StepDpoVariant,
    StepKtoVariant, ZMode,
};
use pipa_core::models::{ModelBundle, TabularPolicy, ValueTable};
use pipa_core::seqdata::{Dataset, Example, Level, PairedExample, Token};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn prompts(n: u32) -> Vec<Vec<Token>> {
    (0..n).map(|i| vec![i]).collect()
}

fn random_bundle(vocab: usize, answer_len: usize, window: usize, seed: u64) -> ModelBundle {
    let p = prompts(1);
    let policy = TabularPolicy::random(&p, vocab, answer_len, window, 1.0, seed).unwrap();
    let prior = TabularPolicy::random(&p, vocab, answer_len, window, 1.0, seed ^ 0xabcd)
        .unwrap()
        .frozen_copy();
    let value = ValueTable::random(&p, vocab, answer_len, window, 1.0, seed ^ 0x1234).unwrap();
    ModelBundle::new(policy, value, prior).unwrap()
}

fn random_answer(rng: &mut ChaCha12Rng, vocab: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn per_token_posteriors_respect_their_codomains() {
    // PIPA-M's F stays in [0, 1 - eps]; PIPA-N's tau form stays in [0, 1).
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let eps = 1e-6;
    let mut clip_hits = 0usize;
    let mut total = 0usize;
    for seed in 0..10_000u64 {
        let bundle = random_bundle(3, 2, 1, seed);
        let answer = random_answer(&mut rng, 3, 2);
        let label = rng.random_range(0..2) as u8;
        let ex = Example::new(vec![0], answer, vec![label; 2], None).unwrap();

        let cfg_m = LossConfig::new(LossKind::PipaM);
        for term in per_token_terms(&bundle, &ex, &cfg_m).unwrap() {
            assert!(
                (0.0..=1.0 - eps).contains(&term.posterior),
                "PIPA-M posterior {} escaped [0, 1-eps]",
                term.posterior
            );
            // The implied decomposition: after the clip, the implied
            // negative token mass p * (1 - F) keeps at least an eps sliver.
            assert!(term.prior * (1.0 - term.posterior) >= term.prior * eps * 0.999);
            clip_hits += usize::from(term.clipped);
            total += 1;
        }

        let cfg_n = LossConfig::new(LossKind::PipaN);
        for term in per_token_terms(&bundle, &ex, &cfg_n).unwrap() {
            assert!(
                term.posterior >= 0.0 && term.posterior < 1.0,
                "PIPA-N posterior {} escaped [0, 1)",
                term.posterior
            );
        }
    }
    // The clip is a boundary device, not the common path.
    let rate = clip_hits as f64 / total as f64;
    println!("pipa-m clip violation rate over random parameterizations: {rate:.4}");
    assert!(rate < 0.5);
}

#[test]
fn vacuous_masks_reduce_step_dpo_to_dpo() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for seed in 0..100u64 {
        let bundle = random_bundle(3, 3, 2, seed);
        let chosen =
            Example::new(vec![0], random_answer(&mut rng, 3, 3), vec![1; 3], None).unwrap();
        let rejected =
            Example::new(vec![0], random_answer(&mut rng, 3, 3), vec![0; 3], None).unwrap();
        let pair = PairedExample::new(chosen, rejected).unwrap();
        let cfg = LossConfig::new(LossKind::Dpo);

        let mut values = Vec::new();
        for variant in [StepDpoVariant::Dpo, StepDpoVariant::L0, StepDpoVariant::L1] {
            let mut tape = Tape::new();
            let root = step_dpo_loss(&mut tape, &bundle, &pair, &cfg, variant).unwrap();
            values.push(tape.value(root));
        }
        assert!((values[0] - values[1]).abs() <= 1e-12);
        assert!((values[0] - values[2]).abs() <= 1e-12);
    }
}

#[test]
fn full_masks_freeze_the_rejected_answer() {
    // All rejected steps correct: L1 keeps the DPO forward value but lets
    // gradient flow only through the chosen answer's terms.
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    for seed in 0..100u64 {
        let bundle = random_bundle(6, 2, 2, seed);
        // Disjoint token ranges: rejected rows beyond the shared root row
        // are visited by the rejected answer only.
        let chosen_tokens: Vec<Token> = vec![rng.random_range(0..3), rng.random_range(0..3)];
        let rejected_tokens: Vec<Token> =
            vec![rng.random_range(3..6), rng.random_range(3..6)];
        let chosen = Example::new(vec![0], chosen_tokens, vec![1; 2], None).unwrap();
        let rejected = Example::new(vec![0], rejected_tokens.clone(), vec![1; 2], None).unwrap();
        let pair = PairedExample::new(chosen, rejected).unwrap();
        let cfg = LossConfig::new(LossKind::Dpo);

        let mut tape_dpo = Tape::new();
        let dpo_root =
            step_dpo_loss(&mut tape_dpo, &bundle, &pair, &cfg, StepDpoVariant::Dpo).unwrap();
        let mut tape_l1 = Tape::new();
        let l1_root =
            step_dpo_loss(&mut tape_l1, &bundle, &pair, &cfg, StepDpoVariant::L1).unwrap();
        assert_eq!(tape_dpo.value(dpo_root), tape_l1.value(l1_root));

        // The second rejected position's row is reached only through the
        // stop-gradient block, so its gradient vanishes bitwise under L1
        // while plain DPO moves it.
        let second_row = bundle
            .policy
            .row_param_ids(&[0], &rejected_tokens[..1])
            .unwrap();
        let g_l1 = backward(&tape_l1, l1_root).unwrap();
        let g_dpo = backward(&tape_dpo, dpo_root).unwrap();
        let mut dpo_moves = false;
        for id in second_row {
            assert_eq!(g_l1.get(id), 0.0);
            dpo_moves |= g_dpo.get(id) != 0.0;
        }
        assert!(dpo_moves, "plain DPO should reach the rejected row");
    }
}

#[test]
fn single_step_step_kto_equals_kto() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for seed in 0..100u64 {
        let bundle = random_bundle(3, 3, 2, seed);
        let label = rng.random_range(0..2) as u8;
        let z0 = rng.random_range(-1.0..1.5);
        let ex = Example::new(
            vec![0],
            random_answer(&mut rng, 3, 3),
            vec![label; 3],
            Some(vec![0]),
        )
        .unwrap();
        let cfg = LossConfig::new(LossKind::Kto);

        let mut t1 = Tape::new();
        let kto = kto_loss(&mut t1, &bundle, &ex, z0, &cfg).unwrap();
        let mut t2 = Tape::new();
        let step = step_kto_loss(&mut t2, &bundle, &ex, z0, StepKtoVariant::Original).unwrap();
        assert!(
            (t1.value(kto) - t2.value(step)).abs() <= 1e-12,
            "K=1 reduction broke: {} vs {}",
            t1.value(kto),
            t2.value(step)
        );
    }
}

#[test]
fn step_kto_l1_masks_correct_steps_of_incorrect_answers() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for seed in 0..100u64 {
        let bundle = random_bundle(6, 3, 2, seed);
        // Position 1 sits in a correct step and its context window [y0] is
        // disjoint from every other context the loss touches.
        let answer: Vec<Token> = vec![
            rng.random_range(3..6),
            rng.random_range(3..6),
            rng.random_range(0..3),
        ];
        let ex = Example::new(vec![0], answer.clone(), vec![1, 1, 0], None).unwrap();
        let mut t = Tape::new();
        let root = step_kto_loss(&mut t, &bundle, &ex, 0.3, StepKtoVariant::L1).unwrap();
        let grads = backward(&t, root).unwrap();
        let masked_row = bundle.policy.row_param_ids(&[0], &answer[..1]).unwrap();
        for id in masked_row {
            assert_eq!(grads.get(id), 0.0);
        }

        // A fully correct answer reduces to the positive KTO branch.
        let pos = Example::new(vec![0], answer.clone(), vec![1; 3], None).unwrap();
        let mut t_l1 = Tape::new();
        let l1 = step_kto_loss(&mut t_l1, &bundle, &pos, 0.3, StepKtoVariant::L1).unwrap();
        let mut t_kto = Tape::new();
        let kto = kto_loss(&mut t_kto, &bundle, &pos, 0.3, &LossConfig::new(LossKind::Kto)).unwrap();
        assert!((t_l1.value(l1) - t_kto.value(kto)).abs() <= 1e-12);
    }
}

#[test]
fn batch_loss_sum_is_permutation_invariant() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let bundle = random_bundle(3, 2, 1, 77);
    let examples: Vec<Example> = (0..16)
        .map(|_| {
            let label = rng.random_range(0..2) as u8;
            Example::new(vec![0], random_answer(&mut rng, 3, 2), vec![label; 2], None).unwrap()
        })
        .collect();
    let cfg = LossConfig::new(LossKind::PipaM);
    let total = |order: &[usize]| -> f64 {
        order
            .iter()
            .map(|&i| {
                let mut tape = Tape::new();
                let root = build_record_loss(
                    &mut tape,
                    &bundle,
                    RecordRef::Unpaired(&examples[i]),
                    &cfg,
                    None,
                )
                .unwrap();
                tape.value(root)
            })
            .sum()
    };
    let forward: Vec<usize> = (0..16).collect();
    let mut reversed = forward.clone();
    reversed.reverse();
    let mut shuffled = forward.clone();
    shuffled.shuffle(&mut rng);
    let base = total(&forward);
    assert!((base - total(&reversed)).abs() <= 1e-12);
    assert!((base - total(&shuffled)).abs() <= 1e-12);
}

#[test]
fn batch_z_estimate_concentrates_toward_exact() {
    // Matched setting: batch answers drawn from a sharply peaked policy
    // against a flat prior, so the log ratio is positive on most drawn mass
    // and the max(0, .) floor's bias is small. The estimator's spread must
    // shrink with batch size and the large-batch median must sit near the
    // exact KL.
    let p = prompts(1);
    let policy = TabularPolicy::random(&p, 3, 2, 1, 4.0, 99).unwrap();
    let prior = TabularPolicy::uniform(&p, 3, 2, 1).unwrap().frozen_copy();
    let value = ValueTable::new(&p, 3, 2, 1).unwrap();
    let bundle = ModelBundle::new(policy, value, prior).unwrap();
    let probe = Example::new(vec![0], vec![0, 0], vec![1, 1], None).unwrap();
    let exact = estimate_kl_z(&bundle, &[&probe], ZMode::Exact).unwrap()[0];
    assert!(exact > 0.0);

    // Population limit of the estimator: E_{y ~ f} max(0, r(y)), enumerable
    // here. The floor makes it an upper bound on the KL; in this matched
    // sharp-policy setting the gap is a few percent.
    let limit: f64 = bundle
        .policy
        .enumerate_sequences(&[0], 2)
        .unwrap()
        .iter()
        .map(|(y, pf)| {
            let r = pf.ln() - bundle.prior.sequence_logprob(&[0], y).unwrap();
            pf * r.max(0.0)
        })
        .sum();
    assert!(limit >= exact);
    assert!(
        limit - exact < 0.15 * exact,
        "estimator limit {limit} too far from exact z {exact}"
    );

    let mut medians_to_exact = Vec::new();
    let mut medians_to_limit = Vec::new();
    let mut spreads = Vec::new();
    for &batch_size in &[4usize, 64, 512] {
        let mut err_exact = Vec::new();
        let mut err_limit = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let examples: Vec<Example> = (0..batch_size)
                .map(|_| {
                    let answer =
                        pipa_core::models::sample_answer(&bundle.policy, &[0], 2, &mut rng)
                            .unwrap();
                    Example::new(vec![0], answer, vec![1, 1], None).unwrap()
                })
                .collect();
            let refs: Vec<&Example> = examples.iter().collect();
            let est = estimate_kl_z(&bundle, &refs, ZMode::BatchEstimate).unwrap();
            err_exact.push((est[0] - exact).abs());
            err_limit.push((est[0] - limit).abs());
        }
        let sorted = {
            let mut s = err_exact.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s
        };
        medians_to_exact.push(pipa_core::verify::median(&err_exact));
        medians_to_limit.push(pipa_core::verify::median(&err_limit));
        spreads.push(sorted.last().unwrap() - sorted.first().unwrap());
    }
    println!(
        "batch z: exact {exact:.4}, limit {limit:.4}; median |est-exact| at B=4,64,512: \
         {medians_to_exact:?}; median |est-limit|: {medians_to_limit:?}; spreads {spreads:?}"
    );
    assert!(
        spreads[2] < spreads[0],
        "estimator spread should shrink with batch size: {spreads:?}"
    );
    assert!(
        medians_to_limit[2] < 0.08,
        "large batches should concentrate on the estimator limit: {medians_to_limit:?}"
    );
    assert!(
        medians_to_exact[2] <= medians_to_exact[0] + 1e-9,
        "error to exact z should not grow with batch size: {medians_to_exact:?}"
    );
    assert!(
        medians_to_exact[2] < 0.2 * exact.max(1.0),
        "large-batch estimate should land near exact z = {exact}: {medians_to_exact:?}"
    );
}

#[test]
fn pipa_losses_reject_paired_and_dpo_rejects_unpaired() {
    let bundle = random_bundle(3, 2, 1, 5);
    let ex = Example::new(vec![0], vec![0, 1], vec![1, 1], None).unwrap();
    let pair = PairedExample::new(
        ex.clone(),
        Example::new(vec![0], vec![2, 2], vec![0, 0], None).unwrap(),
    )
    .unwrap();
    let paired = Dataset::paired(Level::Answer, vec![pair]).unwrap();
    let unpaired = Dataset::unpaired(Level::Answer, vec![ex]).unwrap();

    let mut tape = Tape::new();
    let record = match &paired {
        Dataset::Paired { pairs, .. } => RecordRef::Paired(&pairs[0]),
        _ => unreachable!(),
    };
    assert!(build_record_loss(
        &mut tape,
        &bundle,
        record,
        &LossConfig::new(LossKind::PipaM),
        None
    )
    .is_err());

    let mut tape = Tape::new();
    let record = match &unpaired {
        Dataset::Unpaired { examples, .. } => RecordRef::Unpaired(&examples[0]),
        _ => unreachable!(),
    };
    assert!(build_record_loss(
        &mut tape,
        &bundle,
        record,
        &LossConfig::new(LossKind::Dpo),
        None
    )
    .is_err());
}

#[test]
fn pipa_m_loss_builder_matches_plain_terms() {
    // The tape-built loss value agrees with the plain-value diagnostics.
    let mut rng = ChaCha12Rng::seed_from_u64(55);
    for seed in 0..200u64 {
        let bundle = random_bundle(3, 2, 1, seed);
        let label = rng.random_range(0..2) as u8;
        let ex = Example::new(vec![0], random_answer(&mut rng, 3, 2), vec![label; 2], None)
            .unwrap();
        let cfg = LossConfig::new(LossKind::PipaM);
        let mut tape = Tape::new();
        let root = pipa_m_loss(&mut tape, &bundle, &ex, &cfg).unwrap();
        let expect: f64 = per_token_terms(&bundle, &ex, &cfg)
            .unwrap()
            .iter()
            .map(|t| {
                if t.label == 1 {
                    -t.posterior.ln()
                } else {
                    -(1.0 - t.posterior).ln()
                }
            })
            .sum();
        assert!((tape.value(root) - expect).abs() < 1e-10);
    }
}

#[test]
fn dpo_loss_also_available_directly() {
    // dpo_loss is the Dpo variant of the generalized step loss.
    let bundle = random_bundle(3, 2, 1, 9);
    let pair = PairedExample::new(
        Example::new(vec![0], vec![0, 1], vec![1, 1], None).unwrap(),
        Example::new(vec![0], vec![2, 0], vec![0, 0], None).unwrap(),
    )
    .unwrap();
    let cfg = LossConfig::new(LossKind::Dpo);
    let mut t1 = Tape::new();
    let a = dpo_loss(&mut t1, &bundle, &pair, &cfg).unwrap();
    let mut t2 = Tape::new();
    let b = step_dpo_loss(&mut t2, &bundle, &pair, &cfg, StepDpoVariant::Dpo).unwrap();
    assert_eq!(t1.value(a), t2.value(b));
}
