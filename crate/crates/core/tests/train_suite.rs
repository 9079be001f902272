//! Training-regime invariants: determinism, checkpoint fidelity, early
//! stopping, and loss behavior.

mod common;

use histnorm::checkpoint::{load, Checkpoint};
use histnorm::model::{Batch, DimProfile, Model, Preset};
use histnorm::optim::{adam_step, AdamState};
use histnorm::segment::{build_vocab, Segmenter};
use histnorm::synth::{generate, generate_with_repetition, split_80_10_10, SynthConfig};
use histnorm::tape::Tape;
use histnorm::train::{encode_pairs, evaluate_dev, train, EncodedPair, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    vocab: histnorm::segment::Vocabulary,
    train: Vec<EncodedPair>,
    dev: Vec<EncodedPair>,
}

fn fixture(n_pairs: usize, seed: u64) -> Fixture {
    let ds = split_80_10_10(
        generate(&SynthConfig { n_pairs, seed, identity_fraction: 0.3 }),
        "train-suite",
    );
    let seg = Segmenter::Character;
    let tokens: Vec<&str> =
        ds.train.iter().flat_map(|p| [p.historical.as_str(), p.modern.as_str()]).collect();
    let vocab = build_vocab(tokens, &seg).unwrap();
    Fixture {
        train: encode_pairs(&ds.train, &seg, &vocab).unwrap(),
        dev: encode_pairs(&ds.dev, &seg, &vocab).unwrap(),
        vocab,
    }
}

fn tiny_train_config(max_updates: u64) -> TrainConfig {
    TrainConfig {
        warmup_steps: 30,
        checkpoint_every: 25,
        batch_size: 16,
        max_updates,
        seed: 9,
        ..TrainConfig::toy()
    }
}

#[test]
fn checkpoint_reload_reproduces_dev_perplexity_bit_identically() {
    let fx = fixture(120, 5);
    let mut model: Model<f32> =
        Model::new(Preset::AttGru.config(&DimProfile::tiny(), fx.vocab.size()), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(75);
    let outcome =
        train(&mut model, &fx.train, &fx.dev, &cfg, dir.path(), &fx.vocab, None).unwrap();
    for meta in &outcome.checkpoints {
        // ppl = exp(ce) within 1e-9 relative.
        let ratio = meta.dev_perplexity / meta.dev_cross_entropy.exp();
        assert!((ratio - 1.0).abs() < 1e-9);
        let ck: Checkpoint<f32> = load(&meta.path).unwrap();
        let (ce, ppl) = evaluate_dev(&ck.model, &fx.dev, cfg.batch_size).unwrap();
        assert_eq!(
            ce.to_bits(),
            meta.dev_cross_entropy.to_bits(),
            "checkpoint {} cross-entropy must reload bit-identically",
            meta.update_step
        );
        assert_eq!(ppl.to_bits(), meta.dev_perplexity.to_bits());
        assert_eq!(ck.meta.update_step, meta.update_step);
    }
}

#[test]
fn same_seed_runs_produce_identical_checkpoints() {
    let fx = fixture(100, 77);
    let cfg = tiny_train_config(50);
    let run = |dir: &std::path::Path| {
        let mut model: Model<f32> =
            Model::new(Preset::AttLstm.config(&DimProfile::tiny(), fx.vocab.size()), 4).unwrap();
        train(&mut model, &fx.train, &fx.dev, &cfg, dir, &fx.vocab, None).unwrap()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run(dir_a.path());
    let b = run(dir_b.path());
    assert_eq!(a.checkpoints.len(), b.checkpoints.len());
    for (ca, cb) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(ca.update_step, cb.update_step);
        assert_eq!(ca.dev_cross_entropy.to_bits(), cb.dev_cross_entropy.to_bits());
        assert_eq!(ca.dev_perplexity.to_bits(), cb.dev_perplexity.to_bits());
    }
    // Parameter payloads are bit-identical too.
    let last_a: Checkpoint<f32> = load(&a.checkpoints.last().unwrap().path).unwrap();
    let last_b: Checkpoint<f32> = load(&b.checkpoints.last().unwrap().path).unwrap();
    for (name, ta) in last_a.model.params.iter() {
        let tb = last_b.model.params.get(name).unwrap();
        assert_eq!(ta.data(), tb.data(), "parameter {name} differs between identical runs");
    }
}

#[test]
fn selected_checkpoint_has_minimal_perplexity() {
    let fx = fixture(150, 12);
    let mut model: Model<f32> =
        Model::new(Preset::NoAttGru.config(&DimProfile::tiny(), fx.vocab.size()), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(
        &mut model,
        &fx.train,
        &fx.dev,
        &tiny_train_config(100),
        dir.path(),
        &fx.vocab,
        None,
    )
    .unwrap();
    let best = outcome.best_checkpoint();
    for c in &outcome.checkpoints {
        assert!(best.dev_perplexity <= c.dev_perplexity);
    }
    let marker = std::fs::read_to_string(dir.path().join("best_checkpoint.txt")).unwrap();
    assert_eq!(marker.trim(), best.path.display().to_string());
}

#[test]
fn early_stopping_respects_patience() {
    // Train on one mapping while dev demands a contradictory one, so dev
    // perplexity deteriorates as the model fits the training pair.
    let seg = Segmenter::Character;
    let vocab = build_vocab(["abcd", "xyzw"], &seg).unwrap();
    let train_pairs = vec![(
        vocab.encode(&histnorm::segment::char_segment("abcd").unwrap()),
        vocab.encode(&histnorm::segment::char_segment("xyzw").unwrap()),
    )];
    let dev_pairs = vec![(
        train_pairs[0].0.clone(),
        vocab.encode(&histnorm::segment::char_segment("dcba").unwrap()),
    )];
    let mut model: Model<f32> =
        Model::new(Preset::AttGru.config(&DimProfile::tiny(), vocab.size()), 3).unwrap();
    let cfg = TrainConfig {
        warmup_steps: 5,
        checkpoint_every: 5,
        patience: 4,
        batch_size: 1,
        max_updates: 100_000,
        seed: 1,
        base_lr: 3e-3,
        ..TrainConfig::toy()
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome =
        train(&mut model, &train_pairs, &dev_pairs, &cfg, dir.path(), &vocab, None).unwrap();
    assert!(outcome.stopped_early, "contradictory dev set must trigger early stopping");
    // Exactly `patience` consecutive non-improving checkpoints follow the best.
    let best_idx = outcome.best;
    assert_eq!(
        outcome.checkpoints.len(),
        best_idx + 1 + cfg.patience as usize,
        "run must stop after patience checkpoints without improvement"
    );
}

#[test]
fn zeroed_model_has_uniform_cross_entropy() {
    let fx = fixture(60, 33);
    let mut model: Model<f32> =
        Model::new(Preset::AttLstm.config(&DimProfile::tiny(), fx.vocab.size()), 2).unwrap();
    for (_, tensor) in model.params.iter_mut() {
        for v in tensor.data_mut() {
            *v = 0.0;
        }
    }
    let (ce, ppl) = evaluate_dev(&model, &fx.dev, 16).unwrap();
    let ln_v = (fx.vocab.size() as f64).ln();
    assert!(
        (ce - ln_v).abs() < 1e-5,
        "uniform logits must give cross-entropy ln(V): {ce} vs {ln_v}"
    );
    assert!((ppl - fx.vocab.size() as f64).abs() < 1e-3);
}

/// Averaged over 5 seeds, the loss curve on a single pair is monotone
/// non-increasing once warmup has completed.
#[test]
fn single_pair_loss_monotone_after_warmup() {
    let seg = Segmenter::Character;
    let vocab = build_vocab(["citee", "city"], &seg).unwrap();
    let pair = (
        vocab.encode(&histnorm::segment::char_segment("citee").unwrap()),
        vocab.encode(&histnorm::segment::char_segment("city").unwrap()),
    );
    let batch = Batch::new(&[pair]).unwrap();
    let warmup = 5u64;
    let updates = 60;
    let mut avg = vec![0.0f64; updates];
    for seed in 0..5u64 {
        let mut model: Model<f64> =
            Model::new(Preset::AttGru.config(&DimProfile::tiny(), vocab.size()), seed).unwrap();
        let mut adam = AdamState::new(&model.params);
        let schedule = histnorm::optim::LrSchedule { base_lr: 3e-4, warmup_steps: warmup };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        #[allow(clippy::needless_range_loop)]
        for step in 0..updates {
            let tape = Tape::new();
            let bound = model.params.bind(&tape).unwrap();
            let out = model.forward_batch(&tape, &bound, &batch, true, &mut rng, 0.0).unwrap();
            avg[step] += out.loss.item() / 5.0;
            let grads = tape.backward(&out.loss).unwrap();
            let gv = model.params.collect_grads(&bound, &grads).unwrap();
            adam_step(&mut model.params, &gv, &mut adam, &schedule).unwrap();
        }
    }
    for t in warmup as usize..updates - 1 {
        assert!(
            avg[t + 1] <= avg[t] + 1e-9,
            "averaged loss rose after warmup at step {}: {} -> {}",
            t,
            avg[t],
            avg[t + 1]
        );
    }
}

#[test]
fn divergence_is_reported_with_the_update_step() {
    let fx = fixture(60, 21);
    let mut model: Model<f32> =
        Model::new(Preset::AttRnn.config(&DimProfile::tiny(), fx.vocab.size()), 2).unwrap();
    // Poison the output bias (always in the logits); the first forward
    // pass produces a non-finite loss.
    model.params.get_mut("out.bias").unwrap().data_mut()[0] = f32::NAN;
    let cfg = tiny_train_config(50);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut model, &fx.train, &fx.dev, &cfg, dir.path(), &fx.vocab, None)
        .expect_err("a NaN parameter must abort training");
    let msg = err.to_string();
    assert!(msg.contains("diverged"), "{msg}");
    assert!(msg.contains("update 1"), "{msg}");
}

#[test]
fn repeated_corpus_memorizes_faster_than_fresh_types() {
    // Sanity check on the synthetic generators used by the benchmarks: the
    // repetition corpus has far fewer types than instances.
    let cfg = SynthConfig { n_pairs: 400, seed: 3, identity_fraction: 0.4 };
    let rep = generate_with_repetition(&cfg, 50);
    let mut types: Vec<&str> = rep.iter().map(|p| p.historical.as_str()).collect();
    types.sort_unstable();
    types.dedup();
    assert!(types.len() <= 50);
    assert_eq!(rep.len(), 400);
}
