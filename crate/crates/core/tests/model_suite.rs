//! Model-level invariants that cut across the architecture grid.

mod common;

use histnorm::decode::{beam_search, NeuralScorer};
use histnorm::model::{
    Architecture, AttentionKind, Batch, DimProfile, Model, Preset,
};
use histnorm::optim::{adam_step, AdamState, LrSchedule};
use histnorm::segment::{build_vocab, Segmenter, Vocabulary};
use histnorm::synth::{generate, SynthConfig};
use histnorm::tape::Tape;
use histnorm::train::encode_pairs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every preset constructs, survives one optimizer step on a 30-pair toy
/// corpus, and decodes, without error.
#[test]
fn all_presets_train_one_step_and_decode() {
    let pairs = generate(&SynthConfig { n_pairs: 30, seed: 8, identity_fraction: 0.3 });
    for preset in Preset::ALL {
        let (segmenter, bpe) = if preset.needs_bpe() {
            let tokens: Vec<&str> =
                pairs.iter().flat_map(|p| [p.historical.as_str(), p.modern.as_str()]).collect();
            let model = histnorm::segment::BpeModel::learn(tokens, 40).unwrap();
            (Segmenter::Bpe(model.clone()), Some(model))
        } else {
            (Segmenter::Character, None)
        };
        let _ = bpe;
        let tokens: Vec<&str> =
            pairs.iter().flat_map(|p| [p.historical.as_str(), p.modern.as_str()]).collect();
        let vocab = build_vocab(tokens, &segmenter).unwrap();
        let encoded = encode_pairs(&pairs, &segmenter, &vocab).unwrap();

        let mut model: Model<f32> =
            Model::new(preset.config(&DimProfile::tiny(), vocab.size()), 3).unwrap();
        let mut adam = AdamState::new(&model.params);
        let schedule = LrSchedule { base_lr: 3e-4, warmup_steps: 10 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        // One teacher-forced update on an equal-source-length slice.
        let src_len = encoded[0].0.len();
        let batch_pairs: Vec<_> =
            encoded.iter().filter(|(s, _)| s.len() == src_len).take(8).cloned().collect();
        let batch = Batch::new(&batch_pairs).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind(&tape).unwrap();
        let out = model.forward_batch(&tape, &bound, &batch, true, &mut rng, 0.0).unwrap();
        assert!(out.loss.item().is_finite(), "{preset}: non-finite loss");
        let grads = tape.backward(&out.loss).unwrap();
        let grad_vecs = model.params.collect_grads(&bound, &grads).unwrap();
        adam_step(&mut model.params, &grad_vecs, &mut adam, &schedule).unwrap();

        // Decode a token.
        let src = &encoded[0].0;
        let enc = model.encode(src).unwrap();
        let scorer = NeuralScorer::new(&model, enc);
        let result = beam_search(&scorer, 3, 3 * src.len() + 5, 0.0).unwrap();
        assert!(result.score.is_finite(), "{preset}: decoding produced no scored hypothesis");
    }
}

/// Closed-form parameter counts, derived independently from the
/// configuration grid.
#[test]
fn parameter_counts_match_closed_form() {
    let vocab_size = 23;
    let dims = DimProfile::tiny();
    for preset in Preset::ALL {
        let cfg = preset.config(&dims, vocab_size);
        let model: Model<f32> = Model::new(cfg.clone(), 5).unwrap();
        let (v, e, h, f, layers) =
            (vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers);

        let cell = |in_dim: usize| -> usize {
            match cfg.architecture {
                Architecture::VanillaRnn => (in_dim + h) * h + h,
                Architecture::Gru => (in_dim + h) * 2 * h + 2 * h + (in_dim + h) * h + h,
                Architecture::Lstm => (in_dim + h) * 4 * h + 4 * h,
                Architecture::SelfAttention => unreachable!(),
            }
        };

        let mut expected = 2 * v * e + v; // embeddings + output bias
        if !cfg.tie_output_embeddings {
            expected += e * v;
        }
        match cfg.architecture {
            Architecture::SelfAttention => {
                let ln = 2 * e;
                let attn = 4 * e * e + 4 * e;
                let ffn = e * f + f + f * e + e;
                let enc_layer = 2 * ln + attn + ffn;
                let dec_layer = 3 * ln + 2 * attn + ffn;
                expected += layers * enc_layer + ln; // encoder + final norm
                expected += layers * dec_layer + ln; // decoder + final norm
            }
            _ => {
                // Encoder: bidirectional first layer + projection, then
                // unidirectional layers.
                expected += 2 * cell(e) + (2 * h * h + h);
                expected += (layers - 1) * cell(h);
                // Decoder state initializers.
                let init_each = h * h + h;
                let per_layer_inits =
                    if cfg.architecture == Architecture::Lstm { 2 * init_each } else { init_each };
                expected += layers * per_layer_inits;
                // Decoder cells.
                expected += cell(e) + (layers - 1) * cell(h);
                if cfg.attention == AttentionKind::Soft {
                    expected += h * h + h * h + h + h; // wq, wk, bias, v
                    expected += 2 * h * h + h; // combine
                }
                expected += h * e + e; // pre-output projection
            }
        }
        assert_eq!(
            model.params.total_elements(),
            expected,
            "{preset}: parameter count mismatch"
        );
    }
}

/// Teacher-forced logits at position t must not change when target symbols
/// after t change (causality of the training path).
#[test]
fn teacher_forced_logits_are_causal() {
    for preset in [Preset::Transformer, Preset::AttGru, Preset::NoAttLstm] {
        let model: Model<f64> = Model::new(preset.config(&DimProfile::tiny(), 14), 21).unwrap();
        let src = vec![4u32, 5, 6, 7];
        let tgt_a = vec![8u32, 9, 10, 11, 12];
        let mut tgt_b = tgt_a.clone();
        tgt_b[3] = 5;
        tgt_b[4] = 6;
        let logits_a = model.teacher_forced_logits(&src, &tgt_a).unwrap();
        let logits_b = model.teacher_forced_logits(&src, &tgt_b).unwrap();
        // Positions 0..=3 predict symbols 0..=3 from prefixes 0..3: only
        // positions up to the first modified input (index 3 feeds position 4)
        // may differ.
        for t in 0..4 {
            assert_eq!(
                logits_a[t], logits_b[t],
                "{preset}: logits at position {t} changed under a future-target edit"
            );
        }
        assert_ne!(logits_a[4], logits_b[4], "{preset}: edit at position 3 must reach position 4");
    }
}

/// With tying there is no separate vocabulary projection, and the target
/// embedding matrix directly shapes the output logits.
#[test]
fn tied_output_embeddings() {
    let cfg = Preset::AttLstm.config(&DimProfile::tiny(), 12);
    assert!(cfg.tie_output_embeddings);
    let mut model: Model<f64> = Model::new(cfg.clone(), 9).unwrap();
    assert!(model.params.get("out.w").is_none(), "tied model must not own out.w");

    let enc = model.encode(&[4, 5]).unwrap();
    let st = model.initial_state(&enc).unwrap();
    let (logits_before, _) = model.decode_step(&enc, &st, 1).unwrap();
    for v in model.params.get_mut("tgt_embed").unwrap().data_mut() {
        *v += 0.25;
    }
    let enc = model.encode(&[4, 5]).unwrap();
    let st = model.initial_state(&enc).unwrap();
    let (logits_after, _) = model.decode_step(&enc, &st, 1).unwrap();
    assert_ne!(logits_before.data(), logits_after.data());

    let mut untied = cfg;
    untied.tie_output_embeddings = false;
    let model: Model<f64> = Model::new(untied, 9).unwrap();
    assert!(model.params.get("out.w").is_some());
}

/// Soft-attention weights form a distribution at every decode step.
#[test]
fn attention_weights_are_distributions_during_decoding() {
    let model: Model<f64> = Model::new(Preset::AttGru.config(&DimProfile::tiny(), 12), 13).unwrap();
    let src = vec![4u32, 5, 6, 7, 8];
    let enc = model.encode(&src).unwrap();
    let mut state = model.initial_state(&enc).unwrap();
    let mut prev = Vocabulary::BOS;
    for _ in 0..6 {
        let weights = model.attention_weights(&enc, &state, prev).unwrap().unwrap();
        assert_eq!(weights.len(), src.len());
        assert!(weights.iter().all(|&w| w >= 0.0));
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "weights sum {sum}");
        let (logits, next) = model.decode_step(&enc, &state, prev).unwrap();
        state = next;
        prev = logits
            .data()
            .iter()
            .enumerate()
            .skip(4)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
    }

    let noatt: Model<f64> =
        Model::new(Preset::NoAttGru.config(&DimProfile::tiny(), 12), 13).unwrap();
    let enc = noatt.encode(&src).unwrap();
    let st = noatt.initial_state(&enc).unwrap();
    assert!(noatt.attention_weights(&enc, &st, 1).unwrap().is_none());
}

/// Fixed-seed regression of the encoder and first decode step.
#[test]
fn encode_golden_regression() {
    let model: Model<f64> = Model::new(Preset::AttGru.config(&DimProfile::tiny(), 10), 2024).unwrap();
    let enc = model.encode(&[4, 5, 6, 7, 5]).unwrap();
    let golden_summary = [
        0.056162181020619255,
        -0.012370334696697677,
        -0.30476353427970915,
        -0.10019644627734577,
        0.09231428544191475,
        -0.008827507147312647,
        0.07115563327190161,
        0.048980638385345186,
    ];
    for (a, b) in enc.summary().data().iter().zip(golden_summary) {
        assert!((a - b).abs() < 1e-12, "summary drifted: {a} vs {b}");
    }
    let st = model.initial_state(&enc).unwrap();
    let (logits, _) = model.decode_step(&enc, &st, 1).unwrap();
    let golden_logits = [
        0.1481117019987004,
        0.08867467545783576,
        0.09768858263942967,
        0.0986298380108494,
        -0.021312067374415367,
        0.23830948820345021,
        -0.029511912084252977,
        -0.04274019707069018,
        -0.04281585713995934,
        0.0764577589121494,
    ];
    for (a, b) in logits.data().iter().zip(golden_logits) {
        assert!((a - b).abs() < 1e-12, "logits drifted: {a} vs {b}");
    }
}

/// Encoder output length matches the source, and a length-1 source is a
/// deterministic function of its symbol.
#[test]
fn encoder_output_lengths() {
    let model: Model<f64> = Model::new(Preset::AttRnn.config(&DimProfile::tiny(), 12), 6).unwrap();
    for len in [1usize, 2, 7] {
        let src: Vec<u32> = (0..len as u32).map(|i| 4 + (i % 8)).collect();
        let enc = model.encode(&src).unwrap();
        assert_eq!(enc.len(), len);
        assert_eq!(enc.per_position().unwrap().len(), len);
    }
    let a = model.encode(&[5]).unwrap();
    let b = model.encode(&[5]).unwrap();
    assert_eq!(a.summary().data(), b.summary().data());
}

/// Step-by-step decoding on the gold prefix must produce exactly the
/// teacher-forced logits: the two paths are the same function evaluated two
/// ways.
#[test]
fn decode_steps_match_teacher_forced_logits_bitwise() {
    for preset in [Preset::Transformer, Preset::AttGru, Preset::NoAttLstm, Preset::BpeSoft] {
        let model: Model<f64> = Model::new(preset.config(&DimProfile::tiny(), 14), 77).unwrap();
        let src = vec![4u32, 5, 6, 7];
        let tgt = vec![8u32, 9, 10, 11, 12];
        let tf = model.teacher_forced_logits(&src, &tgt).unwrap();
        let enc = model.encode(&src).unwrap();
        let mut state = model.initial_state(&enc).unwrap();
        let mut prev = Vocabulary::BOS;
        for (t, gold) in tf.iter().enumerate().take(tgt.len() + 1) {
            let (logits, next) = model.decode_step(&enc, &state, prev).unwrap();
            assert_eq!(
                &logits.to_f64_vec(),
                gold,
                "{preset}: decode logits at position {t} diverge from teacher forcing"
            );
            state = next;
            prev = if t < tgt.len() { tgt[t] } else { Vocabulary::EOS };
        }
    }
}

/// Parameters and models cross thread boundaries (checkpointing from a
/// snapshot, read-only sharing across decoding workers).
#[test]
fn models_and_tensors_are_send_and_sync() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<histnorm::Tensor<f32>>();
    assert_send_sync::<histnorm::Tensor<f64>>();
    assert_send_sync::<Model<f32>>();
    assert_send_sync::<histnorm::Vocabulary>();
    assert_send_sync::<histnorm::BpeModel>();

    // Decode the same source concurrently over one shared model.
    let model: Model<f32> = Model::new(Preset::AttGru.config(&DimProfile::tiny(), 12), 3).unwrap();
    let model = std::sync::Arc::new(model);
    let handles: Vec<_> = (0..3)
        .map(|_| {
            let m = std::sync::Arc::clone(&model);
            std::thread::spawn(move || {
                let enc = m.encode(&[4, 5, 6]).unwrap();
                let scorer = NeuralScorer::new(&m, enc);
                beam_search(&scorer, 3, 10, 0.0).unwrap().ids
            })
        })
        .collect();
    let results: Vec<Vec<u32>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(results[0], results[1]);
    assert_eq!(results[1], results[2]);
}
