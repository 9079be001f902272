//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use unicode_normalization::UnicodeNormalization;

use histnorm::checkpoint::{self, Checkpoint};
use histnorm::data::{self, eval_case, TokenPair};
use histnorm::decode::{
    build_unchanged_lexicon, DecodeMode, LexiconPolicy, Normalizer, UnchangedLexicon,
};
use histnorm::eval;
use histnorm::model::{Model, Preset};
use histnorm::segment::{build_vocab, BpeModel, Segmenter};
use histnorm::train::{encode_pairs, train as run_training};

use crate::config::ExperimentConfig;
use crate::{runtime, usage, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub fn stats(train: &Path, dev: &Path, test: &Path, lang: &str) -> Result<()> {
    let dataset = data::load_dataset(train, dev, test, lang).map_err(usage)?;
    let stats = data::corpus_stats(&dataset);
    println!("{stats}");
    println!();
    print!("{}", stats.to_kv());
    Ok(())
}

/// Tokens from both sides of a pair list, in corpus order.
fn both_sides(pairs: &[TokenPair]) -> Vec<&str> {
    pairs
        .iter()
        .flat_map(|p| [p.historical.as_str(), p.modern.as_str()])
        .collect()
}

pub fn bpe_learn(
    input: &Path,
    vocab_size: usize,
    output: &Path,
    vocab_out: Option<&Path>,
) -> Result<()> {
    let pairs = data::load_tsv(input).map_err(usage)?;
    let tokens = both_sides(&pairs);
    let model = BpeModel::learn(tokens.iter().copied(), vocab_size).map_err(usage)?;
    model.save(output).map_err(runtime)?;
    println!("learned {} merges -> {}", model.merges().len(), output.display());
    if let Some(vpath) = vocab_out {
        let segmenter = Segmenter::Bpe(model);
        let vocab = build_vocab(tokens.iter().copied(), &segmenter).map_err(runtime)?;
        vocab.save(vpath).map_err(runtime)?;
        println!("vocabulary of {} symbols -> {}", vocab.size(), vpath.display());
    }
    Ok(())
}

/// Everything a finished training run leaves behind.
pub struct TrainedRun {
    pub best_checkpoint: PathBuf,
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate().map_err(usage)?;
    let preset = cfg.preset().map_err(usage)?;
    let dataset = data::load_dataset(
        &cfg.paths.train,
        &cfg.paths.dev,
        &cfg.paths.test,
        "train-corpus",
    )
    .map_err(usage)?;
    let out_dir = cfg.out_dir();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(runtime)?;
    fs::write(out_dir.join("experiment.toml"), cfg.to_toml().map_err(runtime)?)
        .with_context(|| format!("cannot write {}", out_dir.join("experiment.toml").display()))
        .map_err(runtime)?;

    let train_tokens = both_sides(&dataset.train);
    let (segmenter, bpe) = if cfg.experiment.bpe_size > 0 {
        let model = BpeModel::learn(train_tokens.iter().copied(), cfg.experiment.bpe_size)
            .map_err(usage)?;
        model.save(out_dir.join("bpe.merges")).map_err(runtime)?;
        (Segmenter::Bpe(model.clone()), Some(model))
    } else {
        (Segmenter::Character, None)
    };
    let vocab = build_vocab(train_tokens.iter().copied(), &segmenter).map_err(runtime)?;
    vocab.save(out_dir.join("vocab.txt")).map_err(runtime)?;

    let train_enc = encode_pairs(&dataset.train, &segmenter, &vocab).map_err(usage)?;
    let dev_enc = encode_pairs(&dataset.dev, &segmenter, &vocab).map_err(usage)?;

    let model_cfg = preset.config(&cfg.dim_profile(), vocab.size());
    let mut model: Model<f32> =
        Model::new(model_cfg, cfg.experiment.seed).map_err(usage)?;
    let train_cfg = cfg.train_config();
    let outcome = run_training(
        &mut model,
        &train_enc,
        &dev_enc,
        &train_cfg,
        &out_dir,
        &vocab,
        bpe.as_ref(),
    )
    .map_err(runtime)?;

    print!("{}", outcome.log);
    let best = outcome.best_checkpoint();
    println!(
        "trained {} for {} updates{}; best checkpoint update={} dev_ppl={:.6} -> {}",
        preset,
        outcome.final_update,
        if outcome.stopped_early { " (early stop)" } else { "" },
        best.update_step,
        best.dev_perplexity,
        best.path.display()
    );
    Ok(TrainedRun { best_checkpoint: best.path.clone() })
}

fn parse_mode(mode: &str) -> Result<DecodeMode> {
    match mode {
        "neural" => Ok(DecodeMode::Neural),
        "hybrid" => Ok(DecodeMode::Hybrid),
        other => Err(usage(anyhow!("unknown mode {other:?}; expected neural or hybrid"))),
    }
}

fn parse_policy(policy: &str) -> Result<LexiconPolicy> {
    match policy {
        "majority" => Ok(LexiconPolicy::Majority),
        "any_unchanged" | "any-unchanged" => Ok(LexiconPolicy::AnyUnchanged),
        other => Err(usage(anyhow!(
            "unknown lexicon policy {other:?}; expected majority or any_unchanged"
        ))),
    }
}

/// Input tokens, one per line; blank lines map to blank predictions.
fn read_token_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').nfc().collect::<String>())
        .collect())
}

fn decode_tokens(
    ck: &Checkpoint<f32>,
    tokens: &[String],
    mode: DecodeMode,
    lexicon: Option<&UnchangedLexicon>,
    beam_size: usize,
    length_norm: f64,
) -> Result<Vec<String>> {
    let segmenter = ck.segmenter();
    let normalizer = Normalizer {
        model: &ck.model,
        vocab: &ck.vocab,
        segmenter: &segmenter,
        lexicon,
        beam_size,
        length_norm,
    };
    tokens
        .iter()
        .map(|tok| {
            if tok.is_empty() {
                log::warn!("blank input line; emitting a blank prediction");
                Ok(String::new())
            } else {
                normalizer.normalize_token(tok, mode).map_err(runtime)
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn normalize(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    mode: &str,
    lexicon_from: Option<&Path>,
    lexicon_policy: &str,
    case_fold: bool,
    beam_size: usize,
    length_norm: f64,
) -> Result<()> {
    let mode = parse_mode(mode)?;
    if beam_size == 0 {
        return Err(usage(anyhow!("beam size must be positive")));
    }
    let ck: Checkpoint<f32> = checkpoint::load(checkpoint).map_err(usage)?;
    let lexicon = match (mode, lexicon_from) {
        (DecodeMode::Hybrid, Some(path)) => {
            let pairs = data::load_tsv(path).map_err(usage)?;
            Some(build_unchanged_lexicon(&pairs, parse_policy(lexicon_policy)?, case_fold))
        }
        (DecodeMode::Hybrid, None) => {
            return Err(usage(anyhow!("hybrid mode needs --lexicon-from <training TSV>")))
        }
        (DecodeMode::Neural, _) => None,
    };
    let tokens = read_token_lines(input)?;
    let predictions =
        decode_tokens(&ck, &tokens, mode, lexicon.as_ref(), beam_size, length_norm)?;
    let mut text = predictions.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(output, text)
        .with_context(|| format!("cannot write {}", output.display()))
        .map_err(runtime)?;
    println!("wrote {} predictions -> {}", predictions.len(), output.display());
    Ok(())
}

/// Eval-cased report of a predictions file against a test TSV.
fn scored_report(predictions: &Path, test_pairs: &[TokenPair]) -> Result<eval::EvalReport> {
    let preds = read_token_lines(predictions)?;
    if preds.len() != test_pairs.len() {
        return Err(usage(anyhow!(
            "{} has {} predictions but the test set has {} pairs",
            predictions.display(),
            preds.len(),
            test_pairs.len()
        )));
    }
    let cased_pairs: Vec<TokenPair> = test_pairs
        .iter()
        .map(|p| TokenPair::new(eval_case(&p.historical), eval_case(&p.modern)))
        .collect();
    let cased_preds: Vec<String> = preds.iter().map(|p| eval_case(p)).collect();
    eval::report(&cased_pairs, &cased_preds).map_err(runtime)
}

pub fn evaluate(predictions: &Path, test: &Path, compare: Option<&Path>) -> Result<()> {
    let test_pairs = data::load_tsv(test).map_err(usage)?;
    let report = scored_report(predictions, &test_pairs)?;
    println!("{report}");
    println!();
    print!("{}", report.to_kv());
    if let Some(other) = compare {
        let other_report = scored_report(other, &test_pairs)?;
        let delta = (report.word_accuracy - other_report.word_accuracy) * 100.0;
        println!("delta_accuracy={delta:+.2}");
        println!(
            "accuracy {:.2}% vs {:.2}% ({:+.2} absolute)",
            report.word_accuracy * 100.0,
            other_report.word_accuracy * 100.0,
            delta
        );
    }
    Ok(())
}

pub fn resplit(
    train: &Path,
    dev: &Path,
    test: &Path,
    move_to_train: usize,
    move_to_dev: usize,
    out_dir: &Path,
) -> Result<()> {
    let dataset = data::load_dataset(train, dev, test, "resplit").map_err(usage)?;
    let new = data::resplit(&dataset, move_to_train, move_to_dev).map_err(usage)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(runtime)?;
    data::save_tsv(out_dir.join("train.tsv"), &new.train).map_err(runtime)?;
    data::save_tsv(out_dir.join("dev.tsv"), &new.dev).map_err(runtime)?;
    data::save_tsv(out_dir.join("test.tsv"), &new.test).map_err(runtime)?;
    println!(
        "n_train={}\nn_dev={}\nn_test={}",
        new.train.len(),
        new.dev.len(),
        new.test.len()
    );
    Ok(())
}

/// The (character-level, subword-level) presets of a sweep family.
fn sweep_family(preset: Preset) -> Result<(Preset, Preset)> {
    match preset {
        Preset::AttLstm | Preset::BpeSoft => Ok((Preset::AttLstm, Preset::BpeSoft)),
        Preset::Transformer | Preset::BpeTransformer => {
            Ok((Preset::Transformer, Preset::BpeTransformer))
        }
        other => Err(usage(anyhow!(
            "sweeps cover the BPE-Soft and BPE-Transformer families; preset {} has no \
             subword counterpart",
            other.name()
        ))),
    }
}

pub fn sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<()> {
    let (char_preset, subword_preset) = sweep_family(cfg.preset().map_err(usage)?)?;
    let base_dir = cfg.out_dir();
    let test_pairs = data::load_tsv(&cfg.paths.test).map_err(usage)?;
    let test_tokens: Vec<String> = test_pairs.iter().map(|p| p.historical.clone()).collect();
    let lexicon = match cfg.experiment.mode {
        DecodeMode::Hybrid => {
            let pairs = data::load_tsv(&cfg.paths.train).map_err(usage)?;
            Some(build_unchanged_lexicon(
                &pairs,
                cfg.experiment.lexicon_policy,
                cfg.decode.case_fold_lexicon,
            ))
        }
        DecodeMode::Neural => None,
    };

    let mut sorted_sizes = sizes.to_vec();
    sorted_sizes.sort_unstable();
    sorted_sizes.dedup();

    struct Row {
        size: usize,
        preset: Preset,
        result: std::result::Result<(f64, f64), String>,
    }
    let mut rows = Vec::new();
    for &size in &sorted_sizes {
        let preset = if size == 0 { char_preset } else { subword_preset };
        let mut run_cfg = cfg.clone();
        run_cfg.experiment.preset = preset.name().to_string();
        run_cfg.experiment.bpe_size = size;
        run_cfg.paths.out_dir = Some(base_dir.join(format!("bpe-{size:05}")));
        let outcome = train(&run_cfg).and_then(|run| {
            let ck: Checkpoint<f32> = checkpoint::load(&run.best_checkpoint).map_err(runtime)?;
            let preds = decode_tokens(
                &ck,
                &test_tokens,
                cfg.experiment.mode,
                lexicon.as_ref(),
                cfg.decode.beam_size,
                cfg.decode.length_norm,
            )?;
            let cased_pairs: Vec<TokenPair> = test_pairs
                .iter()
                .map(|p| TokenPair::new(eval_case(&p.historical), eval_case(&p.modern)))
                .collect();
            let cased_preds: Vec<String> = preds.iter().map(|p| eval_case(p)).collect();
            let report = eval::report(&cased_pairs, &cased_preds).map_err(runtime)?;
            Ok((report.word_accuracy, report.cer))
        });
        match outcome {
            Ok((acc, cer)) => rows.push(Row { size, preset, result: Ok((acc, cer)) }),
            Err(CliError::Usage(e)) | Err(CliError::Runtime(e)) => {
                log::warn!("sweep size {size} failed: {e:#}");
                rows.push(Row { size, preset, result: Err(format!("{e:#}")) });
            }
        }
    }

    println!("{:>8} {:<16} {:>10} {:>8}", "bpe", "model", "accuracy", "cer");
    for row in &rows {
        match &row.result {
            Ok((acc, cer)) => println!(
                "{:>8} {:<16} {:>9.2}% {:>8.4}",
                row.size,
                row.preset.name(),
                acc * 100.0,
                cer
            ),
            Err(_) => println!("{:>8} {:<16} {:>10} {:>8}", row.size, row.preset.name(), "failed", "-"),
        }
    }
    for row in &rows {
        match &row.result {
            Ok((acc, cer)) => println!(
                "sweep_size={} preset={} accuracy={:.4} cer={:.4}",
                row.size,
                row.preset.name(),
                acc * 100.0,
                cer
            ),
            Err(e) => println!("sweep_size={} preset={} failed={:?}", row.size, row.preset.name(), e),
        }
    }
    if rows.iter().all(|r| r.result.is_err()) {
        return Err(runtime(anyhow!("every sweep cycle failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_family_mapping() {
        assert_eq!(
            sweep_family(Preset::BpeSoft).unwrap(),
            (Preset::AttLstm, Preset::BpeSoft)
        );
        assert_eq!(
            sweep_family(Preset::Transformer).unwrap(),
            (Preset::Transformer, Preset::BpeTransformer)
        );
        assert!(sweep_family(Preset::NoAttRnn).is_err());
    }

    #[test]
    fn mode_and_policy_parsing() {
        assert!(matches!(parse_mode("neural"), Ok(DecodeMode::Neural)));
        assert!(matches!(parse_mode("hybrid"), Ok(DecodeMode::Hybrid)));
        assert!(parse_mode("beam").is_err());
        assert!(matches!(parse_policy("majority"), Ok(LexiconPolicy::Majority)));
        assert!(matches!(parse_policy("any_unchanged"), Ok(LexiconPolicy::AnyUnchanged)));
        assert!(parse_policy("all").is_err());
    }
}
