//! Token-pair corpora: TSV ingestion, corpus statistics, the casing policy,
//! and the test-to-train resplit experiment.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected exactly 2 tab-separated fields, found {fields}")]
    MalformedLine { path: String, line: usize, fields: usize },
    #[error("{path}:{line}: empty field")]
    EmptyField { path: String, line: usize },
    #[error("{path}: no token pairs found")]
    EmptyCorpus { path: String },
    #[error("cannot move {requested} pairs out of a test set of {available}")]
    ResplitTooLarge { requested: usize, available: usize },
}

/// One (historical spelling, modern spelling) unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub historical: String,
    pub modern: String,
}

impl TokenPair {
    pub fn new(historical: impl Into<String>, modern: impl Into<String>) -> Self {
        TokenPair { historical: historical.into(), modern: modern.into() }
    }

    /// A pair is unchanged when both sides are identical (case-sensitive).
    pub fn is_unchanged(&self) -> bool {
        self.historical == self.modern
    }
}

/// Train/dev/test splits for one language.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<TokenPair>,
    pub dev: Vec<TokenPair>,
    pub test: Vec<TokenPair>,
    pub language_tag: String,
}

/// Load a UTF-8 TSV of `historical<TAB>modern` pairs, NFC-normalized, in
/// file order. Blank lines are skipped with a warning; malformed lines are
/// errors naming the line number.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<TokenPair>, DataError> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            log::warn!("{}:{}: skipping blank line", path_str, i + 1);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(DataError::MalformedLine {
                path: path_str,
                line: i + 1,
                fields: fields.len(),
            });
        }
        let historical: String = fields[0].trim().nfc().collect();
        let modern: String = fields[1].trim().nfc().collect();
        if historical.is_empty() || modern.is_empty() {
            return Err(DataError::EmptyField { path: path_str, line: i + 1 });
        }
        pairs.push(TokenPair { historical, modern });
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyCorpus { path: path_str });
    }
    Ok(pairs)
}

/// Write pairs as `historical<TAB>modern` lines; inverse of [`load_tsv`].
pub fn save_tsv(path: impl AsRef<Path>, pairs: &[TokenPair]) -> Result<(), DataError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.historical);
        out.push('\t');
        out.push_str(&p.modern);
        out.push('\n');
    }
    fs::write(&path, out).map_err(|source| DataError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

pub fn load_dataset(
    train: impl AsRef<Path>,
    dev: impl AsRef<Path>,
    test: impl AsRef<Path>,
    language_tag: impl Into<String>,
) -> Result<Dataset, DataError> {
    Ok(Dataset {
        train: load_tsv(train)?,
        dev: load_tsv(dev)?,
        test: load_tsv(test)?,
        language_tag: language_tag.into(),
    })
}

/// Corpus statistics over a dataset. Vocabulary and length statistics are
/// computed case-sensitively over the training tokens (both sides); the
/// unchanged rate is the case-sensitive fraction of test pairs whose sides
/// are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub language_tag: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub unchanged_rate_test: f64,
    /// Distinct training tokens: historical side, modern side, and union.
    pub token_vocab_historical: usize,
    pub token_vocab_modern: usize,
    pub token_vocab_union: usize,
    /// Distinct characters over both sides of the training pairs.
    pub char_vocab: usize,
    pub max_len: usize,
    pub avg_len: f64,
}

pub fn corpus_stats(dataset: &Dataset) -> CorpusStats {
    let mut hist: HashSet<&str> = HashSet::new();
    let mut modern: HashSet<&str> = HashSet::new();
    let mut chars: HashSet<char> = HashSet::new();
    let mut total_len = 0usize;
    let mut max_len = 0usize;
    let mut n_tokens = 0usize;
    for p in &dataset.train {
        for tok in [p.historical.as_str(), p.modern.as_str()] {
            let len = tok.chars().count();
            total_len += len;
            max_len = max_len.max(len);
            n_tokens += 1;
            chars.extend(tok.chars());
        }
        hist.insert(&p.historical);
        modern.insert(&p.modern);
    }
    let union = hist.union(&modern).count();
    let unchanged = dataset.test.iter().filter(|p| p.is_unchanged()).count();
    CorpusStats {
        language_tag: dataset.language_tag.clone(),
        n_train: dataset.train.len(),
        n_dev: dataset.dev.len(),
        n_test: dataset.test.len(),
        unchanged_rate_test: if dataset.test.is_empty() {
            0.0
        } else {
            unchanged as f64 / dataset.test.len() as f64
        },
        token_vocab_historical: hist.len(),
        token_vocab_modern: modern.len(),
        token_vocab_union: union,
        char_vocab: chars.len(),
        max_len,
        avg_len: if n_tokens == 0 { 0.0 } else { total_len as f64 / n_tokens as f64 },
    }
}

impl CorpusStats {
    /// Machine-readable key=value block, one stat per line.
    pub fn to_kv(&self) -> String {
        format!(
            "lang={}\nn_train={}\nn_dev={}\nn_test={}\nunchanged_rate_test={:.4}\n\
             token_vocab_historical={}\ntoken_vocab_modern={}\ntoken_vocab_union={}\n\
             char_vocab={}\nmax_len={}\navg_len={:.4}\n",
            self.language_tag,
            self.n_train,
            self.n_dev,
            self.n_test,
            self.unchanged_rate_test,
            self.token_vocab_historical,
            self.token_vocab_modern,
            self.token_vocab_union,
            self.char_vocab,
            self.max_len,
            self.avg_len,
        )
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>9} {:>9} {:>9} {:>10} {:>9} {:>6} {:>5} {:>6}",
            "Language", "Training", "Dev", "Test", "Unchanged%", "Token", "Char", "Max", "Avg"
        )?;
        write!(
            f,
            "{:<12} {:>9} {:>9} {:>9} {:>10.1} {:>9} {:>6} {:>5} {:>6.2}",
            self.language_tag,
            self.n_train,
            self.n_dev,
            self.n_test,
            self.unchanged_rate_test * 100.0,
            self.token_vocab_union,
            self.char_vocab,
            self.max_len,
            self.avg_len,
        )
    }
}

/// Move a prefix of the test set into train and dev: the first
/// `move_to_train` pairs are appended to train, the following `move_to_dev`
/// pairs to dev, the remainder stays test.
pub fn resplit(
    dataset: &Dataset,
    move_to_train: usize,
    move_to_dev: usize,
) -> Result<Dataset, DataError> {
    let total = move_to_train + move_to_dev;
    if total > dataset.test.len() {
        return Err(DataError::ResplitTooLarge { requested: total, available: dataset.test.len() });
    }
    let mut train = dataset.train.clone();
    let mut dev = dataset.dev.clone();
    train.extend_from_slice(&dataset.test[..move_to_train]);
    dev.extend_from_slice(&dataset.test[move_to_train..total]);
    let test = dataset.test[total..].to_vec();
    Ok(Dataset { train, dev, test, language_tag: dataset.language_tag.clone() })
}

/// Pipeline phase for [`apply_casing_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasingPhase {
    Train,
    Dev,
    TestInput,
    Eval,
}

/// Case handling: training, tuning, and test inputs stay case-sensitive;
/// during evaluation everything is lowercased (predictions and references
/// alike, so comparisons stay coherent).
pub fn apply_casing_policy(tokens: &[String], phase: CasingPhase) -> Vec<String> {
    match phase {
        CasingPhase::Train | CasingPhase::Dev | CasingPhase::TestInput => tokens.to_vec(),
        CasingPhase::Eval => tokens.iter().map(|t| t.to_lowercase()).collect(),
    }
}

/// Eval-phase casing for a single token.
pub fn eval_case(token: &str) -> String {
    token.to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_pairs_in_order() {
        let (_d, path) = write_tmp("gyf\tgive\nlate\tlate\n");
        let pairs = load_tsv(&path).unwrap();
        assert_eq!(pairs[0], TokenPair::new("gyf", "give"));
        assert_eq!(pairs[1], TokenPair::new("late", "late"));
        assert!(pairs[1].is_unchanged());
    }

    #[test]
    fn malformed_line_names_the_line() {
        let (_d, path) = write_tmp("a\tb\nx\ty\tz\n");
        let err = load_tsv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{}", msg);
        assert!(msg.contains("3"), "{}", msg);
    }

    #[test]
    fn blank_lines_skipped_empty_file_rejected() {
        let (_d, path) = write_tmp("a\tb\n\n\nc\td\n");
        assert_eq!(load_tsv(&path).unwrap().len(), 2);
        let (_d2, path2) = write_tmp("\n\n");
        assert!(matches!(load_tsv(&path2), Err(DataError::EmptyCorpus { .. })));
    }

    #[test]
    fn save_load_roundtrip() {
        let pairs = vec![
            TokenPair::new("citee", "city"),
            TokenPair::new("gyve", "give"),
            TokenPair::new("l\u{e4}te", "late"),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.tsv");
        save_tsv(&path, &pairs).unwrap();
        assert_eq!(load_tsv(&path).unwrap(), pairs);
    }

    fn toy_dataset() -> Dataset {
        let p = |h: &str, m: &str| TokenPair::new(h, m);
        Dataset {
            train: vec![p("a", "a")],
            dev: vec![p("a", "a")],
            test: vec![p("a", "a")],
            language_tag: "toy".into(),
        }
    }

    #[test]
    fn stats_on_degenerate_corpus() {
        let stats = corpus_stats(&toy_dataset());
        assert_eq!(stats.unchanged_rate_test, 1.0);
        assert_eq!(stats.char_vocab, 1);
        assert_eq!(stats.avg_len, 1.0);
        assert_eq!(stats.max_len, 1);
        assert_eq!(stats.token_vocab_union, 1);
    }

    #[test]
    fn resplit_moves_prefix_and_conserves_total() {
        let p = |i: usize| TokenPair::new(format!("h{}", i), format!("m{}", i));
        let ds = Dataset {
            train: (0..3).map(p).collect(),
            dev: vec![p(100)],
            test: (10..20).map(p).collect(),
            language_tag: "toy".into(),
        };
        let r = resplit(&ds, 4, 2).unwrap();
        assert_eq!(r.train.len(), 7);
        assert_eq!(r.dev.len(), 3);
        assert_eq!(r.test.len(), 4);
        assert_eq!(r.train[3], p(10));
        assert_eq!(r.train[6], p(13));
        assert_eq!(r.dev[1], p(14));
        assert_eq!(r.test[0], p(16));
        assert_eq!(
            r.train.len() + r.dev.len() + r.test.len(),
            ds.train.len() + ds.dev.len() + ds.test.len()
        );

        let unchanged = resplit(&ds, 0, 0).unwrap();
        assert_eq!(unchanged.train, ds.train);
        assert_eq!(unchanged.test, ds.test);

        assert!(resplit(&ds, 9, 2).is_err());
    }

    #[test]
    fn casing_policy_per_phase() {
        let toks = vec!["Late".to_string(), "CITY".to_string()];
        assert_eq!(apply_casing_policy(&toks, CasingPhase::Train), toks);
        assert_eq!(apply_casing_policy(&toks, CasingPhase::TestInput), toks);
        assert_eq!(
            apply_casing_policy(&toks, CasingPhase::Eval),
            vec!["late".to_string(), "city".to_string()]
        );
        assert_eq!(eval_case("City"), "city");
    }
}
