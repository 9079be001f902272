//! Word accuracy, Levenshtein-based character error rate, the
//! Change/Copy/Other error taxonomy, and edit-distance summaries.
//!
//! All comparisons expect inputs already passed through the evaluation
//! casing policy (lowercased, NFC); see [`crate::data::apply_casing_policy`].

use std::fmt;

use thiserror::Error;

use crate::data::TokenPair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions vs {references} references")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("reference corpus is empty")]
    EmptyReferences,
}

/// Minimum number of single-character insertions, deletions, and
/// substitutions (all cost 1) transforming `a` into `b`. Unit is the Unicode
/// scalar value.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // Single-row DP over b.
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            let next = (prev_diag + cost).min(row[j] + 1).min(row[j + 1] + 1);
            prev_diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Fraction of predictions exactly matching their reference.
pub fn word_accuracy(predictions: &[String], references: &[String]) -> Result<f64, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let correct = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(correct as f64 / references.len() as f64)
}

/// Corpus-level character error rate:
/// `sum_i levenshtein(pred_i, ref_i) / sum_i len(ref_i)`.
pub fn cer(predictions: &[String], references: &[String]) -> Result<f64, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let total_dist: usize = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| levenshtein(p, r))
        .sum();
    let total_len: usize = references.iter().map(|r| r.chars().count()).sum();
    Ok(total_dist as f64 / total_len as f64)
}

/// Macro-averaged variant: mean over pairs of
/// `levenshtein(pred, ref) / len(ref)`.
pub fn cer_per_token(predictions: &[String], references: &[String]) -> Result<f64, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let sum: f64 = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| levenshtein(p, r) as f64 / r.chars().count() as f64)
        .sum();
    Ok(sum / references.len() as f64)
}

/// Outcome classes for one (historical, reference, prediction) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOutcome {
    Correct,
    /// Unchanged reference, but the model produced something else.
    Change,
    /// Changed reference, but the model copied the historical form.
    Copy,
    Other,
}

/// Classify one prediction; inputs must be eval-cased.
pub fn classify_error(historical: &str, reference: &str, prediction: &str) -> NormOutcome {
    if prediction == reference {
        NormOutcome::Correct
    } else if historical == reference {
        NormOutcome::Change
    } else if prediction == historical {
        NormOutcome::Copy
    } else {
        NormOutcome::Other
    }
}

/// Mean edit distances over (a) the changed test pairs (historical vs
/// modern) and (b) the incorrectly normalized changed pairs (prediction vs
/// modern). Fields are `None` when the underlying set is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct EditStats {
    pub avg_changed_distance: Option<f64>,
    pub avg_incorrect_distance: Option<f64>,
}

pub fn edit_stats(test_pairs: &[TokenPair], predictions: &[String]) -> Result<EditStats, EvalError> {
    if test_pairs.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            references: test_pairs.len(),
        });
    }
    let mut changed_sum = 0usize;
    let mut changed_n = 0usize;
    let mut incorrect_sum = 0usize;
    let mut incorrect_n = 0usize;
    for (pair, pred) in test_pairs.iter().zip(predictions) {
        if pair.historical != pair.modern {
            changed_sum += levenshtein(&pair.historical, &pair.modern);
            changed_n += 1;
            if *pred != pair.modern {
                incorrect_sum += levenshtein(pred, &pair.modern);
                incorrect_n += 1;
            }
        }
    }
    Ok(EditStats {
        avg_changed_distance: (changed_n > 0).then(|| changed_sum as f64 / changed_n as f64),
        avg_incorrect_distance: (incorrect_n > 0)
            .then(|| incorrect_sum as f64 / incorrect_n as f64),
    })
}

/// Error-class fractions among incorrect predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDistribution {
    pub change: f64,
    pub copy: f64,
    pub other: f64,
}

/// Full evaluation summary for one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub word_accuracy: f64,
    pub cer: f64,
    pub cer_per_token: f64,
    /// `None` when every prediction is correct.
    pub error_distribution: Option<ErrorDistribution>,
    pub n_evaluated: usize,
    pub edit_stats: EditStats,
}

/// Compute every metric for aligned test pairs and predictions. Inputs must
/// already be eval-cased.
pub fn report(test_pairs: &[TokenPair], predictions: &[String]) -> Result<EvalReport, EvalError> {
    if test_pairs.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            references: test_pairs.len(),
        });
    }
    let references: Vec<String> = test_pairs.iter().map(|p| p.modern.clone()).collect();
    let accuracy = word_accuracy(predictions, &references)?;
    let cer_corpus = cer(predictions, &references)?;
    let cer_macro = cer_per_token(predictions, &references)?;

    let mut change = 0usize;
    let mut copy = 0usize;
    let mut other = 0usize;
    for (pair, pred) in test_pairs.iter().zip(predictions) {
        match classify_error(&pair.historical, &pair.modern, pred) {
            NormOutcome::Correct => {}
            NormOutcome::Change => change += 1,
            NormOutcome::Copy => copy += 1,
            NormOutcome::Other => other += 1,
        }
    }
    let n_errors = change + copy + other;
    let error_distribution = (n_errors > 0).then(|| ErrorDistribution {
        change: change as f64 / n_errors as f64,
        copy: copy as f64 / n_errors as f64,
        other: other as f64 / n_errors as f64,
    });
    Ok(EvalReport {
        word_accuracy: accuracy,
        cer: cer_corpus,
        cer_per_token: cer_macro,
        error_distribution,
        n_evaluated: test_pairs.len(),
        edit_stats: edit_stats(test_pairs, predictions)?,
    })
}

impl EvalReport {
    /// Machine-readable key=value block. CER is reported to 4 decimal places
    /// so near-identical values stay distinguishable.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "n_evaluated={}\nword_accuracy={:.4}\ncer={:.4}\ncer_per_token={:.4}\n",
            self.n_evaluated,
            self.word_accuracy * 100.0,
            self.cer,
            self.cer_per_token,
        );
        if let Some(d) = &self.error_distribution {
            out.push_str(&format!(
                "error_change={:.4}\nerror_copy={:.4}\nerror_other={:.4}\n",
                d.change * 100.0,
                d.copy * 100.0,
                d.other * 100.0
            ));
        }
        if let Some(v) = self.edit_stats.avg_changed_distance {
            out.push_str(&format!("avg_changed_distance={:.4}\n", v));
        }
        if let Some(v) = self.edit_stats.avg_incorrect_distance {
            out.push_str(&format!("avg_incorrect_distance={:.4}\n", v));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "evaluated        {:>10}", self.n_evaluated)?;
        writeln!(f, "word accuracy    {:>10.2} %", self.word_accuracy * 100.0)?;
        writeln!(f, "CER (corpus)     {:>10.2}", self.cer)?;
        writeln!(f, "CER (per token)  {:>10.2}", self.cer_per_token)?;
        if let Some(d) = &self.error_distribution {
            writeln!(
                f,
                "errors           Change {:.1}%  Copy {:.1}%  Other {:.1}%",
                d.change * 100.0,
                d.copy * 100.0,
                d.other * 100.0
            )?;
        } else {
            writeln!(f, "errors           none")?;
        }
        match (self.edit_stats.avg_changed_distance, self.edit_stats.avg_incorrect_distance) {
            (Some(c), Some(i)) => {
                write!(f, "edit distance    changed {:.2}  incorrect {:.2}", c, i)
            }
            (Some(c), None) => write!(f, "edit distance    changed {:.2}", c),
            _ => write!(f, "edit distance    n/a"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_known_cases() {
        assert_eq!(levenshtein("late", "late"), 0);
        assert_eq!(levenshtein("citee", "city"), 2);
        assert_eq!(levenshtein("m\u{14d}danac", "mond\u{e1}k"), 6);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", ""), 3);
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        let preds: Vec<String> = ["city", "give", "gyf", "late"].map(String::from).into();
        let refs: Vec<String> = ["city", "give", "give", "late"].map(String::from).into();
        assert_eq!(word_accuracy(&preds, &refs).unwrap(), 0.75);
        assert_eq!(word_accuracy(&refs, &refs).unwrap(), 1.0);
        let wrong: Vec<String> = ["x", "y", "z", "w"].map(String::from).into();
        assert_eq!(word_accuracy(&wrong, &refs).unwrap(), 0.0);
        assert!(word_accuracy(&preds[..2], &refs).is_err());
    }

    #[test]
    fn cer_single_pair() {
        let preds = vec!["citee".to_string()];
        let refs = vec!["city".to_string()];
        assert_eq!(cer(&preds, &refs).unwrap(), 0.5);
        assert_eq!(cer(&refs, &refs).unwrap(), 0.0);
        assert!(cer(&[], &[]).is_err());
    }

    #[test]
    fn classification_matches_definitions() {
        assert_eq!(classify_error("late", "late", "lote"), NormOutcome::Change);
        assert_eq!(classify_error("gyf", "give", "gyf"), NormOutcome::Copy);
        assert_eq!(classify_error("gyve", "give", "gave"), NormOutcome::Other);
        assert_eq!(classify_error("gyf", "give", "give"), NormOutcome::Correct);
    }

    #[test]
    fn edit_stats_subsets() {
        let pairs = vec![TokenPair::new("gyf", "give")];
        let preds = vec!["gyf".to_string()];
        let stats = edit_stats(&pairs, &preds).unwrap();
        let d = levenshtein("gyf", "give") as f64;
        assert_eq!(stats.avg_changed_distance, Some(d));
        assert_eq!(stats.avg_incorrect_distance, Some(d));

        let unchanged = vec![TokenPair::new("late", "late")];
        let stats = edit_stats(&unchanged, &["late".to_string()]).unwrap();
        assert_eq!(stats.avg_changed_distance, None);
        assert_eq!(stats.avg_incorrect_distance, None);
    }

    #[test]
    fn report_on_perfect_predictions() {
        let pairs = vec![TokenPair::new("gyf", "give"), TokenPair::new("late", "late")];
        let preds = vec!["give".to_string(), "late".to_string()];
        let r = report(&pairs, &preds).unwrap();
        assert_eq!(r.word_accuracy, 1.0);
        assert_eq!(r.cer, 0.0);
        assert!(r.error_distribution.is_none());
    }

    #[test]
    fn error_distribution_sums_to_one() {
        let pairs = vec![
            TokenPair::new("late", "late"),
            TokenPair::new("gyf", "give"),
            TokenPair::new("gyve", "give"),
            TokenPair::new("citee", "city"),
        ];
        let preds: Vec<String> = ["lote", "gyf", "gave", "city"].map(String::from).into();
        let r = report(&pairs, &preds).unwrap();
        let d = r.error_distribution.unwrap();
        assert!((d.change + d.copy + d.other - 1.0).abs() < 1e-9);
        assert_eq!(r.word_accuracy, 0.25);
    }
}
