//! Tokenization for the two model granularities: plain character
//! segmentation, and byte-pair-encoding subwords learned from a corpus.
//!
//! BPE here is the classic greedy variant: count adjacent symbol pairs over
//! the training tokens (each token ends with a word-end marker symbol),
//! repeatedly merge the most frequent pair until the symbol budget is
//! reached, ties broken toward the lexicographically smallest pair.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Marker appended to every token as a final symbol before merge counting,
/// so merges can distinguish word-final from word-internal contexts.
pub const WORD_END: &str = "</w>";

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("cannot segment an empty token")]
    EmptyToken,
}

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is below the initial symbol inventory {inventory}")]
    BudgetTooSmall { target: usize, inventory: usize },
    #[error("line {line}: expected \"symbol1 symbol2\", got {content:?}")]
    MalformedMerge { line: usize, content: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate symbol {0:?} in vocabulary")]
    Duplicate(String),
    #[error("symbol {0:?} collides with a reserved special token")]
    SpecialCollision(String),
    #[error("empty vocabulary file")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NFC-normalize, then split into one symbol per Unicode scalar value.
pub fn char_segment(token: &str) -> Result<Vec<String>, SegmentError> {
    let normalized: String = token.nfc().collect();
    if normalized.is_empty() {
        return Err(SegmentError::EmptyToken);
    }
    Ok(normalized.chars().map(|c| c.to_string()).collect())
}

/// Character symbols plus the trailing word-end marker; the symbol stream
/// the BPE merge process operates on.
fn marked_symbols(token: &str) -> Result<Vec<String>, SegmentError> {
    let mut syms = char_segment(token)?;
    syms.push(WORD_END.to_string());
    Ok(syms)
}

/// Concatenate subword pieces back into the original token. Exact inverse of
/// [`BpeModel::apply`] for any input: exactly one word-end marker was
/// appended, so exactly one trailing marker is removed.
pub fn join_subwords(pieces: &[String]) -> String {
    let joined: String = pieces.concat();
    match joined.strip_suffix(WORD_END) {
        Some(s) => s.to_string(),
        None => joined,
    }
}

/// Ordered merge rules learned from a corpus.
#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    /// Symbol budget the model was trained for; `None` when loaded from a
    /// merges file, which stores only the rules.
    pub target_vocab_size: Option<usize>,
    applier: Applier,
}

#[derive(Debug, Clone, Default)]
struct Applier {
    symbol_ids: HashMap<String, u32>,
    symbols: Vec<String>,
    /// (left id, right id, merged id) per merge, in learned order.
    ops: Vec<(u32, u32, u32)>,
}

impl Applier {
    fn from_merges(merges: &[(String, String)]) -> Self {
        let mut a = Applier::default();
        for (l, r) in merges {
            let li = a.intern(l);
            let ri = a.intern(r);
            let mi = a.intern(&format!("{}{}", l, r));
            a.ops.push((li, ri, mi));
        }
        a
    }

    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.symbol_ids.insert(s.to_string(), id);
        id
    }
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Assemble a model directly from an ordered merge list.
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        Self::from_merge_list(merges, None)
    }

    fn from_merge_list(merges: Vec<(String, String)>, target: Option<usize>) -> Self {
        let applier = Applier::from_merges(&merges);
        BpeModel { merges, target_vocab_size: target, applier }
    }

    /// Learn merges greedily until the symbol inventory (initial symbols
    /// plus one new symbol per merge) reaches `target_vocab_size`, or no
    /// adjacent pair is left to merge.
    pub fn learn<'a, I>(tokens: I, target_vocab_size: usize) -> Result<Self, BpeError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        // Collapse the multiset into word types with counts. Sorting the
        // types keeps everything deterministic.
        let mut type_counts: HashMap<String, u64> = HashMap::new();
        for tok in tokens {
            *type_counts.entry(tok.to_string()).or_insert(0) += 1;
        }
        if type_counts.is_empty() {
            return Err(BpeError::EmptyCorpus);
        }
        let mut types: Vec<(String, u64)> = type_counts.into_iter().collect();
        types.sort();

        let mut interner = Applier::default();
        let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(types.len());
        for (tok, count) in &types {
            let syms = marked_symbols(tok)?;
            let ids = syms.iter().map(|s| interner.intern(s)).collect();
            words.push((ids, *count));
        }
        let inventory = interner.symbols.len();
        if target_vocab_size < inventory {
            return Err(BpeError::BudgetTooSmall { target: target_vocab_size, inventory });
        }
        let budget = target_vocab_size - inventory;

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (w, (syms, count)) in words.iter().enumerate() {
            for pair in syms.windows(2) {
                let p = (pair[0], pair[1]);
                *pair_counts.entry(p).or_insert(0) += *count as i64;
                pair_words.entry(p).or_default().insert(w);
            }
        }

        let mut heap: BinaryHeap<HeapEntry> = pair_counts
            .iter()
            .map(|(&pair, &count)| HeapEntry::new(count, pair, &interner.symbols))
            .collect();

        let mut merges: Vec<(String, String)> = Vec::new();
        while merges.len() < budget {
            let best = loop {
                match heap.pop() {
                    None => break None,
                    Some(e) => {
                        // Lazy deletion: entries go stale as counts change.
                        if pair_counts.get(&e.pair) == Some(&e.count) && e.count > 0 {
                            break Some(e);
                        }
                    }
                }
            };
            let best = match best {
                Some(b) => b,
                None => break,
            };
            let (p0, p1) = best.pair;
            let left = interner.symbols[p0 as usize].clone();
            let right = interner.symbols[p1 as usize].clone();
            let merged_id = interner.intern(&format!("{}{}", left, right));
            merges.push((left, right));

            let affected = match pair_words.remove(&best.pair) {
                Some(set) => {
                    let mut v: Vec<usize> = set.into_iter().collect();
                    v.sort_unstable();
                    v
                }
                None => Vec::new(),
            };
            pair_counts.remove(&best.pair);

            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for w in affected {
                let (syms, count) = &mut words[w];
                if !syms.windows(2).any(|p| p[0] == p0 && p[1] == p1) {
                    continue; // stale index entry
                }
                for pair in syms.windows(2) {
                    let p = (pair[0], pair[1]);
                    if p != best.pair {
                        *pair_counts.entry(p).or_insert(0) -= *count as i64;
                        touched.insert(p);
                    }
                }
                apply_merge(syms, p0, p1, merged_id);
                for pair in syms.windows(2) {
                    let p = (pair[0], pair[1]);
                    *pair_counts.entry(p).or_insert(0) += *count as i64;
                    pair_words.entry(p).or_default().insert(w);
                    touched.insert(p);
                }
            }
            let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
            touched.sort_unstable();
            for p in touched {
                if let Some(&c) = pair_counts.get(&p) {
                    if c > 0 {
                        heap.push(HeapEntry::new(c, p, &interner.symbols));
                    }
                }
            }
        }
        Ok(Self::from_merge_list(merges, Some(target_vocab_size)))
    }

    /// Segment a token: character symbols plus the word-end marker, then the
    /// learned merges applied in order (leftmost occurrence first, rescanning
    /// after each replacement).
    pub fn apply(&self, token: &str) -> Result<Vec<String>, SegmentError> {
        let syms = marked_symbols(token)?;
        // Symbols outside the model's inventory get throwaway local ids so
        // they can never take part in a merge.
        let mut local: Vec<String> = Vec::new();
        let base = self.applier.symbols.len() as u32;
        let mut ids: Vec<u32> = syms
            .iter()
            .map(|s| match self.applier.symbol_ids.get(s) {
                Some(&id) => id,
                None => {
                    local.push(s.clone());
                    base + (local.len() as u32 - 1)
                }
            })
            .collect();
        for &(l, r, m) in &self.applier.ops {
            apply_merge(&mut ids, l, r, m);
        }
        Ok(ids
            .into_iter()
            .map(|id| {
                if id < base {
                    self.applier.symbols[id as usize].clone()
                } else {
                    local[(id - base) as usize].clone()
                }
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BpeError> {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let text = fs::read_to_string(path)?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()));
                }
                _ => {
                    return Err(BpeError::MalformedMerge { line: i + 1, content: line.to_string() })
                }
            }
        }
        Ok(Self::from_merge_list(merges, None))
    }
}

/// Replace every (left, right) adjacency with the merged symbol, leftmost
/// occurrence first, rescanning from the replacement point.
fn apply_merge(syms: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            syms[i] = merged;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

struct HeapEntry {
    count: i64,
    pair: (u32, u32),
    left: String,
    right: String,
}

impl HeapEntry {
    fn new(count: i64, pair: (u32, u32), symbols: &[String]) -> Self {
        HeapEntry {
            count,
            pair,
            left: symbols[pair.0 as usize].clone(),
            right: symbols[pair.1 as usize].clone(),
        }
    }
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.count == other.count && self.left == other.left && self.right == other.right
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap: highest count first, then lexicographically smallest pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

/// Symbol granularity of a pipeline: characters, or BPE subwords.
#[derive(Debug, Clone)]
pub enum Segmenter {
    Character,
    Bpe(BpeModel),
}

impl Segmenter {
    pub fn segment(&self, token: &str) -> Result<Vec<String>, SegmentError> {
        match self {
            Segmenter::Character => char_segment(token),
            Segmenter::Bpe(model) => model.apply(token),
        }
    }

    /// Inverse of `segment` for pieces produced by it; for free-form model
    /// predictions every marker occurrence is dropped.
    pub fn join(&self, pieces: &[String]) -> String {
        match self {
            Segmenter::Character => pieces.concat(),
            Segmenter::Bpe(_) => join_subwords(pieces),
        }
    }
}

/// Bijective symbol-to-id map with the reserved specials at fixed ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

    /// Build from regular symbols; the four specials are prepended.
    pub fn from_symbols<I>(symbols: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = String>,
    {
        let mut all: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        for sym in symbols {
            if Self::SPECIALS.contains(&sym.as_str()) {
                return Err(VocabError::SpecialCollision(sym));
            }
            if index.contains_key(&sym) {
                return Err(VocabError::Duplicate(sym));
            }
            index.insert(sym.clone(), all.len() as u32);
            all.push(sym);
        }
        Ok(Vocabulary { symbols: all, index })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    /// Count of regular (non-special) symbols.
    pub fn regular_size(&self) -> usize {
        self.symbols.len() - Self::SPECIALS.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> u32 {
        self.id(symbol).unwrap_or(Self::UNK)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Symbol sequence to ids, unknown symbols mapped to UNK.
    pub fn encode(&self, symbols: &[String]) -> Vec<u32> {
        symbols.iter().map(|s| self.id_or_unk(s)).collect()
    }

    /// Ids back to symbols, skipping the specials.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= Self::SPECIALS.len() as u32)
            .filter_map(|&id| self.symbol(id).map(|s| s.to_string()))
            .collect()
    }

    /// One symbol per line, line number = id, specials first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < Self::SPECIALS.len() {
            return Err(VocabError::Empty);
        }
        for (i, expected) in Self::SPECIALS.iter().enumerate() {
            if lines[i] != *expected {
                return Err(VocabError::SpecialCollision(lines[i].to_string()));
            }
        }
        Self::from_symbols(lines[Self::SPECIALS.len()..].iter().map(|s| s.to_string()))
    }

    /// Rebuild from a full symbol list (specials included), as stored in
    /// checkpoints.
    pub fn from_full_symbol_list(symbols: &[String]) -> Result<Self, VocabError> {
        if symbols.len() < Self::SPECIALS.len() {
            return Err(VocabError::Empty);
        }
        for (i, expected) in Self::SPECIALS.iter().enumerate() {
            if symbols[i] != *expected {
                return Err(VocabError::SpecialCollision(symbols[i].clone()));
            }
        }
        Self::from_symbols(symbols[Self::SPECIALS.len()..].to_vec())
    }
}

/// Vocabulary over a training corpus at the given granularity.
///
/// Character level: every distinct character, even singletons, sorted.
/// Subword level: every distinct base symbol of the segmented corpus
/// (characters and the word-end marker), sorted, followed by the merge
/// outputs in learned order.
pub fn build_vocab<'a, I>(tokens: I, segmenter: &Segmenter) -> Result<Vocabulary, VocabError>
where
    I: IntoIterator<Item = &'a str>,
{
    match segmenter {
        Segmenter::Character => {
            let mut chars: HashSet<String> = HashSet::new();
            for tok in tokens {
                if let Ok(syms) = char_segment(tok) {
                    chars.extend(syms);
                }
            }
            let mut sorted: Vec<String> = chars.into_iter().collect();
            sorted.sort();
            Vocabulary::from_symbols(sorted)
        }
        Segmenter::Bpe(model) => {
            let mut base: HashSet<String> = HashSet::new();
            for tok in tokens {
                if let Ok(syms) = marked_symbols(tok) {
                    base.extend(syms);
                }
            }
            let mut sorted: Vec<String> = base.into_iter().collect();
            sorted.sort();
            let mut seen: HashSet<String> = sorted.iter().cloned().collect();
            for (l, r) in model.merges() {
                let merged = format!("{}{}", l, r);
                if seen.insert(merged.clone()) {
                    sorted.push(merged);
                }
            }
            Vocabulary::from_symbols(sorted)
        }
    }
}
