//! Caption preparation: tokenization, vocabulary, spell correction, and the
//! [CLS]/[SEP]/[UNK] joining protocol.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;

pub const RESERVED: [&str; 4] = ["[CLS]", "[SEP]", "[UNK]", "[PAD]"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Token table with dense indices. Reserved tokens occupy indices 0..=3;
/// all other tokens follow in lexicographic order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    by_token: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_sorted(words: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0u64; RESERVED.len()];
        for (w, f) in words {
            tokens.push(w);
            freqs.push(f);
        }
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, freqs, by_token }
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(|s| s.as_str())
    }

    pub fn frequency(&self, token: &str) -> u64 {
        self.index_of(token).map_or(0, |i| self.freqs[i])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn contains(&self, token: &str) -> bool {
        self.by_token.contains_key(token)
    }

    /// Non-reserved entries in index order.
    pub fn words(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens
            .iter()
            .zip(&self.freqs)
            .skip(RESERVED.len())
            .map(|(t, &f)| (t.as_str(), f))
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<(), TextError> {
        let mut out = String::new();
        out.push_str(&format!("# cir-vocab config_hash={config_hash:016x}\n"));
        for (t, f) in self.words() {
            out.push_str(&format!("{t}\t{f}\n"));
        }
        let mut file = fs::File::create(path)
            .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })?;
        file.write_all(out.as_bytes())
            .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })?;
        let mut words = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (tok, freq) = match (fields.next(), fields.next()) {
                (Some(t), Some(f)) => (t, f),
                _ => {
                    return Err(TextError::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        msg: "expected token<TAB>frequency".into(),
                    })
                }
            };
            let freq: u64 = freq.parse().map_err(|e| TextError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad frequency: {e}"),
            })?;
            words.push((tok.to_string(), freq));
        }
        words.sort();
        words.dedup_by(|a, b| a.0 == b.0);
        Ok(Vocabulary::from_sorted(words))
    }
}

/// Sequence of vocabulary indices: `[CLS] c1 [SEP] c2 [SEP] ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub source_captions: usize,
}

/// Lowercases and splits on whitespace and ASCII punctuation (hyphens split);
/// the separators are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Builds a vocabulary from a token stream. Tokens with corpus frequency at
/// least `min_freq` are kept; words from an external embedding table are
/// always included.
pub fn build_vocab<'a, I>(corpus: I, min_freq: u64, external_table: Option<&[String]>) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    assert!(min_freq >= 1, "min_freq must be at least 1");
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for tok in corpus {
        *counts.entry(tok.to_string()).or_insert(0) += 1;
    }
    let mut kept: BTreeMap<String, u64> = counts
        .iter()
        .filter(|(t, &f)| f >= min_freq && !RESERVED.contains(&t.as_str()))
        .map(|(t, &f)| (t.clone(), f))
        .collect();
    if let Some(external) = external_table {
        for w in external {
            if !RESERVED.contains(&w.as_str()) {
                kept.entry(w.clone()).or_insert_with(|| counts.get(w).copied().unwrap_or(0));
            }
        }
    }
    Vocabulary::from_sorted(kept.into_iter().collect())
}

/// Damerau-Levenshtein distance with adjacent transpositions (optimal string
/// alignment).
pub fn damerau_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (m, n) = (a.len(), b.len());
    if m == 0 {
        return n;
    }
    if n == 0 {
        return m;
    }
    let mut prev2 = vec![0usize; n + 1];
    let mut prev = (0..=n).collect::<Vec<usize>>();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut best = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                best = best.min(prev2[j - 2] + 1);
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev2, &mut prev);
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Corrects a token against the vocabulary.
///
/// A known word is returned unchanged. Otherwise the closest vocabulary
/// words at Damerau-Levenshtein distance 1 (then 2) are ranked by frequency,
/// ties broken lexicographically; with no candidate within distance 2 the
/// token comes back untouched.
pub fn spell_correct(token: &str, vocab: &Vocabulary) -> String {
    debug_assert!(!token.is_empty());
    if let Some(ix) = vocab.index_of(token) {
        if ix >= RESERVED.len() {
            return token.to_string();
        }
    }
    for radius in [1usize, 2] {
        let mut best: Option<(&str, u64)> = None;
        for (word, freq) in vocab.words() {
            if word.chars().count().abs_diff(token.chars().count()) > radius {
                continue;
            }
            if damerau_levenshtein(token, word) == radius {
                let better = match best {
                    None => true,
                    Some((bw, bf)) => freq > bf || (freq == bf && word < bw),
                };
                if better {
                    best = Some((word, freq));
                }
            }
        }
        if let Some((word, _)) = best {
            return word.to_string();
        }
    }
    token.to_string()
}

/// User-supplied correction overrides; applied before the edit-distance
/// search. File format: `misspelled<TAB>replacement` per line.
pub type OverrideMap = BTreeMap<String, String>;

pub fn load_overrides(path: &Path) -> Result<OverrideMap, TextError> {
    let text = fs::read_to_string(path)
        .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })?;
    let mut map = OverrideMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next()) {
            (Some(from), Some(to)) => {
                map.insert(from.to_string(), to.to_string());
            }
            _ => {
                return Err(TextError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: "expected misspelled<TAB>replacement".into(),
                })
            }
        }
    }
    Ok(map)
}

/// Correction with overrides taking precedence.
pub fn correct_with_overrides(token: &str, vocab: &Vocabulary, overrides: &OverrideMap) -> String {
    if let Some(replacement) = overrides.get(token) {
        return replacement.clone();
    }
    spell_correct(token, vocab)
}

/// Encodes captions into one [`TokenSequence`].
///
/// With a shuffle seed the caption order is permuted deterministically first.
/// Each caption is tokenized, optionally spell-corrected, and mapped to
/// indices (out-of-vocabulary words become [UNK]); captions are joined as
/// `[CLS] c1 [SEP] c2 ...` with no trailing [SEP].
pub fn encode_captions(
    captions: &[String],
    vocab: &Vocabulary,
    correct: bool,
    overrides: Option<&OverrideMap>,
    shuffle_seed: Option<u64>,
) -> TokenSequence {
    assert!(!captions.is_empty(), "captions must be non-empty");
    let mut order: Vec<usize> = (0..captions.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::stream(seed, "captions", &[]).shuffle(&mut order);
    }
    let mut tokens = vec![CLS];
    for (i, &ci) in order.iter().enumerate() {
        if i > 0 {
            tokens.push(SEP);
        }
        for word in tokenize(&captions[ci]) {
            let word = if correct {
                match overrides {
                    Some(map) => correct_with_overrides(&word, vocab, map),
                    None => spell_correct(&word, vocab),
                }
            } else {
                word
            };
            tokens.push(vocab.index_of(&word).filter(|&ix| ix >= RESERVED.len()).unwrap_or(UNK));
        }
    }
    TokenSequence { tokens, source_captions: captions.len() }
}
