//! Word-level vocabulary, tokenization, sentence splitting and MLM masking.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::synthdata::SyntheticStudy;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Target marker for positions that carry no MLM label. Never a valid id.
pub const IGNORE_INDEX: u32 = u32::MAX;

pub const DEFAULT_MAX_LEN: usize = 120;

/// Immutable token ↔ id bijection. Specials occupy ids `0..5` in the order
/// of [`SPECIALS`]; words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sorted: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(sorted)
            .collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Ids of ordinary (non-special) words.
    pub fn word_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.tokens.len() as u32
    }

    /// One token per line; the id of a token is its zero-based line number.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let tokens: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format(
                "vocabulary file must start with the five special tokens".into(),
            ));
        }
        let vocab = Self::from_words(&tokens[SPECIALS.len()..]);
        if vocab.tokens != tokens {
            return Err(Error::Format(
                "vocabulary words must be unique and sorted".into(),
            ));
        }
        Ok(vocab)
    }

    /// Tokens back to text: words joined by spaces, punctuation attached,
    /// specials dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.unk_id() {
                continue;
            }
            let t = self.token(id);
            if !out.is_empty() && !is_punct(t) {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }
}

fn is_punct(t: &str) -> bool {
    matches!(t, "." | "," | ";" | ":")
}

/// Lowercased words with trailing punctuation split off as separate tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let trimmed = lower.trim_end_matches(|c: char| is_punct(&c.to_string()));
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in lower[trimmed.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

/// Vocabulary over every word of every report in the corpus.
pub fn build_vocab(corpus: &[SyntheticStudy]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Vocabulary::from_words(
        corpus.iter().flat_map(|s| s.report.iter().flat_map(|r| words(r))),
    ))
}

/// Splits text into sentences at `.` boundaries followed by whitespace or
/// end of input. Each sentence keeps its terminating period.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let boundary = c == '.' && chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if boundary {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Sentence list of a report given either as one string or as a list.
pub fn split_report<S: AsRef<str>>(report: &[S]) -> Vec<String> {
    report
        .iter()
        .flat_map(|s| split_sentences(s.as_ref()))
        .collect()
}

/// `[CLS] w_1 … w_k [SEP] [PAD]…` padded to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenizedText {
    /// Number of non-padding positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m).count()
    }

    /// Copy with the padding removed.
    pub fn trimmed(&self) -> TokenizedText {
        let n = self.active_len();
        TokenizedText {
            ids: self.ids[..n].to_vec(),
            attention_mask: vec![true; n],
        }
    }

    /// Copy padded (or trimmed of padding) to exactly `len` positions.
    pub fn padded_to(&self, len: usize, pad_id: u32) -> TokenizedText {
        assert!(len >= self.active_len(), "cannot pad below active length");
        let mut ids = self.ids.clone();
        let mut mask = self.attention_mask.clone();
        ids.resize(len, pad_id);
        mask.resize(len, false);
        TokenizedText {
            ids,
            attention_mask: mask,
        }
    }
}

pub fn tokenize<S: AsRef<str>>(vocab: &Vocabulary, report: &[S], max_len: usize) -> TokenizedText {
    let max_len = max_len.max(2);
    let mut ids = vec![vocab.cls_id()];
    for s in report {
        for w in words(s.as_ref()) {
            ids.push(vocab.id(&w).unwrap_or(vocab.unk_id()));
        }
    }
    ids.truncate(max_len - 1);
    ids.push(vocab.sep_id());
    let active = ids.len();
    ids.resize(max_len, vocab.pad_id());
    let attention_mask = (0..max_len).map(|i| i < active).collect();
    TokenizedText {
        ids,
        attention_mask,
    }
}

/// Corruption probabilities applied to selected positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            rate,
            ..Self::default()
        }
    }
}

/// How a selected position was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedText {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub targets: Vec<u32>,
    pub positions: Vec<usize>,
    pub corruptions: Vec<Corruption>,
}

impl MaskedText {
    pub fn as_tokens(&self) -> TokenizedText {
        TokenizedText {
            ids: self.ids.clone(),
            attention_mask: self.attention_mask.clone(),
        }
    }
}

/// Selects each ordinary token with probability `rate`; a selected token
/// becomes `[MASK]` with `mask_prob`, a random word with `random_prob`, and
/// stays unchanged otherwise.
pub fn mask_tokens<R: Rng>(
    vocab: &Vocabulary,
    tokens: &TokenizedText,
    config: &MaskingConfig,
    rng: &mut R,
) -> MaskedText {
    let mut ids = tokens.ids.clone();
    let mut targets = vec![IGNORE_INDEX; ids.len()];
    let mut positions = Vec::new();
    let mut corruptions = Vec::new();
    let words = vocab.word_ids();
    for i in 0..ids.len() {
        if !tokens.attention_mask[i] || vocab.is_special(tokens.ids[i]) {
            continue;
        }
        if !rng.gen_bool(config.rate.clamp(0.0, 1.0)) {
            continue;
        }
        targets[i] = tokens.ids[i];
        positions.push(i);
        let u: f64 = rng.gen();
        let kind = if u < config.mask_prob {
            ids[i] = vocab.mask_id();
            Corruption::Mask
        } else if u < config.mask_prob + config.random_prob && !words.is_empty() {
            ids[i] = rng.gen_range(words.clone());
            Corruption::Random
        } else {
            Corruption::Keep
        };
        corruptions.push(kind);
    }
    MaskedText {
        ids,
        attention_mask: tokens.attention_mask.clone(),
        targets,
        positions,
        corruptions,
    }
}
