//! Sentence- and corpus-level BLEU-n and ROUGE-L on a 0-100 scale.
//!
//! The kernels are generic over the token type so the reward path can score
//! vocabulary ids directly while evaluation scores tokenized strings.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("no sentence pairs to score")]
    EmptyCorpus,
    #[error("max_n must be at least 1")]
    BadOrder,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// One token per code point after NFC normalization, whitespace dropped.
    CjkChar,
    /// Lowercased whitespace split with surrounding punctuation stripped.
    LatinWord,
}

impl std::str::FromStr for TokenMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cjk-char" | "cjk" => Ok(TokenMode::CjkChar),
            "latin-word" | "latin" => Ok(TokenMode::LatinWord),
            other => Err(format!("unknown token mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
    mode: TokenMode,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '，' | '。' | '！' | '？' | '、' | '；' | '：' | '“' | '”' | '‘' | '’' | '«' | '»'
                | '„' | '…' | '–' | '—' | '¿' | '¡' | '（' | '）' | '《' | '》'
        )
}

pub fn tokenize(text: &str, mode: TokenMode) -> TokenSequence {
    let tokens = match mode {
        TokenMode::CjkChar => text
            .nfc()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
        TokenMode::LatinWord => text
            .to_lowercase()
            .split_whitespace()
            .map(|w| w.trim_matches(is_punct).to_string())
            .filter(|w| !w.is_empty())
            .collect(),
    };
    TokenSequence { tokens, mode }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// A zero match count becomes 0.1; denominators are left alone.
    AddEps,
}

impl std::str::FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Smoothing::None),
            "add-eps" => Ok(Smoothing::AddEps),
            other => Err(format!("unknown smoothing `{other}`")),
        }
    }
}

const ADD_EPS: f64 = 0.1;

/// Clipped n-gram matches and candidate n-gram total for one order.
pub fn ngram_counts<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if candidate.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    if reference.len() >= n {
        for w in reference.windows(n) {
            *ref_counts.entry(w).or_default() += 1;
        }
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for w in candidate.windows(n) {
        *cand_counts.entry(w).or_default() += 1;
    }
    let matches = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len() + 1 - n)
}

/// Geometric mean of the per-order precisions times the brevity penalty.
/// Orders with no candidate n-grams are folded out of the mean. Smoothing
/// never rescues a candidate without a single matching unigram.
fn combine(counts: &[(usize, usize)], cand_len: usize, ref_len: usize, smoothing: Smoothing) -> f64 {
    if cand_len == 0 || counts.first().is_some_and(|&(m, _)| m == 0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for &(m, t) in counts {
        if t == 0 {
            continue;
        }
        let m = if m == 0 {
            match smoothing {
                Smoothing::None => return 0.0,
                Smoothing::AddEps => ADD_EPS,
            }
        } else {
            m as f64
        };
        log_sum += (m / t as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    100.0 * brevity_penalty(cand_len, ref_len) * (log_sum / orders as f64).exp()
}

/// `exp(min(0, 1 - ref/cand))`; 0 for an empty candidate.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp()
}

pub fn bleu_tokens<T: Hash + Eq>(
    candidate: &[T],
    reference: &[T],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if max_n == 0 {
        return Err(MetricError::BadOrder);
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let counts: Vec<_> = (1..=max_n).map(|n| ngram_counts(candidate, reference, n)).collect();
    Ok(combine(&counts, candidate.len(), reference.len(), smoothing))
}

pub fn bleu(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    bleu_tokens(&candidate.tokens, &reference.tokens, max_n, smoothing)
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T], f_beta: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = f_beta * f_beta;
    let denom = r + b2 * p;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * p * r / denom)
}

pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence, f_beta: f64) -> Result<f64> {
    rouge_l_tokens(&candidate.tokens, &reference.tokens, f_beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Corpus BLEU-1..4 (pooled counts, no smoothing) and mean sentence ROUGE-L.
pub fn corpus_scores_tokens<T: Hash + Eq>(pairs: &[(&[T], &[T])]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut pooled = [(0usize, 0usize); 4];
    let (mut cand_len, mut ref_len) = (0, 0);
    let mut rouge_sum = 0.0;
    for (c, r) in pairs {
        if r.is_empty() {
            return Err(MetricError::EmptyReference);
        }
        for (n, slot) in pooled.iter_mut().enumerate() {
            let (m, t) = ngram_counts(c, r, n + 1);
            slot.0 += m;
            slot.1 += t;
        }
        cand_len += c.len();
        ref_len += r.len();
        rouge_sum += rouge_l_tokens(c, r, 1.0)?;
    }
    let b = |n: usize| combine(&pooled[..n], cand_len, ref_len, Smoothing::None);
    Ok(ScoreReport {
        bleu_1: b(1),
        bleu_2: b(2),
        bleu_3: b(3),
        bleu_4: b(4),
        rouge_l: rouge_sum / pairs.len() as f64,
        brevity_penalty: brevity_penalty(cand_len, ref_len),
        candidate_length: cand_len,
        reference_length: ref_len,
    })
}

pub fn corpus_scores(pairs: &[(TokenSequence, TokenSequence)]) -> Result<ScoreReport> {
    let refs: Vec<(&[String], &[String])> =
        pairs.iter().map(|(c, r)| (c.tokens.as_slice(), r.tokens.as_slice())).collect();
    corpus_scores_tokens(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(words: &str) -> TokenSequence {
        tokenize(words, TokenMode::LatinWord)
    }

    #[test]
    fn tokenizer_rules() {
        let t = tokenize("世界上没有后悔药", TokenMode::CjkChar);
        assert_eq!(t.tokens(), ["世", "界", "上", "没", "有", "后", "悔", "药"]);
        assert_eq!(
            seq("liebe zuschauer guten abend").tokens(),
            ["liebe", "zuschauer", "guten", "abend"]
        );
        assert_eq!(seq("Don't stay home, go!").tokens(), ["don't", "stay", "home", "go"]);
        assert!(tokenize("  ", TokenMode::CjkChar).is_empty());
        assert!(seq("").is_empty());
        // decomposed e + combining acute composes to one code point
        assert_eq!(tokenize("e\u{301} x", TokenMode::CjkChar).tokens(), ["é", "x"]);
    }

    #[test]
    fn bleu_anchors() {
        let r = tokenize("世界上没有后悔药", TokenMode::CjkChar);
        assert_eq!(bleu(&r, &r, 4, Smoothing::None).unwrap(), 100.0);
        let b = bleu(&seq("a b c d"), &seq("a b c d e"), 4, Smoothing::None).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-12);
        assert!((b - 77.88).abs() < 5e-3);
        assert_eq!(bleu(&seq("x y z"), &seq("a b c"), 4, Smoothing::AddEps).unwrap(), 0.0);
        assert_eq!(bleu(&seq(""), &seq("a"), 4, Smoothing::None).unwrap(), 0.0);
        assert_eq!(bleu(&seq("a"), &seq(""), 4, Smoothing::None), Err(MetricError::EmptyReference));
    }

    #[test]
    fn short_candidate_folds_out_empty_orders() {
        let x = seq("a b");
        assert_eq!(bleu(&x, &x, 4, Smoothing::None).unwrap(), 100.0);
    }

    #[test]
    fn add_eps_only_touches_zero_matches() {
        // unigrams 3/4, bigrams 1/3, trigrams 0/2 -> 0.1/2, 4-grams 0/1 -> 0.1/1
        let c = seq("a b x c");
        let r = seq("a b c d");
        let got = bleu(&c, &r, 4, Smoothing::AddEps).unwrap();
        let log_mean = ((0.75f64).ln() + (1.0f64 / 3.0).ln() + (0.05f64).ln() + (0.1f64).ln()) / 4.0;
        assert!((got - 100.0 * log_mean.exp()).abs() < 1e-9);
        assert_eq!(bleu(&c, &r, 4, Smoothing::None).unwrap(), 0.0);
    }

    #[test]
    fn rouge_anchors() {
        let r = seq("a b c d");
        assert_eq!(rouge_l(&r, &r, 1.0).unwrap(), 100.0);
        assert_eq!(rouge_l(&seq("x y"), &r, 1.0).unwrap(), 0.0);
        let f = rouge_l(&seq("a c d"), &r, 1.0).unwrap();
        assert!((f - 100.0 * 1.5 / 1.75).abs() < 1e-12);
        assert!((f - 85.71).abs() < 5e-3);
        assert_eq!(rouge_l(&seq(""), &r, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn corpus_pooling() {
        let pairs = vec![(seq("a b c d"), seq("a b c d e")), (seq("x"), seq("x y"))];
        let rep = corpus_scores(&pairs).unwrap();
        let bp = (1.0f64 - 7.0 / 5.0).exp();
        assert!((rep.bleu_1 - 100.0 * bp).abs() < 1e-9);
        assert!((rep.bleu_4 - 100.0 * bp).abs() < 1e-9);
        assert!((rep.brevity_penalty - bp).abs() < 1e-15);
        assert_eq!((rep.candidate_length, rep.reference_length), (5, 7));
        assert_eq!(corpus_scores(&[]), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn single_pair_corpus_equals_sentence() {
        let (c, r) = (seq("the cat sat on a mat today"), seq("the cat sat on the mat"));
        let rep = corpus_scores(&[(c.clone(), r.clone())]).unwrap();
        assert_eq!(rep.bleu_4, bleu(&c, &r, 4, Smoothing::None).unwrap());
    }
}
