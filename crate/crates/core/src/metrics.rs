//! Corpus-level translation metrics: BLEU-1..4 and mean ROUGE-L F1.
//!
//! BLEU here is the single-reference corpus score: clipped n-gram precision
//! with a brevity penalty `BP = min(1, e^{1 - r/c})`. Two adjustments keep
//! the family of scores well behaved on short corpora:
//!
//! * zero-match precisions at n ≥ 2 get add-k smoothing with k = 0.1, i.e.
//!   `p_n = 0.1 / (t_n + 0.1)` where `t_n` is the candidate n-gram total;
//! * every precision is capped at the previous level,
//!   `p_n ← min(p_n, p_{n-1})`, which makes `BLEU-k` non-increasing in `k`.
//!
//! Without the cap either mechanism can push a higher-order score above a
//! lower-order one (e.g. a fully matched long segment plus an unmatched
//! one-token segment makes raw `p_2 = 1 > p_1`).
//!
//! ROUGE-L is the equal-weight F1 of longest-common-subsequence recall and
//! precision, averaged over sentence pairs.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Add-k smoothing constant for zero-match higher-order precisions.
pub const BLEU_SMOOTHING_K: f64 = 0.1;

// ── tokenization ─────────────────────────────────────────────────────────────

/// Lowercase; alphanumeric runs become tokens; every other non-whitespace
/// character becomes its own single-character token. Idempotent under
/// re-tokenization of the space-joined output.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ── BLEU ─────────────────────────────────────────────────────────────────────

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-k over raw sentences (tokenized internally), one reference
/// per candidate.
pub fn bleu(candidates: &[String], references: &[String], k: usize) -> Result<f64> {
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    bleu_tokens(&cand_tokens, &ref_tokens, k)
}

/// Corpus BLEU-k over pre-tokenized segments.
pub fn bleu_tokens(candidates: &[Vec<String>], references: &[Vec<String>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("BLEU order must be at least 1".to_string()));
    }
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "need matched non-empty corpora, got {} candidates / {} references",
            candidates.len(),
            references.len()
        )));
    }
    let c_len: usize = candidates.iter().map(|t| t.len()).sum();
    let r_len: usize = references.iter().map(|t| t.len()).sum();

    let mut log_sum = 0.0;
    let mut prev = 1.0;
    for n in 1..=k {
        let mut total = 0usize;
        let mut matched = 0usize;
        for (cand, refr) in candidates.iter().zip(references) {
            if cand.len() >= n {
                total += cand.len() - n + 1;
            }
            let rc = ngram_counts(refr, n);
            for (gram, &count) in &ngram_counts(cand, n) {
                matched += count.min(*rc.get(gram).unwrap_or(&0));
            }
        }
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            let base = if matched > 0 {
                matched as f64 / total as f64
            } else {
                BLEU_SMOOTHING_K / (total as f64 + BLEU_SMOOTHING_K)
            };
            base.min(prev)
        };
        prev = p;
        log_sum += p.ln();
    }
    let brevity =
        if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(brevity * (log_sum / k as f64).exp())
}

// ── ROUGE-L ──────────────────────────────────────────────────────────────────

/// Longest-common-subsequence length via the two-row dynamic program.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean sentence-level ROUGE-L F1 (β = 1) over raw sentence pairs.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    rouge_l_tokens(&cand_tokens, &ref_tokens)
}

/// Mean sentence-level ROUGE-L F1 over pre-tokenized pairs.
pub fn rouge_l_tokens(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "need matched non-empty corpora, got {} candidates / {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut sum = 0.0;
    for (cand, refr) in candidates.iter().zip(references) {
        let l = lcs_length(cand, refr);
        if l == 0 {
            continue; // F1 is 0 when nothing aligns (or a side is empty)
        }
        let p = l as f64 / cand.len() as f64;
        let r = l as f64 / refr.len() as f64;
        sum += 2.0 * p * r / (p + r);
    }
    Ok(sum / candidates.len() as f64)
}

// ── combined report ──────────────────────────────────────────────────────────

/// All scores for one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub pairs: usize,
}

pub fn score_corpus(candidates: &[String], references: &[String]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu1: bleu(candidates, references, 1)?,
        bleu2: bleu(candidates, references, 2)?,
        bleu3: bleu(candidates, references, 3)?,
        bleu4: bleu(candidates, references, 4)?,
        rouge_l: rouge_l(candidates, references)?,
        pairs: candidates.len(),
    })
}

// ── tests ────────────────────────────────────────────────────────────────────
