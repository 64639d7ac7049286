//! Caption-quality diagnostics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::captioner::{greedy_decode, ConditionalLm};
use crate::error::{input_err, Result};
use crate::evaluators::cosine;
use crate::types::{Context, TokenSequence};

fn ngram_stats(seq: &TokenSequence, n: usize) -> (usize, usize) {
    let words = seq.content();
    if n == 0 || words.len() < n {
        return (0, 0);
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for w in words.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let total = words.len() + 1 - n;
    (total, total - counts.len())
}

/// Total n-grams minus distinct n-grams in the caption's words.
pub fn ngram_repetitions(seq: &TokenSequence, n: usize) -> f64 {
    ngram_stats(seq, n).1 as f64
}

/// Fraction of the caption's n-grams that repeat an earlier one.
pub fn repetition_eval(seq: &TokenSequence, n: usize) -> f64 {
    let (total, repeats) = ngram_stats(seq, n);
    repeats as f64 / total.max(1) as f64
}

/// Per-caption mean of [`ngram_repetitions`], summed in index order.
pub fn mean_ngram_repetitions(seqs: &[TokenSequence], n: usize) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    seqs.iter().map(|s| ngram_repetitions(s, n)).sum::<f64>() / seqs.len() as f64
}

pub fn mean_repetition_eval(seqs: &[TokenSequence], n: usize) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    seqs.iter().map(|s| repetition_eval(s, n)).sum::<f64>() / seqs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Recall at each requested K.
    pub recall: BTreeMap<usize, f64>,
    pub mrr: f64,
}

/// Caption-to-image retrieval. Each caption ranks every image by cosine;
/// images tied with the true one rank ahead of it only if they come first
/// in index order.
pub fn retrieval_metrics(caption_embs: &[Vec<f64>], image_embs: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalReport> {
    if caption_embs.len() != image_embs.len() {
        return input_err(format!("{} captions but {} images", caption_embs.len(), image_embs.len()));
    }
    if caption_embs.is_empty() {
        return input_err("retrieval needs at least one item");
    }
    let n = caption_embs.len();
    let ranks: Vec<usize> = caption_embs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sims: Vec<f64> = image_embs.iter().map(|img| cosine(c, img)).collect();
            let own = sims[i];
            1 + sims.iter().enumerate().filter(|&(j, &s)| s > own || (s == own && j < i)).count()
        })
        .collect();
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
    Ok(RetrievalReport { recall, mrr })
}

/// `KL(p ‖ q)` between two log-probability rows; `-inf` entries carry no
/// mass under `p`.
pub fn row_kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log
        .iter()
        .zip(q_log)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Mean per-token `KL(policy ‖ reference)` over the prefixes visited by
/// the given sequences.
pub fn mean_kl_on_sequences<P, R>(policy: &P, reference: &R, items: &[(&Context, &TokenSequence)]) -> f64
where
    P: ConditionalLm + ?Sized,
    R: ConditionalLm + ?Sized,
{
    let mut total = 0.0;
    let mut steps = 0usize;
    for (ctx, seq) in items {
        let p_rows = policy.step_log_probs(ctx.features(), seq.tokens());
        let q_rows = reference.step_log_probs(ctx.features(), seq.tokens());
        for (p, q) in p_rows.iter().zip(&q_rows) {
            total += row_kl(p, q);
            steps += 1;
        }
    }
    if steps == 0 {
        0.0
    } else {
        total / steps as f64
    }
}

/// Greedy-decodes every context with the policy and averages the per-token
/// KL to the reference along the decoded prefixes.
pub fn mean_kl_to_reference<P, R>(policy: &P, reference: &R, contexts: &[Context], max_len: usize) -> f64
where
    P: ConditionalLm + ?Sized,
    R: ConditionalLm + ?Sized,
{
    let decoded: Vec<TokenSequence> = contexts.iter().map(|c| greedy_decode(policy, c, max_len)).collect();
    let items: Vec<(&Context, &TokenSequence)> = contexts.iter().zip(&decoded).collect();
    mean_kl_on_sequences(policy, reference, &items)
}
