use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::ConditionalLm;
use crate::error::{input_err, Result};
use crate::types::{Context, TokenId, TokenSequence};

/// A decoded caption with its total log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub seq: TokenSequence,
    pub log_prob: f64,
}

/// Descending score, then ascending token ids.
fn rank(a_score: f64, a_ids: &[TokenId], b_score: f64, b_ids: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_ids.cmp(b_ids))
}

/// Argmax decoding. Ties go to the lowest token id; at step `max_len - 1`
/// eos is forced.
pub fn greedy_decode<M: ConditionalLm + ?Sized>(model: &M, context: &Context, max_len: usize) -> TokenSequence {
    let max_len = max_len.min(model.max_len()).max(1);
    let eos = model.eos();
    let mut prefix = Vec::with_capacity(max_len);
    for step in 0..max_len {
        if step + 1 == max_len {
            break;
        }
        let lp = model.next_log_probs(context.features(), &prefix);
        let mut best = eos;
        let mut best_lp = f64::NEG_INFINITY;
        for (tok, &l) in lp.iter().enumerate() {
            if l > best_lp {
                best = tok;
                best_lp = l;
            }
        }
        if best == eos {
            break;
        }
        prefix.push(best);
    }
    TokenSequence::from_content(&prefix, eos)
}

/// Beam search ranked by raw total log-probability (no length
/// normalization).
///
/// Every step expands all live hypotheses, keeps the `beam_size` best
/// expansions, and moves those ending in eos to the finished list. Search
/// stops when nothing is live, or when `beam_size` hypotheses are finished
/// and none of the live ones can still overtake them (log-probabilities
/// only decrease with length). Returns up to `beam_size` finished
/// sequences, best first; fewer only when the model admits fewer complete
/// sequences.
pub fn beam_search<M: ConditionalLm + ?Sized>(
    model: &M,
    context: &Context,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<ScoredSequence>> {
    if beam_size < 1 {
        return input_err("beam_size must be at least 1");
    }
    if max_len < 2 {
        return input_err("max_len must be at least 2");
    }
    let max_len = max_len.min(model.max_len());
    let eos = model.eos();
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();

    for step in 0..max_len {
        let last_step = step + 1 == max_len;
        let mut pool: Vec<(Vec<TokenId>, f64)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (prefix, score) in &live {
            let lp = model.next_log_probs(context.features(), prefix);
            for (tok, &l) in lp.iter().enumerate() {
                if (last_step && tok != eos) || !l.is_finite() {
                    continue;
                }
                let mut ids = Vec::with_capacity(prefix.len() + 1);
                ids.extend_from_slice(prefix);
                ids.push(tok);
                pool.push((ids, score + l));
            }
        }
        pool.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        pool.truncate(beam_size);
        live.clear();
        for (ids, score) in pool {
            if ids.last() == Some(&eos) {
                finished.push((ids, score));
            } else {
                live.push((ids, score));
            }
        }
        if live.is_empty() {
            break;
        }
        if finished.len() >= beam_size {
            finished.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
            if live[0].1 <= finished[beam_size - 1].1 {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
    finished.truncate(beam_size);
    Ok(finished
        .into_iter()
        .map(|(ids, log_prob)| ScoredSequence { seq: TokenSequence::from_content(&ids[..ids.len() - 1], eos), log_prob })
        .collect())
}
