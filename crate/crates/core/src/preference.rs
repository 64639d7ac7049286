//! Winner/loser mining and quality-distance weights.

use crate::error::{input_err, Result};
use crate::types::{CandidateGroup, Context, EvaluatorScore, TokenSequence};

/// Candidates split into the best-scoring one and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub winner_index: usize,
    pub winner: TokenSequence,
    /// Remaining candidates in their original decode order.
    pub losers: Vec<TokenSequence>,
    /// Winner score first, then loser scores aligned with `losers`.
    pub scores: Vec<EvaluatorScore>,
}

/// Picks the highest-scoring candidate as winner; ties go to the lowest
/// decode index.
pub fn select_winner_losers(candidates: &[TokenSequence], scores: &[EvaluatorScore]) -> Result<Selection> {
    if candidates.len() != scores.len() {
        return input_err(format!("{} candidates but {} scores", candidates.len(), scores.len()));
    }
    if candidates.len() < 2 {
        return input_err("need at least two candidates");
    }
    let id = &scores[0].evaluator_id;
    if scores.iter().any(|s| &s.evaluator_id != id) {
        return input_err("scores come from different evaluators");
    }
    let mut winner_index = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.value > scores[winner_index].value {
            winner_index = i;
        }
    }
    let mut losers = Vec::with_capacity(candidates.len() - 1);
    let mut aligned = vec![scores[winner_index].clone()];
    for (i, (c, s)) in candidates.iter().zip(scores).enumerate() {
        if i != winner_index {
            losers.push(c.clone());
            aligned.push(s.clone());
        }
    }
    Ok(Selection { winner_index, winner: candidates[winner_index].clone(), losers, scores: aligned })
}

/// `γ_i = softmax_i((winner − loser_i) / τ)`.
pub fn quality_weights(winner_score: f64, loser_scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return input_err(format!("tau must be positive, got {tau}"));
    }
    if loser_scores.is_empty() {
        return input_err("need at least one loser");
    }
    let logits: Vec<f64> = loser_scores.iter().map(|l| (winner_score - l) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// The `γ_i = 1/k` ablation.
pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Selection followed by quality weighting.
pub fn build_group(context: &Context, candidates: &[TokenSequence], scores: &[EvaluatorScore], tau: f64) -> Result<CandidateGroup> {
    let sel = select_winner_losers(candidates, scores)?;
    let loser_values: Vec<f64> = sel.scores[1..].iter().map(|s| s.value).collect();
    let gammas = quality_weights(sel.scores[0].value, &loser_values, tau)?;
    Ok(CandidateGroup { context: context.clone(), winner: sel.winner, losers: sel.losers, scores: sel.scores, gammas })
}
