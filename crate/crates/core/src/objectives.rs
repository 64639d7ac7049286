//! Training losses and the closed-form oracles used to check them.
//!
//! Every sequence-level loss here is written against whole-sequence
//! log-probabilities; callers chain the returned log-prob gradients through
//! the captioner.

use crate::error::{input_err, Result};
use crate::types::{TokenId, TokenSequence};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(z)`, stable for large `|z|`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Policy and reference log-probabilities for one candidate group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLogProbs {
    pub policy_winner: f64,
    pub ref_winner: f64,
    pub policy_losers: Vec<f64>,
    pub ref_losers: Vec<f64>,
    pub gammas: Vec<f64>,
    pub beta: f64,
}

impl GroupLogProbs {
    pub fn validate(&self) -> Result<()> {
        let k = self.gammas.len();
        if k == 0 || self.policy_losers.len() != k || self.ref_losers.len() != k {
            return input_err("loser log-probs and gammas must be aligned and non-empty");
        }
        if !(self.beta > 0.0) {
            return input_err("beta must be positive");
        }
        let all = [self.policy_winner, self.ref_winner]
            .into_iter()
            .chain(self.policy_losers.iter().copied())
            .chain(self.ref_losers.iter().copied());
        for lp in all {
            if !lp.is_finite() || lp > 0.0 {
                return input_err(format!("log-probability {lp} must be finite and ≤ 0"));
            }
        }
        let sum: f64 = self.gammas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return input_err(format!("gammas sum to {sum}"));
        }
        Ok(())
    }

    /// The argument of the sigmoid: weighted log-ratio margin times β.
    pub fn margin(&self) -> f64 {
        let winner = self.policy_winner - self.ref_winner;
        let losers: f64 = self
            .gammas
            .iter()
            .zip(self.policy_losers.iter().zip(&self.ref_losers))
            .map(|(g, (p, r))| g * (p - r))
            .sum();
        self.beta * winner - self.beta * losers
    }
}

/// Loss plus its derivatives with respect to the policy log-probs.
/// Reference log-probs are constants and receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DicoGrad {
    pub loss: f64,
    pub d_policy_winner: f64,
    pub d_policy_losers: Vec<f64>,
}

/// `−log σ(β Δ_w − β Σ_i γ_i Δ_{l_i})` with `Δ = log f_θ − log f_*`.
pub fn dico_loss(g: &GroupLogProbs) -> f64 {
    neg_log_sigmoid(g.margin())
}

pub fn dico_loss_grad(g: &GroupLogProbs) -> DicoGrad {
    let z = g.margin();
    let s = sigmoid(-z);
    DicoGrad {
        loss: neg_log_sigmoid(z),
        d_policy_winner: -g.beta * s,
        d_policy_losers: g.gammas.iter().map(|gamma| g.beta * gamma * s).collect(),
    }
}

/// Standard two-completion preference loss.
pub fn dpo_loss(policy_w: f64, ref_w: f64, policy_l: f64, ref_l: f64, beta: f64) -> f64 {
    neg_log_sigmoid(beta * (policy_w - ref_w) - beta * (policy_l - ref_l))
}

/// Reward-model objective with the γ-weighted loser mean inside the sigmoid.
pub fn reward_model_loss(winner_reward: f64, loser_rewards: &[f64], gammas: &[f64]) -> Result<f64> {
    if loser_rewards.len() != gammas.len() || gammas.is_empty() {
        return input_err("loser rewards and gammas must be aligned and non-empty");
    }
    let sum: f64 = gammas.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return input_err(format!("gammas sum to {sum}"));
    }
    let mean: f64 = gammas.iter().zip(loser_rewards).map(|(g, r)| g * r).sum();
    Ok(neg_log_sigmoid(winner_reward - mean))
}

/// The same objective written as a weighted sum of pairwise reward gaps.
pub fn reward_model_loss_pairwise(winner_reward: f64, loser_rewards: &[f64], gammas: &[f64]) -> Result<f64> {
    if loser_rewards.len() != gammas.len() || gammas.is_empty() {
        return input_err("loser rewards and gammas must be aligned and non-empty");
    }
    let z: f64 = gammas.iter().zip(loser_rewards).map(|(g, r)| g * (winner_reward - r)).sum();
    Ok(neg_log_sigmoid(z))
}

/// `β (log f_θ − log f_*)`; the per-context `β log Z` offset is omitted.
pub fn implicit_reward(policy_logp: f64, ref_logp: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return input_err("beta must be positive");
    }
    Ok(beta * (policy_logp - ref_logp))
}

/// Reward-tilted distribution over an explicitly enumerated space.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEnumeration {
    pub space: Vec<TokenSequence>,
    pub f_star: Vec<f64>,
    pub rewards: Vec<f64>,
    pub beta: f64,
    pub partition_z: f64,
    pub log_partition_z: f64,
    /// `f_*(s) exp(r(s)/β) / Z` for every `s` in `space`.
    pub f_r: Vec<f64>,
}

impl OracleEnumeration {
    /// Rewards read back from the optimal policy:
    /// `β log(f_r/f_*) + β log Z`.
    pub fn recovered_rewards(&self) -> Vec<f64> {
        self.f_r
            .iter()
            .zip(&self.f_star)
            .map(|(fr, fs)| self.beta * (fr.ln() - fs.ln()) + self.beta * self.log_partition_z)
            .collect()
    }
}

pub fn optimal_policy_enumerate(space: Vec<TokenSequence>, f_star: Vec<f64>, rewards: Vec<f64>, beta: f64) -> Result<OracleEnumeration> {
    if space.is_empty() {
        return input_err("enumeration space is empty");
    }
    if f_star.len() != space.len() || rewards.len() != space.len() {
        return input_err("space, f_star and rewards must be aligned");
    }
    if !(beta > 0.0) {
        return input_err("beta must be positive");
    }
    let total: f64 = f_star.iter().sum();
    if (total - 1.0).abs() > 1e-9 || f_star.iter().any(|&p| !(p > 0.0)) {
        return input_err(format!("f_star must be a positive distribution (sums to {total})"));
    }
    let logits: Vec<f64> = f_star.iter().zip(&rewards).map(|(p, r)| p.ln() + r / beta).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let f_r = logits.iter().map(|l| (l - log_z).exp()).collect();
    Ok(OracleEnumeration { space, f_star, rewards, beta, partition_z: log_z.exp(), log_partition_z: log_z, f_r })
}

/// Every complete sequence over `words` with at most `max_len` tokens
/// (eos included), shortest first.
pub fn enumerate_space(words: &[TokenId], eos: TokenId, max_len: usize) -> Vec<TokenSequence> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            out.push(TokenSequence::from_content(prefix, eos));
            for &w in words {
                let mut p = prefix.clone();
                p.push(w);
                next.push(p);
            }
        }
        frontier = next;
    }
    out
}

/// Self-critical surrogate: `−mean_i (r_i − b) · log p_i`.
pub fn scst_loss(sample_logps: &[f64], sample_rewards: &[f64], baseline_reward: f64) -> Result<f64> {
    let coeffs = scst_logp_coefficients(sample_rewards, baseline_reward, sample_logps.len())?;
    Ok(coeffs.iter().zip(sample_logps).map(|(c, lp)| c * lp).sum())
}

/// `∂ scst_loss / ∂ log p_i`, rewards held constant.
pub fn scst_logp_coefficients(sample_rewards: &[f64], baseline_reward: f64, n_logps: usize) -> Result<Vec<f64>> {
    if sample_rewards.len() != n_logps {
        return input_err(format!("{n_logps} log-probs but {} rewards", sample_rewards.len()));
    }
    if n_logps == 0 {
        return input_err("scst needs at least one sample");
    }
    let n = n_logps as f64;
    Ok(sample_rewards.iter().map(|r| -(r - baseline_reward) / n).collect())
}

/// Single-sample estimate of the KL-penalized objective:
/// `mean(r) − β · mean(log f_θ − log f_*)`.
pub fn kl_penalized_objective(sample_rewards: &[f64], policy_logps: &[f64], ref_logps: &[f64], beta: f64) -> Result<f64> {
    if sample_rewards.len() != policy_logps.len() || policy_logps.len() != ref_logps.len() {
        return input_err("rewards and log-probs must be aligned");
    }
    if sample_rewards.is_empty() {
        return input_err("need at least one sample");
    }
    let n = sample_rewards.len() as f64;
    let reward = sample_rewards.iter().sum::<f64>() / n;
    let kl = policy_logps.iter().zip(ref_logps).map(|(p, r)| p - r).sum::<f64>() / n;
    Ok(reward - beta * kl)
}
