//! Conditional autoregressive captioner: exact sequence log-probabilities,
//! teacher-forced cross-entropy, greedy and beam decoding, checkpoints.

mod adam;
mod checkpoint;
mod decode;
mod model;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use decode::{beam_search, greedy_decode, ScoredSequence};
pub use model::{masked_log_softmax, Captioner, ForwardCache, ModelConfig};

use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};
use crate::types::{Context, TokenId, TokenSequence};

/// A conditional next-token distribution `p(w_t | w_<t, context)`.
///
/// Rows are full-vocabulary log-probabilities; tokens the model can never
/// emit at a step carry `-inf`.
pub trait ConditionalLm {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> TokenId;
    /// Longest sequence (eos included) the model assigns mass to.
    fn max_len(&self) -> usize;
    fn next_log_probs(&self, features: &[f64], prefix: &[TokenId]) -> Vec<f64>;

    /// Teacher-forced rows: row `t` is the distribution of `tokens[t]`.
    fn step_log_probs(&self, features: &[f64], tokens: &[TokenId]) -> Vec<Vec<f64>> {
        (0..tokens.len()).map(|t| self.next_log_probs(features, &tokens[..t])).collect()
    }
}

impl ConditionalLm for Captioner {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn eos(&self) -> TokenId {
        self.config().eos
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn next_log_probs(&self, features: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        self.next_token_log_probs(features, prefix)
    }

    fn step_log_probs(&self, features: &[f64], tokens: &[TokenId]) -> Vec<Vec<f64>> {
        self.teacher_forced_rows(features, tokens)
    }
}

fn checked_rows<M: ConditionalLm + ?Sized>(model: &M, context: &Context, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
    let tokens = seq.tokens();
    if tokens.is_empty() {
        return input_err("empty target sequence");
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.vocab_size()) {
        return input_err(format!("token id {bad} out of vocabulary range {}", model.vocab_size()));
    }
    if tokens.len() > model.max_len() {
        return input_err(format!("sequence length {} exceeds model max_len {}", tokens.len(), model.max_len()));
    }
    Ok(model.step_log_probs(context.features(), tokens))
}

/// `Σ_t log p(w_t | w_<t, context)` over the non-pad tokens, eos included.
pub fn sequence_log_prob<M: ConditionalLm + ?Sized>(model: &M, context: &Context, seq: &TokenSequence) -> Result<f64> {
    let rows = checked_rows(model, context, seq)?;
    Ok(seq.tokens().iter().zip(&rows).map(|(&t, row)| row[t]).sum())
}

/// Mean per-token negative log-likelihood of `target` under teacher forcing.
pub fn xe_loss<M: ConditionalLm + ?Sized>(model: &M, context: &Context, target: &TokenSequence) -> Result<f64> {
    let rows = checked_rows(model, context, target)?;
    let total: f64 = target.tokens().iter().zip(&rows).map(|(&t, row)| row[t]).sum();
    Ok(-total / target.len() as f64)
}

/// Accumulates `∇ xe_loss` into `grads` and returns the loss.
pub fn xe_loss_with_grad(model: &Captioner, context: &Context, target: &TokenSequence, grads: &mut [f64]) -> Result<f64> {
    let len = target.len();
    if len == 0 {
        return input_err("empty target sequence");
    }
    let lp = model.log_prob_with_grad(context.features(), target.tokens(), -1.0 / len as f64, grads);
    Ok(-lp / len as f64)
}

/// The trainable policy and the frozen reference it is anchored to.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub policy: Captioner,
    reference: Captioner,
}

impl PolicyPair {
    /// Both members start as copies of `start`.
    pub fn from_start(start: Captioner) -> Self {
        Self { policy: start.clone(), reference: start }
    }

    pub fn new(policy: Captioner, reference: Captioner) -> Result<Self> {
        if policy.config() != reference.config() {
            return input_err("policy and reference architectures differ");
        }
        Ok(Self { policy, reference })
    }

    pub fn reference(&self) -> &Captioner {
        &self.reference
    }

    pub fn reference_fingerprint(&self) -> String {
        params_fingerprint(self.reference.params())
    }
}

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn params_fingerprint(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
