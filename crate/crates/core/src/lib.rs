//! Preference-optimization laboratory for small autoregressive captioners.
//!
//! The crate bundles everything needed to compare reference-anchored,
//! quality-weighted preference fine-tuning against self-critical policy
//! gradient and the usual baselines:
//!
//! - [`types`]: vocabulary, token sequences, contexts and candidate groups.
//! - [`captioner`]: a two-layer causal transformer with exact log-probs,
//!   hand-written backprop, greedy and beam decoding, checkpoints.
//! - [`evaluators`]: contrastive scores (CLIP-S form, reference-based
//!   harmonic mean) and CIDEr-D.
//! - [`preference`]: winner/loser mining and softmax quality weights.
//! - [`objectives`]: the training losses plus the closed-form oracles used
//!   to check them.
//! - [`metrics`]: repetition statistics, retrieval recall, KL to reference.
//! - [`testbed`]: a seeded synthetic captioning world, including a scorer
//!   that can be gamed by repeating tokens.
//! - [`trainer`]: pre-training, fine-tuning regimes, reward head, evaluation.

pub mod captioner;
pub mod error;
pub mod evaluators;
pub mod metrics;
pub mod objectives;
pub mod preference;
pub mod report;
pub mod testbed;
pub mod trainer;
pub mod types;

pub use error::{DicoError, Result};
pub use types::{CandidateGroup, Context, EvaluatorScore, TokenSequence, Vocabulary};
