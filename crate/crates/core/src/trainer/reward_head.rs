//! Scalar reward head on the captioner body, trained on pairwise
//! preferences with a Bradley-Terry likelihood.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::captioner::{Adam, Captioner};
use crate::error::{input_err, Result};
use crate::evaluators::EmbeddingSpace;
use crate::objectives::{neg_log_sigmoid, sigmoid};
use crate::testbed::{Split, World, CLIP_SPACE};
use crate::types::{Context, TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub context: Context,
    pub preferred: TokenSequence,
    pub dispreferred: TokenSequence,
}

/// Reward `w · h + b`, where `h` is the body's final hidden state at the
/// eos input position.
#[derive(Debug, Clone)]
pub struct RewardHead {
    pub body: Captioner,
    /// `d_model` weights followed by the bias.
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrainReport {
    pub initial_loss: f64,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl RewardHead {
    /// Zero head: every caption scores 0 until trained.
    pub fn new(body: Captioner) -> Self {
        let d = body.config().d_model;
        Self { body, head: vec![0.0; d + 1] }
    }

    fn inputs(&self, seq: &TokenSequence) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(seq.len() + 1);
        inputs.push(self.body.config().bos);
        inputs.extend_from_slice(seq.tokens());
        inputs
    }

    pub fn score(&self, context: &Context, seq: &TokenSequence) -> f64 {
        let d = self.body.config().d_model;
        let cache = self.body.forward(context.features(), &self.inputs(seq));
        let last = cache.positions() - 1;
        let h = &cache.hidden[last * d..(last + 1) * d];
        h.iter().zip(&self.head[..d]).map(|(a, b)| a * b).sum::<f64>() + self.head[d]
    }

    /// Returns the score and adds `g · ∂score` to the body and head grads.
    fn score_with_grad(&self, context: &Context, seq: &TokenSequence, g: f64, body_grads: &mut [f64], head_grads: &mut [f64]) -> f64 {
        let d = self.body.config().d_model;
        let cache = self.body.forward(context.features(), &self.inputs(seq));
        let last = cache.positions() - 1;
        let h = &cache.hidden[last * d..(last + 1) * d];
        let score = h.iter().zip(&self.head[..d]).map(|(a, b)| a * b).sum::<f64>() + self.head[d];
        for i in 0..d {
            head_grads[i] += g * h[i];
        }
        head_grads[d] += g;
        let mut d_hidden = vec![0.0; cache.positions() * d];
        for i in 0..d {
            d_hidden[last * d + i] = g * self.head[i];
        }
        self.body.backward(&cache, &d_hidden, body_grads);
        score
    }
}

/// `−log σ(r_preferred − r_dispreferred)`.
pub fn pair_loss(preferred: f64, dispreferred: f64) -> f64 {
    neg_log_sigmoid(preferred - dispreferred)
}

pub fn mean_pair_loss(head: &RewardHead, pairs: &[PreferencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| pair_loss(head.score(&p.context, &p.preferred), head.score(&p.context, &p.dispreferred)))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Fraction of pairs ranked correctly; ties count half.
pub fn pair_accuracy(head: &RewardHead, pairs: &[PreferencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits: f64 = pairs
        .iter()
        .map(|p| {
            let a = head.score(&p.context, &p.preferred);
            let b = head.score(&p.context, &p.dispreferred);
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    hits / pairs.len() as f64
}

pub fn train_reward_head(pairs: &[PreferencePair], base: &Captioner, cfg: &HeadTrainConfig) -> Result<(RewardHead, HeadTrainReport)> {
    if pairs.is_empty() {
        return input_err("reward head training needs at least one pair");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return input_err("batch_size and lr must be positive");
    }
    let mut head = RewardHead::new(base.clone());
    let mut body_opt = Adam::new(head.body.n_params(), cfg.lr);
    let mut head_opt = Adam::new(head.head.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_loss = mean_pair_loss(&head, pairs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut body_grads = head.body.zero_grads();
            let mut head_grads = vec![0.0; head.head.len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let p = &pairs[i];
                let a = head.score(&p.context, &p.preferred);
                let b = head.score(&p.context, &p.dispreferred);
                // d/da of −log σ(a − b) is −σ(b − a).
                let g = -sigmoid(b - a) * scale;
                head.score_with_grad(&p.context, &p.preferred, g, &mut body_grads, &mut head_grads);
                head.score_with_grad(&p.context, &p.dispreferred, -g, &mut body_grads, &mut head_grads);
            }
            body_opt.update(head.body.params_mut(), &body_grads);
            head_opt.update(&mut head.head, &head_grads);
        }
        epoch_losses.push(mean_pair_loss(&head, pairs));
    }
    Ok((head, HeadTrainReport { initial_loss, epoch_losses }))
}

/// Builds `n` pairs from the split's references: each reference is paired
/// with a copy where one content word is swapped for another word of the
/// same class, and the `clipS` similarity decides which one is preferred.
pub fn synthesize_pairs(world: &World, split: Split, n: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    let contexts = world.split_contexts(split);
    if contexts.is_empty() {
        return input_err(format!("split {} is empty", split.name()));
    }
    let space: &EmbeddingSpace = world.space(CLIP_SPACE)?;
    let classes = [&world.classes.adjectives, &world.classes.nouns, &world.classes.places];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pairs.len() < n {
        attempts += 1;
        if attempts > 100 * n + 100 {
            return input_err("could not build enough distinguishable pairs");
        }
        let ctx = &contexts[rng.gen_range(0..contexts.len())];
        let refs = world.refs(ctx);
        let original = &refs[rng.gen_range(0..refs.len())];
        let mut words = original.content().to_vec();
        let slots: Vec<(usize, &Vec<TokenId>)> = words
            .iter()
            .enumerate()
            .filter_map(|(i, t)| classes.iter().find(|c| c.contains(t)).map(|c| (i, *c)))
            .filter(|(_, c)| c.len() >= 2)
            .collect();
        let Some(&(pos, class)) = slots.choose(&mut rng) else { continue };
        let replacement = loop {
            let t = class[rng.gen_range(0..class.len())];
            if t != words[pos] {
                break t;
            }
        };
        words[pos] = replacement;
        let corrupted = TokenSequence::from_content(&words, world.vocabulary.eos());
        let a = space.similarity(ctx, original)?;
        let b = space.similarity(ctx, &corrupted)?;
        if (a - b).abs() < 1e-9 {
            continue;
        }
        let (preferred, dispreferred) = if a > b { (original.clone(), corrupted) } else { (corrupted, original.clone()) };
        pairs.push(PreferencePair { context: ctx.clone(), preferred, dispreferred });
    }
    Ok(pairs)
}
