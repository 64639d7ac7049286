//! Two-step training: cross-entropy pretraining, then fine-tuning under a
//! chosen regime with early stopping on a validation metric.

mod config;
mod reward_head;
mod scoring;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Regime, TrainConfig, CIDER_TAU, DEFAULT_TAU};
pub use reward_head::{
    mean_pair_loss, pair_accuracy, pair_loss, synthesize_pairs, train_reward_head, HeadTrainConfig, HeadTrainReport,
    PreferencePair, RewardHead,
};
pub use scoring::{Scorer, CONSTANT_ID, REWARD_HEAD_ID};

use crate::captioner::{
    beam_search, greedy_decode, params_fingerprint, xe_loss, xe_loss_with_grad, Adam, Captioner, ConditionalLm,
    ModelConfig, PolicyPair,
};
use crate::error::{input_err, DicoError, Result};
use crate::metrics::{mean_kl_on_sequences, mean_ngram_repetitions, mean_repetition_eval, retrieval_metrics, row_kl};
use crate::objectives::{dico_loss, dico_loss_grad, dpo_loss, scst_logp_coefficients, scst_loss, GroupLogProbs};
use crate::preference::{quality_weights, select_winner_losers, uniform_weights, Selection};
use crate::report::{MetricReport, RunRecord};
use crate::testbed::{Split, World, CLIP_SPACE};
use crate::types::{Context, EvaluatorScore, TokenSequence};

/// Beam width used for validation and evaluation decodes (top-1 kept).
pub const EVAL_BEAM: usize = 5;

/// Metric ids written by [`evaluate`], in report order.
pub const EVAL_METRICS: [&str; 18] = [
    "clipS",
    "pacS",
    "ref-clipS",
    "ref-pacS",
    "cider-d",
    "hackable",
    "n1",
    "n2",
    "n3",
    "n4",
    "re",
    "r@1",
    "r@5",
    "r@10",
    "mrr",
    "kl_to_ref",
    "grammatical",
    "mean_len",
];

#[derive(Debug, Clone, PartialEq)]
pub struct XeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for XeConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct XeOutcome {
    pub model: Captioner,
    pub optimizer: Adam,
    /// Mean per-token validation XE before training, then after each epoch.
    pub val_xe: Vec<f64>,
}

fn check_model_fits(config: &ModelConfig, world: &World) -> Result<()> {
    let v = &world.vocabulary;
    if config.vocab_size != v.len() || config.bos != v.bos() || config.eos != v.eos() || config.pad != v.pad() {
        return Err(DicoError::Config("model vocabulary does not match the world".into()));
    }
    if config.feature_dim != world.dim {
        return Err(DicoError::Config(format!("model feature_dim {} but world dim {}", config.feature_dim, world.dim)));
    }
    if config.max_len < world.max_len {
        return Err(DicoError::Config(format!("model max_len {} below world max_len {}", config.max_len, world.max_len)));
    }
    Ok(())
}

/// `(context, reference)` pairs of a split in context order.
pub fn reference_examples(world: &World, split: Split) -> Vec<(Context, TokenSequence)> {
    world
        .split_contexts(split)
        .into_iter()
        .flat_map(|c| world.refs(&c).iter().map(move |r| (c.clone(), r.clone())).collect::<Vec<_>>())
        .collect()
}

pub fn mean_xe<M: ConditionalLm + ?Sized>(model: &M, examples: &[(Context, TokenSequence)]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, s) in examples {
        total += xe_loss(model, c, s)?;
    }
    Ok(total / examples.len() as f64)
}

/// Cross-entropy pretraining of a fresh model on the world's training
/// references.
pub fn pretrain_xe(world: &World, model_config: ModelConfig, cfg: &XeConfig) -> Result<XeOutcome> {
    check_model_fits(&model_config, world)?;
    let model = Captioner::new(model_config, cfg.seed)?;
    let train = reference_examples(world, Split::Train);
    let val = reference_examples(world, Split::Val);
    train_xe_on(model, &train, &val, cfg)
}

/// Cross-entropy training of `model` on explicit examples; `val` is only
/// measured.
pub fn train_xe_on(
    mut model: Captioner,
    train: &[(Context, TokenSequence)],
    val: &[(Context, TokenSequence)],
    cfg: &XeConfig,
) -> Result<XeOutcome> {
    if train.is_empty() {
        return input_err("no training examples");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return input_err("batch_size and lr must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.n_params(), cfg.lr);
    let mut val_xe = vec![mean_xe(&model, val)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            xe_step(&mut model, &mut opt, chunk.iter().map(|&i| &train[i]))?;
        }
        val_xe.push(mean_xe(&model, val)?);
    }
    Ok(XeOutcome { model, optimizer: opt, val_xe })
}

/// One optimizer step on the mean XE of a batch; returns that mean.
pub fn xe_step<'a>(
    model: &mut Captioner,
    opt: &mut Adam,
    batch: impl ExactSizeIterator<Item = &'a (Context, TokenSequence)>,
) -> Result<f64> {
    let n = batch.len();
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for (c, s) in batch {
        let mut g = model.zero_grads();
        loss += xe_loss_with_grad(model, c, s, &mut g)?;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n as f64);
    }
    opt.update(model.params_mut(), &grads);
    Ok(loss / n as f64)
}

/// 1-based epoch with the highest validation score; ties keep the earliest.
pub fn select_best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Policy at the best validated epoch.
    pub best: Captioner,
    pub best_epoch: usize,
    /// Policy after the last step.
    pub final_model: Captioner,
    pub records: Vec<RunRecord>,
    /// Fingerprint of the frozen reference at the end of the run.
    pub reference_fingerprint: String,
}

/// Per-context contribution to one optimizer step.
struct ContextTerm {
    loss: f64,
    reward_mean: f64,
    kl: f64,
}

struct Candidates {
    seqs: Vec<TokenSequence>,
    greedy: TokenSequence,
}

/// Log-probability of `seq` plus the per-step rows it was read from.
fn rows_and_logp(model: &Captioner, context: &Context, seq: &TokenSequence) -> (Vec<Vec<f64>>, f64) {
    let rows = model.teacher_forced_rows(context.features(), seq.tokens());
    let lp = seq.tokens().iter().zip(&rows).map(|(&t, r)| r[t]).sum();
    (rows, lp)
}

fn logp(model: &Captioner, context: &Context, seq: &TokenSequence) -> f64 {
    rows_and_logp(model, context, seq).1
}

/// Winner/loser split of scored candidates and the log-probs the pairwise
/// losses read. γ is softmax-weighted for `dico` and uniform otherwise.
fn dico_group(
    policy: &Captioner,
    reference: &Captioner,
    ctx: &Context,
    candidates: &[TokenSequence],
    scores: &[EvaluatorScore],
    cfg: &TrainConfig,
) -> Result<(Selection, GroupLogProbs)> {
    let sel = select_winner_losers(candidates, scores)?;
    let k = sel.losers.len();
    let gammas = match cfg.regime {
        Regime::Dico => {
            let ls: Vec<f64> = sel.scores[1..].iter().map(|s| s.value).collect();
            quality_weights(sel.scores[0].value, &ls, cfg.tau)?
        }
        _ => uniform_weights(k),
    };
    let group = GroupLogProbs {
        policy_winner: logp(policy, ctx, &sel.winner),
        ref_winner: logp(reference, ctx, &sel.winner),
        policy_losers: sel.losers.iter().map(|l| logp(policy, ctx, l)).collect(),
        ref_losers: sel.losers.iter().map(|l| logp(reference, ctx, l)).collect(),
        gammas,
        beta: cfg.beta,
    };
    group.validate()?;
    Ok((sel, group))
}

/// Mean pairwise loss over groups that `policy` mines (beam `cfg.beam_size`)
/// on a split, scored by `cfg.reward_evaluator`. Groups with fewer than two
/// candidates are skipped.
pub fn mean_group_loss(
    policy: &Captioner,
    reference: &Captioner,
    world: &World,
    split: Split,
    cfg: &TrainConfig,
    head: Option<&RewardHead>,
) -> Result<f64> {
    let scorer = Scorer::new(world, &cfg.reward_evaluator, head)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for ctx in world.split_contexts(split) {
        let seqs: Vec<TokenSequence> =
            beam_search(policy, &ctx, cfg.beam_size, world.max_len)?.into_iter().map(|s| s.seq).collect();
        if seqs.len() < 2 {
            continue;
        }
        let scores = seqs.iter().map(|s| scorer.score(&ctx, s)).collect::<Result<Vec<_>>>()?;
        let (_, group) = dico_group(policy, reference, &ctx, &seqs, &scores, cfg)?;
        total += dico_loss(&group);
        n += 1;
    }
    if n == 0 {
        return input_err(format!("no groups on split {}", split.name()));
    }
    Ok(total / n as f64)
}

struct Finetuner<'a> {
    cfg: &'a TrainConfig,
    world: &'a World,
    reward: Scorer<'a>,
    early_stop: Scorer<'a>,
    pair: PolicyPair,
    opt: Adam,
    cache: HashMap<String, Candidates>,
}

impl<'a> Finetuner<'a> {
    fn candidates(&mut self, ctx: &Context) -> Result<Candidates> {
        if self.cfg.off_policy {
            if let Some(c) = self.cache.get(&ctx.context_id) {
                return Ok(Candidates { seqs: c.seqs.clone(), greedy: c.greedy.clone() });
            }
        }
        let policy = &self.pair.policy;
        let max_len = self.world.max_len;
        let seqs: Vec<TokenSequence> =
            beam_search(policy, ctx, self.cfg.beam_size, max_len)?.into_iter().map(|s| s.seq).collect();
        let greedy = if self.cfg.regime == Regime::Scst || self.cfg.regime == Regime::RlhfLite {
            greedy_decode(policy, ctx, max_len)
        } else {
            seqs[0].clone()
        };
        if self.cfg.off_policy {
            self.cache.insert(ctx.context_id.clone(), Candidates { seqs: seqs.clone(), greedy: greedy.clone() });
        }
        Ok(Candidates { seqs, greedy })
    }

    /// Adds `scale · ∂loss` for one context to `grads`.
    fn context_term(&mut self, ctx: &Context, scale: f64, grads: &mut [f64]) -> Result<Option<ContextTerm>> {
        let cfg = self.cfg;
        if cfg.regime == Regime::Xe {
            let refs = self.world.refs(ctx).to_vec();
            let mut loss = 0.0;
            for r in &refs {
                let mut g = self.pair.policy.zero_grads();
                loss += xe_loss_with_grad(&self.pair.policy, ctx, r, &mut g)?;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += scale * b / refs.len() as f64);
            }
            return Ok(Some(ContextTerm { loss: loss / refs.len() as f64, reward_mean: 0.0, kl: 0.0 }));
        }
        let cands = self.candidates(ctx)?;
        if cands.seqs.len() < 2 {
            return Ok(None);
        }
        let scores = cands.seqs.iter().map(|s| self.reward.score(ctx, s)).collect::<Result<Vec<_>>>()?;
        let reward_mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
        let policy = &self.pair.policy;
        let reference = self.pair.reference();
        let (p_rows, _) = rows_and_logp(policy, ctx, &cands.seqs[0]);
        let (r_rows, _) = rows_and_logp(reference, ctx, &cands.seqs[0]);
        let kl = p_rows.iter().zip(&r_rows).map(|(p, q)| row_kl(p, q)).sum::<f64>() / p_rows.len() as f64;

        let loss = match cfg.regime {
            Regime::Dico | Regime::DicoUniformGamma | Regime::Dpo => {
                let (sel, group) = dico_group(policy, reference, ctx, &cands.seqs, &scores, cfg)?;
                let g = dico_loss_grad(&group);
                let f = ctx.features();
                policy.log_prob_with_grad(f, sel.winner.tokens(), scale * g.d_policy_winner, grads);
                for (l, d) in sel.losers.iter().zip(&g.d_policy_losers) {
                    policy.log_prob_with_grad(f, l.tokens(), scale * d, grads);
                }
                if cfg.regime == Regime::Dpo {
                    dpo_loss(group.policy_winner, group.ref_winner, group.policy_losers[0], group.ref_losers[0], cfg.beta)
                } else {
                    dico_loss(&group)
                }
            }
            Regime::Scst | Regime::RlhfLite => {
                let logps: Vec<f64> = cands.seqs.iter().map(|s| logp(policy, ctx, s)).collect();
                let mut rewards: Vec<f64> = scores.iter().map(|s| s.value).collect();
                let mut baseline = self.reward.score(ctx, &cands.greedy)?.value;
                if cfg.regime == Regime::RlhfLite {
                    for (r, (s, lp)) in rewards.iter_mut().zip(cands.seqs.iter().zip(&logps)) {
                        *r -= cfg.beta * (lp - logp(reference, ctx, s));
                    }
                    baseline -= cfg.beta * (logp(policy, ctx, &cands.greedy) - logp(reference, ctx, &cands.greedy));
                }
                let coeffs = scst_logp_coefficients(&rewards, baseline, logps.len())?;
                for (s, c) in cands.seqs.iter().zip(&coeffs) {
                    if *c != 0.0 {
                        policy.log_prob_with_grad(ctx.features(), s.tokens(), scale * c, grads);
                    }
                }
                scst_loss(&logps, &rewards, baseline)?
            }
            Regime::Xe => unreachable!("handled above"),
        };
        Ok(Some(ContextTerm { loss, reward_mean, kl }))
    }

    fn validate(&self) -> Result<BTreeMap<String, f64>> {
        let contexts = self.world.split_contexts(Split::Val);
        let mut decoded = Vec::with_capacity(contexts.len());
        let mut total = 0.0;
        for c in &contexts {
            let seq = top1(&self.pair.policy, c, self.world.max_len)?;
            total += self.early_stop.score(c, &seq)?.value;
            decoded.push(seq);
        }
        let items: Vec<(&Context, &TokenSequence)> = contexts.iter().zip(&decoded).collect();
        let kl = mean_kl_on_sequences(&self.pair.policy, self.pair.reference(), &items);
        let mut m = BTreeMap::new();
        m.insert(self.early_stop.id().to_string(), total / contexts.len().max(1) as f64);
        m.insert("kl_to_ref".to_string(), kl);
        Ok(m)
    }
}

fn top1(model: &Captioner, context: &Context, max_len: usize) -> Result<TokenSequence> {
    Ok(beam_search(model, context, EVAL_BEAM, max_len)?.swap_remove(0).seq)
}

/// Fine-tunes a copy of `start` against a frozen copy of it.
pub fn finetune(config: &TrainConfig, start: &Captioner, world: &World, head: Option<&RewardHead>) -> Result<FinetuneOutcome> {
    config.validate()?;
    check_model_fits(start.config(), world)?;
    let reward = Scorer::new(world, &config.reward_evaluator, head)?;
    let early_stop = Scorer::new(world, &config.early_stop_metric, head)?;
    if config.regime == Regime::RlhfLite && config.reward_evaluator != REWARD_HEAD_ID {
        return Err(DicoError::Config("rlhf_lite optimizes the reward head: set reward_evaluator = reward-head".into()));
    }
    let train = world.split_contexts(Split::Train);
    if train.is_empty() {
        return Err(DicoError::Data("training split is empty".into()));
    }
    let mut t = Finetuner {
        cfg: config,
        world,
        reward,
        early_stop,
        pair: PolicyPair::from_start(start.clone()),
        opt: Adam::new(start.n_params(), config.lr),
        cache: HashMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut val_scores = Vec::new();
    let mut val_epochs = Vec::new();
    let mut best: Option<Captioner> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (ci, chunk) in chunks.iter().enumerate() {
            step += 1;
            let mut grads = t.pair.policy.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            let (mut loss, mut reward_mean, mut kl, mut used) = (0.0, 0.0, 0.0, 0usize);
            for &i in chunk.iter() {
                if let Some(term) = t.context_term(&train[i], scale, &mut grads)? {
                    loss += term.loss;
                    reward_mean += term.reward_mean;
                    kl += term.kl;
                    used += 1;
                }
            }
            t.opt.update(t.pair.policy.params_mut(), &grads);
            let denom = used.max(1) as f64;
            let stop = config.max_steps > 0 && step as usize >= config.max_steps;
            let epoch_end = ci + 1 == chunks.len();
            let validate = stop || (epoch_end && (epoch % config.val_every == 0 || epoch == config.max_epochs));
            let val_metrics = if validate { t.validate()? } else { BTreeMap::new() };
            if validate {
                let score = val_metrics[t.early_stop.id()];
                if select_best_epoch(&val_scores).map_or(true, |b| score > val_scores[b - 1]) {
                    best = Some(t.pair.policy.clone());
                }
                val_scores.push(score);
                val_epochs.push(epoch);
            }
            records.push(RunRecord {
                step,
                epoch: epoch as u64,
                loss: loss / denom,
                reward_mean: reward_mean / denom,
                kl_to_ref: kl / denom,
                val_metrics,
                checkpoint_path: None,
            });
            if stop {
                break 'epochs;
            }
        }
    }
    let best_epoch = select_best_epoch(&val_scores).map(|i| val_epochs[i - 1]).unwrap_or(0);
    let final_model = t.pair.policy.clone();
    Ok(FinetuneOutcome {
        best: best.unwrap_or_else(|| final_model.clone()),
        best_epoch,
        final_model,
        records,
        reference_fingerprint: params_fingerprint(t.pair.reference().params()),
    })
}

/// Decodes every context of `split` (beam 5, top-1) and reports
/// [`EVAL_METRICS`] as rows tagged with `step`.
pub fn evaluate(policy: &Captioner, reference: &Captioner, world: &World, split: Split, step: u64) -> Result<MetricReport> {
    check_model_fits(policy.config(), world)?;
    let contexts = world.split_contexts(split);
    if contexts.is_empty() {
        return input_err(format!("split {} is empty", split.name()));
    }
    let decoded = contexts.iter().map(|c| top1(policy, c, world.max_len)).collect::<Result<Vec<_>>>()?;
    let n = contexts.len() as f64;
    let mean_score = |id: &str| -> Result<f64> {
        let s = Scorer::new(world, id, None)?;
        let mut total = 0.0;
        for (c, seq) in contexts.iter().zip(&decoded) {
            total += s.score(c, seq)?.value;
        }
        Ok(total / n)
    };
    let clip = world.space(CLIP_SPACE)?;
    let caption_embs: Vec<Vec<f64>> = decoded.iter().map(|s| clip.text_embed(s)).collect();
    let image_embs = contexts.iter().map(|c| clip.image_embed(c).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
    let retrieval = retrieval_metrics(&caption_embs, &image_embs, &[1, 5, 10])?;
    let items: Vec<(&Context, &TokenSequence)> = contexts.iter().zip(&decoded).collect();

    let mut report = MetricReport::default();
    for id in EVAL_METRICS {
        let value = match id {
            "clipS" | "pacS" | "ref-clipS" | "ref-pacS" | "cider-d" | "hackable" => mean_score(id)?,
            "n1" => mean_ngram_repetitions(&decoded, 1),
            "n2" => mean_ngram_repetitions(&decoded, 2),
            "n3" => mean_ngram_repetitions(&decoded, 3),
            "n4" => mean_ngram_repetitions(&decoded, 4),
            "re" => mean_repetition_eval(&decoded, 4),
            "r@1" => retrieval.recall[&1],
            "r@5" => retrieval.recall[&5],
            "r@10" => retrieval.recall[&10],
            "mrr" => retrieval.mrr,
            "kl_to_ref" => mean_kl_on_sequences(policy, reference, &items),
            "grammatical" => decoded.iter().filter(|s| world.is_grammatical(s)).count() as f64 / n,
            "mean_len" => decoded.iter().map(|s| s.content().len() as f64).sum::<f64>() / n,
            other => unreachable!("undeclared metric {other}"),
        };
        report.push(step, id, value);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::captioner::sequence_log_prob;
    use crate::testbed::generate_world;
    use crate::types::Vocabulary;

    struct Setup {
        world: World,
        start: Captioner,
    }

    /// 50-context world and a briefly pretrained model, shared by the tests.
    fn setup() -> &'static Setup {
        static SETUP: OnceLock<Setup> = OnceLock::new();
        SETUP.get_or_init(|| {
            let world = generate_world(3, 16, 50, 8).unwrap();
            let mc = ModelConfig::new(&world.vocabulary, world.dim, world.max_len).with_width(16, 2, 32);
            let out = pretrain_xe(&world, mc, &XeConfig { epochs: 15, lr: 3e-3, batch_size: 8, seed: 1 }).unwrap();
            Setup { world, start: out.model }
        })
    }

    fn short(regime: Regime, steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::toy(regime);
        cfg.reward_evaluator = "hackable".into();
        cfg.max_steps = steps;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let vocab = Vocabulary::with_words(&["a", "b", "c", "d", "e", "f", "g"]).unwrap();
        let mc = ModelConfig::new(&vocab, 4, 8);
        let model = Captioner::new(mc, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let examples: Vec<(Context, TokenSequence)> = (0..20)
            .map(|i| {
                let f: Vec<f64> = (0..4).map(|j| ((i * 7 + j) as f64 * 0.37).sin()).collect();
                let words: Vec<usize> = (0..5).map(|_| *[3usize, 4, 5, 6, 7, 8, 9].choose(&mut rng).unwrap()).collect();
                (Context::new(format!("c{i}"), f, 4).unwrap(), TokenSequence::from_content(&words, vocab.eos()))
            })
            .collect();
        let xe = mean_xe(&model, &examples).unwrap();
        assert!((xe - 8f64.ln()).abs() < 0.05, "initial xe {xe}");
    }

    #[test]
    fn single_example_overfits() {
        let vocab = Vocabulary::with_words(&["a", "b", "c", "d", "e"]).unwrap();
        let mc = ModelConfig::new(&vocab, 4, 8).with_width(16, 2, 32);
        let model = Captioner::new(mc, 0).unwrap();
        let ex = (Context::new("c", vec![0.5, -0.1, 0.3, 0.8], 4).unwrap(), TokenSequence::from_content(&[3, 6, 4, 7], vocab.eos()));
        let out = train_xe_on(model, &[ex.clone()], &[ex], &XeConfig { epochs: 500, lr: 1e-3, batch_size: 1, seed: 0 }).unwrap();
        let last = *out.val_xe.last().unwrap();
        assert!(last < 0.1, "final xe {last}");
        assert!(last <= out.val_xe[0]);
    }

    #[test]
    fn padding_does_not_change_an_xe_step() {
        let s = setup();
        let (c, r) = reference_examples(&s.world, Split::Train).swap_remove(0);
        let padded = r.with_padding(s.world.max_len, s.world.vocabulary.pad());
        let mut a = s.start.clone();
        let mut b = s.start.clone();
        let (mut oa, mut ob) = (Adam::new(a.n_params(), 1e-3), Adam::new(b.n_params(), 1e-3));
        let la = xe_step(&mut a, &mut oa, [(c.clone(), r)].iter()).unwrap();
        let lb = xe_step(&mut b, &mut ob, [(c, padded)].iter()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn pretraining_lowers_validation_xe() {
        let s = setup();
        let val = reference_examples(&s.world, Split::Val);
        let fresh = Captioner::new(*s.start.config(), 1).unwrap();
        assert!(mean_xe(&s.start, &val).unwrap() < mean_xe(&fresh, &val).unwrap());
    }

    #[test]
    fn best_epoch_is_argmax() {
        assert_eq!(select_best_epoch(&[0.1, 0.3, 0.2]), Some(2));
        assert_eq!(select_best_epoch(&[0.5, 0.5]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn reference_stays_frozen_and_runs_repeat() {
        let s = setup();
        let cfg = short(Regime::Dico, 6);
        let a = finetune(&cfg, &s.start, &s.world, None).unwrap();
        let b = finetune(&cfg, &s.start, &s.world, None).unwrap();
        assert_eq!(a.reference_fingerprint, params_fingerprint(s.start.params()));
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 6);
        assert_ne!(a.final_model.params(), s.start.params());
        crate::report::check_records(&a.records).unwrap();
        assert!(!a.records.last().unwrap().val_metrics.is_empty(), "stop step is validated");
    }

    #[test]
    fn dpo_matches_two_beam_dico() {
        let s = setup();
        let dpo = short(Regime::Dpo, 5);
        let mut dico = short(Regime::Dico, 5);
        dico.beam_size = 2;
        dico.k = 1;
        let a = finetune(&dpo, &s.start, &s.world, None).unwrap();
        let b = finetune(&dico, &s.start, &s.world, None).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.loss - y.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_ablation_only_changes_weights() {
        let s = setup();
        let run = |regime, reward: &str| {
            let mut cfg = short(regime, 3);
            cfg.reward_evaluator = reward.into();
            finetune(&cfg, &s.start, &s.world, None).unwrap()
        };
        let (a, b) = (run(Regime::Dico, CONSTANT_ID), run(Regime::DicoUniformGamma, CONSTANT_ID));
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_model.params(), b.final_model.params());
        // Step 1 starts at policy = reference, where every γ gives log 2;
        // the first update already differs.
        let (c, d) = (run(Regime::Dico, "hackable"), run(Regime::DicoUniformGamma, "hackable"));
        assert_eq!(c.records[0].loss, d.records[0].loss);
        assert_ne!(c.records[1].loss, d.records[1].loss);
        assert_ne!(c.final_model.params(), d.final_model.params());
    }

    #[test]
    fn dico_lowers_held_out_group_loss() {
        let s = setup();
        let mut cfg = short(Regime::Dico, 0);
        cfg.max_epochs = 4;
        let out = finetune(&cfg, &s.start, &s.world, None).unwrap();
        assert!(out.best_epoch >= 1);
        let at_start = mean_group_loss(&s.start, &s.start, &s.world, Split::Val, &cfg, None).unwrap();
        assert!((at_start - 2f64.ln()).abs() < 1e-12);
        let loss = mean_group_loss(&out.best, &s.start, &s.world, Split::Val, &cfg, None).unwrap();
        assert!(loss < 2f64.ln(), "held-out loss {loss}");
    }

    #[test]
    fn rlhf_needs_the_reward_head() {
        let s = setup();
        let cfg = short(Regime::RlhfLite, 2);
        assert!(matches!(finetune(&cfg, &s.start, &s.world, None), Err(DicoError::Config(_))));
        let mut cfg = cfg;
        cfg.reward_evaluator = REWARD_HEAD_ID.into();
        assert!(matches!(finetune(&cfg, &s.start, &s.world, None), Err(DicoError::Config(_))));
        let head = RewardHead::new(s.start.clone());
        let out = finetune(&cfg, &s.start, &s.world, Some(&head)).unwrap();
        assert_eq!(out.records.len(), 2);
    }

    #[test]
    fn mismatched_start_model_is_a_config_error() {
        let s = setup();
        let vocab = Vocabulary::with_words(&["x", "y"]).unwrap();
        let other = Captioner::new(ModelConfig::new(&vocab, s.world.dim, s.world.max_len), 0).unwrap();
        assert!(matches!(finetune(&short(Regime::Scst, 1), &other, &s.world, None), Err(DicoError::Config(_))));
    }

    #[test]
    fn xe_regime_trains_on_references() {
        let s = setup();
        let out = finetune(&short(Regime::Xe, 3), &s.start, &s.world, None).unwrap();
        assert!(out.records.iter().all(|r| r.loss > 0.0 && r.kl_to_ref == 0.0));
    }

    #[test]
    fn evaluate_reference_report() {
        let s = setup();
        let report = evaluate(&s.start, &s.start, &s.world, Split::Test, 7).unwrap();
        let ids: Vec<&str> = report.rows.iter().map(|r| r.metric_id.as_str()).collect();
        assert_eq!(ids, EVAL_METRICS);
        assert!(report.rows.iter().all(|r| r.step == 7 && r.value.is_finite()));
        assert_eq!(report.get("kl_to_ref"), Some(0.0));
        let (r1, r5, r10) = (report.get("r@1").unwrap(), report.get("r@5").unwrap(), report.get("r@10").unwrap());
        assert!(r1 <= r5 && r5 <= r10);
        let first = &s.world.split_contexts(Split::Test)[0];
        let top = top1(&s.start, first, s.world.max_len).unwrap();
        assert!(sequence_log_prob(&s.start, first, &top).unwrap() < 0.0);
    }
}
