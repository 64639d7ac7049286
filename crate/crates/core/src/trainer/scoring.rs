use crate::error::{DicoError, Result};
use crate::evaluators::{cider_d, clip_score, ref_clip_score, EmbeddingSpace, IdfTable, DEFAULT_CLIP_W};
use crate::testbed::{HackableEvaluator, World};
use crate::types::{Context, EvaluatorScore, TokenSequence};

use super::reward_head::RewardHead;

pub const REWARD_HEAD_ID: &str = "reward-head";
/// Scores every caption 0; with it all candidates tie.
pub const CONSTANT_ID: &str = "constant";

enum Kind<'a> {
    Clip(&'a EmbeddingSpace),
    RefClip(&'a EmbeddingSpace),
    Cider(IdfTable),
    Hackable(HackableEvaluator),
    Head(&'a RewardHead),
    Constant,
}

/// Evaluator looked up by id: a space name (`clipS`, `pacS`), `ref-`
/// plus a space name, `cider-d`, `hackable`, `reward-head` or `constant`.
pub struct Scorer<'a> {
    id: String,
    world: &'a World,
    kind: Kind<'a>,
}

impl<'a> Scorer<'a> {
    pub fn new(world: &'a World, id: &str, head: Option<&'a RewardHead>) -> Result<Self> {
        let kind = match id {
            "cider-d" => Kind::Cider(world.idf()),
            "hackable" => Kind::Hackable(HackableEvaluator::new(world)?),
            CONSTANT_ID => Kind::Constant,
            REWARD_HEAD_ID => Kind::Head(
                head.ok_or_else(|| DicoError::Config("reward-head evaluator needs a trained reward head".into()))?,
            ),
            other => match other.strip_prefix("ref-") {
                Some(space) => Kind::RefClip(world.space(space)?),
                None => Kind::Clip(world.space(other)?),
            },
        };
        if let Kind::Head(h) = &kind {
            if h.body.config().vocab_size != world.vocabulary.len() {
                return Err(DicoError::Config("reward head vocabulary does not match the world".into()));
            }
        }
        Ok(Self { id: id.to_string(), world, kind })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn score(&self, context: &Context, seq: &TokenSequence) -> Result<EvaluatorScore> {
        match &self.kind {
            Kind::Clip(space) => clip_score(space, context, seq, DEFAULT_CLIP_W),
            Kind::RefClip(space) => ref_clip_score(space, context, seq, self.world.refs(context), DEFAULT_CLIP_W),
            Kind::Cider(idf) => {
                if seq.content().is_empty() {
                    EvaluatorScore::new(0.0, "cider-d", 0.0, 10.0)
                } else {
                    cider_d(seq, self.world.refs(context), idf)
                }
            }
            Kind::Hackable(h) => h.score(context, seq),
            Kind::Head(h) => EvaluatorScore::new(h.score(context, seq), REWARD_HEAD_ID, f64::NEG_INFINITY, f64::INFINITY),
            Kind::Constant => EvaluatorScore::new(0.0, CONSTANT_ID, 0.0, 0.0),
        }
    }
}
