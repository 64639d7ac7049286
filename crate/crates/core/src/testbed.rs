//! Seeded synthetic captioning world.
//!
//! Each context is a small scene: either one object with an attribute and a
//! place, or two objects sharing an attribute. References are sampled from
//! a planted template grammar that always names every salient word, so a
//! grammatical caption is checkable and repetition is a visible defect.
//! Two-object captions use one determiner for both objects; one-object
//! captions pick from three determiner pairs.
//!
//! Two embedding spaces are built from per-word latent vectors:
//! `clipS` uses them directly, `pacS` mixes in independent noise. In both,
//! a context's image embedding is its normalized word-vector sum plus
//! noise, and a caption's text embedding is the normalized sum over its
//! distinct words. The context features fed to the captioner equal the
//! `clipS` image embedding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, DicoError, Result};
use crate::evaluators::{normalize, EmbeddingSpace, IdfTable};
use crate::types::{Context, EvaluatorScore, TokenId, TokenSequence, Vocabulary};

/// Caption length budget (eos included) of generated worlds.
pub const WORLD_MAX_LEN: usize = 10;
pub const CLIP_SPACE: &str = "clipS";
pub const PAC_SPACE: &str = "pacS";
const REFS_PER_CONTEXT: usize = 4;
const IMAGE_NOISE: f64 = 0.3;
const PAC_MIX: f64 = 0.6;
const FUNCTION_WORDS: [&str; 4] = ["a", "the", "on", "and"];

/// Read access to a captioning corpus. Only the synthetic backend exists.
pub trait CaptionCorpus {
    fn vocabulary(&self) -> &Vocabulary;
    fn contexts(&self) -> &[Context];
    fn references(&self, context_id: &str) -> Option<&[TokenSequence]>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => input_err(format!("unknown split {other:?}")),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Word classes of the planted grammar.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WordClasses {
    pub function: Vec<TokenId>,
    pub adjectives: Vec<TokenId>,
    pub nouns: Vec<TokenId>,
    pub places: Vec<TokenId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    vocab_size: usize,
    n_contexts: usize,
    dim: usize,
    max_len: usize,
    splits: Splits,
    classes: WordClasses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub vocabulary: Vocabulary,
    pub max_len: usize,
    pub dim: usize,
    pub contexts: Vec<Context>,
    pub references: BTreeMap<String, Vec<TokenSequence>>,
    pub spaces: BTreeMap<String, EmbeddingSpace>,
    pub splits: Splits,
    pub classes: WordClasses,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn add_scaled(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

fn sum_vectors(rows: &[Vec<f64>], ids: &[TokenId], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &t in ids {
        v.iter_mut().zip(&rows[t]).for_each(|(a, b)| *a += b);
    }
    v
}

/// Scene: salient words and whether it has two objects.
struct Scene {
    adj: Option<TokenId>,
    noun: Option<TokenId>,
    second: Option<TokenId>,
    place: Option<TokenId>,
}

impl Scene {
    fn salient(&self) -> Vec<TokenId> {
        [self.adj, self.noun, self.second, self.place].into_iter().flatten().collect()
    }
}

/// Two-object captions share one determiner (`template` parity); one-object
/// captions use one of three determiner pairs.
fn render_template(scene: &Scene, classes: &WordClasses, template: usize) -> Vec<TokenId> {
    let f = |i: usize| classes.function.get(i).copied();
    let (a, the, on, and) = (f(0), f(1), f(2), f(3));
    let words: Vec<Option<TokenId>> = match (scene.second, classes.function.is_empty()) {
        (Some(n2), false) => {
            let det = if template % 2 == 0 { a } else { the };
            vec![det, scene.adj, scene.noun, and, det, scene.adj, Some(n2)]
        }
        (Some(n2), true) => vec![scene.adj, scene.noun, scene.adj, Some(n2)],
        (None, false) => match template % 3 {
            0 => vec![a, scene.adj, scene.noun, on, the, scene.place],
            1 => vec![the, scene.adj, scene.noun, on, a, scene.place],
            _ => vec![a, scene.adj, scene.noun, on, a, scene.place],
        },
        (None, true) => vec![scene.adj, scene.noun, scene.place],
    };
    words.into_iter().flatten().collect()
}

/// Builds a world deterministically from `seed`.
pub fn generate_world(seed: u64, vocab_size: usize, n_contexts: usize, dim: usize) -> Result<World> {
    if vocab_size < 4 {
        return input_err(format!("vocab_size must be at least 4, got {vocab_size}"));
    }
    if n_contexts < 3 {
        return input_err(format!("n_contexts must be at least 3, got {n_contexts}"));
    }
    if dim < 2 {
        return input_err(format!("dim must be at least 2, got {dim}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_words = vocab_size - 3;
    let use_function = n_words >= 10;
    let mut names: Vec<String> = Vec::with_capacity(n_words);
    let mut classes = WordClasses::default();
    if use_function {
        names.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    }
    let kinds = ["adj", "noun", "place"];
    let mut counters = [0usize; 3];
    while names.len() < n_words {
        let k = (names.len() - if use_function { FUNCTION_WORDS.len() } else { 0 }) % 3;
        names.push(format!("{}{}", kinds[k], counters[k]));
        counters[k] += 1;
    }
    let vocabulary = Vocabulary::with_words(&names)?;
    for (i, name) in names.iter().enumerate() {
        let id = i + 3;
        if FUNCTION_WORDS.contains(&name.as_str()) && use_function {
            classes.function.push(id);
        } else if name.starts_with("adj") {
            classes.adjectives.push(id);
        } else if name.starts_with("noun") {
            classes.nouns.push(id);
        } else {
            classes.places.push(id);
        }
    }

    // Latent word vectors; specials and function words carry no content.
    let mut clip_rows = vec![vec![0.0; dim]; vocab_size];
    let mut pac_rows = vec![vec![0.0; dim]; vocab_size];
    for id in classes.adjectives.iter().chain(&classes.nouns).chain(&classes.places) {
        clip_rows[*id] = unit_gaussian(&mut rng, dim);
    }
    for id in classes.adjectives.iter().chain(&classes.nouns).chain(&classes.places) {
        let noise = unit_gaussian(&mut rng, dim);
        let mut v = add_scaled(&clip_rows[*id].iter().map(|x| x * (1.0 - PAC_MIX * PAC_MIX).sqrt()).collect::<Vec<_>>(), &noise, PAC_MIX);
        normalize(&mut v);
        pac_rows[*id] = v;
    }
    let null_clip = unit_gaussian(&mut rng, dim);
    let null_pac = unit_gaussian(&mut rng, dim);

    let mut contexts = Vec::with_capacity(n_contexts);
    let mut references = BTreeMap::new();
    let mut clip_images = BTreeMap::new();
    let mut pac_images = BTreeMap::new();
    let width = (n_contexts.max(2) - 1).to_string().len();
    for i in 0..n_contexts {
        let pick = |rng: &mut ChaCha8Rng, pool: &[TokenId]| pool.choose(rng).copied();
        let two = use_function && classes.nouns.len() >= 2 && rng.gen_bool(0.4);
        let adj = pick(&mut rng, &classes.adjectives);
        let noun = pick(&mut rng, &classes.nouns);
        let (second, place) = if two {
            let mut n2 = pick(&mut rng, &classes.nouns);
            while n2 == noun {
                n2 = pick(&mut rng, &classes.nouns);
            }
            (n2, None)
        } else {
            (None, pick(&mut rng, &classes.places))
        };
        let scene = Scene { adj, noun, second, place };
        let salient = scene.salient();
        let id = format!("ctx{i:0width$}");

        let mut clip_img = sum_vectors(&clip_rows, &salient, dim);
        if !normalize(&mut clip_img) {
            clip_img = unit_gaussian(&mut rng, dim);
        }
        let noise = unit_gaussian(&mut rng, dim);
        let mut clip_img = add_scaled(&clip_img, &noise, IMAGE_NOISE);
        normalize(&mut clip_img);
        let mut pac_img = sum_vectors(&pac_rows, &salient, dim);
        if !normalize(&mut pac_img) {
            pac_img = unit_gaussian(&mut rng, dim);
        }
        let noise = unit_gaussian(&mut rng, dim);
        let mut pac_img = add_scaled(&pac_img, &noise, IMAGE_NOISE);
        normalize(&mut pac_img);

        let n_templates = if scene.second.is_some() { 2 } else { 3 };
        let refs: Vec<TokenSequence> = (0..REFS_PER_CONTEXT)
            .map(|_| {
                let t = rng.gen_range(0..n_templates);
                let mut words = render_template(&scene, &classes, t);
                words.truncate(WORLD_MAX_LEN - 1);
                TokenSequence::from_content(&words, vocabulary.eos())
            })
            .collect();
        contexts.push(Context::new(id.clone(), clip_img.clone(), dim)?);
        references.insert(id.clone(), refs);
        clip_images.insert(id.clone(), clip_img);
        pac_images.insert(id, pac_img);
    }

    let mut order: Vec<String> = contexts.iter().map(|c| c.context_id.clone()).collect();
    order.shuffle(&mut rng);
    let n_val = (n_contexts / 6).max(1);
    let n_test = (n_contexts / 6).max(1);
    let test = order.split_off(order.len() - n_test);
    let val = order.split_off(order.len() - n_val);
    let splits = Splits { train: order, val, test };

    let mut spaces = BTreeMap::new();
    spaces.insert(
        CLIP_SPACE.to_string(),
        EmbeddingSpace { name: CLIP_SPACE.into(), dim, token_vectors: clip_rows, null_text: null_clip, image: clip_images },
    );
    spaces.insert(
        PAC_SPACE.to_string(),
        EmbeddingSpace { name: PAC_SPACE.into(), dim, token_vectors: pac_rows, null_text: null_pac, image: pac_images },
    );
    Ok(World { seed, vocabulary, max_len: WORLD_MAX_LEN, dim, contexts, references, spaces, splits, classes })
}

impl CaptionCorpus for World {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    fn references(&self, context_id: &str) -> Option<&[TokenSequence]> {
        self.references.get(context_id).map(Vec::as_slice)
    }
}

impl World {
    pub fn context(&self, id: &str) -> Option<&Context> {
        self.contexts.iter().find(|c| c.context_id == id)
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn split_contexts(&self, split: Split) -> Vec<Context> {
        let index: HashMap<&str, &Context> = self.contexts.iter().map(|c| (c.context_id.as_str(), c)).collect();
        self.split_ids(split).iter().filter_map(|id| index.get(id.as_str()).map(|c| (*c).clone())).collect()
    }

    pub fn refs(&self, context: &Context) -> &[TokenSequence] {
        self.references.get(&context.context_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn space(&self, name: &str) -> Result<&EmbeddingSpace> {
        self.spaces.get(name).ok_or_else(|| DicoError::Config(format!("unknown embedding space {name:?}")))
    }

    /// Document frequencies over the training references.
    pub fn idf(&self) -> IdfTable {
        let docs: Vec<Vec<TokenSequence>> = self
            .splits
            .train
            .iter()
            .filter_map(|id| self.references.get(id).cloned())
            .collect();
        IdfTable::build(&docs)
    }

    /// Whether the caption follows one of the planted templates (word
    /// classes only; which words fill the slots is not checked).
    pub fn is_grammatical(&self, seq: &TokenSequence) -> bool {
        #[derive(PartialEq, Clone, Copy)]
        enum C {
            F(usize),
            Adj,
            Noun,
            Place,
            Other,
        }
        let class = |t: TokenId| {
            if let Some(i) = self.classes.function.iter().position(|&f| f == t) {
                C::F(i)
            } else if self.classes.adjectives.contains(&t) {
                C::Adj
            } else if self.classes.nouns.contains(&t) {
                C::Noun
            } else if self.classes.places.contains(&t) {
                C::Place
            } else {
                C::Other
            }
        };
        let got: Vec<C> = seq.content().iter().map(|&t| class(t)).collect();
        // Class-level patterns of every template.
        let patterns = self.template_patterns();
        let present = |s: &Slot| match s {
            Slot::Function(_) | Slot::Det => true,
            Slot::Adj => !self.classes.adjectives.is_empty(),
            Slot::Noun => !self.classes.nouns.is_empty(),
            Slot::Place => !self.classes.places.is_empty(),
        };
        patterns.iter().any(|p| {
            let p: Vec<Slot> = p.iter().copied().filter(present).collect();
            p.len() == got.len()
                && p.iter().zip(&got).all(|(w, g)| match (w, g) {
                    (Slot::Function(i), C::F(j)) => i == j,
                    (Slot::Det, C::F(j)) => *j < 2,
                    (Slot::Adj, C::Adj) | (Slot::Noun, C::Noun) | (Slot::Place, C::Place) => true,
                    _ => false,
                })
        })
    }

    fn template_patterns(&self) -> Vec<Vec<Slot>> {
        let has_f = !self.classes.function.is_empty();
        if has_f {
            vec![
                vec![Slot::Det, Slot::Adj, Slot::Noun, Slot::Function(3), Slot::Det, Slot::Adj, Slot::Noun],
                vec![Slot::Det, Slot::Adj, Slot::Noun, Slot::Function(2), Slot::Det, Slot::Place],
            ]
        } else {
            vec![vec![Slot::Adj, Slot::Noun, Slot::Adj, Slot::Noun], vec![Slot::Adj, Slot::Noun, Slot::Place]]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Function(usize),
    Det,
    Adj,
    Noun,
    Place,
}

/// Evaluator with a planted repetition loophole: half the clipped `clipS`
/// cosine plus a bonus linear in the count of the most repeated word.
/// A caption that is one word repeated up to the length budget scores 1.
#[derive(Debug, Clone)]
pub struct HackableEvaluator {
    pub space: EmbeddingSpace,
    pub base_weight: f64,
    pub max_len: usize,
}

pub const HACKABLE_ID: &str = "hackable";

impl HackableEvaluator {
    pub fn new(world: &World) -> Result<Self> {
        if world.max_len < 3 {
            return input_err("hackable evaluator needs max_len of at least 3");
        }
        Ok(Self { space: world.space(CLIP_SPACE)?.clone(), base_weight: 0.5, max_len: world.max_len })
    }

    pub fn repetition_bonus(&self, seq: &TokenSequence) -> f64 {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for &t in seq.content() {
            *counts.entry(t).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(1);
        (top.saturating_sub(1)) as f64 / (self.max_len - 2) as f64
    }

    pub fn score(&self, context: &Context, seq: &TokenSequence) -> Result<EvaluatorScore> {
        let base = self.base_weight * self.space.similarity(context, seq)?.max(0.0);
        let value = (base + self.repetition_bonus(seq)).clamp(0.0, 1.0);
        EvaluatorScore::new(value, HACKABLE_ID, 0.0, 1.0)
    }
}

fn data_err<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> DicoError + '_ {
    move |e| DicoError::Data(format!("{what}: {e}"))
}

impl World {
    /// Writes the world as a directory: `vocab.txt`, `manifest.json`,
    /// `contexts.jsonl`, `references.tsv` and one `space_<name>.json` per
    /// embedding space.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("vocab.txt"), self.vocabulary.to_file_string())?;
        let manifest = Manifest {
            seed: self.seed,
            vocab_size: self.vocabulary.len(),
            n_contexts: self.contexts.len(),
            dim: self.dim,
            max_len: self.max_len,
            splits: self.splits.clone(),
            classes: self.classes.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut ctx = String::new();
        for c in &self.contexts {
            ctx.push_str(&serde_json::to_string(c)?);
            ctx.push('\n');
        }
        fs::write(dir.join("contexts.jsonl"), ctx)?;
        let mut refs = String::new();
        for (id, list) in &self.references {
            for r in list {
                refs.push_str(&format!("{id}\t{}\n", r.to_line()));
            }
        }
        fs::write(dir.join("references.tsv"), refs)?;
        for (name, space) in &self.spaces {
            fs::write(dir.join(format!("space_{name}.json")), serde_json::to_string(space)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocabulary = Vocabulary::from_file_str(&fs::read_to_string(dir.join("vocab.txt"))?)?;
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?).map_err(data_err("manifest.json"))?;
        let mut contexts = Vec::new();
        for line in fs::read_to_string(dir.join("contexts.jsonl"))?.lines().filter(|l| !l.trim().is_empty()) {
            let c: Context = serde_json::from_str(line).map_err(data_err("contexts.jsonl"))?;
            if c.dim() != manifest.dim || c.features().iter().any(|x| !x.is_finite()) {
                return Err(DicoError::Data(format!("context {} has bad features", c.context_id)));
            }
            contexts.push(c);
        }
        let mut references: BTreeMap<String, Vec<TokenSequence>> = BTreeMap::new();
        for line in fs::read_to_string(dir.join("references.tsv"))?.lines().filter(|l| !l.trim().is_empty()) {
            let (id, ids) = line
                .split_once('\t')
                .ok_or_else(|| DicoError::Data(format!("bad reference line {line:?}")))?;
            references
                .entry(id.to_string())
                .or_default()
                .push(TokenSequence::parse_line(ids, &vocabulary, manifest.max_len)?);
        }
        let mut spaces = BTreeMap::new();
        for name in [CLIP_SPACE, PAC_SPACE] {
            let text = fs::read_to_string(dir.join(format!("space_{name}.json")))?;
            let space: EmbeddingSpace = serde_json::from_str(&text).map_err(data_err("embedding space"))?;
            if space.dim != manifest.dim || space.token_vectors.len() != vocabulary.len() {
                return Err(DicoError::Data(format!("space {name} does not match the manifest")));
            }
            spaces.insert(name.to_string(), space);
        }
        if contexts.len() != manifest.n_contexts || vocabulary.len() != manifest.vocab_size {
            return Err(DicoError::Data("world files disagree with manifest".into()));
        }
        Ok(World {
            seed: manifest.seed,
            vocabulary,
            max_len: manifest.max_len,
            dim: manifest.dim,
            contexts,
            references,
            spaces,
            splits: manifest.splits,
            classes: manifest.classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::{clip_score, DEFAULT_CLIP_W};
    use proptest::prelude::{prop_assert, proptest};

    fn world() -> World {
        generate_world(7, 40, 120, 32).unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(3, 30, 20, 16).unwrap(), generate_world(3, 30, 20, 16).unwrap());
        assert_ne!(generate_world(3, 30, 20, 16).unwrap(), generate_world(4, 30, 20, 16).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_world(0, 3, 10, 8).is_err());
        assert!(generate_world(0, 10, 2, 8).is_err());
        assert!(generate_world(0, 10, 10, 1).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let w = world();
        for space in w.spaces.values() {
            for v in space.image.values() {
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
            for refs in w.references.values() {
                let t = space.text_embed(&refs[0]);
                let n: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_partition_contexts() {
        let w = world();
        let mut all: Vec<String> = w.splits.train.iter().chain(&w.splits.val).chain(&w.splits.test).cloned().collect();
        all.sort();
        let mut ids: Vec<String> = w.contexts.iter().map(|c| c.context_id.clone()).collect();
        ids.sort();
        assert_eq!(all, ids);
        assert!(!w.splits.val.is_empty() && !w.splits.test.is_empty());
    }

    #[test]
    fn references_are_grammatical_and_fit() {
        let w = world();
        for refs in w.references.values() {
            assert_eq!(refs.len(), REFS_PER_CONTEXT);
            for r in refs {
                assert!(r.len() <= w.max_len);
                assert!(w.is_grammatical(r), "{}", w.vocabulary.render(r));
            }
        }
        let junk = TokenSequence::from_content(&[w.classes.nouns[0]; 4], w.vocabulary.eos());
        assert!(!w.is_grammatical(&junk));
    }

    #[test]
    fn tiny_vocab_still_builds() {
        let w = generate_world(1, 4, 6, 4).unwrap();
        for refs in w.references.values() {
            assert!(refs.iter().all(|r| w.is_grammatical(r)));
        }
    }

    #[test]
    fn matched_pairs_score_well_above_mismatched() {
        let w = world();
        let space = w.space(CLIP_SPACE).unwrap();
        let n = w.contexts.len();
        let (mut matched, mut mismatched) = (0.0, 0.0);
        for (i, c) in w.contexts.iter().enumerate() {
            matched += clip_score(space, c, &w.refs(c)[0], DEFAULT_CLIP_W).unwrap().value;
            let other = &w.contexts[(i + 7) % n];
            mismatched += clip_score(space, c, &w.refs(other)[0], DEFAULT_CLIP_W).unwrap().value;
        }
        let gap = (matched - mismatched) / n as f64;
        assert!(gap >= 0.5 * DEFAULT_CLIP_W, "gap {gap}");
    }

    #[test]
    fn spaces_mostly_agree_but_not_always() {
        let w = world();
        let clip = w.space(CLIP_SPACE).unwrap();
        let pac = w.space(PAC_SPACE).unwrap();
        let n = w.contexts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut true_agree, mut trials) = (0usize, 0usize);
        for (i, c) in w.contexts.iter().enumerate() {
            let own = &w.refs(c)[0];
            for off in 1..6 {
                let other = &w.refs(&w.contexts[(i + off) % n])[0];
                let a = clip.similarity(c, own).unwrap() > clip.similarity(c, other).unwrap();
                let b = pac.similarity(c, own).unwrap() > pac.similarity(c, other).unwrap();
                true_agree += usize::from(a && b);
                trials += 1;
            }
        }
        let agreement = true_agree as f64 / trials as f64;
        assert!(agreement >= 0.9, "agreement {agreement}");
        let (mut differ, total) = (0usize, 2000usize);
        for _ in 0..total {
            let c = &w.contexts[rng.gen_range(0..n)];
            let x = &w.refs(&w.contexts[rng.gen_range(0..n)])[0];
            let y = &w.refs(&w.contexts[rng.gen_range(0..n)])[0];
            let a = clip.similarity(c, x).unwrap() > clip.similarity(c, y).unwrap();
            let b = pac.similarity(c, x).unwrap() > pac.similarity(c, y).unwrap();
            differ += usize::from(a != b);
        }
        let frac = differ as f64 / total as f64;
        assert!(frac >= 0.05, "disagreement {frac}");
    }

    #[test]
    fn save_load_round_trip() {
        let w = generate_world(5, 25, 12, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(World::load(dir.path()).unwrap(), w);
        fs::write(dir.path().join("references.tsv"), "ctx00\t3 2 1\n").unwrap();
        assert!(matches!(World::load(dir.path()), Err(DicoError::Data(_))));
    }

    #[test]
    fn repeated_word_maxes_hackable_score() {
        let w = world();
        let h = HackableEvaluator::new(&w).unwrap();
        let c = &w.contexts[0];
        let spam = TokenSequence::from_content(&vec![w.classes.nouns[0]; w.max_len - 1], w.vocabulary.eos());
        assert_eq!(h.score(c, &spam).unwrap().value, 1.0);
        let r = &w.refs(c)[0];
        let s = h.score(c, r).unwrap().value;
        assert!(s > 0.0 && s < 1.0);
    }

    proptest! {
        #[test]
        fn repetition_never_lowers_hackable_score(idx in 0usize..120, pos in 0usize..6, extra in 1usize..4) {
            let w = world();
            let h = HackableEvaluator::new(&w).unwrap();
            let c = &w.contexts[idx];
            let base = w.refs(c)[0].content().to_vec();
            let tok = base[pos % base.len()];
            let mut longer = base.clone();
            for _ in 0..extra {
                if longer.len() + 1 < w.max_len {
                    longer.push(tok);
                }
            }
            let eos = w.vocabulary.eos();
            let a = h.score(c, &TokenSequence::from_content(&base, eos)).unwrap().value;
            let b = h.score(c, &TokenSequence::from_content(&longer, eos)).unwrap().value;
            prop_assert!(b >= a - 1e-12);
        }
    }
}
