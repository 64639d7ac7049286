//! Domain types shared by every module.
//!
//! All types are immutable once built; constructors validate their
//! invariants and return [`DicoError::Input`] when they do not hold.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, DicoError, Result};

pub type TokenId = usize;

/// Ordered token alphabet with three reserved symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos_id: TokenId, eos_id: TokenId, pad_id: TokenId) -> Result<Self> {
        if tokens.len() < 4 {
            return input_err(format!("vocabulary needs at least 4 tokens, got {}", tokens.len()));
        }
        for (name, id) in [("bos", bos_id), ("eos", eos_id), ("pad", pad_id)] {
            if id >= tokens.len() {
                return input_err(format!("{name} id {id} out of range"));
            }
        }
        if bos_id == eos_id || bos_id == pad_id || eos_id == pad_id {
            return input_err("bos, eos and pad ids must be distinct");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return input_err(format!("token {i} is empty or contains whitespace"));
            }
            if index.insert(t.clone(), i).is_some() {
                return input_err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, bos_id, eos_id, pad_id, index })
    }

    /// Builds a vocabulary with specials at ids 0..3 followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string(), "<pad>".to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::new(tokens, 0, 1, 2)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos(&self) -> TokenId {
        self.eos_id
    }

    pub fn pad(&self) -> TokenId {
        self.pad_id
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos_id || id == self.eos_id || id == self.pad_id
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        if self.index.is_empty() {
            return self.tokens.iter().position(|t| t == token);
        }
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of ordinary (non-special) tokens in vocabulary order.
    pub fn word_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len()).filter(move |&i| !self.is_special(i))
    }

    /// Serializes to the vocabulary file form: a 3-line header followed by
    /// one token per line.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("bos={}\neos={}\npad={}\n", self.bos_id, self.eos_id, self.pad_id);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = HashMap::new();
        for expected in ["bos", "eos", "pad"] {
            let line = lines
                .next()
                .ok_or_else(|| DicoError::Data(format!("vocabulary header missing {expected}=")))?;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DicoError::Data(format!("bad vocabulary header line {line:?}")))?;
            if key.trim() != expected {
                return Err(DicoError::Data(format!("expected {expected}= header, got {line:?}")));
            }
            let id: TokenId = value
                .trim()
                .parse()
                .map_err(|_| DicoError::Data(format!("bad id in header line {line:?}")))?;
            header.insert(expected, id);
        }
        let tokens: Vec<String> = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
        Self::new(tokens, header["bos"], header["eos"], header["pad"])
            .map_err(|e| DicoError::Data(e.to_string()))
    }

    /// SHA-256 of the file form; checkpoints carry it to detect mismatches.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }

    pub fn render(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .map(|&i| self.token(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A caption: token ids terminated by eos, optionally followed by pads.
///
/// The leading bos is implicit and never stored; the decoder always
/// conditions on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    length: usize,
}

impl TokenSequence {
    /// Validates `ids` against the vocabulary and the length budget.
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let eos_pos = ids
            .iter()
            .position(|&t| t == vocab.eos())
            .ok_or_else(|| DicoError::Input("sequence has no eos".into()))?;
        let length = eos_pos + 1;
        for (i, &t) in ids.iter().enumerate() {
            if t >= vocab.len() {
                return input_err(format!("token id {t} at position {i} out of vocabulary range"));
            }
            if i < eos_pos && (t == vocab.pad() || t == vocab.bos()) {
                return input_err(format!("special token {t} before eos at position {i}"));
            }
            if i > eos_pos && t != vocab.pad() {
                return input_err(format!("non-pad token {t} after eos at position {i}"));
            }
        }
        if length > max_len {
            return input_err(format!("sequence length {length} exceeds max_len {max_len}"));
        }
        Ok(Self { ids, length })
    }

    /// Appends eos to `content` without vocabulary checks. Callers own the
    /// guarantee that `content` holds no specials.
    pub fn from_content(content: &[TokenId], eos: TokenId) -> Self {
        let mut ids = content.to_vec();
        ids.push(eos);
        Self { length: ids.len(), ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Number of non-pad tokens, eos included.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Tokens up to and including eos.
    pub fn tokens(&self) -> &[TokenId] {
        &self.ids[..self.length]
    }

    /// Tokens before eos: the words n-gram statistics look at.
    pub fn content(&self) -> &[TokenId] {
        &self.ids[..self.length - 1]
    }

    pub fn with_padding(&self, total: usize, pad: TokenId) -> Self {
        let mut ids = self.ids[..self.length].to_vec();
        while ids.len() < total {
            ids.push(pad);
        }
        Self { ids, length: self.length }
    }

    pub fn to_line(&self) -> String {
        self.ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_line(line: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let ids = line
            .split_whitespace()
            .map(|t| t.parse::<TokenId>().map_err(|_| DicoError::Data(format!("bad token id {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, vocab, max_len).map_err(|e| DicoError::Data(e.to_string()))
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// The conditioning input ("image") of a caption: one pooled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub context_id: String,
    features: Vec<f64>,
}

impl Context {
    pub fn new(context_id: impl Into<String>, features: Vec<f64>, dim: usize) -> Result<Self> {
        if features.len() != dim {
            return input_err(format!("context features have dimension {}, expected {dim}", features.len()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return input_err("context features must be finite");
        }
        Ok(Self { context_id: context_id.into(), features })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// A scalar judgement from a named evaluator, with its declared range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorScore {
    pub value: f64,
    pub evaluator_id: String,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl EvaluatorScore {
    pub fn new(value: f64, evaluator_id: impl Into<String>, range_lo: f64, range_hi: f64) -> Result<Self> {
        if !value.is_finite() || value < range_lo || value > range_hi {
            return input_err(format!("score {value} outside [{range_lo}, {range_hi}]"));
        }
        Ok(Self { value, evaluator_id: evaluator_id.into(), range_lo, range_hi })
    }
}

/// One context with its mined winner, k losers and quality weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub context: Context,
    pub winner: TokenSequence,
    pub losers: Vec<TokenSequence>,
    /// Winner first, then losers in order.
    pub scores: Vec<EvaluatorScore>,
    pub gammas: Vec<f64>,
}

impl CandidateGroup {
    pub fn k(&self) -> usize {
        self.losers.len()
    }
}

/// Checks every [`CandidateGroup`] invariant; an empty result means valid.
pub fn validate_group(group: &CandidateGroup) -> Vec<String> {
    let mut violations = Vec::new();
    let k = group.losers.len();
    if k < 1 {
        violations.push("losers: k must be at least 1".to_string());
    }
    if group.scores.len() != k + 1 {
        violations.push(format!("scores: expected {} entries, got {}", k + 1, group.scores.len()));
    } else if let Some((winner, losers)) = group.scores.split_first() {
        if losers.iter().any(|s| s.value > winner.value) {
            violations.push("winner not argmax".to_string());
        }
    }
    if group.gammas.len() != k {
        violations.push(format!("gammas: expected {k} entries, got {}", group.gammas.len()));
    }
    let sum: f64 = group.gammas.iter().sum();
    if !group.gammas.is_empty() && (sum - 1.0).abs() > 1e-9 {
        violations.push(format!("gammas sum {sum} ≠ 1"));
    }
    for (i, g) in group.gammas.iter().enumerate() {
        // Closed interval: at small τ the softmax saturates to exactly 0 or 1
        // in floating point.
        if !(0.0..=1.0).contains(g) {
            violations.push(format!("gammas[{i}] = {g} outside [0, 1]"));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_words(&["a", "b", "c"]).unwrap()
    }

    fn score(v: f64) -> EvaluatorScore {
        EvaluatorScore::new(v, "e", 0.0, 1.0).unwrap()
    }

    fn group(scores: &[f64], gammas: Vec<f64>) -> CandidateGroup {
        let eos = vocab().eos();
        let k = scores.len() - 1;
        CandidateGroup {
            context: Context::new("c0", vec![0.0, 1.0], 2).unwrap(),
            winner: TokenSequence::from_content(&[3], eos),
            losers: (0..k).map(|i| TokenSequence::from_content(&[4 + i % 2], eos)).collect(),
            scores: scores.iter().map(|&v| score(v)).collect(),
            gammas,
        }
    }

    #[test]
    fn well_formed_group_has_no_violations() {
        let g = group(&[0.9, 0.5, 0.4, 0.3, 0.2], vec![0.25; 4]);
        assert!(validate_group(&g).is_empty());
    }

    #[test]
    fn gamma_sum_violation_is_reported() {
        let g = group(&[0.9, 0.5, 0.4], vec![0.5, 0.6]);
        let v = validate_group(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("gammas sum 1.1"), "{v:?}");
    }

    #[test]
    fn loser_above_winner_is_reported() {
        let g = group(&[0.5, 0.9, 0.4], vec![0.5, 0.5]);
        assert_eq!(validate_group(&g), vec!["winner not argmax".to_string()]);
    }

    #[test]
    fn single_loser_with_unit_gamma_is_valid() {
        let g = group(&[0.9, 0.5], vec![1.0]);
        assert!(validate_group(&g).is_empty());
    }

    #[test]
    fn vocabulary_rejects_bad_specials() {
        let toks: Vec<String> = ["x", "y", "z", "w"].iter().map(|s| s.to_string()).collect();
        assert!(Vocabulary::new(toks.clone(), 0, 0, 1).is_err());
        assert!(Vocabulary::new(toks.clone(), 0, 1, 9).is_err());
        assert!(Vocabulary::new(toks[..3].to_vec(), 0, 1, 2).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = vocab();
        let back = Vocabulary::from_file_str(&v.to_file_string()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.hash(), v.hash());
        assert_eq!(back.id("b"), Some(4));
    }

    #[test]
    fn sequence_validation() {
        let v = vocab();
        let s = TokenSequence::new(vec![3, 4, 1, 2, 2], &v, 5).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.content(), &[3, 4]);
        assert!(TokenSequence::new(vec![3, 4], &v, 5).is_err(), "missing eos");
        assert!(TokenSequence::new(vec![3, 2, 1], &v, 5).is_err(), "pad before eos");
        assert!(TokenSequence::new(vec![3, 0, 1], &v, 5).is_err(), "bos inside");
        assert!(TokenSequence::new(vec![3, 1, 4], &v, 5).is_err(), "token after eos");
        assert!(TokenSequence::new(vec![3, 9, 1], &v, 5).is_err(), "out of range");
        assert!(TokenSequence::new(vec![3, 3, 3, 1], &v, 3).is_err(), "too long");
        let line = s.to_line();
        assert_eq!(TokenSequence::parse_line(&line, &v, 5).unwrap(), s);
    }

    #[test]
    fn context_validation() {
        assert!(Context::new("c", vec![1.0, f64::NAN], 2).is_err());
        assert!(Context::new("c", vec![1.0], 2).is_err());
    }
}
