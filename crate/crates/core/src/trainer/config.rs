use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DicoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Xe,
    Dico,
    DicoUniformGamma,
    Scst,
    Dpo,
    RlhfLite,
}

impl Regime {
    pub const ALL: [Regime; 6] =
        [Regime::Xe, Regime::Dico, Regime::DicoUniformGamma, Regime::Scst, Regime::Dpo, Regime::RlhfLite];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Xe => "xe",
            Regime::Dico => "dico",
            Regime::DicoUniformGamma => "dico_uniform_gamma",
            Regime::Scst => "scst",
            Regime::Dpo => "dpo",
            Regime::RlhfLite => "rlhf_lite",
        }
    }

    /// Regimes that build winner/loser groups from decoded candidates.
    pub fn mines_groups(self) -> bool {
        matches!(self, Regime::Dico | Regime::DicoUniformGamma | Regime::Dpo)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = DicoError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| DicoError::Config(format!("unknown regime {s:?}")))
    }
}

pub const DEFAULT_TAU: f64 = 1.0 / 300.0;
/// Temperature used when CIDEr-D is the reward.
pub const CIDER_TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub beta: f64,
    pub tau: f64,
    pub beam_size: usize,
    /// Losers per group; `beam_size - 1`.
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub reward_evaluator: String,
    pub early_stop_metric: String,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps; 0 means no step limit.
    pub max_steps: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
    pub seed: u64,
    /// Decode candidates once from the starting policy and reuse them.
    pub off_policy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Dico,
            beta: 0.2,
            tau: DEFAULT_TAU,
            beam_size: 5,
            k: 4,
            lr: 1e-6,
            batch_size: 16,
            reward_evaluator: "clipS".into(),
            early_stop_metric: "ref-clipS".into(),
            max_epochs: 10,
            max_steps: 0,
            val_every: 1,
            seed: 0,
            off_policy: false,
        }
    }
}

const KEYS: [&str; 14] = [
    "regime",
    "beta",
    "tau",
    "beam_size",
    "k",
    "lr",
    "batch_size",
    "reward_evaluator",
    "early_stop_metric",
    "max_epochs",
    "max_steps",
    "val_every",
    "seed",
    "off_policy",
];

impl TrainConfig {
    /// Defaults for a regime: DPO mines pairs (beam 2), everything else
    /// uses the standard beam of 5.
    pub fn for_regime(regime: Regime) -> Self {
        let mut c = Self { regime, ..Self::default() };
        if regime == Regime::Dpo {
            c.beam_size = 2;
            c.k = 1;
        }
        c
    }

    /// Larger step size for small models and short runs.
    pub fn toy(regime: Regime) -> Self {
        Self { lr: 1e-4, batch_size: 8, ..Self::for_regime(regime) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DicoError::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.val_every == 0 {
            return fail("batch_size, max_epochs and val_every must be positive".into());
        }
        if self.regime != Regime::Xe && self.beam_size < 2 {
            return fail(format!("beam_size must be at least 2, got {}", self.beam_size));
        }
        if self.regime.mines_groups() && self.k + 1 != self.beam_size {
            return fail(format!("k must equal beam_size - 1 ({} vs {})", self.k, self.beam_size));
        }
        if self.regime == Regime::Dpo && self.beam_size != 2 {
            return fail("dpo mines a single pair: beam_size must be 2".into());
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "regime" => self.regime.to_string(),
            "beta" => self.beta.to_string(),
            "tau" => self.tau.to_string(),
            "beam_size" => self.beam_size.to_string(),
            "k" => self.k.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "reward_evaluator" => self.reward_evaluator.clone(),
            "early_stop_metric" => self.early_stop_metric.clone(),
            "max_epochs" => self.max_epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "val_every" => self.val_every.to_string(),
            "seed" => self.seed.to_string(),
            "off_policy" => self.off_policy.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Parses a config file. Unset keys take the regime defaults; an unset
    /// `tau` with CIDEr-D as reward becomes 1, and an unset `k` follows
    /// `beam_size`.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DicoError::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !KEYS.contains(&k.as_str()) {
                return Err(DicoError::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(DicoError::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            pairs.push((k, v));
        }
        let lookup = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let regime = lookup("regime").map(Regime::from_str).transpose()?.unwrap_or(Regime::Dico);
        let mut c = Self::for_regime(regime);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        if lookup("tau").is_none() && c.reward_evaluator == "cider-d" {
            c.tau = CIDER_TAU;
        }
        if lookup("k").is_none() {
            c.k = c.beam_size.saturating_sub(1);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| DicoError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "regime" => self.regime = value.parse()?,
            "beta" => self.beta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "beam_size" => self.beam_size = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "reward_evaluator" => self.reward_evaluator = value.to_string(),
            "early_stop_metric" => self.early_stop_metric = value.to_string(),
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "off_policy" => self.off_policy = num(key, value)?,
            _ => return Err(DicoError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}
