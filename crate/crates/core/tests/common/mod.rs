#![allow(dead_code)]

use dicolab::captioner::{masked_log_softmax, Captioner, ConditionalLm, ModelConfig};
use dicolab::types::TokenId;
use dicolab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

/// Hand-written next-token table: `logits(prefix)` gives raw scores over the
/// whole vocabulary. bos and pad are masked, and eos is forced at the last step.
pub struct TableLm {
    pub vocab_size: usize,
    pub max_len: usize,
    pub logits: Box<dyn Fn(&[TokenId]) -> Vec<f64>>,
}

impl TableLm {
    pub fn allowed(&self, step: usize, tok: TokenId) -> bool {
        if step + 1 >= self.max_len {
            tok == EOS
        } else {
            tok != BOS && tok != PAD
        }
    }
}

impl ConditionalLm for TableLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos(&self) -> TokenId {
        EOS
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_log_probs(&self, _features: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        let step = prefix.len();
        masked_log_softmax(&(self.logits)(prefix), |t| self.allowed(step, t))
    }
}

/// Gaussian logits seeded by the prefix, so ties have probability zero.
pub fn random_table_lm(seed: u64, n_words: usize, max_len: usize) -> TableLm {
    let vocab_size = n_words + 3;
    TableLm {
        vocab_size,
        max_len,
        logits: Box::new(move |prefix| {
            let mut h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for &t in prefix {
                h = (h ^ t as u64).wrapping_mul(0x0100_0000_01B3).rotate_left(17);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let normal = Normal::new(0.0, 2.0).unwrap();
            (0..vocab_size).map(|_| normal.sample(&mut rng)).collect()
        }),
    }
}

/// Small transformer (well under 10k parameters) with weights scaled up so
/// gradients are not vanishingly small.
pub fn toy_captioner(seed: u64) -> (Captioner, Vocabulary) {
    let vocab = Vocabulary::with_words(&["a", "b", "c"]).unwrap();
    let cfg = ModelConfig::new(&vocab, 3, 5).with_width(8, 2, 8);
    let mut m = Captioner::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let normal = Normal::new(0.0, 0.4).unwrap();
    for p in m.params_mut() {
        *p += normal.sample(&mut rng);
    }
    (m, vocab)
}

/// Largest relative gap between `analytic` and central differences of `loss`.
pub fn max_fd_rel_error(model: &Captioner, analytic: &[f64], loss: impl Fn(&Captioner) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in 0..model.n_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}
