//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! bytes  0..8    magic "DICOLAB1"
//! u32            format version (1)
//! [u8; 32]       SHA-256 of the vocabulary file
//! u64 × 10       vocab_size feature_dim d_model n_heads n_layers ff_dim
//!                max_len bos eos pad
//! u64            parameter count P
//! f64 × P        parameters
//! u8             1 if optimizer state follows, else 0
//! f64 × 4        lr beta1 beta2 eps          (optimizer only)
//! u64            step                        (optimizer only)
//! f64 × P        first moments               (optimizer only)
//! f64 × P        second moments              (optimizer only)
//! ```

use std::fs;
use std::path::Path;

use super::{Adam, Captioner, ModelConfig};
use crate::error::{DicoError, Result};
use crate::types::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DICOLAB1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vocab_hash: [u8; 32],
    pub model: Captioner,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(vocab: &Vocabulary, model: Captioner, optimizer: Option<Adam>) -> Self {
        Self { vocab_hash: vocab.hash(), model, optimizer }
    }

    /// Fails with a config error when the checkpoint was trained on another
    /// vocabulary.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_hash != vocab.hash() {
            return Err(DicoError::Config("checkpoint vocabulary hash does not match".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.model.config();
        let n = self.model.n_params();
        let mut out = Vec::with_capacity(8 + 4 + 32 + 88 + 8 * n * 3 + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash);
        for v in [c.vocab_size, c.feature_dim, c.d_model, c.n_heads, c.n_layers, c.ff_dim, c.max_len, c.bos, c.eos, c.pad] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        put_f64s(&mut out, self.model.params());
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_f64s(&mut out, &[opt.lr, opt.beta1, opt.beta2, opt.eps]);
                out.extend_from_slice(&opt.step.to_le_bytes());
                put_f64s(&mut out, &opt.m);
                put_f64s(&mut out, &opt.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(DicoError::Data("not a DICOLAB1 checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(DicoError::Data(format!("unsupported checkpoint version {version}")));
        }
        let vocab_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut dims = [0usize; 10];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            feature_dim: dims[1],
            d_model: dims[2],
            n_heads: dims[3],
            n_layers: dims[4],
            ff_dim: dims[5],
            max_len: dims[6],
            bos: dims[7],
            eos: dims[8],
            pad: dims[9],
        };
        let n = r.u64()? as usize;
        let params = r.f64s(n)?;
        let model = Captioner::from_params(config, params).map_err(|e| DicoError::Data(e.to_string()))?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let h = r.f64s(4)?;
                let step = r.u64()?;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(Adam { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step, m, v })
            }
            flag => return Err(DicoError::Data(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(DicoError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self { vocab_hash, model, optimizer })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DicoError::Data("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DicoError::Data("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
