//! The two-encoder transference transformer.
//!
//! Data flow, per sentence pair:
//!
//! ```text
//! f_w (words)    ─ embed/word ─ enc_word ──────────────┐ keys/values
//! f_s (subwords) ─ embed/bpe ── enc_bpe ── enc_cross ──┴─> enc12 ── dec ── out ─> logits
//! target prefix  ─ embed/bpe ────────────────────────────────────────┘
//! ```
//!
//! All stacks are post-norm: each sublayer computes `LN(x + dropout(f(x)))`.
//!
//! # Parameter names
//!
//! | name | shape |
//! |------|-------|
//! | `embed/word` | `[word_vocab, d_model]` |
//! | `embed/bpe` | `[bpe_vocab, d_model]`, shared by `enc_bpe` and `dec` |
//! | `<stack>/layer_<i>/<attn>/w_q`, `w_k`, `w_v`, `w_o` | `[d_model, d_model]` |
//! | `<stack>/layer_<i>/ffn/w_1`, `b_1`, `w_2`, `b_2` | `[d_model, d_ff]`, `[d_ff]`, `[d_ff, d_model]`, `[d_model]` |
//! | `<stack>/layer_<i>/<sublayer>_norm/gain`, `bias` | `[d_model]` |
//! | `out/weight`, `out/bias` | `[d_model, bpe_vocab]`, `[bpe_vocab]` |
//!
//! Stacks are `enc_word`, `enc_bpe` (sublayers `self_attn`, `ffn`) and
//! `enc_cross`, `dec` (sublayers `self_attn`, `cross_attn`, `ffn`). Head `i`
//! of an attention block owns columns `i*d_k..(i+1)*d_k` of `w_q`/`w_k`/`w_v`
//! and rows `i*d_v..(i+1)*d_v` of `w_o`.

mod attention;
mod checkpoint;
mod incremental;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Scalar, Tensor};
use crate::vocab::PAD_ID;

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionMask, AttentionParams};
pub use checkpoint::Checkpoint;
pub use incremental::{DecoderState, IncrementalDecoder};
pub use layers::{cross_encoder_stack, decode_forward, encode, EncodedSource, Runtime};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Word-encoder layers.
    pub n_layers_fw: usize,
    /// Subword-encoder layers.
    pub n_layers_fs: usize,
    /// Cross-encoder layers.
    pub n_layers_es: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub bpe_vocab_size: usize,
    pub word_vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers_fw: 6,
            n_layers_fs: 6,
            n_layers_es: 6,
            n_layers_dec: 6,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            dropout: 0.1,
            bpe_vocab_size: 28_000,
            word_vocab_size: 50_001,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    /// A tiny model: one layer per stack.
    pub fn miniature(d_model: usize, heads: usize, bpe_vocab: usize, word_vocab: usize) -> Self {
        Self {
            n_layers_fw: 1,
            n_layers_fs: 1,
            n_layers_es: 1,
            n_layers_dec: 1,
            d_model,
            d_ff: 2 * d_model,
            heads,
            dropout: 0.0,
            bpe_vocab_size: bpe_vocab,
            word_vocab_size: word_vocab,
            max_positions: 64,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_v(&self) -> usize {
        self.d_k()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers_fw", self.n_layers_fw),
            ("n_layers_fs", self.n_layers_fs),
            ("n_layers_es", self.n_layers_es),
            ("n_layers_dec", self.n_layers_dec),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        // Specials occupy ids 0..4 in both vocabularies.
        if self.bpe_vocab_size <= 4 || self.word_vocab_size <= 4 {
            return Err(Error::Config(
                "vocabularies must hold more than the 4 special tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embed/word".to_string(), vec![self.word_vocab_size, d]),
            ("embed/bpe".to_string(), vec![self.bpe_vocab_size, d]),
        ];
        let stacks: [(&str, usize, &[&str]); 4] = [
            ("enc_word", self.n_layers_fw, &["self_attn"]),
            ("enc_bpe", self.n_layers_fs, &["self_attn"]),
            ("enc_cross", self.n_layers_es, &["self_attn", "cross_attn"]),
            ("dec", self.n_layers_dec, &["self_attn", "cross_attn"]),
        ];
        for (stack, layers, attns) in stacks {
            for i in 0..layers {
                let prefix = format!("{stack}/layer_{i}");
                for attn in attns {
                    for w in ["w_q", "w_k", "w_v", "w_o"] {
                        out.push((format!("{prefix}/{attn}/{w}"), vec![d, d]));
                    }
                    out.push((format!("{prefix}/{attn}_norm/gain"), vec![d]));
                    out.push((format!("{prefix}/{attn}_norm/bias"), vec![d]));
                }
                out.push((format!("{prefix}/ffn/w_1"), vec![d, f]));
                out.push((format!("{prefix}/ffn/b_1"), vec![f]));
                out.push((format!("{prefix}/ffn/w_2"), vec![f, d]));
                out.push((format!("{prefix}/ffn/b_2"), vec![d]));
                out.push((format!("{prefix}/ffn_norm/gain"), vec![d]));
                out.push((format!("{prefix}/ffn_norm/bias"), vec![d]));
            }
        }
        out.push(("out/weight".to_string(), vec![d, self.bpe_vocab_size]));
        out.push(("out/bias".to_string(), vec![self.bpe_vocab_size]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Xavier-uniform matrices, N(0, d_model^-1/2) embeddings, zero biases,
/// unit layer-norm gains. Deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<NamedTensors<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = Normal::new(0.0f64, (config.d_model as f64).powf(-0.5)).expect("positive std");
    let mut params = NamedTensors::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.starts_with("embed/") {
            (0..n).map(|_| embed.sample(&mut rng) as f32).collect()
        } else if name.ends_with("/gain") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let u = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            (0..n).map(|_| u.sample(&mut rng) as f32).collect()
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `config` calls for.
pub fn check_params<T: Scalar>(config: &ModelConfig, params: &NamedTensors<T>) -> Result<()> {
    let expected = config.parameter_shapes();
    if expected.len() != params.len() {
        return Err(Error::Model(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape) in expected {
        let t = params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Model(format!(
                "parameter `{name}` has shape {:?}, config wants {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Sinusoidal encoding: PE(pos, 2i) = sin(pos / 10000^(2i/d)),
/// PE(pos, 2i+1) = cos(pos / 10000^(2i/d)).
pub fn positional_encoding<T: Scalar>(
    length: usize,
    d_model: usize,
    max_positions: usize,
) -> Result<Tensor<T>> {
    if length > max_positions {
        return Err(Error::Contract(format!(
            "sequence of {length} positions exceeds max_positions {max_positions}"
        )));
    }
    positional_rows(0, length, d_model)
}

/// PE rows `start..start + length` without the length contract.
pub(crate) fn positional_rows<T: Scalar>(
    start: usize,
    length: usize,
    d_model: usize,
) -> Result<Tensor<T>> {
    Tensor::from_fn([length.max(1), d_model], |i| {
        let (pos, dim) = ((start + i / d_model) as f64, i % d_model);
        let angle = pos / 10000f64.powf((dim - dim % 2) as f64 / d_model as f64);
        T::of(if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        })
    })
}

/// Padded id matrix for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedIds {
    pub batch: usize,
    pub len: usize,
    /// Row-major `[batch, len]`, padded with PAD.
    pub ids: Vec<usize>,
    /// `true` at real tokens, `false` at padding.
    pub valid: Vec<bool>,
}

impl PaddedIds {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return Err(Error::Contract("batch rows must be non-empty".into()));
        }
        let len = rows.iter().map(Vec::len).max().expect("non-empty");
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut valid = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend(r);
            ids.extend(std::iter::repeat_n(PAD_ID, len - r.len()));
            valid.extend(std::iter::repeat_n(true, r.len()));
            valid.extend(std::iter::repeat_n(false, len - r.len()));
        }
        Ok(Self {
            batch: rows.len(),
            len,
            ids,
            valid,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    fn check_vocab(&self, vocab: usize, what: &str) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= vocab) {
            Some(bad) => Err(Error::Contract(format!(
                "{what} id {bad} outside vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }
}

/// Word ids `f_w` and subword ids `f_s` for a batch of source sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub words: PaddedIds,
    pub subwords: PaddedIds,
}

impl SourceBatch {
    pub fn new(words: &[Vec<usize>], subwords: &[Vec<usize>]) -> Result<Self> {
        if words.len() != subwords.len() {
            return Err(Error::Contract(format!(
                "{} word rows but {} subword rows",
                words.len(),
                subwords.len()
            )));
        }
        Ok(Self {
            words: PaddedIds::new(words)?,
            subwords: PaddedIds::new(subwords)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.words.batch
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        self.words.check_vocab(config.word_vocab_size, "word")?;
        self.subwords
            .check_vocab(config.bpe_vocab_size, "subword")?;
        for (len, what) in [(self.words.len, "word"), (self.subwords.len, "subword")] {
            if len > config.max_positions {
                return Err(Error::Contract(format!(
                    "{what} sequence of {len} exceeds max_positions {}",
                    config.max_positions
                )));
            }
        }
        Ok(())
    }

    /// The single-sentence batch at row `b`, with padding removed.
    pub fn sentence(&self, b: usize) -> Result<Self> {
        let strip = |p: &PaddedIds| -> Vec<usize> {
            p.row(b)
                .iter()
                .zip(&p.valid[b * p.len..(b + 1) * p.len])
                .filter(|(_, &v)| v)
                .map(|(&i, _)| i)
                .collect()
        };
        Self::new(&[strip(&self.words)], &[strip(&self.subwords)])
    }
}
