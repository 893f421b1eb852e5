//! Frozen stand-in encoders for the text and image towers.
//!
//! Both towers are small affine/tanh/affine networks whose weights are a pure
//! function of the seed and the dimensions. Outputs are L2-normalized so that
//! cosine similarity downstream is an inner product. The text tower is built
//! on the tape so gradients reach the prompt tokens; its weights are always
//! tape constants.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::counter_symmetric;

const TEXT_W1: u64 = 1;
const TEXT_B1: u64 = 2;
const TEXT_W2: u64 = 3;
const TEXT_B2: u64 = 4;
const IMAGE_W1: u64 = 11;
const IMAGE_B1: u64 = 12;
const IMAGE_W2: u64 = 13;
const IMAGE_B2: u64 = 14;
const CLASS_VOCAB: u64 = 100;

const HIDDEN_BIAS: f64 = 0.5;
const OUTPUT_BIAS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub seed: u64,
    pub d_tok: usize,
    pub d: usize,
    pub d_img: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            d_tok: 16,
            d: 64,
            d_img: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_tok == 0 || self.d == 0 || self.d_img == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn seeded_matrix(seed: u64, layer: u64, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| counter_symmetric(seed, layer, i as u64, bound))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn seeded_vector(seed: u64, layer: u64, len: usize, bound: f64) -> Tensor {
    let data = (0..len).map(|i| counter_symmetric(seed, layer, i as u64, bound)).collect();
    Tensor::from_parts(vec![len], data)
}

fn tile_rows(bias: &Tensor, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        data.extend_from_slice(bias.data());
    }
    Tensor::from_parts(vec![rows, bias.len()], data)
}

/// `normalize(tanh(x W1 + b1) [pooled] W2 + b2)` with optional pooling.
fn two_layer<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    layers: [&Tensor; 4],
    pool: Option<usize>,
) -> Result<Var<'t>> {
    let [w1, b1, w2, b2] = layers;
    let rows = x.value_ref().rows();
    let h = x
        .matmul(tape.constant(w1.clone()))?
        .add(tape.constant(tile_rows(b1, rows)))?
        .tanh()?;
    let h = match pool {
        Some(group) => h.mean_pool_rows(group)?,
        None => h,
    };
    let out_rows = h.value_ref().rows();
    h.matmul(tape.constant(w2.clone()))?
        .add(tape.constant(tile_rows(b2, out_rows)))?
        .l2_normalize()
}

/// Frozen text tower: per-token affine + tanh, mean-pool over the token
/// axis, affine, L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    seed: u64,
    token_dim: usize,
    embed_dim: usize,
    context_len: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FrozenTextEncoder {
    /// `context_len` is M, the number of learnable context tokens preceding
    /// the class token in each prompt.
    pub fn new(seed: u64, token_dim: usize, embed_dim: usize, context_len: usize) -> Result<Self> {
        if token_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        let hidden = embed_dim;
        Ok(Self {
            seed,
            token_dim,
            embed_dim,
            context_len,
            w1: seeded_matrix(seed, TEXT_W1, token_dim, hidden, (3.0 / token_dim as f64).sqrt()),
            b1: seeded_vector(seed, TEXT_B1, hidden, HIDDEN_BIAS),
            w2: seeded_matrix(seed, TEXT_W2, hidden, embed_dim, (3.0 / hidden as f64).sqrt()),
            b2: seeded_vector(seed, TEXT_B2, embed_dim, OUTPUT_BIAS),
        })
    }

    pub fn from_config(cfg: &EncoderConfig, context_len: usize) -> Result<Self> {
        Self::new(cfg.seed, cfg.d_tok, cfg.d, context_len)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// Tokens per prompt: M context tokens plus the class token.
    pub fn tokens_per_prompt(&self) -> usize {
        self.context_len + 1
    }

    /// Frozen token embedding of a class name, keyed by its global class id.
    pub fn class_token(&self, class_id: usize) -> Tensor {
        let bound = 3f64.sqrt();
        let base = (class_id * self.token_dim) as u64;
        let data = (0..self.token_dim)
            .map(|k| counter_symmetric(self.seed, CLASS_VOCAB, base + k as u64, bound))
            .collect();
        Tensor::from_parts(vec![self.token_dim], data)
    }

    /// Encodes `P` prompts stacked as `[P * (M + 1) x d_tok]` into `[P x d]`.
    pub fn encode<'t>(&self, tape: &'t Tape, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        let per = self.tokens_per_prompt();
        if shape.len() != 2 || shape[1] != self.token_dim || shape[0] == 0 || shape[0] % per != 0 {
            return Err(Error::Dimension(format!(
                "text encoder expects [P*{per} x {}] tokens, got {shape:?}",
                self.token_dim
            )));
        }
        two_layer(tape, tokens, [&self.w1, &self.b1, &self.w2, &self.b2], Some(per))
    }

    /// Encodes a single prompt `[(M + 1) x d_tok]` into a `[d]` feature.
    pub fn text_encode<'t>(&self, tape: &'t Tape, tokens: Var<'t>) -> Result<Var<'t>> {
        let rows = tokens.shape()[0];
        if rows != self.tokens_per_prompt() {
            return Err(Error::Dimension(format!(
                "prompt must have {} tokens ({} context + class), got {rows}",
                self.tokens_per_prompt(),
                self.context_len
            )));
        }
        self.encode(tape, tokens)?.reshape(vec![self.embed_dim])
    }

    /// Off-tape convenience: encodes stacked prompts and returns `[P x d]`.
    pub fn encode_values(&self, tokens: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let t = tape.constant(tokens.clone());
        Ok(self.encode(&tape, t)?.value())
    }

    pub fn named_weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("W1", &self.w1), ("B1", &self.b1), ("W2", &self.w2), ("B2", &self.b2)]
    }

    /// Rebuilds an encoder from dumped weights.
    pub fn from_weights(seed: u64, context_len: usize, weights: [Tensor; 4]) -> Result<Self> {
        let [w1, b1, w2, b2] = weights;
        if w1.shape().len() != 2 || w2.shape().len() != 2 || b1.len() != w1.cols() || b2.len() != w2.cols() {
            return Err(Error::Dimension("inconsistent text encoder weights".into()));
        }
        Ok(Self {
            seed,
            token_dim: w1.shape()[0],
            embed_dim: w2.cols(),
            context_len,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Frozen image tower: affine + tanh + affine, L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenImageEncoder {
    seed: u64,
    input_dim: usize,
    embed_dim: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FrozenImageEncoder {
    pub fn new(seed: u64, input_dim: usize, embed_dim: usize) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("image encoder dimensions must be positive".into()));
        }
        let hidden = embed_dim;
        Ok(Self {
            seed,
            input_dim,
            embed_dim,
            w1: seeded_matrix(seed, IMAGE_W1, input_dim, hidden, (3.0 / input_dim as f64).sqrt()),
            b1: seeded_vector(seed, IMAGE_B1, hidden, HIDDEN_BIAS),
            w2: seeded_matrix(seed, IMAGE_W2, hidden, embed_dim, (3.0 / hidden as f64).sqrt()),
            b2: seeded_vector(seed, IMAGE_B2, embed_dim, OUTPUT_BIAS),
        })
    }

    pub fn from_config(cfg: &EncoderConfig) -> Result<Self> {
        Self::new(cfg.seed, cfg.d_img, cfg.d)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// On-tape encoding of `[n x d_img]` samples; used to fit raw samples to
    /// target embeddings.
    pub fn encode_var<'t>(&self, tape: &'t Tape, samples: Var<'t>) -> Result<Var<'t>> {
        let shape = samples.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Dimension(format!(
                "image encoder expects [n x {}] samples, got {shape:?}",
                self.input_dim
            )));
        }
        two_layer(tape, samples, [&self.w1, &self.b1, &self.w2, &self.b2], None)
    }

    /// Detached encoding of `[n x d_img]` samples into `[n x d]`.
    pub fn encode_batch(&self, samples: &Tensor) -> Result<Tensor> {
        if samples.rows() == 0 {
            return Ok(Tensor::zeros(vec![0, self.embed_dim]));
        }
        let tape = Tape::new();
        let x = tape.constant(samples.clone());
        Ok(self.encode_var(&tape, x)?.value())
    }

    /// Detached encoding of one sample `[d_img]` into `[d]`.
    pub fn image_encode(&self, sample: &Tensor) -> Result<Tensor> {
        if sample.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "image sample has {} values, expected {}",
                sample.len(),
                self.input_dim
            )));
        }
        self.encode_batch(&sample.reshaped(vec![1, self.input_dim])?)?
            .reshaped(vec![self.embed_dim])
    }

    pub fn named_weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("W1", &self.w1), ("B1", &self.b1), ("W2", &self.w2), ("B2", &self.b2)]
    }

    pub fn from_weights(seed: u64, weights: [Tensor; 4]) -> Result<Self> {
        let [w1, b1, w2, b2] = weights;
        if w1.shape().len() != 2 || w2.shape().len() != 2 || b1.len() != w1.cols() || b2.len() != w2.cols() {
            return Err(Error::Dimension("inconsistent image encoder weights".into()));
        }
        Ok(Self {
            seed,
            input_dim: w1.shape()[0],
            embed_dim: w2.cols(),
            w1,
            b1,
            w2,
            b2,
        })
    }
}
