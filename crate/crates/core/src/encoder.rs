//! The frozen text encoder, temperature handling and the zero-shot head.
//!
//! The reference encoder maps a prompt (a `[L, d]` token matrix) to a `d`
//! embedding: a token-wise affine map, `tanh`, mean pooling over the `L`
//! tokens and a final affine map. Its weights are drawn once from a seeded
//! Gaussian scaled by `1/√d` and never change. Image features are not
//! computed here; they arrive precomputed through the feature store.

use serde::{Deserialize, Serialize};

use crate::embedstore::Scorer;
use crate::error::{MpaError, Result};
use crate::seed;
use crate::tape::{l2, softmax, Tape, Var};
use crate::tensor::{gemm_nt, Tensor};

/// Identity of a reference encoder. Equal descriptors give bitwise-equal weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub seed: u64,
    /// Token and embedding width (`d_c`).
    pub dim: usize,
}

impl EncoderDescriptor {
    pub fn new(seed: u64, dim: usize) -> Self {
        EncoderDescriptor { seed, dim }
    }

    /// Layer widths `[token, hidden, embedding]`.
    pub fn layer_sizes(&self) -> [usize; 3] {
        [self.dim; 3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    descriptor: EncoderDescriptor,
    token_weight: Tensor,
    token_bias: Tensor,
    out_weight: Tensor,
    out_bias: Tensor,
}

impl FrozenTextEncoder {
    pub fn new(descriptor: EncoderDescriptor) -> Result<Self> {
        let d = descriptor.dim;
        if d == 0 {
            return Err(MpaError::Config("encoder dimension must be positive".into()));
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = seed::rng(seed::derive(descriptor.seed, "text-encoder", 0));
        Ok(FrozenTextEncoder {
            descriptor,
            token_weight: Tensor::randn(&[d, d], std, &mut rng),
            token_bias: Tensor::randn(&[d], std, &mut rng),
            out_weight: Tensor::randn(&[d, d], std, &mut rng),
            out_bias: Tensor::randn(&[d], std, &mut rng),
        })
    }

    pub fn descriptor(&self) -> EncoderDescriptor {
        self.descriptor
    }

    pub fn dim(&self) -> usize {
        self.descriptor.dim
    }

    /// Weight tensors in a fixed order, for frozen-contract checks.
    pub fn weights(&self) -> [&Tensor; 4] {
        [
            &self.token_weight,
            &self.token_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    /// Places the weights on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            dim: self.dim(),
            token_weight: tape.constant(self.token_weight.clone()),
            token_bias: tape.constant(self.token_bias.clone()),
            out_weight: tape.constant(self.out_weight.clone()),
            out_bias: tape.constant(self.out_bias.clone()),
        }
    }

    /// Embeds a stack of prompts without recording gradients.
    pub fn encode_detached(&self, tokens: &Tensor, prompt_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape);
        let t = tape.constant(tokens.clone());
        let out = enc.encode_batch(&mut tape, t, prompt_len)?;
        Ok(tape.value(out).clone())
    }
}

/// Encoder weights living on a particular tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    dim: usize,
    pub token_weight: Var,
    pub token_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl BoundEncoder {
    /// Encodes `G` stacked prompts, `[G·prompt_len, d] → [G, d]`.
    pub fn encode_batch(&self, tape: &mut Tape, tokens: Var, prompt_len: usize) -> Result<Var> {
        match tape.shape(tokens) {
            [rows, d] if *d == self.dim && prompt_len > 0 && rows % prompt_len == 0 => {}
            s => {
                let s = s.to_vec();
                return Err(MpaError::dim("encode_text", &s, &[prompt_len, self.dim]));
            }
        }
        let h = tape.linear(tokens, self.token_weight, Some(self.token_bias))?;
        let h = tape.tanh(h);
        let pooled = tape.group_mean_rows(h, prompt_len)?;
        tape.linear(pooled, self.out_weight, Some(self.out_bias))
    }

    /// Encodes one prompt of exactly `prompt_len` tokens, `[prompt_len, d] → [d]`.
    pub fn encode_text(&self, tape: &mut Tape, tokens: Var, prompt_len: usize) -> Result<Var> {
        if tape.shape(tokens).first() != Some(&prompt_len) {
            let s = tape.shape(tokens).to_vec();
            return Err(MpaError::dim("encode_text", &s, &[prompt_len, self.dim]));
        }
        let e = self.encode_batch(tape, tokens, prompt_len)?;
        tape.reshape(e, &[self.dim])
    }
}

/// Softmax temperature dividing cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub value: f64,
    #[serde(default)]
    pub trainable: bool,
}

impl Temperature {
    /// Smallest value a trained temperature is clamped to.
    pub const FLOOR: f64 = 1e-4;

    pub fn fixed(value: f64) -> Result<Self> {
        Self::new(value, false)
    }

    pub fn new(value: f64, trainable: bool) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(MpaError::Config(format!("temperature must be positive, got {value}")));
        }
        Ok(Temperature { value, trainable })
    }

    /// Puts the temperature on the tape: a parameter when trainable, a
    /// fixed factor otherwise.
    pub fn bind(&self, tape: &mut Tape) -> BoundTemperature {
        if self.trainable {
            BoundTemperature::Node(tape.param(Tensor::scalar(self.value)))
        } else {
            BoundTemperature::Fixed(self.value)
        }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature {
            value: 0.01,
            trainable: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundTemperature {
    Fixed(f64),
    Node(Var),
}

impl BoundTemperature {
    /// `sim / T`.
    pub fn apply(&self, tape: &mut Tape, sim: Var) -> Result<Var> {
        match *self {
            BoundTemperature::Fixed(t) => Ok(tape.scale(sim, 1.0 / t)),
            BoundTemperature::Node(t) => {
                let inv = tape.reciprocal(t)?;
                tape.scale_by(sim, inv)
            }
        }
    }

    pub fn var(&self) -> Option<Var> {
        match self {
            BoundTemperature::Node(v) => Some(*v),
            BoundTemperature::Fixed(_) => None,
        }
    }
}

/// Cosine-similarity logits `cos(x_n, e_k) / T` as a plain tensor.
pub fn cosine_logits(features: &Tensor, embeds: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(MpaError::dim("cosine_logits", s, &[0, 0])),
    };
    let k = match embeds.shape() {
        [k, d2] if *d2 == d => *k,
        s => return Err(MpaError::dim("cosine_logits", &[n, d], s)),
    };
    let fx = normalized_rows(features, "feature")?;
    let ex = normalized_rows(embeds, "class embedding")?;
    let mut logits = gemm_nt(&fx, &ex, n, d, k);
    let inv = 1.0 / temperature;
    logits.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![n, k], logits)
}

fn normalized_rows(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    let d = t.row_len();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.rows() {
        let row = t.row(i);
        let norm = l2(row);
        if norm == 0.0 || !norm.is_finite() {
            return Err(MpaError::Degenerate(format!("{what} row {i} has zero norm")));
        }
        out.extend(row.iter().map(|v| v / norm));
    }
    debug_assert_eq!(out.len(), t.rows() * d);
    Ok(out)
}

/// Row-wise softmax of a `[n, K]` logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let data = logits
        .data()
        .chunks(k.max(1))
        .flat_map(softmax)
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
}

/// Zero-shot class probabilities: softmax over classes of `cos(x, w_k) / T`.
pub fn zero_shot_probs(
    features: &Tensor,
    class_embeds: &Tensor,
    temperature: Temperature,
) -> Result<Tensor> {
    let logits = cosine_logits(features, class_embeds, temperature.value)?;
    Ok(softmax_rows(&logits))
}

/// Frozen zero-shot classifier used for pseudo-labeling and confidence sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotScorer {
    pub class_embeds: Tensor,
    pub temperature: Temperature,
}

impl Scorer for ZeroShotScorer {
    fn probs(&self, features: &Tensor) -> Result<Tensor> {
        zero_shot_probs(features, &self.class_embeds, self.temperature)
    }
}

/// Class embeddings obtained by running the reference encoder on per-class
/// seeded token constants. Used when no exported text embeddings are given.
pub fn reference_class_embeddings(
    encoder: &FrozenTextEncoder,
    classes: usize,
    prompt_len: usize,
    seed: u64,
) -> Result<Tensor> {
    let d = encoder.dim();
    let mut data = Vec::with_capacity(classes * prompt_len * d);
    for k in 0..classes {
        let mut rng = seed::rng(seed::derive(seed, "class-tokens", k as u64));
        data.extend(Tensor::randn(&[prompt_len, d], 1.0, &mut rng).into_data());
    }
    let tokens = Tensor::new(vec![classes * prompt_len, d], data)?;
    encoder.encode_detached(&tokens, prompt_len)
}
