//! Soft prompts for one source-target pair.
//!
//! A pair holds `K` class-specific context blocks of `M1` tokens, shared by
//! the source and target halves, plus `M2` domain tokens per domain. The class
//! prompt for class `k` in domain `d` is `context[k] ++ tokens_d`, so the full
//! pair prompt has `2K` class prompts of `M1 + M2` tokens each. Probability
//! vectors over the `2K` prompts are laid out source classes first.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_u32, put_u64, to_u32, OffsetReader};
use crate::encoder::{BoundEncoder, BoundTemperature};
use crate::error::{MpaError, Result};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Prompt geometry shared by every component of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    /// `K`
    pub classes: usize,
    /// `M1`, class-specific context tokens.
    pub context_len: usize,
    /// `M2`, domain tokens.
    pub domain_len: usize,
    /// `d_c`
    pub dim: usize,
}

impl PromptLayout {
    pub fn new(classes: usize, context_len: usize, domain_len: usize, dim: usize) -> Result<Self> {
        if classes == 0 || context_len == 0 || domain_len == 0 || dim == 0 {
            return Err(MpaError::Config(format!(
                "prompt layout needs positive sizes, got K={classes} M1={context_len} M2={domain_len} d={dim}"
            )));
        }
        Ok(PromptLayout {
            classes,
            context_len,
            domain_len,
            dim,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.context_len + self.domain_len
    }

    pub fn context_shape(&self) -> [usize; 3] {
        [self.classes, self.context_len, self.dim]
    }

    pub fn tokens_shape(&self) -> [usize; 2] {
        [self.domain_len, self.dim]
    }

    /// Trainable scalars of one pair: `K·M1·d + 2·M2·d`.
    pub fn pair_params(&self) -> usize {
        self.classes * self.context_len * self.dim + 2 * self.domain_len * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSide {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptInit {
    pub seed: u64,
    pub scale: f64,
}

impl PromptInit {
    pub fn new(seed: u64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(MpaError::Config(format!("init scale must be positive, got {scale}")));
        }
        Ok(PromptInit { seed, scale })
    }
}

/// Trainable prompt parameters of one source-target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    layout: PromptLayout,
    pair_index: usize,
    seed: u64,
    pub context: Tensor,
    pub source_tokens: Tensor,
    pub target_tokens: Tensor,
}

impl PromptPair {
    /// Gaussian initialization. Context, source tokens and target tokens are
    /// drawn from independent streams.
    pub fn init(layout: PromptLayout, pair_index: usize, init: PromptInit) -> Self {
        let draw = |tag: &str, shape: &[usize]| {
            let mut rng = seed::rng(seed::derive(init.seed, tag, 0));
            Tensor::randn(shape, init.scale, &mut rng)
        };
        PromptPair {
            layout,
            pair_index,
            seed: init.seed,
            context: draw("context", &layout.context_shape()),
            source_tokens: draw("source-tokens", &layout.tokens_shape()),
            target_tokens: draw("target-tokens", &layout.tokens_shape()),
        }
    }

    pub fn from_parts(
        layout: PromptLayout,
        pair_index: usize,
        seed: u64,
        context: Tensor,
        source_tokens: Tensor,
        target_tokens: Tensor,
    ) -> Result<Self> {
        check_shape("context", &context, &layout.context_shape())?;
        check_shape("source tokens", &source_tokens, &layout.tokens_shape())?;
        check_shape("target tokens", &target_tokens, &layout.tokens_shape())?;
        Ok(PromptPair {
            layout,
            pair_index,
            seed,
            context,
            source_tokens,
            target_tokens,
        })
    }

    pub fn layout(&self) -> PromptLayout {
        self.layout
    }

    pub fn pair_index(&self) -> usize {
        self.pair_index
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.context.len() + self.source_tokens.len() + self.target_tokens.len()
    }

    /// Places the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPrompt {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundPrompt {
            layout: self.layout,
            context: leaf(&self.context),
            source_tokens: leaf(&self.source_tokens),
            target_tokens: leaf(&self.target_tokens),
        }
    }

    /// Bit-level digest of the parameters, for frozen-contract checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        let mut bits = self.context.bits();
        bits.extend(self.source_tokens.bits());
        bits.extend(self.target_tokens.bits());
        bits
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
        let p = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(p)
    }

    /// `"MPAP" | version u32 | K, M1, M2, d_c, pair u32 | seed u64 | f64 context, source, target`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let l = self.layout;
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        for (v, what) in [
            (l.classes, "K"),
            (l.context_len, "M1"),
            (l.domain_len, "M2"),
            (l.dim, "d_c"),
            (self.pair_index, "pair index"),
        ] {
            put_u32(w, to_u32(v, what)?)?;
        }
        put_u64(w, self.seed)?;
        put_f64s(w, self.context.data())?;
        put_f64s(w, self.source_tokens.data())?;
        put_f64s(w, self.target_tokens.data())?;
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut OffsetReader<R>) -> Result<Self> {
        let at = r.offset();
        let magic: [u8; 4] = r.bytes("magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return r.fail(at, "bad prompt checkpoint magic");
        }
        let at = r.offset();
        if r.u32("version")? != CHECKPOINT_VERSION {
            return r.fail(at, "unsupported prompt checkpoint version");
        }
        let at = r.offset();
        let classes = r.u32("K")? as usize;
        let context_len = r.u32("M1")? as usize;
        let domain_len = r.u32("M2")? as usize;
        let dim = r.u32("d_c")? as usize;
        let pair_index = r.u32("pair index")? as usize;
        let layout = PromptLayout::new(classes, context_len, domain_len, dim)
            .or_else(|e| r.fail(at, e.to_string()))?;
        let seed = r.u64("seed")?;
        let ctx = r.f64_vec(classes * context_len * dim, "context")?;
        let src = r.f64_vec(domain_len * dim, "source tokens")?;
        let tgt = r.f64_vec(domain_len * dim, "target tokens")?;
        PromptPair::from_parts(
            layout,
            pair_index,
            seed,
            Tensor::new(layout.context_shape().to_vec(), ctx)?,
            Tensor::new(layout.tokens_shape().to_vec(), src)?,
            Tensor::new(layout.tokens_shape().to_vec(), tgt)?,
        )
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MPAP";
const CHECKPOINT_VERSION: u32 = 1;

fn check_shape(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(MpaError::Validation(format!(
            "{what} has shape {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Prompt parameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundPrompt {
    pub layout: PromptLayout,
    /// `[K, M1, d]`
    pub context: Var,
    /// `[M2, d]`
    pub source_tokens: Var,
    /// `[M2, d]`
    pub target_tokens: Var,
}

impl BoundPrompt {
    pub fn tokens(&self, side: DomainSide) -> Var {
        match side {
            DomainSide::Source => self.source_tokens,
            DomainSide::Target => self.target_tokens,
        }
    }

    /// The class prompt `t_k^d`: `[M1 + M2, d]`.
    pub fn assemble(&self, tape: &mut Tape, class: usize, side: DomainSide) -> Result<Var> {
        let l = self.layout;
        if class >= l.classes {
            return Err(MpaError::Index {
                what: "class",
                index: class,
                bound: l.classes,
            });
        }
        let ctx = tape.slice_rows(self.context, class, class + 1)?;
        let ctx = tape.reshape(ctx, &[l.context_len, l.dim])?;
        tape.concat_rows(&[ctx, self.tokens(side)])
    }

    /// Class embeddings of the `2K` prompts, source block then target block.
    pub fn embed_all(&self, tape: &mut Tape, encoder: &BoundEncoder) -> Result<Var> {
        class_embeddings(
            tape,
            encoder,
            self.layout,
            self.context,
            &[self.source_tokens, self.target_tokens],
        )
    }

    /// Class embeddings of the `K` target prompts.
    pub fn embed_target(&self, tape: &mut Tape, encoder: &BoundEncoder) -> Result<Var> {
        class_embeddings(tape, encoder, self.layout, self.context, &[self.target_tokens])
    }

    /// `[B, 2K]` logits over all (class, domain) prompts.
    pub fn train_logits(
        &self,
        tape: &mut Tape,
        encoder: &BoundEncoder,
        features: Var,
        temperature: &BoundTemperature,
    ) -> Result<Var> {
        let embeds = self.embed_all(tape, encoder)?;
        cosine_logits(tape, features, embeds, temperature)
    }

    /// `[B, K]` logits over the target prompts.
    pub fn target_logits(
        &self,
        tape: &mut Tape,
        encoder: &BoundEncoder,
        features: Var,
        temperature: &BoundTemperature,
    ) -> Result<Var> {
        let embeds = self.embed_target(tape, encoder)?;
        cosine_logits(tape, features, embeds, temperature)
    }

    /// 2K-way probabilities for one feature vector.
    pub fn train_probs(
        &self,
        tape: &mut Tape,
        encoder: &BoundEncoder,
        feature: Var,
        temperature: &BoundTemperature,
    ) -> Result<Var> {
        let f = as_row(tape, feature)?;
        let z = self.train_logits(tape, encoder, f, temperature)?;
        let z = tape.reshape(z, &[2 * self.layout.classes])?;
        tape.softmax_rows(z)
    }

    /// K-way target-domain probabilities for one feature vector.
    pub fn predict_target(
        &self,
        tape: &mut Tape,
        encoder: &BoundEncoder,
        feature: Var,
        temperature: &BoundTemperature,
    ) -> Result<Var> {
        let f = as_row(tape, feature)?;
        let z = self.target_logits(tape, encoder, f, temperature)?;
        let z = tape.reshape(z, &[self.layout.classes])?;
        tape.softmax_rows(z)
    }
}

fn as_row(tape: &mut Tape, feature: Var) -> Result<Var> {
    let d = tape.value(feature).len();
    tape.reshape(feature, &[1, d])
}

/// Embeds `context[k] ++ tokens` for every class and every token set, in
/// token-set-major order: `[len(token_sets)·K, d]`.
pub fn class_embeddings(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    layout: PromptLayout,
    context: Var,
    token_sets: &[Var],
) -> Result<Var> {
    let prompts = stack_class_prompts(tape, layout, context, token_sets)?;
    encoder.encode_batch(tape, prompts, layout.prompt_len())
}

/// Stacks `context[k] ++ tokens` for every class and token set into one
/// `[len(token_sets)·K·(M1+M2), d]` token matrix.
pub fn stack_class_prompts(
    tape: &mut Tape,
    layout: PromptLayout,
    context: Var,
    token_sets: &[Var],
) -> Result<Var> {
    let rows = layout.classes * layout.context_len;
    let flat = tape.reshape(context, &[rows, layout.dim])?;
    for &t in token_sets {
        if tape.shape(t) != layout.tokens_shape() {
            let s = tape.shape(t).to_vec();
            return Err(MpaError::dim("domain tokens", &s, &layout.tokens_shape()));
        }
    }
    let mut pieces = Vec::with_capacity(2 * layout.classes * token_sets.len());
    for &tokens in token_sets {
        for k in 0..layout.classes {
            let ctx = tape.slice_rows(flat, k * layout.context_len, (k + 1) * layout.context_len)?;
            pieces.push(ctx);
            pieces.push(tokens);
        }
    }
    tape.concat_rows(&pieces)
}

/// `cos(features, embeds) / T` on the tape: `[B, d] × [C, d] → [B, C]`.
pub fn cosine_logits(
    tape: &mut Tape,
    features: Var,
    embeds: Var,
    temperature: &BoundTemperature,
) -> Result<Var> {
    let sim = tape.cosine_sim_matrix(features, embeds)?;
    temperature.apply(tape, sim)
}
