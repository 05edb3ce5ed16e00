//! Stage two: align the stage-1 prompts through two token-wise autoencoders.
//!
//! Each frozen pair prompt is cut down to its target half and split into the
//! class-specific context slab (`K·M1` tokens) and the target domain-token slab
//! (`M2` tokens). The first autoencoder handles context tokens, the second
//! domain tokens; both project `d_c → d_I` with an affine map and back with
//! `d_I → hidden → d_c` (affine, tanh, affine). Weights are shared across
//! tokens, classes and pairs.
//!
//! Training minimizes `L_CLS + α·L1 + L_AE`:
//! * `L_AE`: mean over pairs of the mean squared reconstruction error;
//! * `L1`: pairwise L1 distance between the K-way target probabilities of the
//!   reconstructed prompts, scaled by `2 / ((N−1)(N−2))` and averaged over the
//!   batch;
//! * `L_CLS`: mean over pairs of the pseudo-label cross-entropy.
//!
//! Inference averages the reconstructed prompts' logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_u32, to_u32, OffsetReader};
use crate::config::{Stage2Params, TrainConfig};
use crate::embedstore::{argmax, DomainDataset};
use crate::encoder::{BoundEncoder, BoundTemperature, FrozenTextEncoder, Temperature};
use crate::error::{MpaError, Result};
use crate::optim::{CosineSchedule, Sgd};
use crate::prompt::{class_embeddings, cosine_logits, PromptLayout, PromptPair};
use crate::pseudo::PseudoLabelSet;
use crate::seed;
use crate::stage1::accuracy;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Token-wise autoencoder `d_c → d_I → hidden → d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    /// `[d_I, d_c]`
    pub proj_weight: Tensor,
    /// `[d_I]`
    pub proj_bias: Tensor,
    /// `[hidden, d_I]`
    pub hidden_weight: Tensor,
    /// `[hidden]`
    pub hidden_bias: Tensor,
    /// `[d_c, hidden]`
    pub out_weight: Tensor,
    /// `[d_c]`
    pub out_bias: Tensor,
}

impl AutoEncoder {
    /// Gaussian weights with standard deviation `1/√fan_in`, zero biases.
    pub fn init(dim: usize, latent: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Tensor::new(vec![rows, cols], data).expect("weight shape")
        };
        let proj_weight = w(latent, dim);
        let hidden_weight = w(hidden, latent);
        let out_weight = w(dim, hidden);
        AutoEncoder {
            proj_weight,
            proj_bias: Tensor::zeros(&[latent]),
            hidden_weight,
            hidden_bias: Tensor::zeros(&[hidden]),
            out_weight,
            out_bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_weight.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.proj_weight.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weight.shape()[0]
    }

    /// `d_I·d_c + d_I + hidden·d_I + hidden + d_c·hidden + d_c`.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.proj_weight,
            &self.proj_bias,
            &self.hidden_weight,
            &self.hidden_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAutoEncoder {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundAutoEncoder {
            proj_weight: leaf(&self.proj_weight),
            proj_bias: leaf(&self.proj_bias),
            hidden_weight: leaf(&self.hidden_weight),
            hidden_bias: leaf(&self.hidden_bias),
            out_weight: leaf(&self.out_weight),
            out_bias: leaf(&self.out_bias),
        }
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for t in self.tensors() {
            put_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(
        r: &mut OffsetReader<R>,
        dim: usize,
        latent: usize,
        hidden: usize,
    ) -> Result<Self> {
        let shapes = [
            vec![latent, dim],
            vec![latent],
            vec![hidden, latent],
            vec![hidden],
            vec![dim, hidden],
            vec![dim],
        ];
        let ts = shapes
            .into_iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, r.f64_vec(n, "autoencoder weights")?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(ts)
    }

    fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let [pw, pb, hw, hb, ow, ob]: [Tensor; 6] = ts
            .try_into()
            .map_err(|_| MpaError::Validation("autoencoder needs six tensors".into()))?;
        let (latent, dim) = (pw.shape()[0], pw.shape()[1]);
        let hidden = hw.shape()[0];
        let ok = pb.shape() == [latent]
            && hw.shape() == [hidden, latent]
            && hb.shape() == [hidden]
            && ow.shape() == [dim, hidden]
            && ob.shape() == [dim];
        if !ok {
            return Err(MpaError::Validation("inconsistent autoencoder shapes".into()));
        }
        Ok(AutoEncoder {
            proj_weight: pw,
            proj_bias: pb,
            hidden_weight: hw,
            hidden_bias: hb,
            out_weight: ow,
            out_bias: ob,
        })
    }
}

/// Autoencoder weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundAutoEncoder {
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl BoundAutoEncoder {
    pub fn vars(&self) -> [Var; 6] {
        [
            self.proj_weight,
            self.proj_bias,
            self.hidden_weight,
            self.hidden_bias,
            self.out_weight,
            self.out_bias,
        ]
    }

    /// `Proj`: `[n, d_c] → [n, d_I]`.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.proj_weight, Some(self.proj_bias))
    }

    /// `Proj_b`: `[n, d_I] → [n, d_c]`.
    pub fn back_project(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = tape.linear(z, self.hidden_weight, Some(self.hidden_bias))?;
        let h = tape.tanh(h);
        tape.linear(h, self.out_weight, Some(self.out_bias))
    }

    pub fn reconstruct(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.project(tape, x)?;
        self.back_project(tape, z)
    }
}

/// Stage-2 state: the autoencoders plus the frozen stage-1 prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerState {
    layout: PromptLayout,
    /// One autoencoder when shared, otherwise `[context, domain tokens]`.
    autoencoders: Vec<AutoEncoder>,
    prompts: Vec<PromptPair>,
    pub alpha: f64,
    pub temperature: Temperature,
}

impl AlignerState {
    pub fn new(
        prompts: Vec<PromptPair>,
        latent_dim: usize,
        hidden: usize,
        single_ae: bool,
        alpha: f64,
        temperature: Temperature,
        seed_value: u64,
    ) -> Result<Self> {
        let layout = match prompts.first() {
            Some(p) => p.layout(),
            None => {
                return Err(MpaError::Validation(
                    "stage two needs at least one stage-1 checkpoint".into(),
                ))
            }
        };
        if let Some(p) = prompts.iter().find(|p| p.layout() != layout) {
            return Err(MpaError::Validation(format!(
                "prompt pair {} has layout {:?}, expected {layout:?}",
                p.pair_index(),
                p.layout()
            )));
        }
        if latent_dim == 0 || hidden == 0 {
            return Err(MpaError::Config("latent and hidden widths must be positive".into()));
        }
        let count = if single_ae { 1 } else { 2 };
        let autoencoders = (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::derive(seed_value, "autoencoder", i));
                AutoEncoder::init(layout.dim, latent_dim, hidden, &mut rng)
            })
            .collect();
        Ok(AlignerState {
            layout,
            autoencoders,
            prompts,
            alpha,
            temperature,
        })
    }

    pub fn from_parts(
        autoencoders: Vec<AutoEncoder>,
        prompts: Vec<PromptPair>,
        alpha: f64,
        temperature: Temperature,
    ) -> Result<Self> {
        let layout = prompts
            .first()
            .map(PromptPair::layout)
            .ok_or_else(|| MpaError::Validation("aligner without prompts".into()))?;
        if autoencoders.is_empty() || autoencoders.len() > 2 {
            return Err(MpaError::Validation("aligner needs one or two autoencoders".into()));
        }
        let latent = autoencoders[0].latent_dim();
        for ae in &autoencoders {
            if ae.dim() != layout.dim || ae.latent_dim() != latent {
                return Err(MpaError::Validation("autoencoder widths disagree".into()));
            }
        }
        if prompts.iter().any(|p| p.layout() != layout) {
            return Err(MpaError::Validation("prompt layouts disagree".into()));
        }
        Ok(AlignerState {
            layout,
            autoencoders,
            prompts,
            alpha,
            temperature,
        })
    }

    pub fn layout(&self) -> PromptLayout {
        self.layout
    }

    pub fn num_pairs(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompts(&self) -> &[PromptPair] {
        &self.prompts
    }

    pub fn latent_dim(&self) -> usize {
        self.autoencoders[0].latent_dim()
    }

    pub fn hidden(&self) -> usize {
        self.autoencoders[0].hidden()
    }

    pub fn single_ae(&self) -> bool {
        self.autoencoders.len() == 1
    }

    /// Autoencoder for the class-specific context slab.
    pub fn invariant_ae(&self) -> &AutoEncoder {
        &self.autoencoders[0]
    }

    /// Autoencoder for the target domain-token slab.
    pub fn specific_ae(&self) -> &AutoEncoder {
        self.autoencoders.last().expect("at least one autoencoder")
    }

    pub fn autoencoders(&self) -> &[AutoEncoder] {
        &self.autoencoders
    }

    /// Trainable scalars of the autoencoders.
    pub fn param_count(&self) -> usize {
        self.autoencoders.iter().map(AutoEncoder::param_count).sum()
    }

    /// Bit-level digest of the frozen prompts.
    pub fn prompt_fingerprint(&self) -> Vec<u64> {
        self.prompts.iter().flat_map(PromptPair::fingerprint).collect()
    }

    /// Reorders the stored pairs; used to check order independence.
    pub fn permute_pairs(&mut self, order: &[usize]) {
        self.prompts = order.iter().map(|&i| self.prompts[i].clone()).collect();
    }

    pub fn bind(&self, tape: &mut Tape, train_ae: bool, train_prompts: bool) -> BoundAligner {
        let aes: Vec<BoundAutoEncoder> = self
            .autoencoders
            .iter()
            .map(|ae| ae.bind(tape, train_ae))
            .collect();
        let slabs = self
            .prompts
            .iter()
            .map(|p| {
                let (context, tokens) = slice_target(p);
                let mut leaf = |t: Tensor| {
                    if train_prompts {
                        tape.param(t)
                    } else {
                        tape.constant(t)
                    }
                };
                TargetSlabs {
                    context: leaf(context),
                    tokens: leaf(tokens),
                }
            })
            .collect();
        BoundAligner {
            layout: self.layout,
            invariant: aes[0],
            specific: *aes.last().expect("at least one autoencoder"),
            shared: aes.len() == 1,
            slabs,
        }
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
        let s = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(s)
    }

    /// `"MPAA" | version u32 | d_c, d_I, hidden, #AE, #pairs u32 | α f64 | T f64 |
    /// trainable u8 | per AE six f64 tensors | #pairs prompt checkpoints`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ALIGNER_MAGIC)?;
        put_u32(w, ALIGNER_VERSION)?;
        for (v, what) in [
            (self.layout.dim, "d_c"),
            (self.latent_dim(), "d_I"),
            (self.hidden(), "hidden"),
            (self.autoencoders.len(), "autoencoder count"),
            (self.prompts.len(), "pair count"),
        ] {
            put_u32(w, to_u32(v, what)?)?;
        }
        put_f64s(w, &[self.alpha, self.temperature.value])?;
        w.write_all(&[u8::from(self.temperature.trainable)])?;
        for ae in &self.autoencoders {
            ae.write_to(w)?;
        }
        for p in &self.prompts {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut OffsetReader<R>) -> Result<Self> {
        let magic: [u8; 4] = r.bytes("magic")?;
        if &magic != ALIGNER_MAGIC {
            return r.fail(0, "bad aligner checkpoint magic");
        }
        let at = r.offset();
        if r.u32("version")? != ALIGNER_VERSION {
            return r.fail(at, "unsupported aligner checkpoint version");
        }
        let dim = r.u32("d_c")? as usize;
        let latent = r.u32("d_I")? as usize;
        let hidden = r.u32("hidden")? as usize;
        let at = r.offset();
        let n_ae = r.u32("autoencoder count")? as usize;
        if !(1..=2).contains(&n_ae) {
            return r.fail(at, format!("autoencoder count {n_ae}"));
        }
        let n_pairs = r.u32("pair count")? as usize;
        let alpha = r.f64("alpha")?;
        let at = r.offset();
        let temp = r.f64("temperature")?;
        let trainable = r.u8("trainable flag")? != 0;
        let temperature = Temperature::new(temp, trainable).or_else(|e| r.fail(at, e.to_string()))?;
        let autoencoders = (0..n_ae)
            .map(|_| AutoEncoder::read_from(r, dim, latent, hidden))
            .collect::<Result<Vec<_>>>()?;
        let prompts = (0..n_pairs)
            .map(|_| PromptPair::read_from(r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(autoencoders, prompts, alpha, temperature)
    }
}

const ALIGNER_MAGIC: &[u8; 4] = b"MPAA";
const ALIGNER_VERSION: u32 = 1;

/// Splits a pair's target half into the context slab `[K, M1, d]` and the
/// target domain-token slab `[M2, d]`. The source tokens are dropped.
pub fn slice_target(prompts: &PromptPair) -> (Tensor, Tensor) {
    (prompts.context.clone(), prompts.target_tokens.clone())
}

#[derive(Debug, Clone, Copy)]
pub struct TargetSlabs {
    /// `[K, M1, d]`
    pub context: Var,
    /// `[M2, d]`
    pub tokens: Var,
}

/// A reconstructed target prompt.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructedPrompt {
    /// `[K, M1, d]`
    pub context: Var,
    /// `[M2, d]`
    pub tokens: Var,
    pub pair_index: usize,
}

/// Aligner state on a tape.
#[derive(Debug, Clone)]
pub struct BoundAligner {
    pub layout: PromptLayout,
    pub invariant: BoundAutoEncoder,
    pub specific: BoundAutoEncoder,
    shared: bool,
    pub slabs: Vec<TargetSlabs>,
}

impl BoundAligner {
    /// Distinct autoencoder variables (six or twelve).
    pub fn ae_vars(&self) -> Vec<Var> {
        let mut v = self.invariant.vars().to_vec();
        if !self.shared {
            v.extend(self.specific.vars());
        }
        v
    }

    pub fn reconstruct(&self, tape: &mut Tape, pair: usize) -> Result<ReconstructedPrompt> {
        let slabs = self.slabs.get(pair).ok_or(MpaError::Index {
            what: "pair",
            index: pair,
            bound: self.slabs.len(),
        })?;
        let l = self.layout;
        let flat = tape.reshape(slabs.context, &[l.classes * l.context_len, l.dim])?;
        let ctx = self.invariant.reconstruct(tape, flat)?;
        let ctx = tape.reshape(ctx, &l.context_shape())?;
        let tokens = self.specific.reconstruct(tape, slabs.tokens)?;
        Ok(ReconstructedPrompt {
            context: ctx,
            tokens,
            pair_index: pair,
        })
    }

    pub fn reconstruct_all(&self, tape: &mut Tape) -> Result<Vec<ReconstructedPrompt>> {
        (0..self.slabs.len()).map(|i| self.reconstruct(tape, i)).collect()
    }

    /// Mean over pairs of the per-element squared reconstruction error of
    /// both slabs together.
    pub fn loss_ae(&self, tape: &mut Tape, recon: &[ReconstructedPrompt]) -> Result<Var> {
        let l = self.layout;
        let elements = (l.classes * l.context_len + l.domain_len) * l.dim;
        let mut terms = Vec::with_capacity(recon.len());
        for r in recon {
            let s = self.slabs[r.pair_index];
            let a = tape.l2_sq(r.context, s.context)?;
            let b = tape.l2_sq(r.tokens, s.tokens)?;
            let sum = tape.add(a, b)?;
            terms.push(tape.scale(sum, 1.0 / elements as f64));
        }
        mean_of(tape, &terms)
    }
}

/// `[B, K]` target logits of one reconstructed prompt.
pub fn reconstructed_logits(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    layout: PromptLayout,
    prompt: &ReconstructedPrompt,
    features: Var,
    temperature: &BoundTemperature,
) -> Result<Var> {
    let embeds = class_embeddings(tape, encoder, layout, prompt.context, &[prompt.tokens])?;
    cosine_logits(tape, features, embeds, temperature)
}

/// `2/((N−1)(N−2)) · Σ_{j<i} ‖p_i − p_j‖₁`, averaged over the batch rows.
/// Zero when fewer than two probability matrices are given.
pub fn pairwise_l1(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let m = probs.len();
    if m < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows = tape.value(probs[0]).rows().max(1);
    let mut terms = Vec::with_capacity(m * (m - 1) / 2);
    for j in 0..m {
        for i in j + 1..m {
            terms.push(tape.l1_dist(probs[i], probs[j])?);
        }
    }
    let total = sum_of(tape, &terms)?;
    let norm = 2.0 / (m as f64 * (m - 1) as f64);
    Ok(tape.scale(total, norm / rows as f64))
}

fn sum_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let s = sum_of(tape, terms)?;
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

/// Which terms of the stage-2 objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignLossSpec {
    pub alpha: f64,
    pub use_cls: bool,
    pub use_l1: bool,
    pub use_ae: bool,
}

impl AlignLossSpec {
    pub fn from_params(p: &Stage2Params) -> Self {
        AlignLossSpec {
            alpha: p.alpha,
            use_cls: !p.no_cls,
            use_l1: !p.no_l1,
            use_ae: !p.no_ae,
        }
    }
}

/// The individual loss terms of one stage-2 evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AlignLosses {
    pub total: Var,
    pub cls: Var,
    pub l1: Var,
    pub ae: Var,
}

/// Builds `L_CLS + α·L1 + L_AE` (minus disabled terms) for one batch.
pub fn align_loss(
    tape: &mut Tape,
    aligner: &BoundAligner,
    encoder: &BoundEncoder,
    temperature: &BoundTemperature,
    features: &Tensor,
    labels: &[usize],
    spec: AlignLossSpec,
) -> Result<AlignLosses> {
    let recon = aligner.reconstruct_all(tape)?;
    let f = tape.constant(features.clone());
    let mut logits = Vec::with_capacity(recon.len());
    for r in &recon {
        logits.push(reconstructed_logits(tape, encoder, aligner.layout, r, f, temperature)?);
    }
    let cls_terms = logits
        .iter()
        .map(|&z| tape.cross_entropy_rows(z, labels))
        .collect::<Result<Vec<_>>>()?;
    let cls = mean_of(tape, &cls_terms)?;
    let probs = logits
        .iter()
        .map(|&z| tape.softmax_rows(z))
        .collect::<Result<Vec<_>>>()?;
    let l1 = pairwise_l1(tape, &probs)?;
    let ae = aligner.loss_ae(tape, &recon)?;

    let mut parts = Vec::with_capacity(3);
    if spec.use_cls {
        parts.push(cls);
    }
    if spec.use_l1 && spec.alpha != 0.0 {
        parts.push(tape.scale(l1, spec.alpha));
    }
    if spec.use_ae {
        parts.push(ae);
    }
    let total = if parts.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        sum_of(tape, &parts)?
    };
    Ok(AlignLosses { total, cls, l1, ae })
}

/// Per-epoch means of the stage-2 loss terms (unweighted).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignCurves {
    pub total: Vec<f64>,
    pub cls: Vec<f64>,
    pub l1: Vec<f64>,
    pub ae: Vec<f64>,
}

/// Trains the autoencoders (and, with `finetune_prompts`, the prompts) on the
/// pseudo-labeled target pool. An epoch is one pass over that pool.
pub fn train_align(
    mut state: AlignerState,
    encoder: &FrozenTextEncoder,
    target: &DomainDataset,
    pseudo: &PseudoLabelSet,
    cfg: &TrainConfig,
    spec: AlignLossSpec,
    finetune_prompts: bool,
) -> Result<(AlignerState, AlignCurves)> {
    cfg.validate()?;
    if target.dim() != state.layout.dim || target.num_classes() != state.layout.classes {
        return Err(MpaError::Validation(format!(
            "target {} does not match the prompt layout",
            target.name()
        )));
    }
    let (rows, labels) = pseudo.labeled_rows(target);
    if rows.is_empty() && cfg.epochs > 0 && (spec.use_cls || spec.use_l1) {
        return Err(MpaError::Contract(
            "no pseudo-labeled target samples; lower the threshold".into(),
        ));
    }
    let steps_per_epoch = rows.len().div_ceil(cfg.batch_size).max(1);
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = seed::rng(seed::derive(cfg.seed, "stage2-batches", 0));
    let mut temperature = state.temperature;
    let mut curves = AlignCurves::default();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = if order.is_empty() {
            vec![&[]]
        } else {
            order.chunks(cfg.batch_size).collect()
        };
        let mut sums = [0.0; 4];
        for chunk in &batches {
            let idx: Vec<usize> = chunk.iter().map(|&p| rows[p]).collect();
            let feats = target.gather_features(&idx);
            let ys: Vec<usize> = chunk.iter().map(|&p| labels[p]).collect();

            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape);
            let bound = state.bind(&mut tape, true, finetune_prompts);
            let bt = temperature.bind(&mut tape);
            let losses = if idx.is_empty() {
                // reconstruction only
                let recon = bound.reconstruct_all(&mut tape)?;
                let ae = bound.loss_ae(&mut tape, &recon)?;
                let zero = tape.constant(Tensor::scalar(0.0));
                AlignLosses {
                    total: ae,
                    cls: zero,
                    l1: zero,
                    ae,
                }
            } else {
                align_loss(&mut tape, &bound, &enc, &bt, &feats, &ys, spec)?
            };
            tape.backward(losses.total)?;
            for (s, v) in sums
                .iter_mut()
                .zip([losses.total, losses.cls, losses.l1, losses.ae])
            {
                *s += tape.value(v).item();
            }

            let lr = schedule.lr(step);
            let ae_vars = bound.ae_vars();
            let grads: Vec<Tensor> = ae_vars.iter().map(|&v| tape.grad(v)).collect();
            {
                let mut params: Vec<&mut Tensor> = state
                    .autoencoders
                    .iter_mut()
                    .flat_map(|ae| ae.tensors_mut())
                    .collect();
                opt.step(&mut params, &grads, lr);
            }
            if finetune_prompts {
                for (p, s) in state.prompts.iter_mut().zip(&bound.slabs) {
                    p.context.axpy(-lr, &tape.grad(s.context));
                    p.target_tokens.axpy(-lr, &tape.grad(s.tokens));
                }
            }
            if let Some(tv) = bt.var() {
                let g = tape.grad(tv).item();
                temperature.value = (temperature.value - lr * g).max(Temperature::FLOOR);
            }
            step += 1;
        }
        let n = batches.len() as f64;
        curves.total.push(sums[0] / n);
        curves.cls.push(sums[1] / n);
        curves.l1.push(sums[2] / n);
        curves.ae.push(sums[3] / n);
    }
    state.temperature = temperature;
    Ok((state, curves))
}

/// Plain-tensor reconstruction of one pair: `(context [K, M1, d], tokens [M2, d])`.
pub fn reconstruct_detached(state: &AlignerState, pair: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, false, false);
    let r = bound.reconstruct(&mut tape, pair)?;
    Ok((tape.value(r.context).clone(), tape.value(r.tokens).clone()))
}

/// `[n, K]` logits of each reconstructed prompt, without gradients.
pub fn per_prompt_logits(
    state: &AlignerState,
    encoder: &FrozenTextEncoder,
    features: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape);
    let bound = state.bind(&mut tape, false, false);
    let layout = state.layout;
    let recon = bound.reconstruct_all(&mut tape)?;
    recon
        .iter()
        .map(|r| {
            let e = class_embeddings(&mut tape, &enc, layout, r.context, &[r.tokens])?;
            crate::encoder::cosine_logits(features, tape.value(e), state.temperature.value)
        })
        .collect()
}

/// Logit-averaged prediction over the reconstructed prompts. Returns the
/// argmax labels (lowest index on ties) and the mean logits.
pub fn infer(
    state: &AlignerState,
    encoder: &FrozenTextEncoder,
    features: &Tensor,
) -> Result<(Vec<usize>, Tensor)> {
    let logits = per_prompt_logits(state, encoder, features)?;
    let mean = average_logits(&logits);
    let labels = (0..mean.rows()).map(|i| argmax(mean.row(i))).collect();
    Ok((labels, mean))
}

/// Elementwise mean of equally-shaped logit tensors.
pub fn average_logits(logits: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(logits[0].shape());
    for l in logits {
        acc.add_assign(l);
    }
    let inv = 1.0 / logits.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    acc
}

/// Accuracy of every reconstructed prompt and of the averaged logits.
pub fn evaluate_aligner(
    state: &AlignerState,
    encoder: &FrozenTextEncoder,
    target: &DomainDataset,
) -> Result<(Vec<f64>, f64)> {
    let labels = target.require_labels()?;
    let logits = per_prompt_logits(state, encoder, target.features())?;
    let each = logits.iter().map(|l| accuracy(l, labels)).collect();
    let avg = accuracy(&average_logits(&logits), labels);
    Ok((each, avg))
}
