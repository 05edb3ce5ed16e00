//! Latent subspace tuning: adapt to an unseen domain by training only
//! latent prompt vectors that are decoded through the frozen back-projections
//! of a trained aligner.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::{AlignerState, AutoEncoder, BoundAutoEncoder, ReconstructedPrompt};
use crate::binio::{put_f64s, put_u32, put_u64, to_u32, OffsetReader};
use crate::config::TrainConfig;
use crate::embedstore::{argmax, DomainDataset};
use crate::encoder::{FrozenTextEncoder, Temperature};
use crate::error::{MpaError, Result};
use crate::optim::{CosineSchedule, Sgd};
use crate::prompt::{class_embeddings, cosine_logits, PromptLayout};
use crate::pseudo::PseudoLabelSet;
use crate::seed;
use crate::stage1::accuracy;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default standard deviation of the latent initialization.
pub const LATENT_INIT_SCALE: f64 = 0.02;

/// Trainable latents plus frozen copies of the aligner's decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrompt {
    layout: PromptLayout,
    seed: u64,
    /// One autoencoder when the aligner shares it, otherwise
    /// `[context, domain tokens]`. Only the back-projections are used.
    decoders: Vec<AutoEncoder>,
    pub temperature: Temperature,
    /// `[K, M1, d_I]`
    pub v_tune: Tensor,
    /// `[M2, d_I]`
    pub d_tune: Tensor,
}

impl LatentPrompt {
    /// Seeded Gaussian latents with the default scale.
    pub fn init(aligner: &AlignerState, seed_value: u64) -> Self {
        Self::init_scaled(aligner, seed_value, LATENT_INIT_SCALE)
    }

    pub fn init_scaled(aligner: &AlignerState, seed_value: u64, scale: f64) -> Self {
        let layout = aligner.layout();
        let latent = aligner.latent_dim();
        let v_tune = Tensor::randn(
            &[layout.classes, layout.context_len, latent],
            scale,
            &mut seed::rng(seed::derive(seed_value, "v-tune", 0)),
        );
        let d_tune = Tensor::randn(
            &[layout.domain_len, latent],
            scale,
            &mut seed::rng(seed::derive(seed_value, "d-tune", 0)),
        );
        LatentPrompt {
            layout,
            seed: seed_value,
            decoders: aligner.autoencoders().to_vec(),
            temperature: aligner.temperature,
            v_tune,
            d_tune,
        }
    }

    /// Replaces the latents; shapes must match `[K, M1, d_I]` and `[M2, d_I]`.
    pub fn with_latents(mut self, v_tune: Tensor, d_tune: Tensor) -> Result<Self> {
        let l = self.layout;
        let d_i = self.latent_dim();
        if v_tune.shape() != [l.classes, l.context_len, d_i] {
            return Err(MpaError::Validation(format!(
                "v_tune shape {:?} does not match [{}, {}, {d_i}]",
                v_tune.shape(),
                l.classes,
                l.context_len
            )));
        }
        if d_tune.shape() != [l.domain_len, d_i] {
            return Err(MpaError::Validation(format!(
                "d_tune shape {:?} does not match [{}, {d_i}]",
                d_tune.shape(),
                l.domain_len
            )));
        }
        self.v_tune = v_tune;
        self.d_tune = d_tune;
        Ok(self)
    }

    pub fn layout(&self) -> PromptLayout {
        self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.decoders[0].latent_dim()
    }

    pub fn decoders(&self) -> &[AutoEncoder] {
        &self.decoders
    }

    /// `K·M1·d_I + M2·d_I`.
    pub fn param_count(&self) -> usize {
        self.v_tune.len() + self.d_tune.len()
    }

    /// Binds the latents as parameters and the decoders as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundLatent {
        let decoders: Vec<BoundAutoEncoder> = self.decoders.iter().map(|d| d.bind(tape, false)).collect();
        BoundLatent {
            layout: self.layout,
            invariant: decoders[0],
            specific: *decoders.last().expect("at least one decoder"),
            v_tune: tape.param(self.v_tune.clone()),
            d_tune: tape.param(self.d_tune.clone()),
        }
    }

    /// Plain-tensor decoded prompt `(context [K, M1, d_c], tokens [M2, d_c])`.
    pub fn decode_detached(&self) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let p = b.decode(&mut tape)?;
        Ok((tape.value(p.context).clone(), tape.value(p.tokens).clone()))
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

    /// `"MPAL" | version u32 | K, M1, M2, d_c, d_I, hidden, #decoders u32 |
    /// seed u64 | T f64 | trainable u8 | decoders | v_tune f64 | d_tune f64`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let l = self.layout;
        w.write_all(LATENT_MAGIC)?;
        put_u32(w, LATENT_VERSION)?;
        for (v, what) in [
            (l.classes, "K"),
            (l.context_len, "M1"),
            (l.domain_len, "M2"),
            (l.dim, "d_c"),
            (self.latent_dim(), "d_I"),
            (self.decoders[0].hidden(), "hidden"),
            (self.decoders.len(), "decoder count"),
        ] {
            put_u32(w, to_u32(v, what)?)?;
        }
        put_u64(w, self.seed)?;
        put_f64s(w, &[self.temperature.value])?;
        w.write_all(&[u8::from(self.temperature.trainable)])?;
        for d in &self.decoders {
            d.write_to(w)?;
        }
        put_f64s(w, self.v_tune.data())?;
        put_f64s(w, self.d_tune.data())?;
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut OffsetReader<R>) -> Result<Self> {
        let magic: [u8; 4] = r.bytes("magic")?;
        if &magic != LATENT_MAGIC {
            return r.fail(0, "bad latent checkpoint magic");
        }
        let at = r.offset();
        if r.u32("version")? != LATENT_VERSION {
            return r.fail(at, "unsupported latent checkpoint version");
        }
        let at = r.offset();
        let k = r.u32("K")? as usize;
        let m1 = r.u32("M1")? as usize;
        let m2 = r.u32("M2")? as usize;
        let dim = r.u32("d_c")? as usize;
        let layout = PromptLayout::new(k, m1, m2, dim).or_else(|e| r.fail(at, e.to_string()))?;
        let latent = r.u32("d_I")? as usize;
        let hidden = r.u32("hidden")? as usize;
        let at = r.offset();
        let n_dec = r.u32("decoder count")? as usize;
        if !(1..=2).contains(&n_dec) {
            return r.fail(at, format!("decoder count {n_dec}"));
        }
        let seed_value = r.u64("seed")?;
        let at = r.offset();
        let temp = r.f64("temperature")?;
        let trainable = r.u8("trainable flag")? != 0;
        let temperature = Temperature::new(temp, trainable).or_else(|e| r.fail(at, e.to_string()))?;
        let decoders = (0..n_dec)
            .map(|_| AutoEncoder::read_from(r, dim, latent, hidden))
            .collect::<Result<Vec<_>>>()?;
        let v_tune = Tensor::new(vec![k, m1, latent], r.f64_vec(k * m1 * latent, "v_tune")?)?;
        let d_tune = Tensor::new(vec![m2, latent], r.f64_vec(m2 * latent, "d_tune")?)?;
        Ok(LatentPrompt {
            layout,
            seed: seed_value,
            decoders,
            temperature,
            v_tune,
            d_tune,
        })
    }
}

const LATENT_MAGIC: &[u8; 4] = b"MPAL";
const LATENT_VERSION: u32 = 1;

/// Latents and frozen decoders on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLatent {
    pub layout: PromptLayout,
    pub invariant: BoundAutoEncoder,
    pub specific: BoundAutoEncoder,
    pub v_tune: Var,
    pub d_tune: Var,
}

impl BoundLatent {
    /// Token-wise back-projection of both latent slabs.
    pub fn decode(&self, tape: &mut Tape) -> Result<ReconstructedPrompt> {
        let l = self.layout;
        let latent = tape.shape(self.v_tune)[2];
        let flat = tape.reshape(self.v_tune, &[l.classes * l.context_len, latent])?;
        let ctx = self.invariant.back_project(tape, flat)?;
        let ctx = tape.reshape(ctx, &l.context_shape())?;
        let tokens = self.specific.back_project(tape, self.d_tune)?;
        Ok(ReconstructedPrompt {
            context: ctx,
            tokens,
            pair_index: 0,
        })
    }
}

/// `[B, K]` logits of the decoded prompt.
fn decoded_logits(
    tape: &mut Tape,
    encoder: &FrozenTextEncoder,
    lp: &BoundLatent,
    features: Var,
    temperature: &crate::encoder::BoundTemperature,
) -> Result<Var> {
    let enc = encoder.bind(tape);
    let p = lp.decode(tape)?;
    let embeds = class_embeddings(tape, &enc, lp.layout, p.context, &[p.tokens])?;
    cosine_logits(tape, features, embeds, temperature)
}

/// Mean K-way cross-entropy of the decoded prompt on a pseudo-labeled batch.
pub fn lst_loss(
    tape: &mut Tape,
    encoder: &FrozenTextEncoder,
    lp: &BoundLatent,
    temperature: &crate::encoder::BoundTemperature,
    features: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let f = tape.constant(features.clone());
    let z = decoded_logits(tape, encoder, lp, f, temperature)?;
    tape.cross_entropy_rows(z, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstResult {
    pub loss_curve: Vec<f64>,
    pub accuracy_curve: Option<Vec<f64>>,
}

/// Trains the latents on the pseudo-labeled pool of `new_domain`; an epoch is
/// one pass over that pool. The decoders stay fixed.
pub fn tune(
    mut lp: LatentPrompt,
    encoder: &FrozenTextEncoder,
    new_domain: &DomainDataset,
    pseudo: &PseudoLabelSet,
    cfg: &TrainConfig,
) -> Result<(LatentPrompt, LstResult)> {
    cfg.validate()?;
    let l = lp.layout;
    if new_domain.dim() != l.dim || new_domain.num_classes() != l.classes {
        return Err(MpaError::Validation(format!(
            "domain {} does not match the prompt layout",
            new_domain.name()
        )));
    }
    let (rows, labels) = pseudo.labeled_rows(new_domain);
    if rows.is_empty() {
        return Err(MpaError::Contract(format!(
            "no pseudo-labeled samples in {} at threshold {}; lower the threshold",
            new_domain.name(),
            pseudo.threshold()
        )));
    }
    let steps_per_epoch = rows.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = seed::rng(seed::derive(cfg.seed, "lst-batches", 0));
    let mut temperature = lp.temperature;
    let mut result = LstResult {
        loss_curve: Vec::with_capacity(cfg.epochs),
        accuracy_curve: new_domain.labels().map(|_| Vec::with_capacity(cfg.epochs)),
    };
    let mut step = 0;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&p| rows[p]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&p| labels[p]).collect();
            let feats = new_domain.gather_features(&idx);

            let mut tape = Tape::new();
            let bound = lp.bind(&mut tape);
            let bt = temperature.bind(&mut tape);
            let loss = lst_loss(&mut tape, encoder, &bound, &bt, &feats, &ys)?;
            tape.backward(loss)?;
            sum += tape.value(loss).item();
            batches += 1;

            let lr = schedule.lr(step);
            let grads = [tape.grad(bound.v_tune), tape.grad(bound.d_tune)];
            opt.step(&mut [&mut lp.v_tune, &mut lp.d_tune], &grads, lr);
            if let Some(tv) = bt.var() {
                let g = tape.grad(tv).item();
                temperature.value = (temperature.value - lr * g).max(Temperature::FLOOR);
            }
            step += 1;
        }
        result.loss_curve.push(sum / batches as f64);
        lp.temperature = temperature;
        if let Some(curve) = result.accuracy_curve.as_mut() {
            curve.push(evaluate_latent(&lp, encoder, new_domain)?);
        }
    }
    Ok((lp, result))
}

/// `[n, K]` logits of the decoded prompt.
pub fn latent_logits(lp: &LatentPrompt, encoder: &FrozenTextEncoder, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape);
    let b = lp.bind(&mut tape);
    let p = b.decode(&mut tape)?;
    let embeds = class_embeddings(&mut tape, &enc, lp.layout, p.context, &[p.tokens])?;
    crate::encoder::cosine_logits(features, tape.value(embeds), lp.temperature.value)
}

pub fn predict_latent(lp: &LatentPrompt, encoder: &FrozenTextEncoder, features: &Tensor) -> Result<Vec<usize>> {
    let z = latent_logits(lp, encoder, features)?;
    Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
}

pub fn evaluate_latent(lp: &LatentPrompt, encoder: &FrozenTextEncoder, domain: &DomainDataset) -> Result<f64> {
    let labels = domain.require_labels()?;
    Ok(accuracy(&latent_logits(lp, encoder, domain.features())?, labels))
}
