//! Stage one: train one prompt pair on labeled source samples and
//! pseudo-labeled target samples.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::embedstore::{argmax, DomainDataset};
use crate::encoder::{BoundEncoder, BoundTemperature, FrozenTextEncoder, Temperature};
use crate::error::{MpaError, Result};
use crate::optim::{CosineSchedule, Sgd};
use crate::prompt::{cosine_logits, BoundPrompt, PromptInit, PromptLayout, PromptPair};
use crate::pseudo::PseudoLabelSet;
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Result {
    pub prompts: PromptPair,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Target accuracy after each epoch, when the target has labels.
    pub accuracy_curve: Option<Vec<f64>>,
    /// Final temperature (differs from the configured one only when trainable).
    pub temperature: Temperature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Curves {
    pub loss: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
    pub temperature: f64,
}

impl Stage1Result {
    pub fn curves(&self) -> Stage1Curves {
        Stage1Curves {
            loss: self.loss_curve.clone(),
            accuracy: self.accuracy_curve.clone(),
            temperature: self.temperature.value,
        }
    }
}

/// A batch of features with labels in `[0, K)`.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
}

/// Mean source cross-entropy over the 2K-way probabilities with labels in the
/// source block, plus the same for target samples with labels in the target
/// block. An empty batch contributes nothing.
pub fn stage1_loss(
    tape: &mut Tape,
    prompts: &BoundPrompt,
    encoder: &BoundEncoder,
    temperature: &BoundTemperature,
    source: LabeledBatch<'_>,
    target: LabeledBatch<'_>,
) -> Result<Var> {
    let k = prompts.layout.classes;
    for &y in source.labels.iter().chain(target.labels) {
        if y >= k {
            return Err(MpaError::Index {
                what: "class label",
                index: y,
                bound: k,
            });
        }
    }
    let embeds = prompts.embed_all(tape, encoder)?;
    let mut terms = Vec::with_capacity(2);
    if !source.labels.is_empty() {
        let f = tape.constant(source.features.clone());
        let z = cosine_logits(tape, f, embeds, temperature)?;
        terms.push(tape.cross_entropy_rows(z, source.labels)?);
    }
    if !target.labels.is_empty() {
        let f = tape.constant(target.features.clone());
        let z = cosine_logits(tape, f, embeds, temperature)?;
        let shifted: Vec<usize> = target.labels.iter().map(|y| y + k).collect();
        terms.push(tape.cross_entropy_rows(z, &shifted)?);
    }
    match terms.as_slice() {
        [] => Err(MpaError::Contract("stage-1 loss over two empty batches".into())),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Checks that two domains can be trained together.
pub(crate) fn check_compatible(a: &DomainDataset, b: &DomainDataset, layout: PromptLayout) -> Result<()> {
    if a.class_names() != b.class_names() {
        return Err(MpaError::Validation(format!(
            "class lists of {} and {} differ",
            a.name(),
            b.name()
        )));
    }
    for ds in [a, b] {
        if ds.dim() != layout.dim {
            return Err(MpaError::Validation(format!(
                "domain {} has d_c = {}, expected {}",
                ds.name(),
                ds.dim(),
                layout.dim
            )));
        }
        if ds.num_classes() != layout.classes {
            return Err(MpaError::Validation(format!(
                "domain {} has {} classes, expected {}",
                ds.name(),
                ds.num_classes(),
                layout.classes
            )));
        }
    }
    Ok(())
}

/// Cycling shuffled iterator over a fixed index pool.
pub(crate) struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(pool: Vec<usize>) -> Self {
        Cycler {
            order: Vec::new(),
            pos: 0,
            pool,
        }
    }

    pub fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Geometry, index and initialization of one pair's prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSpec {
    pub layout: PromptLayout,
    pub pair_index: usize,
    pub init: PromptInit,
}

/// Trains the prompts of one source-target pair.
///
/// An epoch is one pass over the shuffled source domain; every step pairs a
/// source batch with a batch drawn from an independently shuffled, cycling
/// iterator over the pseudo-labeled target samples. Only prompt parameters
/// (and the temperature, when trainable) change.
pub fn train_pair(
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo: &PseudoLabelSet,
    encoder: &FrozenTextEncoder,
    spec: PairSpec,
    cfg: &TrainConfig,
) -> Result<Stage1Result> {
    let PairSpec {
        layout,
        pair_index,
        init,
    } = spec;
    cfg.validate()?;
    check_compatible(source, target, layout)?;
    if encoder.dim() != layout.dim {
        return Err(MpaError::Validation(format!(
            "encoder width {} differs from d_c = {}",
            encoder.dim(),
            layout.dim
        )));
    }
    let source_labels = source.require_labels()?;
    let (target_rows, target_labels) = pseudo.labeled_rows(target);

    let mut prompts = PromptPair::init(layout, pair_index, init);
    let mut temperature = cfg.temperature;
    let n_s = source.len();
    let steps_per_epoch = n_s.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = seed::rng(seed::derive(cfg.seed, "stage1-batches", pair_index as u64));
    let mut target_iter = Cycler::new((0..target_rows.len()).collect());

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut accuracy_curve = target.labels().map(|_| Vec::with_capacity(cfg.epochs));
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_s).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let src_x = source.gather_features(chunk);
            let src_y: Vec<usize> = chunk.iter().map(|&i| source_labels[i]).collect();
            let picks = target_iter.take(cfg.batch_size, &mut rng);
            let tgt_idx: Vec<usize> = picks.iter().map(|&p| target_rows[p]).collect();
            let tgt_x = target.gather_features(&tgt_idx);
            let tgt_y: Vec<usize> = picks.iter().map(|&p| target_labels[p]).collect();

            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape);
            let bp = prompts.bind(&mut tape, true);
            let bt = temperature.bind(&mut tape);
            let loss = stage1_loss(
                &mut tape,
                &bp,
                &enc,
                &bt,
                LabeledBatch {
                    features: &src_x,
                    labels: &src_y,
                },
                LabeledBatch {
                    features: &tgt_x,
                    labels: &tgt_y,
                },
            )?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item();

            let lr = schedule.lr(step);
            let grads = [
                tape.grad(bp.context),
                tape.grad(bp.source_tokens),
                tape.grad(bp.target_tokens),
            ];
            opt.step(
                &mut [
                    &mut prompts.context,
                    &mut prompts.source_tokens,
                    &mut prompts.target_tokens,
                ],
                &grads,
                lr,
            );
            if let Some(tv) = bt.var() {
                let g = tape.grad(tv).item();
                temperature.value = (temperature.value - lr * g).max(Temperature::FLOOR);
            }
            step += 1;
        }
        loss_curve.push(if steps_per_epoch == 0 {
            0.0
        } else {
            epoch_loss / steps_per_epoch as f64
        });
        if let Some(curve) = accuracy_curve.as_mut() {
            curve.push(evaluate(&prompts, target, encoder, temperature)?);
        }
    }
    Ok(Stage1Result {
        prompts,
        loss_curve,
        accuracy_curve,
        temperature,
    })
}

/// `[n, K]` target-prompt logits for a feature matrix, without gradients.
pub fn target_logits(
    prompts: &PromptPair,
    encoder: &FrozenTextEncoder,
    features: &Tensor,
    temperature: Temperature,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape);
    let bp = prompts.bind(&mut tape, false);
    let embeds = bp.embed_target(&mut tape, &enc)?;
    crate::encoder::cosine_logits(features, tape.value(embeds), temperature.value)
}

/// Top-1 accuracy of the target prompts against ground-truth labels.
pub fn evaluate(
    prompts: &PromptPair,
    target: &DomainDataset,
    encoder: &FrozenTextEncoder,
    temperature: Temperature,
) -> Result<f64> {
    let labels = target.require_labels()?;
    if target.is_empty() {
        return Err(MpaError::Contract(format!("domain {} is empty", target.name())));
    }
    let logits = target_logits(prompts, encoder, target.features(), temperature)?;
    Ok(accuracy(&logits, labels))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, y)| argmax(logits.row(*i)) == **y)
        .count();
    correct as f64 / labels.len() as f64
}
