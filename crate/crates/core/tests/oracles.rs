//! Worked examples with independently computed expected values.

use mpa_core::align::{
    average_logits, reconstruct_detached, train_align, AlignLossSpec, AlignerState, AutoEncoder,
};
use mpa_core::config::TrainConfig;
use mpa_core::embedstore::{sample_subset, DomainDataset, SampleStrategy, Scorer};
use mpa_core::encoder::{EncoderDescriptor, FrozenTextEncoder, Temperature, ZeroShotScorer};
use mpa_core::lst::LatentPrompt;
use mpa_core::params::OFFICE_HOME;
use mpa_core::prompt::{PromptInit, PromptLayout, PromptPair};
use mpa_core::pseudo::{generate, PseudoLabelSet};
use mpa_core::seed;
use mpa_core::stage1::{evaluate, train_pair, PairSpec};
use mpa_core::synthetic::{self, SyntheticSpec};
use mpa_core::tape::Tape;
use mpa_core::{Result, Tensor};

struct OneHot(Vec<usize>, usize);

impl Scorer for OneHot {
    fn probs(&self, _: &Tensor) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self
            .0
            .iter()
            .map(|&y| (0..self.1).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Pseudo-labels equal to the ground truth.
fn oracle_labels(d: &DomainDataset) -> PseudoLabelSet {
    let scorer = OneHot(d.labels().unwrap().to_vec(), d.num_classes());
    generate(&d.without_labels(), &scorer, 0.5).unwrap()
}

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 32,
        epochs,
        momentum: 0.0,
        seed: 0,
        temperature: Temperature::default(),
    }
}

#[test]
fn softmax_with_one_aligned_class_at_t_001() {
    let mut e = Tensor::zeros(&[2, 4]);
    e.data_mut()[0] = 1.0;
    e.data_mut()[5] = 1.0;
    let x = Tensor::from_rows(&[vec![3.0, 0.0, 0.0, 0.0]]).unwrap();
    let p = mpa_core::encoder::zero_shot_probs(&x, &e, Temperature::default()).unwrap();
    // 1 - sigmoid(100)
    assert!((p.row(0)[1] - 3.720075976020836e-44).abs() < 1e-55);
}

#[test]
fn hand_set_embeddings_at_t_1() {
    let e = Tensor::eye(4);
    let x = Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
    let p = mpa_core::encoder::zero_shot_probs(&x, &e, Temperature::fixed(1.0).unwrap()).unwrap();
    let z = 1.0f64.exp() + 3.0;
    let expected = [1.0f64.exp() / z, 1.0 / z, 1.0 / z, 1.0 / z];
    for (a, b) in p.row(0).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn text_encoder_gradient_matches_finite_differences() {
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(5, 6)).unwrap();
    let tokens = Tensor::randn(&[4, 6], 0.7, &mut seed::rng(1));
    let w = Tensor::randn(&[6], 1.0, &mut seed::rng(2));
    let f = |t: &Tensor| -> (f64, Tensor) {
        let mut tape = Tape::new();
        let be = enc.bind(&mut tape);
        let v = tape.param(t.clone());
        let e = be.encode_text(&mut tape, v, 4).unwrap();
        let e = tape.reshape(e, &[1, 6]).unwrap();
        let wv = tape.constant(w.clone().reshape(&[6, 1]).unwrap());
        let s = tape.matmul(e, wv).unwrap();
        let s = tape.sum(s);
        tape.backward(s).unwrap();
        (tape.value(s).item(), tape.grad(v))
    };
    let (_, g) = f(&tokens);
    let h = 1e-5;
    let mut num = Tensor::zeros(&[4, 6]);
    for j in 0..tokens.len() {
        let mut p = tokens.clone();
        p.data_mut()[j] += h;
        let mut m = tokens.clone();
        m.data_mut()[j] -= h;
        num.data_mut()[j] = (f(&p).0 - f(&m).0) / (2.0 * h);
    }
    let diff: f64 = g.data().iter().zip(num.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-4);
}

#[test]
fn cap_bounds_a_domainnet_sized_domain() {
    let k = 345;
    let n = k * 60 + 17;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let ds = DomainDataset::new(
        "big",
        Tensor::zeros(&[n, 2]),
        Some(labels),
        (0..k).map(|c| format!("c{c}")).collect(),
        (0..n).map(|i| format!("{i:06}")).collect(),
    )
    .unwrap();
    let sub = sample_subset(&ds, 50, SampleStrategy::Random, None, 3).unwrap();
    assert_eq!(sub.len(), 50 * k);
}

#[test]
fn separable_toy_drives_stage1_loss_near_zero() {
    let spec = SyntheticSpec {
        noise: 0.05,
        shift_norm: 0.5,
        ..SyntheticSpec::default()
    };
    let b = synthetic::generate(&spec).unwrap();
    let (src, tgt) = (&b.domains[0], &b.domains[1]);
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(11, 16)).unwrap();
    let layout = PromptLayout::new(4, 4, 4, 16).unwrap();
    let pair = PairSpec {
        layout,
        pair_index: 0,
        init: PromptInit::new(3, 0.02).unwrap(),
    };
    let r = train_pair(src, tgt, &oracle_labels(tgt), &enc, pair, &config(0.05, 200)).unwrap();
    let last = *r.loss_curve.last().unwrap();
    assert!(last < 0.05, "final loss {last}");

}

#[test]
fn separable_toy_loss_is_nearly_monotone_at_full_batch() {
    let spec = SyntheticSpec {
        noise: 0.05,
        shift_norm: 0.5,
        ..SyntheticSpec::default()
    };
    let b = synthetic::generate(&spec).unwrap();
    let (src, tgt) = (&b.domains[0], &b.domains[1]);
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(11, 16)).unwrap();
    let pair = PairSpec {
        layout: PromptLayout::new(4, 4, 4, 16).unwrap(),
        pair_index: 0,
        init: PromptInit::new(3, 0.02).unwrap(),
    };
    let cfg = TrainConfig {
        batch_size: src.len(),
        ..config(0.01, 200)
    };
    let r = train_pair(src, tgt, &oracle_labels(tgt), &enc, pair, &cfg).unwrap();
    let c = &r.loss_curve;
    let rises: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    assert!(rises.len() * 20 <= c.len(), "{} of {} epochs rose", rises.len(), c.len());
    assert!(rises.iter().all(|d| *d < 1e-3), "rises {rises:?}");
    assert!(c.last().unwrap() < &c[0]);
}

#[test]
fn two_domain_synthetic_reaches_95_percent_in_50_epochs() {
    let b = synthetic::generate(&SyntheticSpec::default()).unwrap();
    let (src, tgt) = (&b.domains[0], &b.domains[1]);
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(11, 16)).unwrap();
    let scorer = ZeroShotScorer {
        class_embeds: b.class_embeddings.clone(),
        temperature: Temperature::default(),
    };
    let pseudo = generate(&tgt.without_labels(), &scorer, 0.4).unwrap();
    let layout = PromptLayout::new(4, 16, 16, 16).unwrap();
    let pair = PairSpec {
        layout,
        pair_index: 0,
        init: PromptInit::new(3, 0.02).unwrap(),
    };
    let r = train_pair(src, tgt, &pseudo, &enc, pair, &config(0.01, 50)).unwrap();
    let acc = evaluate(&r.prompts, tgt, &enc, r.temperature).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn untrained_prompts_score_at_chance() {
    let (k, n) = (4, 400);
    let feats = Tensor::randn(&[n, 16], 1.0, &mut seed::rng(9));
    let ds = DomainDataset::new(
        "noise",
        feats,
        Some((0..n).map(|i| i % k).collect()),
        (0..k).map(|c| c.to_string()).collect(),
        (0..n).map(|i| i.to_string()).collect(),
    )
    .unwrap();
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(4, 16)).unwrap();
    let layout = PromptLayout::new(k, 2, 2, 16).unwrap();
    let p = PromptPair::init(layout, 0, PromptInit::new(8, 0.5).unwrap());
    let acc = evaluate(&p, &ds, &enc, Temperature::default()).unwrap();
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc}");
}

fn ae_only() -> AlignLossSpec {
    AlignLossSpec {
        alpha: 0.0,
        use_cls: false,
        use_l1: false,
        use_ae: true,
    }
}

fn slab_error(state: &AlignerState, pair: usize) -> f64 {
    let (c, t) = reconstruct_detached(state, pair).unwrap();
    let p = &state.prompts()[pair];
    let k = p.layout().classes;
    let m1 = p.layout().context_len;
    let ctx: f64 = c.data().iter().zip(p.context.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let tok: f64 = t.data().iter().zip(p.target_tokens.data()).map(|(a, b)| (a - b).powi(2)).sum();
    assert_eq!(c.len(), k * m1 * p.layout().dim);
    ctx + tok
}

#[test]
fn full_width_autoencoder_overfits_one_prompt() {
    let layout = PromptLayout::new(2, 2, 2, 8).unwrap();
    let p = PromptPair::init(layout, 0, PromptInit::new(1, 0.3).unwrap());
    let state = AlignerState::new(vec![p], 8, 16, false, 0.0, Temperature::default(), 2).unwrap();
    let target = DomainDataset::new("t", Tensor::zeros(&[0, 8]), None, vec!["a".into(), "b".into()], vec![]).unwrap();
    let empty = generate(&target, &OneHot(vec![], 2), 0.5).unwrap();
    let mut cfg = config(0.5, 3000);
    cfg.momentum = 0.9;
    let (trained, curves) = train_align(state, &FrozenTextEncoder::new(EncoderDescriptor::new(0, 8)).unwrap(), &target, &empty, &cfg, ae_only(), false).unwrap();
    assert!(curves.ae.last() < curves.ae.first());
    let err = slab_error(&trained, 0);
    assert!(err < 1e-4, "squared error {err}");
}

#[test]
fn identity_autoencoders_reconstruct_small_slabs() {
    let d = 6;
    let ident = AutoEncoder {
        proj_weight: Tensor::eye(d),
        proj_bias: Tensor::zeros(&[d]),
        hidden_weight: Tensor::eye(d),
        hidden_bias: Tensor::zeros(&[d]),
        out_weight: Tensor::eye(d),
        out_bias: Tensor::zeros(&[d]),
    };
    let layout = PromptLayout::new(3, 2, 2, d).unwrap();
    let mut rng = seed::rng(4);
    let draw = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        let t = Tensor::randn(shape, 1.0, rng);
        let data = t.data().iter().map(|x| (x * 0.004).clamp(-0.01, 0.01)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let p = PromptPair::from_parts(
        layout,
        0,
        0,
        draw(&layout.context_shape(), &mut rng),
        draw(&layout.tokens_shape(), &mut rng),
        draw(&layout.tokens_shape(), &mut rng),
    )
    .unwrap();
    let state = AlignerState::from_parts(vec![ident.clone(), ident], vec![p], 1.0, Temperature::default()).unwrap();
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, false, false);
    let recon = bound.reconstruct_all(&mut tape).unwrap();
    let l = bound.loss_ae(&mut tape, &recon).unwrap();
    assert!(tape.value(l).item() < 1e-6);
    assert!(slab_error(&state, 0) < 1e-6);
}

#[test]
fn reconstruction_only_training_decreases_every_epoch() {
    let b = synthetic::generate(&SyntheticSpec::default()).unwrap();
    let tgt = &b.domains[3];
    let enc = FrozenTextEncoder::new(EncoderDescriptor::new(11, 16)).unwrap();
    let layout = PromptLayout::new(4, 4, 4, 16).unwrap();
    let prompts = (0..3)
        .map(|i| PromptPair::init(layout, i, PromptInit::new(i as u64, 0.3).unwrap()))
        .collect();
    let state = AlignerState::new(prompts, 8, 32, false, 0.0, Temperature::default(), 5).unwrap();
    let mut cfg = config(0.05, 10);
    cfg.temperature = Temperature::default();
    let (_, curves) = train_align(state, &enc, tgt, &oracle_labels(tgt), &cfg, ae_only(), false).unwrap();
    assert_eq!(curves.ae.len(), 10);
    assert!(curves.ae.windows(2).all(|w| w[1] < w[0]), "{:?}", curves.ae);
}

#[test]
fn averaged_logits_follow_the_majority() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let mean = average_logits(&[a.clone(), a, b]);
    assert!(mean.row(0)[0] > mean.row(0)[1]);
    assert!((mean.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn office_home_latent_decodes_to_prompt_shapes() {
    let shape = OFFICE_HOME.shape;
    let layout = shape.layout();
    let p = PromptPair::init(layout, 0, PromptInit::new(0, 0.02).unwrap());
    let state = AlignerState::new(vec![p], shape.latent_dim, shape.hidden, false, 500.0, Temperature::default(), 0).unwrap();
    let lp = LatentPrompt::init(&state, 1);
    assert_eq!(lp.v_tune.shape(), &[65, 16, 150]);
    assert_eq!(lp.d_tune.shape(), &[16, 150]);
    assert_eq!(lp.param_count(), 158_400);
    let (c, t) = lp.decode_detached().unwrap();
    assert_eq!(c.shape(), &[65, 16, 512]);
    assert_eq!(t.shape(), &[16, 512]);
}
