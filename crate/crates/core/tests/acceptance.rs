//! Acceptance run: one line per criterion, non-zero exit on any unexpected
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mpa_core::align::{align_loss, pairwise_l1, AlignLossSpec, AlignerState, AutoEncoder};
use mpa_core::config::Hyperparameters;
use mpa_core::embedstore::{DomainDataset, Scorer};
use mpa_core::encoder::{EncoderDescriptor, FrozenTextEncoder, Temperature};
use mpa_core::lst::{lst_loss, LatentPrompt};
use mpa_core::manifest::Manifest;
use mpa_core::params::{DOMAINNET, IMAGECLEF, OFFICE_HOME};
use mpa_core::pipeline::run_pipeline;
use mpa_core::prompt::{BoundPrompt, PromptInit, PromptLayout, PromptPair};
use mpa_core::pseudo;
use mpa_core::report::ExperimentReport;
use mpa_core::seed;
use mpa_core::stage1::{stage1_loss, LabeledBatch};
use mpa_core::synthetic::{benchmark_hyperparameters, generate, write_benchmark, SyntheticSpec};
use mpa_core::tape::{Tape, Var};
use mpa_core::{Result, Tensor};

type Outcome = std::result::Result<String, String>;

struct Verdict {
    name: &'static str,
    outcome: Outcome,
    /// Failure that is known to be unreachable and documented.
    known: Option<&'static str>,
}

fn main() {
    let started = Instant::now();
    let mut verdicts = vec![
        run("gradient suite", gradient_suite),
        param_oracle(),
        run("normalization", normalization),
        run("renormalization identity", renormalization),
        run("strict pseudo-label threshold", strict_threshold),
    ];
    let work = tempfile::tempdir().expect("temp dir");
    let bench = Bench::new(work.path());
    verdicts.push(run("synthetic end-to-end", || bench.end_to_end()));
    verdicts.push(run("L1 properties", || bench.l1_properties()));
    verdicts.push(run("latent subspace tuning", || bench.lst()));
    verdicts.push(run("determinism", || bench.determinism()));
    verdicts.push(run("ablation flags", || bench.ablations()));

    let mut unexpected = 0;
    for v in &verdicts {
        match (&v.outcome, v.known) {
            (Ok(detail), _) => println!("PASS  {}: {detail}", v.name),
            (Err(why), Some(note)) => println!("FAIL  {}: {why} [known: {note}]", v.name),
            (Err(why), None) => {
                unexpected += 1;
                println!("FAIL  {}: {why}", v.name)
            }
        }
    }
    let passed = verdicts.iter().filter(|v| v.outcome.is_ok()).count();
    println!(
        "{passed}/{} criteria passed in {:.1}s",
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}

fn run(name: &'static str, f: impl FnOnce() -> Outcome) -> Verdict {
    Verdict {
        name,
        outcome: f(),
        known: None,
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ctx<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

// ---------------------------------------------------------------- gradients

const INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_T: f64 = 0.2;

struct GradInstance {
    k: usize,
    layout: PromptLayout,
    encoder: FrozenTextEncoder,
    features: Tensor,
    labels: Vec<usize>,
    source_features: Tensor,
    source_labels: Vec<usize>,
    prompts: Vec<PromptPair>,
    autoencoders: Vec<AutoEncoder>,
}

impl GradInstance {
    fn new(i: usize) -> Result<Self> {
        let mut rng = seed::rng(seed::derive(2024, "gradient-instance", i as u64));
        let k = rng.gen_range(2..=5);
        let (d, latent, hidden) = (8, 4, 6);
        let layout = PromptLayout::new(k, 2, 2, d)?;
        let encoder = FrozenTextEncoder::new(EncoderDescriptor::new(rng.gen(), d))?;
        let b = 5;
        let labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let source_labels = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let features = randn(&[b, d], 1.0, &mut rng);
        let source_features = randn(&[b, d], 1.0, &mut rng);
        let prompts = (0..3)
            .map(|p| PromptPair::init(layout, p, PromptInit::new(rng.gen(), 0.5).expect("scale")))
            .collect();
        let autoencoders = (0..2).map(|_| AutoEncoder::init(d, latent, hidden, &mut rng)).collect();
        Ok(GradInstance {
            k,
            layout,
            encoder,
            features,
            labels,
            source_features,
            source_labels,
            prompts,
            autoencoders,
        })
    }

    fn ae_params(&self) -> Vec<Tensor> {
        self.autoencoders
            .iter()
            .flat_map(|ae| ae.tensors().map(Tensor::clone))
            .collect()
    }

    fn aligner(&self, params: &[Tensor]) -> Result<AlignerState> {
        let aes = params
            .chunks(6)
            .map(|c| AutoEncoder {
                proj_weight: c[0].clone(),
                proj_bias: c[1].clone(),
                hidden_weight: c[2].clone(),
                hidden_bias: c[3].clone(),
                out_weight: c[4].clone(),
                out_bias: c[5].clone(),
            })
            .collect();
        AlignerState::from_parts(aes, self.prompts.clone(), 1.0, Temperature::fixed(GRAD_T)?)
    }
}

/// Largest relative error between the tape gradient and central differences.
fn grad_error(
    params: &[Tensor],
    value: &dyn Fn(&[Tensor]) -> Result<f64>,
    analytic: &dyn Fn(&[Tensor]) -> Result<Vec<Tensor>>,
) -> Result<f64> {
    let h = 1e-5;
    let grads = analytic(params)?;
    let mut worst: f64 = 0.0;
    for (which, g) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; g.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[which].data_mut()[j] += h;
            let mut minus = params.to_vec();
            minus[which].data_mut()[j] -= h;
            *slot = (value(&plus)? - value(&minus)?) / (2.0 * h);
        }
        let diff: f64 = g.data().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nb).max(1e-10));
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum AlignTerm {
    Ae,
    L1,
    Cls,
}

fn align_term(inst: &GradInstance, params: &[Tensor], term: AlignTerm, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let state = inst.aligner(params)?;
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, true, false);
    let enc = inst.encoder.bind(&mut tape);
    let temp = state.temperature.bind(&mut tape);
    let spec = AlignLossSpec {
        alpha: 1.0,
        use_cls: true,
        use_l1: true,
        use_ae: true,
    };
    let losses = align_loss(&mut tape, &bound, &enc, &temp, &inst.features, &inst.labels, spec)?;
    let out = match term {
        AlignTerm::Ae => losses.ae,
        AlignTerm::L1 => losses.l1,
        AlignTerm::Cls => losses.cls,
    };
    let v = tape.value(out).item();
    if !grads {
        return Ok((v, Vec::new()));
    }
    tape.backward(out)?;
    Ok((v, bound.ae_vars().iter().map(|&x| tape.grad(x)).collect()))
}

fn stage1_value(inst: &GradInstance, params: &[Tensor], grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let prompts = BoundPrompt {
        layout: inst.layout,
        context: vars[0],
        source_tokens: vars[1],
        target_tokens: vars[2],
    };
    let enc = inst.encoder.bind(&mut tape);
    let temp = Temperature::fixed(GRAD_T)?.bind(&mut tape);
    let source = LabeledBatch {
        features: &inst.source_features,
        labels: &inst.source_labels,
    };
    let target = LabeledBatch {
        features: &inst.features,
        labels: &inst.labels,
    };
    let loss = stage1_loss(&mut tape, &prompts, &enc, &temp, source, target)?;
    let v = tape.value(loss).item();
    if !grads {
        return Ok((v, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((v, vars.iter().map(|&x| tape.grad(x)).collect()))
}

fn lst_value(inst: &GradInstance, base: &LatentPrompt, params: &[Tensor], grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let lp = base.clone().with_latents(params[0].clone(), params[1].clone())?;
    let mut tape = Tape::new();
    let bound = lp.bind(&mut tape);
    let temp = Temperature::fixed(GRAD_T)?.bind(&mut tape);
    let loss = lst_loss(&mut tape, &inst.encoder, &bound, &temp, &inst.features, &inst.labels)?;
    let v = tape.value(loss).item();
    if !grads {
        return Ok((v, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((v, vec![tape.grad(bound.v_tune), tape.grad(bound.d_tune)]))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for i in 0..INSTANCES {
        let inst = ctx(GradInstance::new(i))?;
        if inst.k > 5 {
            return Err(format!("instance {i} has K = {}", inst.k));
        }

        let p = &inst.prompts[0];
        let params = vec![p.context.clone(), p.source_tokens.clone(), p.target_tokens.clone()];
        let e = ctx(grad_error(
            &params,
            &|x| stage1_value(&inst, x, false).map(|r| r.0),
            &|x| stage1_value(&inst, x, true).map(|r| r.1),
        ))?;
        record("stage-1 contrastive", e);

        let ae = inst.ae_params();
        for (name, term) in [
            ("reconstruction", AlignTerm::Ae),
            ("pairwise L1", AlignTerm::L1),
            ("reconstructed CE", AlignTerm::Cls),
        ] {
            let e = ctx(grad_error(
                &ae,
                &|x| align_term(&inst, x, term, false).map(|r| r.0),
                &|x| align_term(&inst, x, term, true).map(|r| r.1),
            ))?;
            record(name, e);
        }

        let state = ctx(inst.aligner(&ae))?;
        let base = LatentPrompt::init_scaled(&state, i as u64, 0.5);
        let params = vec![base.v_tune.clone(), base.d_tune.clone()];
        let e = ctx(grad_error(
            &params,
            &|x| lst_value(&inst, &base, x, false).map(|r| r.0),
            &|x| lst_value(&inst, &base, x, true).map(|r| r.1),
        ))?;
        record("latent tuning", e);
    }
    let elapsed = started.elapsed();
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let bad: Vec<_> = worst.iter().filter(|(_, &v)| !(v < GRAD_TOL)).collect();
    check(bad.is_empty(), || format!("relative error >= {GRAD_TOL}: {summary}"))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{INSTANCES} instances per loss, worst {summary}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- params

fn param_oracle() -> Verdict {
    const LST_OFFICE_HOME: &str = "LST office-home";
    let checks = [
        ("MPA imageclef", IMAGECLEF.shape.total(), 0.78e6, 0.05),
        ("MPA office-home", OFFICE_HOME.shape.total(), 2.36e6, 0.05),
        ("MPA domainnet", DOMAINNET.shape.total(), 15.9e6, 0.10),
        ("LST imageclef", IMAGECLEF.shape.lst(), 0.02e6, 0.05),
        (LST_OFFICE_HOME, OFFICE_HOME.shape.lst(), 0.17e6, 0.05),
        ("LST domainnet", DOMAINNET.shape.lst(), 1.47e6, 0.10),
    ];
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (name, count, published, band) in checks {
        let rel = (count as f64 - published).abs() / published;
        lines.push(format!("{name} {count} ({:+.1}%)", 100.0 * (count as f64 - published) / published));
        if rel > band {
            failed.push(name);
        }
    }
    let detail = lines.join(", ");
    let outcome = if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("outside band: {}; {detail}", failed.join(", ")))
    };
    let known = (failed == [LST_OFFICE_HOME])
        .then_some("closed-form K·M1·d_I + M2·d_I gives 158,400, 6.8% under 0.17M");
    Verdict {
        name: "parameter-count oracle",
        outcome,
        known,
    }
}

// ---------------------------------------------------------------- probabilities

fn random_prompt(rng: &mut ChaCha8Rng) -> Result<(PromptPair, FrozenTextEncoder, Tensor, Temperature)> {
    let k = rng.gen_range(1..=6);
    let m1 = rng.gen_range(1..=3);
    let m2 = rng.gen_range(1..=3);
    let d = rng.gen_range(2..=10);
    let layout = PromptLayout::new(k, m1, m2, d)?;
    let scale = rng.gen_range(0.01..2.0);
    let pair = PromptPair::init(layout, 0, PromptInit::new(rng.gen(), scale)?);
    let encoder = FrozenTextEncoder::new(EncoderDescriptor::new(rng.gen(), d))?;
    let feature = randn(&[d], rng.gen_range(0.1..3.0), rng);
    let t = Temperature::fixed(rng.gen_range(0.01..1.0))?;
    Ok((pair, encoder, feature, t))
}

fn prompt_probs(pair: &PromptPair, encoder: &FrozenTextEncoder, feature: &Tensor, t: Temperature) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = pair.bind(&mut tape, false);
    let enc = encoder.bind(&mut tape);
    let temp = t.bind(&mut tape);
    let f = tape.constant(feature.clone());
    let train = p.train_probs(&mut tape, &enc, f, &temp)?;
    let target = p.predict_target(&mut tape, &enc, f, &temp)?;
    Ok((tape.value(train).clone(), tape.value(target).clone()))
}

fn normalization() -> Outcome {
    let mut rng = seed::rng(seed::derive(7, "normalization", 0));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (pair, enc, f, t) = ctx(random_prompt(&mut rng))?;
        let (train, target) = ctx(prompt_probs(&pair, &enc, &f, t))?;
        let k = pair.layout().classes;
        check(train.len() == 2 * k && target.len() == k, || "wrong widths".into())?;
        worst = worst
            .max((train.data().iter().sum::<f64>() - 1.0).abs())
            .max((target.data().iter().sum::<f64>() - 1.0).abs());
    }
    check(worst < 1e-9, || format!("|sum - 1| reached {worst:.1e}"))?;
    Ok(format!("1000 configurations, max |sum - 1| = {worst:.1e}"))
}

fn renormalization() -> Outcome {
    let mut rng = seed::rng(seed::derive(7, "renormalization", 0));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (pair, enc, f, t) = ctx(random_prompt(&mut rng))?;
        let (train, target) = ctx(prompt_probs(&pair, &enc, &f, t))?;
        let k = pair.layout().classes;
        let block = &train.data()[k..];
        let mass: f64 = block.iter().sum();
        for (a, b) in block.iter().zip(target.data()) {
            worst = worst.max((a / mass - b).abs());
        }
    }
    check(worst <= 1e-12, || format!("max deviation {worst:.1e}"))?;
    Ok(format!("1000 configurations, max deviation {worst:.1e}"))
}

struct FixedScorer(Tensor);

impl Scorer for FixedScorer {
    fn probs(&self, _: &Tensor) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

fn strict_threshold() -> Outcome {
    let mut rng = seed::rng(seed::derive(7, "threshold", 0));
    let k = 4;
    for case in 0..1000 {
        let tau: f64 = if case == 0 { 0.4 } else { rng.gen_range(0.25..1.0) };
        let above = f64::from_bits(tau.to_bits() + 1);
        let below = f64::from_bits(tau.to_bits() - 1);
        let rows: Vec<Vec<f64>> = [tau, above, below]
            .iter()
            .map(|&top| {
                let mut r = vec![(1.0 - top) / (k - 1) as f64; k];
                r[0] = top;
                r
            })
            .collect();
        let probs = ctx(Tensor::from_rows(&rows))?;
        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let ids: Vec<String> = ["at", "above", "below"].map(String::from).to_vec();
        let ds = ctx(DomainDataset::new("t", Tensor::zeros(&[3, 2]), None, names, ids))?;
        let set = ctx(pseudo::generate(&ds, &FixedScorer(probs), tau))?;
        check(set.get("at").is_none(), || format!("tau = {tau} kept its boundary sample"))?;
        check(set.get("above").is_some(), || format!("tau = {tau} dropped the next float up"))?;
        check(set.get("below").is_none(), || format!("tau = {tau} kept a sample below"))?;
    }
    Ok("1000 thresholds, boundary excluded and next float up kept".into())
}

// ---------------------------------------------------------------- synthetic runs

const SYNTHETIC_SEED: u64 = 1;

fn encoder() -> EncoderDescriptor {
    EncoderDescriptor::new(11, 16)
}

struct Bench<'a> {
    root: &'a Path,
    full: Manifest,
    lst: Manifest,
    hyper: Hyperparameters,
    report: std::result::Result<(ExperimentReport, Duration), String>,
}

impl<'a> Bench<'a> {
    fn new(root: &'a Path) -> Self {
        let spec = SyntheticSpec {
            seed: SYNTHETIC_SEED,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).expect("synthetic benchmark");
        let full = write_benchmark(&data, root.join("full"), &["alpha", "beta", "gamma"], "delta", &[], encoder())
            .expect("write benchmark");
        let lst = write_benchmark(&data, root.join("lst"), &["alpha", "beta"], "gamma", &["delta"], encoder())
            .expect("write benchmark");
        let hyper = benchmark_hyperparameters();
        let started = Instant::now();
        let report = run_pipeline(&full, &hyper, root.join("full/out"))
            .map(|r| (r, started.elapsed()))
            .map_err(|e| e.to_string());
        Bench {
            root,
            full,
            lst,
            hyper,
            report,
        }
    }

    fn report(&self) -> std::result::Result<&ExperimentReport, String> {
        self.report.as_ref().map(|r| &r.0).map_err(Clone::clone)
    }

    fn end_to_end(&self) -> Outcome {
        let (report, elapsed) = self.report.as_ref().map_err(Clone::clone)?;
        let s1 = report.stage1_accuracies().ok_or("target has no labels")?;
        let s2 = report.stage2.per_prompt_accuracy.clone().ok_or("no stage-2 accuracy")?;
        let avg = report.stage2.averaged_accuracy.ok_or("no averaged accuracy")?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let best = s2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let detail = format!(
            "stage 1 {s1:?} (mean {:.4}), stage 2 {s2:?} (mean {:.4}), averaged {avg:.4}, {:.1}s",
            mean(&s1),
            mean(&s2),
            elapsed.as_secs_f64()
        );
        check(s1.len() == 3, || format!("expected 3 pairs: {detail}"))?;
        check(s1.iter().all(|&a| a >= 0.95), || format!("a pair is below 95%: {detail}"))?;
        check(mean(&s2) >= mean(&s1), || format!("stage 2 trails stage 1: {detail}"))?;
        check(avg >= best - 0.01, || format!("averaging loses accuracy: {detail}"))?;
        check(*elapsed < Duration::from_secs(120), || format!("too slow: {detail}"))?;
        Ok(detail)
    }

    fn l1_properties(&self) -> Outcome {
        let inst = ctx(GradInstance::new(0))?;
        let temp = ctx(Temperature::fixed(GRAD_T))?;
        let spec = AlignLossSpec {
            alpha: 1.0,
            use_cls: true,
            use_l1: true,
            use_ae: true,
        };
        let l1_of = |prompts: Vec<PromptPair>| -> std::result::Result<f64, String> {
            let state = ctx(AlignerState::from_parts(inst.autoencoders.clone(), prompts, 1.0, temp))?;
            let mut tape = Tape::new();
            let bound = state.bind(&mut tape, true, false);
            let enc = inst.encoder.bind(&mut tape);
            let t = temp.bind(&mut tape);
            let losses = ctx(align_loss(&mut tape, &bound, &enc, &t, &inst.features, &inst.labels, spec))?;
            Ok(tape.value(losses.l1).item())
        };
        let p = inst.prompts[0].clone();
        let same = l1_of(vec![p.clone(), p.clone(), p.clone()])?;
        check(same == 0.0, || format!("identical reconstructions give {same}"))?;
        let single = l1_of(vec![inst.prompts[1].clone()])?;
        check(single == 0.0, || format!("a single prompt gives {single}"))?;
        let distinct = l1_of(inst.prompts.clone())?;
        check(distinct > 0.0, || "distinct prompts give zero".into())?;

        let mut tape = Tape::new();
        let probs: Vec<Var> = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
            .iter()
            .map(|r| tape.constant(Tensor::from_rows(&[r.to_vec()]).expect("row")))
            .collect();
        let hand = ctx(pairwise_l1(&mut tape, &probs))?;
        let hand = tape.value(hand).item();
        check((hand - 4.0 / 3.0).abs() <= 1e-12, || format!("hand example gives {hand}"))?;

        let report = self.report()?;
        let l1 = &report.stage2.curves.l1;
        let (first, last) = (l1.first().copied(), l1.last().copied());
        match (first, last) {
            (Some(a), Some(b)) if b < a => Ok(format!(
                "zero for identical and single, hand example {hand:.15}, training {a:.4} -> {b:.4}"
            )),
            _ => Err(format!("L1 did not decrease: {first:?} -> {last:?}")),
        }
    }

    fn lst(&self) -> Outcome {
        let full = self.report()?;
        let full_acc = full.stage2.averaged_accuracy.ok_or("no averaged accuracy")?;
        let report = ctx(run_pipeline(&self.lst, &self.hyper, self.root.join("lst/out")))?;
        let entry = report.lst.first().ok_or("no latent tuning ran")?;
        let acc = entry.accuracy.ok_or("unseen domain has no labels")?;
        let detail = format!(
            "tuned {acc:.4} vs full retraining {full_acc:.4}, {} trainable vs {} per pair",
            entry.params, report.params.pair
        );
        check(full_acc - acc <= 0.02, || format!("gap above 2 points: {detail}"))?;
        check(entry.params < report.params.pair, || format!("too many parameters: {detail}"))?;
        Ok(detail)
    }

    fn determinism(&self) -> Outcome {
        let a = self.root.join("det/a");
        let b = self.root.join("det/b");
        ctx(run_pipeline(&self.lst, &self.hyper, &a))?;
        let mut threaded = self.hyper.clone();
        threaded.workers = 2;
        ctx(run_pipeline(&self.lst, &self.hyper, &b))?;
        let c = self.root.join("det/c");
        ctx(run_pipeline(&self.lst, &threaded, &c))?;
        let files = tree(&a)?;
        check(!files.is_empty(), || "no artifacts written".into())?;
        for (other, label) in [(&b, "rerun"), (&c, "two workers")] {
            let theirs = tree(other)?;
            check(files.keys().eq(theirs.keys()), || format!("{label} wrote different files"))?;
            for (name, bytes) in &files {
                if name == "report.json" && label == "two workers" {
                    continue;
                }
                check(theirs[name] == *bytes, || format!("{label}: {name} differs"))?;
            }
        }
        Ok(format!(
            "{} artifacts byte-identical across reruns; checkpoints also identical with two workers",
            files.len()
        ))
    }

    fn ablations(&self) -> Outcome {
        let base = self.report()?;
        let base_ckpt = fs::read(self.root.join("full/out/aligner.ckpt")).map_err(|e| e.to_string())?;
        let mut notes = Vec::new();
        for flag in ["no-l1", "no-ae", "single-ae"] {
            let mut h = self.hyper.clone();
            match flag {
                "no-l1" => h.stage2.no_l1 = true,
                "no-ae" => h.stage2.no_ae = true,
                _ => h.stage2.single_ae = true,
            }
            let out = self.root.join(format!("ablation/{flag}"));
            let r = ctx(run_pipeline(&self.full, &h, &out))?;
            let ckpt = fs::read(out.join("aligner.ckpt")).map_err(|e| e.to_string())?;
            check(ckpt != base_ckpt, || format!("{flag} left the aligner unchanged"))?;
            check(r.stage2.curves != base.stage2.curves, || format!("{flag} left the curves unchanged"))?;
            if flag == "single-ae" {
                check(r.params.stage2 == r.params.autoencoder, || "single-ae still counts two autoencoders".into())?;
            }
            notes.push(format!("{flag} averaged {:.4}", r.stage2.averaged_accuracy.unwrap_or(f64::NAN)));
        }
        Ok(notes.join(", "))
    }
}

fn tree(root: &Path) -> std::result::Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
                out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}
