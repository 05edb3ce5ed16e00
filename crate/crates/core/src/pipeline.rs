//! End-to-end orchestration: pseudo-labels, stage one per pair, stage two,
//! and latent tuning for every unseen domain.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::align::{evaluate_aligner, per_prompt_logits, average_logits, train_align, AlignCurves, AlignLossSpec, AlignerState};
use crate::config::Hyperparameters;
use crate::embedstore::{argmax, sample_subset, DomainDataset};
use crate::encoder::{softmax_rows, FrozenTextEncoder, Temperature, ZeroShotScorer};
use crate::error::{MpaError, Result};
use crate::lst::{evaluate_latent, tune, LatentPrompt, LstResult};
use crate::manifest::{Experiment, Manifest};
use crate::params::ModelShape;
use crate::prompt::{PromptInit, PromptLayout};
use crate::pseudo::{coverage_report, generate, write_pseudo_file, PseudoLabelSet};
use crate::report::{
    confidence_histogram, ExperimentReport, ExperimentSummary, Histograms, LstReport, PairReport, PseudoReport,
    SeedReport, Stage2Report,
};
use crate::seed;
use crate::stage1::{evaluate, train_pair, PairSpec, Stage1Result};

pub fn prompt_seed(base: u64, pair: usize) -> u64 {
    seed::derive(base, "prompt-init", pair as u64)
}

pub fn autoencoder_seed(base: u64) -> u64 {
    seed::derive(base, "autoencoder-init", 0)
}

pub fn latent_seed(base: u64, domain: usize) -> u64 {
    seed::derive(base, "latent-init", domain as u64)
}

pub fn subset_seed(base: u64, domain: usize) -> u64 {
    seed::derive(base, "subset", domain as u64)
}

/// The frozen zero-shot classifier. Its temperature never trains.
pub fn zero_shot_scorer(exp: &Experiment, hyper: &Hyperparameters) -> Result<ZeroShotScorer> {
    Ok(ZeroShotScorer {
        class_embeds: exp.class_embeddings.clone(),
        temperature: Temperature::fixed(hyper.temperature)?,
    })
}

pub fn layout(exp: &Experiment, hyper: &Hyperparameters) -> Result<PromptLayout> {
    PromptLayout::new(exp.target.num_classes(), hyper.m1, hyper.m2, exp.encoder.dim())
}

/// Loads the manifest's datasets and applies per-class subsampling when
/// configured. Domain `i` of sources, target, unseen (in that order) uses
/// subset seed `i`.
pub fn load(manifest: &Manifest, hyper: &Hyperparameters) -> Result<Experiment> {
    hyper.validate()?;
    let mut exp = manifest.load_experiment(hyper)?;
    if let Some(s) = hyper.sampling {
        let scorer = zero_shot_scorer(&exp, hyper)?;
        let n_src = exp.sources.len();
        for (i, d) in exp.sources.iter_mut().enumerate() {
            *d = sample_subset(d, s.per_class_cap, s.strategy, Some(&scorer), subset_seed(hyper.seed, i))?;
        }
        if s.include_target {
            exp.target = sample_subset(
                &exp.target,
                s.per_class_cap,
                s.strategy,
                Some(&scorer),
                subset_seed(hyper.seed, n_src),
            )?;
            for (j, d) in exp.unseen.iter_mut().enumerate() {
                *d = sample_subset(d, s.per_class_cap, s.strategy, Some(&scorer), subset_seed(hyper.seed, n_src + 1 + j))?;
            }
        }
    }
    Ok(exp)
}

/// Accuracy of pseudo-labels against ground truth, over the labeled samples.
pub fn pseudo_accuracy(set: &PseudoLabelSet, domain: &DomainDataset) -> Option<f64> {
    let truth = domain.labels()?;
    let (rows, labels) = set.labeled_rows(domain);
    if rows.is_empty() {
        return None;
    }
    let correct = rows.iter().zip(&labels).filter(|(r, l)| truth[**r] == **l).count();
    Some(correct as f64 / rows.len() as f64)
}

pub fn zero_shot_accuracy(scorer: &ZeroShotScorer, domain: &DomainDataset) -> Result<Option<f64>> {
    let Some(labels) = domain.labels() else {
        return Ok(None);
    };
    if domain.is_empty() {
        return Ok(None);
    }
    let probs = crate::embedstore::Scorer::probs(scorer, domain.features())?;
    let correct = labels.iter().enumerate().filter(|(i, y)| argmax(probs.row(*i)) == **y).count();
    Ok(Some(correct as f64 / labels.len() as f64))
}

/// Trains every source-target pair, at most `hyper.workers` at a time.
/// Results are ordered by pair index regardless of completion order.
pub fn run_stage1(exp: &Experiment, pseudo: &PseudoLabelSet, hyper: &Hyperparameters) -> Result<Vec<Stage1Result>> {
    let cfg = hyper.stage1_config()?;
    let layout = layout(exp, hyper)?;
    let job = |i: usize| -> Result<Stage1Result> {
        let spec = PairSpec {
            layout,
            pair_index: i,
            init: PromptInit::new(prompt_seed(hyper.seed, i), hyper.init_scale)?,
        };
        log::info!("stage one: pair {i} ({} -> {})", exp.sources[i].name(), exp.target.name());
        train_pair(&exp.sources[i], &exp.target, pseudo, &exp.encoder, spec, &cfg)
    };
    let workers = hyper.workers.max(1);
    let results: Vec<Result<Stage1Result>> = if workers == 1 {
        (0..exp.sources.len()).map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| MpaError::Config(format!("worker pool: {e}")))?;
        pool.install(|| (0..exp.sources.len()).into_par_iter().map(job).collect())
    };
    results.into_iter().collect()
}

pub fn run_stage2(
    prompts: Vec<crate::prompt::PromptPair>,
    target: &DomainDataset,
    pseudo: &PseudoLabelSet,
    encoder: &FrozenTextEncoder,
    hyper: &Hyperparameters,
) -> Result<(AlignerState, AlignCurves)> {
    let s2 = hyper.stage2;
    let state = AlignerState::new(
        prompts,
        s2.latent_dim,
        s2.hidden,
        s2.single_ae,
        s2.alpha,
        hyper.temperature()?,
        autoencoder_seed(hyper.seed),
    )?;
    let cfg = hyper.stage2_config()?;
    log::info!("stage two: {} prompts", state.num_pairs());
    train_align(state, encoder, target, pseudo, &cfg, AlignLossSpec::from_params(&s2), s2.finetune_prompts)
}

/// Pseudo-labels `domain` with the zero-shot scorer and tunes fresh latents.
pub fn run_lst(
    aligner: &AlignerState,
    encoder: &FrozenTextEncoder,
    domain: &DomainDataset,
    scorer: &ZeroShotScorer,
    hyper: &Hyperparameters,
    domain_index: usize,
) -> Result<(LatentPrompt, LstResult, PseudoLabelSet)> {
    let pseudo = generate(domain, scorer, hyper.tau)?;
    let lp = LatentPrompt::init_scaled(aligner, latent_seed(hyper.seed, domain_index), hyper.init_scale);
    let cfg = hyper.lst_config()?;
    log::info!("latent tuning on {}", domain.name());
    let (lp, result) = tune(lp, encoder, domain, &pseudo, &cfg)?;
    Ok((lp, result, pseudo))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MpaError::Validation(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Paths of the artifacts a pipeline run writes under its output directory.
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }

    pub fn pseudo_labels(&self) -> PathBuf {
        self.root.join("pseudo_labels.json")
    }

    pub fn pair_checkpoint(&self, i: usize) -> PathBuf {
        self.root.join("stage1").join(format!("pair{i}.ckpt"))
    }

    pub fn pair_curves(&self, i: usize) -> PathBuf {
        self.root.join("stage1").join(format!("pair{i}.curves.json"))
    }

    pub fn aligner(&self) -> PathBuf {
        self.root.join("aligner.ckpt")
    }

    pub fn stage2_curves(&self) -> PathBuf {
        self.root.join("stage2.curves.json")
    }

    pub fn latent(&self, domain: &str) -> PathBuf {
        self.root.join(format!("lst_{domain}.ckpt"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Runs every phase and writes all artifacts plus `report.json` under
/// `out_dir`. A failing phase aborts the run with the phase name attached.
pub fn run_pipeline(manifest: &Manifest, hyper: &Hyperparameters, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let out = OutputLayout::new(out_dir.as_ref());
    fs::create_dir_all(out.root.join("stage1"))?;

    let exp = load(manifest, hyper).map_err(|e| e.in_phase("load"))?;
    let scorer = zero_shot_scorer(&exp, hyper)?;
    let layout = layout(&exp, hyper)?;

    // pseudo-labels
    let (pseudo, pseudo_report, zs_acc, zs_hist) = (|| {
        let pseudo = generate(&exp.target, &scorer, hyper.tau)?;
        write_pseudo_file(&pseudo, &manifest.classes, hyper.seed, out.pseudo_labels())?;
        let coverage = coverage_report(&pseudo, exp.target.len(), layout.classes)?;
        let report = PseudoReport {
            threshold: hyper.tau,
            coverage,
            accuracy: pseudo_accuracy(&pseudo, &exp.target),
        };
        let zs_acc = zero_shot_accuracy(&scorer, &exp.target)?;
        let probs = crate::embedstore::Scorer::probs(&scorer, exp.target.features())?;
        Ok::<_, MpaError>((pseudo, report, zs_acc, confidence_histogram(&probs)))
    })()
    .map_err(|e| e.in_phase("pseudolabel"))?;

    // stage one
    let (prompts, pair_reports) = (|| {
        let results = run_stage1(&exp, &pseudo, hyper)?;
        let mut reports = Vec::with_capacity(results.len());
        for (i, r) in results.iter().enumerate() {
            let ckpt = out.pair_checkpoint(i);
            r.prompts.write_checkpoint(&ckpt)?;
            let curves = r.curves();
            write_json(&out.pair_curves(i), &curves)?;
            let accuracy = match exp.target.labels() {
                Some(_) if !exp.target.is_empty() => Some(evaluate(&r.prompts, &exp.target, &exp.encoder, r.temperature)?),
                _ => None,
            };
            reports.push(PairReport {
                pair_index: i,
                source: exp.sources[i].name().to_string(),
                accuracy,
                checkpoint: rel(&ckpt, &out.root),
                curves,
            });
        }
        let prompts = results.into_iter().map(|r| r.prompts).collect::<Vec<_>>();
        Ok::<_, MpaError>((prompts, reports))
    })()
    .map_err(|e| e.in_phase("stage1"))?;

    // stage two
    let (aligner, stage2_report, aligned_hist) = (|| {
        let (aligner, curves) = run_stage2(prompts, &exp.target, &pseudo, &exp.encoder, hyper)?;
        aligner.write_checkpoint(out.aligner())?;
        write_json(&out.stage2_curves(), &curves)?;
        let (per_prompt, averaged) = match exp.target.labels() {
            Some(_) if !exp.target.is_empty() => {
                let (each, avg) = evaluate_aligner(&aligner, &exp.encoder, &exp.target)?;
                (Some(each), Some(avg))
            }
            _ => (None, None),
        };
        let hist = if exp.target.is_empty() {
            confidence_histogram(&crate::tensor::Tensor::zeros(&[0, layout.classes]))
        } else {
            let mean = average_logits(&per_prompt_logits(&aligner, &exp.encoder, exp.target.features())?);
            confidence_histogram(&softmax_rows(&mean))
        };
        let report = Stage2Report {
            per_prompt_accuracy: per_prompt,
            averaged_accuracy: averaged,
            temperature: aligner.temperature.value,
            checkpoint: rel(&out.aligner(), &out.root),
            curves,
        };
        Ok::<_, MpaError>((aligner, report, hist))
    })()
    .map_err(|e| e.in_phase("stage2"))?;

    // latent tuning
    let mut lst_reports = Vec::with_capacity(exp.unseen.len());
    let mut latent_seeds = Vec::with_capacity(exp.unseen.len());
    for (j, domain) in exp.unseen.iter().enumerate() {
        let r = (|| {
            let (lp, result, pseudo_u) = run_lst(&aligner, &exp.encoder, domain, &scorer, hyper, j)?;
            let ckpt = out.latent(domain.name());
            lp.write_checkpoint(&ckpt)?;
            let accuracy = match domain.labels() {
                Some(_) if !domain.is_empty() => Some(evaluate_latent(&lp, &exp.encoder, domain)?),
                _ => None,
            };
            Ok::<_, MpaError>(LstReport {
                domain: domain.name().to_string(),
                accuracy,
                zero_shot_accuracy: zero_shot_accuracy(&scorer, domain)?,
                coverage: pseudo_u.coverage(),
                params: lp.param_count(),
                checkpoint: rel(&ckpt, &out.root),
                loss_curve: result.loss_curve,
            })
        })()
        .map_err(|e| e.in_phase("lst"))?;
        lst_reports.push(r);
        latent_seeds.push(latent_seed(hyper.seed, j));
    }

    let shape = ModelShape {
        classes: layout.classes,
        context_len: layout.context_len,
        domain_len: layout.domain_len,
        dim: layout.dim,
        sources: exp.sources.len(),
        latent_dim: aligner.latent_dim(),
        hidden: aligner.hidden(),
        autoencoders: aligner.autoencoders().len(),
    };
    let params = shape.report();
    debug_assert_eq!(params.stage2, aligner.param_count());
    debug_assert_eq!(params.stage1, aligner.prompts().iter().map(|p| p.param_count()).sum::<usize>());

    let report = ExperimentReport {
        config: hyper.clone(),
        experiment: ExperimentSummary {
            classes: manifest.classes.clone(),
            sources: exp.sources.iter().map(|d| d.name().to_string()).collect(),
            target: exp.target.name().to_string(),
            unseen: exp.unseen.iter().map(|d| d.name().to_string()).collect(),
            encoder: exp.encoder.descriptor(),
        },
        seeds: SeedReport {
            base: hyper.seed,
            prompt_init: (0..exp.sources.len()).map(|i| prompt_seed(hyper.seed, i)).collect(),
            autoencoder: autoencoder_seed(hyper.seed),
            latent_init: latent_seeds,
        },
        pseudo_labels: pseudo_report,
        zero_shot_accuracy: zs_acc,
        stage1: pair_reports,
        stage2: stage2_report,
        lst: lst_reports,
        params,
        confidence_histograms: Histograms {
            zero_shot: zs_hist,
            aligned: aligned_hist,
        },
    };
    fs::write(out.report(), report.to_json())?;
    Ok(report)
}
