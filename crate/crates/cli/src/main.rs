//! `mpa`: command-line front end for multi-prompt alignment.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print
//! `{"error": <category>, "message": ...}` on stderr and exit with the
//! category's code (see [`exit_code`]).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mpa_core::align::{evaluate_aligner, infer, AlignerState};
use mpa_core::config::{Hyperparameters, SamplingParams};
use mpa_core::embedstore::{sample_subset, write_feature_file, DomainDataset, SampleStrategy, Scorer};
use mpa_core::encoder::EncoderDescriptor;
use mpa_core::lst::{evaluate_latent, predict_latent, LatentPrompt};
use mpa_core::manifest::{Experiment, Manifest};
use mpa_core::params::{preset_by_name, ModelShape, PRESETS};
use mpa_core::pipeline::{self, OutputLayout};
use mpa_core::prompt::{PromptInit, PromptPair};
use mpa_core::pseudo::{coverage_report, generate, read_pseudo_file, write_pseudo_file, PseudoLabelSet};
use mpa_core::stage1::{evaluate, target_logits, train_pair, PairSpec};
use mpa_core::synthetic::{self, SyntheticSpec};
use mpa_core::{MpaError, Result, Tensor};

#[derive(Parser)]
#[command(name = "mpa", version, about = "Multi-prompt alignment over precomputed image features")]
struct Cli {
    /// Base seed. Overrides the manifest's `seed`.
    #[arg(long, global = true, env = "MPA_SEED")]
    seed: Option<u64>,

    /// Number of stage-one pairs trained in parallel.
    #[arg(long, global = true, env = "MPA_WORKERS")]
    workers: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV of features into a feature file.
    Ingest(IngestArgs),
    /// Zero-shot pseudo-labels for a domain.
    Pseudolabel(PseudolabelArgs),
    /// Train the prompt pair of one source domain.
    Stage1(Stage1Args),
    /// Align the stage-one prompts with autoencoders.
    Stage2(Stage2Args),
    /// Tune latent prompts on an unseen domain.
    Lst(LstArgs),
    /// Accuracy and predictions of a trained model on one domain.
    Eval(EvalArgs),
    /// Trainable-parameter counts.
    Params(ParamsArgs),
    /// Run the whole pipeline and write every artifact plus report.json.
    #[command(alias = "run")]
    Report(ReportArgs),
    /// Per-class subset of a domain.
    Sample(SampleArgs),
    /// Write a synthetic benchmark with its manifest.
    Synth(SynthArgs),
}

/// Overrides shared by every command that reads a manifest.
#[derive(Args)]
struct HyperArgs {
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Cosine-similarity temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Learn the temperature during training.
    #[arg(long)]
    trainable_temperature: bool,
    /// Shared context length.
    #[arg(long)]
    m1: Option<usize>,
    /// Domain-specific token count.
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Keep at most this many samples per class before training.
    #[arg(long)]
    per_class_cap: Option<usize>,
    /// random or confidence
    #[arg(long, default_value = "random", requires = "per_class_cap")]
    sample_strategy: SampleStrategy,
}

#[derive(Args)]
struct IngestArgs {
    /// Header `id,label,f0,f1,...`; an empty label marks an unlabeled row.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Domain name stored in the file (defaults to the output file stem).
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated class names, in index order.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Take class names from a manifest.
    #[arg(long, conflicts_with = "classes")]
    manifest: Option<PathBuf>,
    /// Rows are class embeddings; ids become the class names.
    #[arg(long, conflicts_with_all = ["classes", "manifest"])]
    class_embeddings: bool,
}

#[derive(Args)]
struct PseudolabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Domain to label (defaults to the target).
    #[arg(long)]
    domain: Option<String>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct Stage1Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Source domain name.
    #[arg(long)]
    pair: String,
    #[arg(long)]
    out: PathBuf,
    /// Pseudo-label file (regenerated from the zero-shot scorer when absent).
    #[arg(long)]
    pseudo: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of stage-one checkpoints (`*.ckpt`).
    #[arg(long)]
    ckpts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pseudo: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[command(flatten)]
    ablation: AblationArgs,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    no_l1: bool,
    #[arg(long)]
    no_ae: bool,
    #[arg(long)]
    single_ae: bool,
    #[arg(long)]
    no_cls: bool,
    #[arg(long)]
    finetune_prompts: bool,
}

#[derive(Args)]
struct LstArgs {
    #[arg(long)]
    aligner: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// One of the manifest's unseen domains.
    #[arg(long)]
    new_domain: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the target.
    #[arg(long)]
    domain: Option<String>,
    /// Stage-one checkpoint (scored with its target prompts).
    #[arg(long, group = "model")]
    prompts: Option<PathBuf>,
    #[arg(long, group = "model")]
    aligner: Option<PathBuf>,
    #[arg(long, group = "model")]
    latent: Option<PathBuf>,
    /// Write per-sample predictions as JSON.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ParamsArgs {
    /// imageclef, office-home or domainnet. Without a preset or manifest all
    /// three presets are reported.
    #[arg(long)]
    preset: Option<String>,
    /// Count for this manifest's shape and hyperparameters.
    #[arg(long, conflicts_with = "preset")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    m1: Option<usize>,
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    d_latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    single_ae: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Epochs of every phase.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    ablation: AblationArgs,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    cap: usize,
    /// random or confidence
    #[arg(long, default_value = "random")]
    strategy: SampleStrategy,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Train on two sources and keep the fourth domain unseen.
    #[arg(long)]
    holdout: bool,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

/// Process exit code of an error category.
fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "config" => 3,
        "validation" => 4,
        "format" => 5,
        "dimension" => 6,
        "index" => 7,
        "degenerate" => 8,
        "contract" => 9,
        "io" => 10,
        _ => 1,
    }
}

fn fail(category: &str, message: String, phase: Option<&str>) -> ExitCode {
    let mut report = json!({ "error": category, "message": message });
    if let Some(p) = phase {
        report["phase"] = json!(p);
    }
    eprintln!("{report}");
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || matches!(e.kind(), ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand)
            {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return fail("usage", first, None);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let phase = match &e {
                MpaError::Phase { phase, .. } => Some(*phase),
                _ => None,
            };
            fail(e.category(), e.to_string(), phase)
        }
    }
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Pseudolabel(a) => pseudolabel(cli, a),
        Command::Stage1(a) => stage1(cli, a),
        Command::Stage2(a) => stage2(cli, a),
        Command::Lst(a) => lst(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Params(a) => params(a),
        Command::Report(a) => report(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Synth(a) => synth(a),
    }
}

/// Defaults, then the manifest's table, then flags and environment.
fn hyperparameters(cli: &Cli, manifest: &Manifest, h: &HyperArgs) -> Result<Hyperparameters> {
    let mut hyper = manifest.hyperparameters.clone();
    if let Some(s) = cli.seed {
        hyper.seed = s;
    }
    if let Some(w) = cli.workers {
        hyper.workers = w;
    }
    if let Some(v) = h.tau {
        hyper.tau = v;
    }
    if let Some(v) = h.temperature {
        hyper.temperature = v;
    }
    if h.trainable_temperature {
        hyper.trainable_temperature = true;
    }
    if let Some(v) = h.m1 {
        hyper.m1 = v;
    }
    if let Some(v) = h.m2 {
        hyper.m2 = v;
    }
    if let Some(v) = h.batch {
        hyper.batch_size = v;
    }
    if let Some(v) = h.momentum {
        hyper.momentum = v;
    }
    if let Some(cap) = h.per_class_cap {
        hyper.sampling = Some(SamplingParams {
            per_class_cap: cap,
            strategy: h.sample_strategy,
            include_target: hyper.sampling.map(|s| s.include_target).unwrap_or(false),
        });
    }
    hyper.validate()?;
    Ok(hyper)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).map_err(|e| match e {
        MpaError::Io(io) => MpaError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn apply_ablation(hyper: &mut Hyperparameters, a: &AblationArgs) {
    let s2 = &mut hyper.stage2;
    s2.no_l1 |= a.no_l1;
    s2.no_ae |= a.no_ae;
    s2.single_ae |= a.single_ae;
    s2.no_cls |= a.no_cls;
    s2.finetune_prompts |= a.finetune_prompts;
}

fn to_json(value: &impl serde::Serialize) -> Value {
    serde_json::to_value(value).expect("serializable report")
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json value") + "\n")?;
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn find_domain<'a>(exp: &'a Experiment, name: &str) -> Result<&'a DomainDataset> {
    exp.sources
        .iter()
        .chain(std::iter::once(&exp.target))
        .chain(&exp.unseen)
        .find(|d| d.name() == name)
        .ok_or_else(|| MpaError::Validation(format!("manifest has no domain named {name}")))
}

fn target_pseudo(exp: &Experiment, hyper: &Hyperparameters, file: Option<&Path>) -> Result<PseudoLabelSet> {
    match file {
        Some(p) => Ok(read_pseudo_file(p)?.0),
        None => generate(&exp.target, &pipeline::zero_shot_scorer(exp, hyper)?, hyper.tau),
    }
}

fn ingest(a: &IngestArgs) -> Result<Value> {
    let format_err = |e: csv::Error| MpaError::Format {
        offset: e.position().map(|p| p.byte()).unwrap_or(0),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(&a.csv).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => MpaError::Io(io),
        other => MpaError::Format {
            offset: 0,
            message: format!("{other:?}"),
        },
    })?;
    let header = reader.headers().map_err(format_err)?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(MpaError::Format {
            offset: 0,
            message: "header must be id,label,<feature columns>".into(),
        });
    }
    let dim = header.len() - 2;
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(format_err)?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        ids.push(record[0].to_string());
        raw_labels.push(record[1].trim().to_string());
        for field in record.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| MpaError::Format {
                offset,
                message: format!("row {}: {field:?} is not a number", ids.len()),
            })?;
            data.push(v);
        }
    }
    let n = ids.len();
    let features = Tensor::new(vec![n, dim], data)?;

    let labeled = raw_labels.iter().filter(|l| !l.is_empty()).count();
    if labeled != 0 && labeled != n {
        return Err(MpaError::Validation(format!("{labeled} of {n} rows carry a label; label all rows or none")));
    }
    let class_names = if a.class_embeddings {
        if labeled != 0 {
            return Err(MpaError::Validation("class-embedding rows take no label".into()));
        }
        ids.clone()
    } else if let Some(m) = &a.manifest {
        load_manifest(m)?.classes
    } else if !a.classes.is_empty() {
        a.classes.clone()
    } else if labeled == n && n > 0 {
        let mut names: Vec<String> = raw_labels.clone();
        names.sort();
        names.dedup();
        names
    } else {
        return Err(MpaError::Config("unlabeled rows need --classes or --manifest".into()));
    };
    let labels = if labeled == n && n > 0 && !a.class_embeddings {
        let resolve = |l: &String| -> Result<usize> {
            class_names
                .iter()
                .position(|c| c == l)
                .or_else(|| l.parse::<usize>().ok().filter(|i| *i < class_names.len()))
                .ok_or_else(|| MpaError::Validation(format!("label {l:?} is not a known class")))
        };
        Some(raw_labels.iter().map(resolve).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let labeled_out = labels.is_some();
    let ds = DomainDataset::new(name.clone(), features, labels, class_names.clone(), ids)?;
    write_feature_file(&ds, &a.out)?;
    Ok(json!({
        "domain": name,
        "samples": n,
        "dim": dim,
        "classes": class_names.len(),
        "labeled": labeled_out,
        "out": a.out,
    }))
}

fn pseudolabel(cli: &Cli, a: &PseudolabelArgs) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    let exp = pipeline::load(&manifest, &hyper)?;
    let domain = match &a.domain {
        Some(n) => find_domain(&exp, n)?,
        None => &exp.target,
    };
    let scorer = pipeline::zero_shot_scorer(&exp, &hyper)?;
    let set = generate(domain, &scorer, hyper.tau)?;
    write_pseudo_file(&set, &manifest.classes, hyper.seed, &a.out)?;
    Ok(json!({
        "domain": domain.name(),
        "threshold": hyper.tau,
        "coverage": to_json(&coverage_report(&set, domain.len(), manifest.classes.len())?),
        "accuracy": pipeline::pseudo_accuracy(&set, domain),
        "out": a.out,
    }))
}

fn curves_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".curves.json");
    PathBuf::from(s)
}

fn stage1(cli: &Cli, a: &Stage1Args) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let mut hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    if let Some(v) = a.lr {
        hyper.stage1.lr = v;
    }
    if let Some(v) = a.epochs {
        hyper.stage1.epochs = v;
    }
    let index = manifest.source_index(&a.pair)?;
    let exp = pipeline::load(&manifest, &hyper)?;
    let pseudo = target_pseudo(&exp, &hyper, a.pseudo.as_deref())?;
    let spec = PairSpec {
        layout: pipeline::layout(&exp, &hyper)?,
        pair_index: index,
        init: PromptInit::new(pipeline::prompt_seed(hyper.seed, index), hyper.init_scale)?,
    };
    let cfg = hyper.stage1_config()?;
    let result = train_pair(&exp.sources[index], &exp.target, &pseudo, &exp.encoder, spec, &cfg)
        .map_err(|e| e.in_phase("stage1"))?;
    result.prompts.write_checkpoint(&a.out)?;
    let curves = to_json(&result.curves());
    write_json(&curves_path(&a.out), &curves)?;
    let accuracy = match exp.target.labels() {
        Some(_) if !exp.target.is_empty() => {
            Some(evaluate(&result.prompts, &exp.target, &exp.encoder, result.temperature)?)
        }
        _ => None,
    };
    Ok(json!({
        "pair_index": index,
        "source": a.pair,
        "target": exp.target.name(),
        "target_accuracy": accuracy,
        "final_loss": result.loss_curve.last(),
        "params": result.prompts.param_count(),
        "out": a.out,
    }))
}

/// Every `*.ckpt` under `dir`, ordered by pair index. Indices must be exactly
/// `0..sources`.
fn load_pairs(dir: &Path, sources: usize) -> Result<Vec<PromptPair>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ckpt") {
            pairs.push(PromptPair::read_checkpoint(&path)?);
        }
    }
    pairs.sort_by_key(|p| p.pair_index());
    let indices: Vec<usize> = pairs.iter().map(|p| p.pair_index()).collect();
    if indices != (0..sources).collect::<Vec<_>>() {
        return Err(MpaError::Validation(format!(
            "{} holds pair indices {indices:?}; expected one checkpoint for each of {sources} sources",
            dir.display()
        )));
    }
    Ok(pairs)
}

fn stage2(cli: &Cli, a: &Stage2Args) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let mut hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    let s2 = &mut hyper.stage2;
    if let Some(v) = a.alpha {
        s2.alpha = v;
    }
    if let Some(v) = a.lr {
        s2.lr = v;
    }
    if let Some(v) = a.epochs {
        s2.epochs = v;
    }
    if let Some(v) = a.d_latent {
        s2.latent_dim = v;
    }
    if let Some(v) = a.hidden {
        s2.hidden = v;
    }
    apply_ablation(&mut hyper, &a.ablation);
    hyper.validate()?;

    let exp = pipeline::load(&manifest, &hyper)?;
    let prompts = load_pairs(&a.ckpts, exp.sources.len())?;
    let expected = pipeline::layout(&exp, &hyper)?;
    if let Some(p) = prompts.iter().find(|p| p.layout() != expected) {
        return Err(MpaError::Validation(format!(
            "pair {} has layout {:?}, manifest implies {expected:?}",
            p.pair_index(),
            p.layout()
        )));
    }
    let pseudo = target_pseudo(&exp, &hyper, a.pseudo.as_deref())?;
    let (aligner, curves) = pipeline::run_stage2(prompts, &exp.target, &pseudo, &exp.encoder, &hyper)
        .map_err(|e| e.in_phase("stage2"))?;
    aligner.write_checkpoint(&a.out)?;
    write_json(&curves_path(&a.out), &to_json(&curves))?;
    let (per_prompt, averaged) = match exp.target.labels() {
        Some(_) if !exp.target.is_empty() => {
            let (each, avg) = evaluate_aligner(&aligner, &exp.encoder, &exp.target)?;
            (Some(each), Some(avg))
        }
        _ => (None, None),
    };
    Ok(json!({
        "pairs": aligner.num_pairs(),
        "per_prompt_accuracy": per_prompt,
        "averaged_accuracy": averaged,
        "params": aligner.param_count(),
        "out": a.out,
    }))
}

fn lst(cli: &Cli, a: &LstArgs) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let mut hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    if let Some(v) = a.lr {
        hyper.lst.lr = v;
    }
    if let Some(v) = a.epochs {
        hyper.lst.epochs = v;
    }
    let index = manifest.unseen.iter().position(|d| d.name == a.new_domain).ok_or_else(|| {
        MpaError::Validation(format!("{} is not listed among the manifest's unseen domains", a.new_domain))
    })?;
    let aligner = AlignerState::read_checkpoint(&a.aligner)?;
    let exp = pipeline::load(&manifest, &hyper)?;
    if aligner.layout() != pipeline::layout(&exp, &hyper)? {
        return Err(MpaError::Validation("aligner layout does not match the manifest".into()));
    }
    let domain = &exp.unseen[index];
    let scorer = pipeline::zero_shot_scorer(&exp, &hyper)?;
    let (lp, result, pseudo) = pipeline::run_lst(&aligner, &exp.encoder, domain, &scorer, &hyper, index)
        .map_err(|e| e.in_phase("lst"))?;
    lp.write_checkpoint(&a.out)?;
    write_json(&curves_path(&a.out), &json!({ "loss": result.loss_curve }))?;
    let accuracy = match domain.labels() {
        Some(_) if !domain.is_empty() => Some(evaluate_latent(&lp, &exp.encoder, domain)?),
        _ => None,
    };
    Ok(json!({
        "domain": domain.name(),
        "accuracy": accuracy,
        "zero_shot_accuracy": pipeline::zero_shot_accuracy(&scorer, domain)?,
        "coverage": pseudo.coverage(),
        "params": lp.param_count(),
        "out": a.out,
    }))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    let exp = pipeline::load(&manifest, &hyper)?;
    let domain = match &a.domain {
        Some(n) => find_domain(&exp, n)?,
        None => &exp.target,
    };
    let mut extra = json!({});
    let (model, predictions) = if let Some(p) = &a.prompts {
        let pair = PromptPair::read_checkpoint(p)?;
        let logits = target_logits(&pair, &exp.encoder, domain.features(), hyper.temperature()?)?;
        ("prompts", rows_argmax(&logits))
    } else if let Some(p) = &a.aligner {
        let state = AlignerState::read_checkpoint(p)?;
        if let (Some(_), false) = (domain.labels(), domain.is_empty()) {
            extra["per_prompt_accuracy"] = json!(evaluate_aligner(&state, &exp.encoder, domain)?.0);
        }
        ("aligner", infer(&state, &exp.encoder, domain.features())?.0)
    } else if let Some(p) = &a.latent {
        let lp = LatentPrompt::read_checkpoint(p)?;
        ("latent", predict_latent(&lp, &exp.encoder, domain.features())?)
    } else {
        let scorer = pipeline::zero_shot_scorer(&exp, &hyper)?;
        ("zero-shot", rows_argmax(&scorer.probs(domain.features())?))
    };
    let accuracy = domain.labels().filter(|l| !l.is_empty()).map(|labels| {
        let correct = labels.iter().zip(&predictions).filter(|(y, p)| y == p).count();
        correct as f64 / labels.len() as f64
    });
    if let Some(path) = &a.predictions {
        let records: Vec<Value> = domain
            .sample_ids()
            .iter()
            .zip(&predictions)
            .map(|(id, &p)| json!({ "sample_id": id, "label": p, "class_name": manifest.classes[p] }))
            .collect();
        write_json(path, &Value::Array(records))?;
    }
    let mut out = json!({
        "domain": domain.name(),
        "model": model,
        "samples": domain.len(),
        "accuracy": accuracy,
    });
    if let (Value::Object(o), Value::Object(e)) = (&mut out, extra) {
        o.extend(e);
    }
    Ok(out)
}

fn rows_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.shape()[0]).map(|i| argmax(t.row(i))).collect()
}

fn params(a: &ParamsArgs) -> Result<Value> {
    let mut shapes: Vec<(String, ModelShape)> = if let Some(m) = &a.manifest {
        let manifest = load_manifest(m)?;
        let h = &manifest.hyperparameters;
        let shape = ModelShape {
            classes: manifest.classes.len(),
            context_len: h.m1,
            domain_len: h.m2,
            dim: manifest.encoder.dim,
            sources: manifest.sources.len(),
            latent_dim: h.stage2.latent_dim,
            hidden: h.stage2.hidden,
            autoencoders: if h.stage2.single_ae { 1 } else { 2 },
        };
        vec![(m.display().to_string(), shape)]
    } else if let Some(name) = &a.preset {
        let p = preset_by_name(name).ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            MpaError::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })?;
        vec![(p.name.to_string(), p.shape)]
    } else {
        PRESETS.iter().map(|p| (p.name.to_string(), p.shape)).collect()
    };
    for (_, s) in &mut shapes {
        if let Some(v) = a.m1 {
            s.context_len = v;
        }
        if let Some(v) = a.m2 {
            s.domain_len = v;
        }
        if let Some(v) = a.d_latent {
            s.latent_dim = v;
        }
        if let Some(v) = a.hidden {
            s.hidden = v;
        }
        if a.single_ae {
            s.autoencoders = 1;
        }
    }
    let entries: Vec<Value> = shapes
        .iter()
        .map(|(name, s)| json!({ "name": name, "shape": to_json(s), "params": to_json(&s.report()) }))
        .collect();
    Ok(Value::Array(entries))
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let mut hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    if let Some(e) = a.epochs {
        hyper.stage1.epochs = e;
        hyper.stage2.epochs = e;
        hyper.lst.epochs = e;
    }
    if let Some(v) = a.alpha {
        hyper.stage2.alpha = v;
    }
    apply_ablation(&mut hyper, &a.ablation);
    let r = pipeline::run_pipeline(&manifest, &hyper, &a.out)?;
    Ok(json!({
        "report": OutputLayout::new(&a.out).report(),
        "target": r.experiment.target,
        "zero_shot_accuracy": r.zero_shot_accuracy,
        "pseudo_label_coverage": r.pseudo_labels.coverage.coverage,
        "stage1_accuracy": r.stage1.iter().map(|p| p.accuracy).collect::<Vec<_>>(),
        "stage2_accuracy": r.stage2.averaged_accuracy,
        "lst": r.lst.iter().map(|l| json!({ "domain": l.domain, "accuracy": l.accuracy })).collect::<Vec<_>>(),
        "params": to_json(&r.params),
    }))
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<Value> {
    let manifest = load_manifest(&a.manifest)?;
    let mut hyper = hyperparameters(cli, &manifest, &a.hyper)?;
    // sample from the full domain, not from an already capped one
    hyper.sampling = None;
    let position = manifest
        .domains()
        .position(|d| d.name == a.domain)
        .ok_or_else(|| MpaError::Validation(format!("manifest has no domain named {}", a.domain)))?;
    let exp = pipeline::load(&manifest, &hyper)?;
    let domain = find_domain(&exp, &a.domain)?;
    let scorer = pipeline::zero_shot_scorer(&exp, &hyper)?;
    let subset = sample_subset(
        domain,
        a.cap,
        a.strategy,
        Some(&scorer),
        pipeline::subset_seed(hyper.seed, position),
    )?;
    write_feature_file(&subset, &a.out)?;
    Ok(json!({
        "domain": domain.name(),
        "before": domain.len(),
        "after": subset.len(),
        "out": a.out,
    }))
}

fn synth(a: &SynthArgs) -> Result<Value> {
    let spec = SyntheticSpec {
        classes: a.classes,
        dim: a.dim,
        samples_per_domain: a.samples,
        seed: a.data_seed,
        ..SyntheticSpec::default()
    };
    let bench = synthetic::generate(&spec)?;
    let (sources, target, unseen): (&[&str], &str, &[&str]) = if a.holdout {
        (&["alpha", "beta"], "gamma", &["delta"])
    } else {
        (&["alpha", "beta", "gamma"], "delta", &[])
    };
    let mut manifest = synthetic::write_benchmark(&bench, &a.out, sources, target, unseen, EncoderDescriptor::new(11, a.dim))?;
    manifest.hyperparameters = synthetic::benchmark_hyperparameters();
    manifest.validate()?;
    let path = a.out.join("manifest.toml");
    manifest.save(&path)?;
    Ok(json!({
        "manifest": path,
        "sources": sources,
        "target": target,
        "unseen": unseen,
        "samples_per_domain": spec.samples_per_domain,
        "dim": spec.dim,
    }))
}
