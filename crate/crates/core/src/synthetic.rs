//! Gaussian-cluster domains for smoke tests and benchmarks.
//!
//! Every domain draws samples around shared class prototypes, moved by a
//! per-domain offset. The zero-shot class embeddings are noisy copies of the
//! prototypes, so zero-shot scoring is good but not perfect on every domain.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::config::Hyperparameters;
use crate::embedstore::{write_feature_file, DomainDataset};
use crate::encoder::EncoderDescriptor;
use crate::error::{MpaError, Result};
use crate::manifest::{DomainRef, Manifest};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_domain: usize,
    pub domains: Vec<String>,
    /// Norm of every class prototype.
    pub prototype_norm: f64,
    /// Norm of every domain offset.
    pub shift_norm: f64,
    /// Per-coordinate standard deviation of sample noise.
    pub noise: f64,
    /// Per-coordinate standard deviation added to the zero-shot embeddings.
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            dim: 16,
            samples_per_domain: 200,
            domains: ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec(),
            prototype_norm: 3.0,
            shift_norm: 2.0,
            noise: 0.35,
            embed_noise: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub domains: Vec<DomainDataset>,
    /// `[K, d]` zero-shot class embeddings.
    pub class_embeddings: Tensor,
}

impl SyntheticBenchmark {
    pub fn domain(&self, name: &str) -> Option<&DomainDataset> {
        self.domains.iter().find(|d| d.name() == name)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn with_norm(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len > 0.0 {
        v.iter_mut().for_each(|x| *x *= norm / len);
    }
    v
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|k| format!("class{k}")).collect()
}

/// Builds the labeled domains (in `spec.domains` order) and the zero-shot
/// class embeddings. Classes are balanced; sample ids are `<domain>/<index>`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    if spec.classes == 0 || spec.dim == 0 || spec.domains.is_empty() {
        return Err(MpaError::Config("synthetic spec needs classes, a dimension and domains".into()));
    }
    let (k, d) = (spec.classes, spec.dim);
    let mut rng = seed::rng(seed::derive(spec.seed, "synthetic-prototypes", 0));
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| with_norm(gaussian(&mut rng, d, 1.0), spec.prototype_norm))
        .collect();

    let mut rng = seed::rng(seed::derive(spec.seed, "synthetic-embeddings", 0));
    let mut embeds = Vec::with_capacity(k * d);
    for p in &prototypes {
        let noise = gaussian(&mut rng, d, spec.embed_noise);
        embeds.extend(p.iter().zip(noise).map(|(a, b)| a + b));
    }
    let class_embeddings = Tensor::new(vec![k, d], embeds)?;

    let names = class_names(k);
    let mut domains = Vec::with_capacity(spec.domains.len());
    for (di, name) in spec.domains.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(spec.seed, "synthetic-domain", di as u64));
        let shift = with_norm(gaussian(&mut rng, d, 1.0), spec.shift_norm);
        let n = spec.samples_per_domain;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % k;
            let noise = gaussian(&mut rng, d, spec.noise);
            data.extend(
                prototypes[class]
                    .iter()
                    .zip(&shift)
                    .zip(noise)
                    .map(|((p, s), e)| p + s + e),
            );
            labels.push(class);
        }
        let ids = (0..n).map(|i| format!("{name}/{i:04}")).collect();
        domains.push(DomainDataset::new(
            name.clone(),
            Tensor::new(vec![n, d], data)?,
            Some(labels),
            names.clone(),
            ids,
        )?);
    }
    Ok(SyntheticBenchmark {
        domains,
        class_embeddings,
    })
}

/// The class embeddings as an unlabeled dataset, one row per class.
pub fn class_embedding_dataset(embeddings: &Tensor, names: &[String]) -> Result<DomainDataset> {
    DomainDataset::new("class_embeddings", embeddings.clone(), None, names.to_vec(), names.to_vec())
}

/// Settings sized for the 16-dimensional benchmark rather than for CLIP.
pub fn benchmark_hyperparameters() -> Hyperparameters {
    let mut h = Hyperparameters::default();
    h.stage1.epochs = 100;
    h.stage2.epochs = 100;
    h.stage2.alpha = 10.0;
    h.stage2.latent_dim = 8;
    h.stage2.hidden = 32;
    h.lst.lr = 0.005;
    h.lst.epochs = 100;
    h
}

/// Writes every domain and the class embeddings as feature files under
/// `dir`, plus `manifest.toml` naming the given roles. Returns the manifest.
pub fn write_benchmark(
    bench: &SyntheticBenchmark,
    dir: impl AsRef<Path>,
    sources: &[&str],
    target: &str,
    unseen: &[&str],
    encoder: EncoderDescriptor,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let classes = bench
        .domains
        .first()
        .map(|d| d.class_names().to_vec())
        .unwrap_or_default();
    for d in &bench.domains {
        write_feature_file(d, dir.join(format!("{}.mpaf", d.name())))?;
    }
    write_feature_file(
        &class_embedding_dataset(&bench.class_embeddings, &classes)?,
        dir.join("class_embeddings.mpaf"),
    )?;
    let domain = |name: &str| -> Result<DomainRef> {
        bench
            .domain(name)
            .map(|_| DomainRef::new(name, format!("{name}.mpaf")))
            .ok_or_else(|| MpaError::Config(format!("synthetic benchmark has no domain {name}")))
    };
    let mut m = Manifest::new(
        classes,
        sources.iter().map(|s| domain(s)).collect::<Result<_>>()?,
        domain(target)?,
        encoder,
    );
    m.unseen = unseen.iter().map(|s| domain(s)).collect::<Result<_>>()?;
    m.class_embeddings = Some("class_embeddings.mpaf".into());
    m.set_base_dir(dir);
    m.validate()?;
    m.save(dir.join("manifest.toml"))?;
    Ok(m)
}
