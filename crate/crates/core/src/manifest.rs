//! Experiment manifests: which feature files play which role.
//!
//! ```toml
//! classes = ["dog", "cat"]
//! class_embeddings = "text.mpaf"   # optional, K rows in class order
//! sources = [{ name = "art", path = "art.mpaf" }]
//! target = { name = "photo", path = "photo.mpaf" }
//! unseen = [{ name = "sketch", path = "sketch.mpaf" }]
//!
//! [encoder]
//! seed = 7
//! dim = 512
//!
//! [hyperparameters]
//! tau = 0.4
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Hyperparameters;
use crate::embedstore::{read_feature_file, DomainDataset};
use crate::encoder::{reference_class_embeddings, EncoderDescriptor, FrozenTextEncoder};
use crate::error::{MpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRef {
    pub name: String,
    pub path: PathBuf,
}

impl DomainRef {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        DomainRef {
            name: name.into(),
            path: path.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_embeddings: Option<PathBuf>,
    pub sources: Vec<DomainRef>,
    pub target: DomainRef,
    #[serde(default)]
    pub unseen: Vec<DomainRef>,
    pub encoder: EncoderDescriptor,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Every dataset of a manifest, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub unseen: Vec<DomainDataset>,
    pub encoder: FrozenTextEncoder,
    /// `[K, d_c]` zero-shot class embeddings.
    pub class_embeddings: Tensor,
}

impl Manifest {
    pub fn new(
        classes: Vec<String>,
        sources: Vec<DomainRef>,
        target: DomainRef,
        encoder: EncoderDescriptor,
    ) -> Self {
        Manifest {
            classes,
            class_embeddings: None,
            sources,
            target,
            unseen: Vec::new(),
            encoder,
            hyperparameters: Hyperparameters::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| MpaError::Config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MpaError::Config(format!("manifest: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(MpaError::Config("manifest needs at least one source domain".into()));
        }
        if self.classes.is_empty() {
            return Err(MpaError::Config("manifest lists no classes".into()));
        }
        if self.encoder.dim == 0 {
            return Err(MpaError::Config("encoder dim must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for d in self.domains() {
            if !seen.insert(d.name.as_str()) {
                return Err(MpaError::Config(format!("domain {} appears twice", d.name)));
            }
        }
        self.hyperparameters.validate()
    }

    /// Sources, target, then unseen domains.
    pub fn domains(&self) -> impl Iterator<Item = &DomainRef> {
        self.sources
            .iter()
            .chain(std::iter::once(&self.target))
            .chain(&self.unseen)
    }

    pub fn find(&self, name: &str) -> Result<&DomainRef> {
        self.domains()
            .find(|d| d.name == name)
            .ok_or_else(|| MpaError::Validation(format!("manifest has no domain named {name}")))
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| MpaError::Validation(format!("{name} is not a source domain")))
    }

    /// Reads a domain's feature file and checks it against the manifest.
    pub fn load_domain(&self, r: &DomainRef) -> Result<DomainDataset> {
        let d = read_feature_file(self.resolve(&r.path))?.with_name(r.name.clone());
        if d.class_names() != self.classes.as_slice() {
            return Err(MpaError::Validation(format!(
                "domain {} lists classes {:?}, manifest lists {:?}",
                r.name,
                d.class_names(),
                self.classes
            )));
        }
        if d.dim() != self.encoder.dim {
            return Err(MpaError::Validation(format!(
                "domain {} has d_c = {}, encoder expects {}",
                r.name,
                d.dim(),
                self.encoder.dim
            )));
        }
        Ok(d)
    }

    pub fn load_named(&self, name: &str) -> Result<DomainDataset> {
        self.load_domain(self.find(name)?)
    }

    /// Exported embeddings when given, otherwise the reference encoder's
    /// embeddings of seeded per-class tokens.
    pub fn class_embeddings(&self, encoder: &FrozenTextEncoder, prompt_len: usize) -> Result<Tensor> {
        match &self.class_embeddings {
            Some(p) => {
                let d = read_feature_file(self.resolve(p))?;
                if d.len() != self.classes.len() || d.dim() != self.encoder.dim {
                    return Err(MpaError::Validation(format!(
                        "class embedding file has shape [{}, {}], expected [{}, {}]",
                        d.len(),
                        d.dim(),
                        self.classes.len(),
                        self.encoder.dim
                    )));
                }
                Ok(d.features().clone())
            }
            None => reference_class_embeddings(encoder, self.classes.len(), prompt_len, self.encoder.seed),
        }
    }

    pub fn load_experiment(&self, hyper: &Hyperparameters) -> Result<Experiment> {
        let encoder = FrozenTextEncoder::new(self.encoder)?;
        let sources = self
            .sources
            .iter()
            .map(|r| {
                let d = self.load_domain(r)?;
                d.require_labels()?;
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        let target = self.load_domain(&self.target)?;
        let unseen = self
            .unseen
            .iter()
            .map(|r| self.load_domain(r))
            .collect::<Result<Vec<_>>>()?;
        let class_embeddings = self.class_embeddings(&encoder, hyper.m1 + hyper.m2)?;
        Ok(Experiment {
            sources,
            target,
            unseen,
            encoder,
            class_embeddings,
        })
    }
}
