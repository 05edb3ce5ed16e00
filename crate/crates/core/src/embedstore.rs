//! Precomputed image embeddings: the in-memory [`DomainDataset`], the binary
//! MPAF feature-file format and per-class subset sampling.
//!
//! MPAF layout (all little-endian):
//!
//! ```text
//! "MPAF" | version u32 = 1 | dtype u8 (0 = f32) | n u64 | d_c u32 | K u32 | has_labels u8
//! n·d_c f32 row-major features
//! n u32 labels                      (only if has_labels = 1)
//! K × (u32 length, UTF-8)           class names
//! n × (u32 length, UTF-8)           sample ids
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::binio::{put_string, put_u32, put_u64, to_u32, OffsetReader};
use crate::error::{MpaError, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPAF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// One domain's embeddings, labels and metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    name: String,
    features: Tensor,
    labels: Option<Vec<usize>>,
    class_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        let (n, d) = match features.shape() {
            [n, d] => (*n, *d),
            s => return Err(MpaError::dim("domain features", s, &[0, 0])),
        };
        if d == 0 {
            return Err(MpaError::Validation(format!("{name}: feature dimension is zero")));
        }
        if sample_ids.len() != n {
            return Err(MpaError::Validation(format!(
                "{name}: {} sample ids for {n} rows",
                sample_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(MpaError::Validation(format!("{name}: duplicate sample id {id:?}")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(MpaError::Validation(format!(
                    "{name}: {} labels for {n} rows",
                    labels.len()
                )));
            }
            if let Some((i, y)) = labels.iter().enumerate().find(|(_, y)| **y >= class_names.len()) {
                return Err(MpaError::Validation(format!(
                    "{name}: label {y} of sample {i} is outside [0, {})",
                    class_names.len()
                )));
            }
        }
        if !features.is_finite() {
            return Err(MpaError::Validation(format!("{name}: non-finite feature values")));
        }
        Ok(DomainDataset {
            name,
            features,
            labels,
            class_names,
            sample_ids,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a contract error when the domain is unlabeled.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or_else(|| {
            MpaError::Contract(format!("domain {} has no ground-truth labels", self.name))
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn gather_features(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.feature(i));
        }
        Tensor::new(vec![indices.len(), d], data).expect("gathered shape")
    }

    /// Drops labels, e.g. to treat a labeled domain as an adaptation target.
    pub fn without_labels(&self) -> Self {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    /// New dataset with the rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        DomainDataset {
            name: self.name.clone(),
            features: self.gather_features(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_names: self.class_names.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }
}

pub fn write_feature_file(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_features<W: Write>(dataset: &DomainDataset, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    w.write_all(&[DTYPE_F32])?;
    put_u64(w, dataset.len() as u64)?;
    put_u32(w, to_u32(dataset.dim(), "d_c")?)?;
    put_u32(w, to_u32(dataset.num_classes(), "K")?)?;
    w.write_all(&[u8::from(dataset.labels.is_some())])?;
    for v in dataset.features.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    if let Some(labels) = &dataset.labels {
        for &y in labels {
            put_u32(w, to_u32(y, "label")?)?;
        }
    }
    for name in &dataset.class_names {
        put_string(w, name)?;
    }
    for id in &dataset.sample_ids {
        put_string(w, id)?;
    }
    Ok(())
}

/// Reads an MPAF file. The domain name defaults to the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = File::open(path)?;
    read_features(BufReader::new(file), name)
}

pub fn read_features<R: Read>(r: R, name: impl Into<String>) -> Result<DomainDataset> {
    let mut r = OffsetReader::new(r);
    let magic: [u8; 4] = r.bytes("magic")?;
    if &magic != MAGIC {
        return r.fail(0, format!("bad magic {magic:?}, expected \"MPAF\""));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(at, format!("unsupported version {version}"));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return r.fail(at, format!("unsupported dtype {dtype}"));
    }
    let at = r.offset();
    let n = usize::try_from(r.u64("n")?).or_else(|_| r.fail(at, "row count overflows"))?;
    let at = r.offset();
    let d = r.u32("d_c")? as usize;
    if d == 0 {
        return r.fail(at, "d_c is zero");
    }
    let k = r.u32("K")? as usize;
    let at = r.offset();
    let has_labels = match r.u8("has_labels")? {
        0 => false,
        1 => true,
        other => return r.fail(at, format!("has_labels flag is {other}")),
    };
    let count = n
        .checked_mul(d)
        .ok_or_else(|| MpaError::Format {
            offset: at,
            message: "n·d_c overflows".into(),
        })?;
    let raw = r.f32_vec(count, "features")?;
    let features = Tensor::new(vec![n, d], raw.into_iter().map(f64::from).collect())?;
    let labels = if has_labels {
        Some(
            r.u32_vec(n, "labels")?
                .into_iter()
                .map(|y| y as usize)
                .collect(),
        )
    } else {
        None
    };
    let class_names = (0..k)
        .map(|_| r.string("class name"))
        .collect::<Result<Vec<_>>>()?;
    let sample_ids = (0..n)
        .map(|_| r.string("sample id"))
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    DomainDataset::new(name, features, labels, class_names, sample_ids)
}

/// Scores samples with a K-way probability distribution per row.
pub trait Scorer {
    fn probs(&self, features: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStrategy {
    Random,
    Confidence,
}

impl std::str::FromStr for SampleStrategy {
    type Err = MpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SampleStrategy::Random),
            "confidence" => Ok(SampleStrategy::Confidence),
            other => Err(MpaError::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

/// Keeps at most `per_class_cap` samples of each class, preserving the
/// original row order of the kept samples.
///
/// `Random` draws uniformly without replacement; `Confidence` keeps the
/// samples with the highest maximum class probability under `scorer`, ties
/// broken by sample id. Unlabeled datasets are grouped by the scorer's
/// argmax class, so they need a scorer under either strategy.
pub fn sample_subset(
    dataset: &DomainDataset,
    per_class_cap: usize,
    strategy: SampleStrategy,
    scorer: Option<&dyn Scorer>,
    seed: u64,
) -> Result<DomainDataset> {
    if per_class_cap == 0 {
        return Err(MpaError::Config("per-class cap must be positive".into()));
    }
    let probs = match (strategy, scorer, dataset.labels()) {
        (SampleStrategy::Confidence, None, _) => {
            return Err(MpaError::Contract(
                "confidence sampling requires a zero-shot scorer".into(),
            ))
        }
        (_, None, None) => {
            return Err(MpaError::Contract(format!(
                "domain {} is unlabeled; per-class sampling needs a scorer",
                dataset.name()
            )))
        }
        (_, Some(s), _) if !dataset.is_empty() => Some(s.probs(dataset.features())?),
        _ => None,
    };

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        let class = match dataset.labels() {
            Some(l) => l[i],
            None => argmax(probs.as_ref().expect("scorer present").row(i)),
        };
        by_class.entry(class).or_default().push(i);
    }

    let mut rng = seed::rng(seed);
    let mut keep = Vec::new();
    for (_, mut members) in by_class {
        if members.len() > per_class_cap {
            match strategy {
                SampleStrategy::Random => {
                    members.shuffle(&mut rng);
                }
                SampleStrategy::Confidence => {
                    let p = probs.as_ref().expect("scorer present");
                    let conf = |i: usize| p.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    members.sort_by(|&a, &b| {
                        conf(b)
                            .total_cmp(&conf(a))
                            .then_with(|| dataset.sample_ids()[a].cmp(&dataset.sample_ids()[b]))
                    });
                }
            }
            members.truncate(per_class_cap);
        }
        keep.extend(members);
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
