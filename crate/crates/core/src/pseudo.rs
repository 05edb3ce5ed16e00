//! Static pseudo-labels from the zero-shot scorer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedstore::{argmax, DomainDataset, Scorer};
use crate::error::{MpaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: usize,
    pub confidence: f64,
}

/// Pseudo-labels for the samples whose top zero-shot probability exceeds
/// `threshold`. Generated once and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    entries: BTreeMap<String, PseudoLabel>,
    threshold: f64,
    total: usize,
}

impl PseudoLabelSet {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of samples that were scored.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, sample_id: &str) -> Option<&PseudoLabel> {
        self.entries.get(sample_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PseudoLabel)> {
        self.entries.iter()
    }

    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.entries.len() as f64 / self.total as f64
        }
    }

    /// Row indices and labels of `dataset` samples that carry a pseudo-label,
    /// in dataset order.
    pub fn labeled_rows(&self, dataset: &DomainDataset) -> (Vec<usize>, Vec<usize>) {
        dataset
            .sample_ids()
            .iter()
            .enumerate()
            .filter_map(|(i, id)| self.entries.get(id).map(|p| (i, p.label)))
            .unzip()
    }
}

/// Labels every sample whose maximum class probability is strictly greater
/// than `threshold`, with the argmax class (lowest index on ties).
pub fn generate(target: &DomainDataset, scorer: &dyn Scorer, threshold: f64) -> Result<PseudoLabelSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MpaError::Config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let mut entries = BTreeMap::new();
    if !target.is_empty() {
        let probs = scorer.probs(target.features())?;
        for (i, id) in target.sample_ids().iter().enumerate() {
            let row = probs.row(i);
            let label = argmax(row);
            let confidence = row[label];
            if confidence > threshold {
                entries.insert(id.clone(), PseudoLabel { label, confidence });
            }
        }
    }
    Ok(PseudoLabelSet {
        entries,
        threshold,
        total: target.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub labeled: usize,
    pub total: usize,
    pub per_class: Vec<usize>,
}

pub fn coverage_report(set: &PseudoLabelSet, total: usize, classes: usize) -> Result<CoverageReport> {
    if total < set.len() {
        return Err(MpaError::Contract(format!(
            "total {total} is smaller than the {} labeled samples",
            set.len()
        )));
    }
    let mut per_class = vec![0; classes];
    for p in set.entries.values() {
        if p.label >= classes {
            return Err(MpaError::Index {
                what: "pseudo-label",
                index: p.label,
                bound: classes,
            });
        }
        per_class[p.label] += 1;
    }
    Ok(CoverageReport {
        coverage: if total == 0 { 0.0 } else { set.len() as f64 / total as f64 },
        labeled: set.len(),
        total,
        per_class,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoFile {
    threshold: f64,
    scorer_seed: u64,
    total: usize,
    records: Vec<PseudoRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoRecord {
    sample_id: String,
    label: usize,
    class_name: String,
    confidence: f64,
}

/// Writes the set as JSON: header fields plus one record per labeled sample.
pub fn write_pseudo_file(
    set: &PseudoLabelSet,
    class_names: &[String],
    scorer_seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let records = set
        .entries
        .iter()
        .map(|(id, p)| PseudoRecord {
            sample_id: id.clone(),
            label: p.label,
            class_name: class_names.get(p.label).cloned().unwrap_or_default(),
            confidence: p.confidence,
        })
        .collect();
    let file = PseudoFile {
        threshold: set.threshold,
        scorer_seed,
        total: set.total,
        records,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| MpaError::Validation(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads a pseudo-label file. Returns the set and the recorded scorer seed.
pub fn read_pseudo_file(path: impl AsRef<Path>) -> Result<(PseudoLabelSet, u64)> {
    let text = fs::read_to_string(path)?;
    let file: PseudoFile = serde_json::from_str(&text).map_err(|e| MpaError::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    let mut entries = BTreeMap::new();
    for r in file.records {
        if !(r.confidence > file.threshold) {
            return Err(MpaError::Validation(format!(
                "record {} has confidence {} not above threshold {}",
                r.sample_id, r.confidence, file.threshold
            )));
        }
        entries.insert(
            r.sample_id,
            PseudoLabel {
                label: r.label,
                confidence: r.confidence,
            },
        );
    }
    Ok((
        PseudoLabelSet {
            entries,
            threshold: file.threshold,
            total: file.total,
        },
        file.scorer_seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Fixed(Tensor);

    impl Scorer for Fixed {
        fn probs(&self, _f: &Tensor) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    fn dataset(n: usize, k: usize) -> DomainDataset {
        DomainDataset::new(
            "t",
            Tensor::full(&[n, 2], 1.0),
            None,
            (0..k).map(|c| format!("c{c}")).collect(),
            (0..n).map(|i| format!("x{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn strict_threshold() {
        let probs = Tensor::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.4, 0.3, 0.3],
            vec![0.39, 0.31, 0.3],
        ])
        .unwrap();
        let set = generate(&dataset(3, 3), &Fixed(probs), 0.4).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.get("x0").unwrap().label, 0);
        assert!(set.get("x1").is_none());
    }

    #[test]
    fn zero_threshold_labels_everything() {
        let probs = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let set = generate(&dataset(2, 2), &Fixed(probs), 0.0).unwrap();
        assert_eq!(set.len(), 2);
        // tie goes to the lowest class index
        assert_eq!(set.get("x0").unwrap().label, 0);
        assert_eq!(set.get("x1").unwrap().label, 1);
    }

    #[test]
    fn uniform_rows_are_excluded_at_one_over_k() {
        let probs = Tensor::full(&[2, 4], 0.25);
        let set = generate(&dataset(2, 4), &Fixed(probs), 0.25).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn coverage_cases() {
        let probs = Tensor::from_rows(
            &(0..10)
                .map(|i| if i < 3 { vec![0.9, 0.1] } else { vec![0.5, 0.5] })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let set = generate(&dataset(10, 2), &Fixed(probs.clone()), 0.6).unwrap();
        let r = coverage_report(&set, 10, 2).unwrap();
        assert!((r.coverage - 0.3).abs() < 1e-15);
        assert_eq!(r.per_class, vec![3, 0]);

        let none = generate(&dataset(10, 2), &Fixed(probs.clone()), 0.95).unwrap();
        assert_eq!(coverage_report(&none, 10, 2).unwrap().coverage, 0.0);
        let all = generate(&dataset(10, 2), &Fixed(probs), 0.0).unwrap();
        assert_eq!(coverage_report(&all, 10, 2).unwrap().coverage, 1.0);
    }

    #[test]
    fn file_round_trip() {
        let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let set = generate(&dataset(2, 2), &Fixed(probs), 0.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pl.json");
        let names = vec!["c0".to_string(), "c1".to_string()];
        write_pseudo_file(&set, &names, 17, &path).unwrap();
        let (back, seed) = read_pseudo_file(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(seed, 17);
    }
}
