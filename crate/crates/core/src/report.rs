//! Experiment report and confidence histograms.

use serde::{Deserialize, Serialize};

use crate::align::AlignCurves;
use crate::config::Hyperparameters;
use crate::encoder::EncoderDescriptor;
use crate::params::ParamReport;
use crate::pseudo::CoverageReport;
use crate::stage1::Stage1Curves;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

/// Counts of the per-row maximum probability in 50 equal bins over `[0, 1]`.
/// Bin `b` holds `[b/50, (b+1)/50)`; the last bin also holds 1.
pub fn confidence_histogram(probs: &Tensor) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    if probs.is_empty() {
        return bins;
    }
    for i in 0..probs.rows() {
        let m = probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let b = ((m * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub classes: Vec<String>,
    pub sources: Vec<String>,
    pub target: String,
    pub unseen: Vec<String>,
    pub encoder: EncoderDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub base: u64,
    pub prompt_init: Vec<u64>,
    pub autoencoder: u64,
    pub latent_init: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub threshold: f64,
    #[serde(flatten)]
    pub coverage: CoverageReport,
    /// Pseudo-label accuracy against the target's ground truth, when known.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairReport {
    pub pair_index: usize,
    pub source: String,
    pub accuracy: Option<f64>,
    pub checkpoint: String,
    pub curves: Stage1Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub per_prompt_accuracy: Option<Vec<f64>>,
    pub averaged_accuracy: Option<f64>,
    pub temperature: f64,
    pub checkpoint: String,
    pub curves: AlignCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstReport {
    pub domain: String,
    pub accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub coverage: f64,
    pub params: usize,
    pub checkpoint: String,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub zero_shot: Vec<usize>,
    pub aligned: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: Hyperparameters,
    pub experiment: ExperimentSummary,
    pub seeds: SeedReport,
    pub pseudo_labels: PseudoReport,
    pub zero_shot_accuracy: Option<f64>,
    pub stage1: Vec<PairReport>,
    pub stage2: Stage2Report,
    pub lst: Vec<LstReport>,
    pub params: ParamReport,
    /// Confidence on the target: zero-shot scorer and averaged aligned logits.
    pub confidence_histograms: Histograms,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn stage1_accuracies(&self) -> Option<Vec<f64>> {
        self.stage1.iter().map(|p| p.accuracy).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_land_in_quarter_bin() {
        let h = confidence_histogram(&Tensor::full(&[3, 4], 0.25));
        assert_eq!(h[12], 3);
        assert_eq!(h.iter().sum::<usize>(), 3);
    }

    #[test]
    fn empty_and_boundaries() {
        assert_eq!(confidence_histogram(&Tensor::zeros(&[0, 4])), vec![0; 50]);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.98, 0.02]]).unwrap();
        let h = confidence_histogram(&p);
        assert_eq!(h[49], 2);
        assert_eq!(h[25], 1);
    }
}
