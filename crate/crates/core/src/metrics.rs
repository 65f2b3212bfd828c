//! Example-based multi-label metrics.
//!
//! For each test image with predicted set `O` (motifs whose probability is
//! at least the threshold) and ground-truth set `GT`:
//!
//! ```text
//! P = mean |O ∩ GT| / |GT|        R = mean |O ∩ GT| / |O|        F1 = 2PR / (P + R)
//! ```
//!
//! Note the orientation: `P` divides by the ground-truth size and `R` by the
//! prediction size. This is the default ([`PrOrientation::AsPrinted`]);
//! [`PrOrientation::Conventional`] swaps the denominators. An empty `O`
//! contributes 0 to the `|O|`-denominated term.
//!
//! Maximum accuracy is the fraction of images whose highest-probability
//! motif (lowest index on ties) is in `GT`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, DatasetManifest, GroundTruthMode, MotifId, RepresentativenessTag};
use crate::error::{Error, Result};
use crate::numkernel::sigmoid;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub image_id: String,
    pub probabilities: Vec<f64>,
    pub predicted: BTreeSet<MotifId>,
    pub argmax: MotifId,
    /// More than one motif shares the highest probability.
    pub argmax_tied: bool,
}

impl PredictionSet {
    pub fn from_probabilities(image_id: impl Into<String>, probabilities: Vec<f64>, threshold: f64) -> Self {
        let predicted = probabilities
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(i, _)| MotifId(i))
            .collect();
        let mut argmax = 0;
        let mut tied = false;
        for (i, &p) in probabilities.iter().enumerate().skip(1) {
            if p > probabilities[argmax] {
                argmax = i;
                tied = false;
            } else if p == probabilities[argmax] {
                tied = true;
            }
        }
        Self {
            image_id: image_id.into(),
            probabilities,
            predicted,
            argmax: MotifId(argmax),
            argmax_tied: tied,
        }
    }

    pub fn from_logits(image_id: impl Into<String>, logits: &[f64], threshold: f64) -> Self {
        Self::from_probabilities(image_id, logits.iter().map(|&x| sigmoid(x)).collect(), threshold)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrOrientation {
    /// P divides by |GT|, R divides by |O|.
    #[default]
    AsPrinted,
    /// P divides by |O|, R divides by |GT|.
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_aligned(preds: &[PredictionSet], truth: &[&AnnotationRecord]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} annotations",
            preds.len(),
            truth.len()
        )));
    }
    for (p, t) in preds.iter().zip(truth) {
        if p.image_id != t.image_id {
            return Err(Error::Data(format!(
                "predictions and annotations misaligned: '{}' vs '{}'",
                p.image_id, t.image_id
            )));
        }
    }
    Ok(())
}

pub fn example_metrics(
    preds: &[PredictionSet],
    truth: &[&AnnotationRecord],
    mode: GroundTruthMode,
    orientation: PrOrientation,
) -> Result<PrScores> {
    check_aligned(preds, truth)?;
    let mut by_gt = 0.0;
    let mut by_o = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        let gt = t.ground_truth(mode);
        let hit = p.predicted.intersection(&gt).count() as f64;
        by_gt += hit / gt.len() as f64;
        if p.predicted.is_empty() {
            log::debug!("{}: empty prediction set", p.image_id);
        } else {
            by_o += hit / p.predicted.len() as f64;
        }
    }
    let n = preds.len() as f64;
    let (precision, recall) = match orientation {
        PrOrientation::AsPrinted => (by_gt / n, by_o / n),
        PrOrientation::Conventional => (by_o / n, by_gt / n),
    };
    Ok(PrScores {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    })
}

pub fn max_accuracy(preds: &[PredictionSet], truth: &[&AnnotationRecord], mode: GroundTruthMode) -> Result<f64> {
    check_aligned(preds, truth)?;
    let hits = preds
        .iter()
        .zip(truth)
        .filter(|(p, t)| t.ground_truth(mode).contains(&p.argmax))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn exact_match_rate(preds: &[PredictionSet], truth: &[&AnnotationRecord], mode: GroundTruthMode) -> Result<f64> {
    check_aligned(preds, truth)?;
    let hits = preds
        .iter()
        .zip(truth)
        .filter(|(p, t)| !p.predicted.is_empty() && p.predicted == *t.ground_truth(mode))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    All,
    RedFlag,
    Canonical,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::All, Slice::RedFlag, Slice::Canonical];

    pub fn as_str(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::RedFlag => "red_flag",
            Slice::Canonical => "canonical",
        }
    }

    pub fn contains(self, annotation: &AnnotationRecord) -> bool {
        match self {
            Slice::All => true,
            Slice::RedFlag => annotation.tier() == RepresentativenessTag::RedFlag,
            Slice::Canonical => annotation.tier() == RepresentativenessTag::Canonical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub threshold: f64,
    pub conventional_pr: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            conventional_pr: false,
        }
    }
}

impl MetricOptions {
    pub fn orientation(&self) -> PrOrientation {
        if self.conventional_pr {
            PrOrientation::Conventional
        } else {
            PrOrientation::AsPrinted
        }
    }
}

/// Metrics for one slice of the evaluated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slice: Slice,
    pub n_images: usize,
    /// The slice holds no images; every metric is reported as 0.
    pub empty: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_with_sm: f64,
    pub max_accuracy: f64,
    pub exact_match: f64,
    pub argmax_ties: usize,
    pub empty_predictions: usize,
}

impl MetricsReport {
    fn empty(slice: Slice) -> Self {
        Self {
            slice,
            n_images: 0,
            empty: true,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            f1_with_sm: 0.0,
            max_accuracy: 0.0,
            exact_match: 0.0,
            argmax_ties: 0,
            empty_predictions: 0,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "precision" => self.precision,
            "recall" => self.recall,
            "f1" => self.f1,
            "f1_with_sm" => self.f1_with_sm,
            "max_accuracy" => self.max_accuracy,
            "exact_match" => self.exact_match,
            _ => return None,
        })
    }
}

/// Metric column names used in tabular output, with their report keys.
pub const METRIC_COLUMNS: [(&str, &str); 6] = [
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("f1", "F1"),
    ("f1_with_sm", "F1_SM"),
    ("max_accuracy", "MA"),
    ("exact_match", "ExactMatch"),
];

/// All metrics over aligned predictions and annotations.
pub fn evaluate(
    preds: &[PredictionSet],
    truth: &[&AnnotationRecord],
    slice: Slice,
    options: &MetricOptions,
) -> Result<MetricsReport> {
    if preds.is_empty() && truth.is_empty() {
        return Ok(MetricsReport::empty(slice));
    }
    let primary = example_metrics(preds, truth, GroundTruthMode::PrimaryOnly, options.orientation())?;
    let with_sm = example_metrics(preds, truth, GroundTruthMode::WithSecondary, options.orientation())?;
    Ok(MetricsReport {
        slice,
        n_images: preds.len(),
        empty: false,
        precision: primary.precision,
        recall: primary.recall,
        f1: primary.f1,
        f1_with_sm: with_sm.f1,
        max_accuracy: max_accuracy(preds, truth, GroundTruthMode::PrimaryOnly)?,
        exact_match: exact_match_rate(preds, truth, GroundTruthMode::PrimaryOnly)?,
        argmax_ties: preds.iter().filter(|p| p.argmax_tied).count(),
        empty_predictions: preds.iter().filter(|p| p.predicted.is_empty()).count(),
    })
}

/// Metrics over the predictions whose image falls in `slice`.
pub fn slice_report(
    preds: &[PredictionSet],
    manifest: &DatasetManifest,
    slice: Slice,
    options: &MetricOptions,
) -> Result<MetricsReport> {
    let mut kept_preds = Vec::new();
    let mut kept_truth = Vec::new();
    for p in preds {
        let ann = manifest
            .record(&p.image_id)
            .ok_or_else(|| Error::Data(format!("'{}' is not in the manifest", p.image_id)))?;
        if slice.contains(ann) {
            kept_preds.push(p.clone());
            kept_truth.push(ann);
        }
    }
    evaluate(&kept_preds, &kept_truth, slice, options)
}

/// Reports for every slice, in `Slice::ALL` order.
pub fn all_slices(preds: &[PredictionSet], manifest: &DatasetManifest, options: &MetricOptions) -> Result<Vec<MetricsReport>> {
    if preds.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    Slice::ALL
        .iter()
        .map(|&s| slice_report(preds, manifest, s, options))
        .collect()
}

/// Whitespace-separated table, one row per report.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("Slice N");
    for (_, col) in METRIC_COLUMNS {
        out.push(' ');
        out.push_str(col);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{} {}", r.slice.as_str(), r.n_images));
        for (key, _) in METRIC_COLUMNS {
            out.push_str(&format!(" {}", r.metric(key).unwrap()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, primary: &[usize], secondary: &[usize], tag: RepresentativenessTag) -> AnnotationRecord {
        AnnotationRecord::new(
            id,
            primary.iter().copied().map(MotifId),
            secondary.iter().copied().map(MotifId),
            tag,
        )
        .unwrap()
    }

    fn pred(id: &str, n: usize, on: &[usize]) -> PredictionSet {
        let probs = (0..n).map(|j| if on.contains(&j) { 0.9 } else { 0.1 }).collect();
        PredictionSet::from_probabilities(id, probs, DEFAULT_THRESHOLD)
    }

    #[test]
    fn perfect_predictions() {
        let a = ann("a", &[0], &[], RepresentativenessTag::Standard);
        let b = ann("b", &[1, 2], &[], RepresentativenessTag::Standard);
        let s = example_metrics(
            &[pred("a", 3, &[0]), pred("b", 3, &[1, 2])],
            &[&a, &b],
            GroundTruthMode::PrimaryOnly,
            PrOrientation::AsPrinted,
        )
        .unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn extra_prediction() {
        let a = ann("a", &[0], &[], RepresentativenessTag::Standard);
        let p = [pred("a", 2, &[0, 1])];
        let s = example_metrics(&p, &[&a], GroundTruthMode::PrimaryOnly, PrOrientation::AsPrinted).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let c = example_metrics(&p, &[&a], GroundTruthMode::PrimaryOnly, PrOrientation::Conventional).unwrap();
        assert_eq!((c.precision, c.recall), (0.5, 1.0));
        assert_eq!(exact_match_rate(&p, &[&a], GroundTruthMode::PrimaryOnly).unwrap(), 0.0);
    }

    #[test]
    fn max_accuracy_cases() {
        let a = ann("a", &[0], &[], RepresentativenessTag::Standard);
        let b = ann("b", &[1], &[], RepresentativenessTag::Standard);
        let preds = [pred("a", 3, &[0]), pred("b", 3, &[2])];
        assert_eq!(max_accuracy(&preds, &[&a, &b], GroundTruthMode::PrimaryOnly).unwrap(), 0.5);
        let tie = PredictionSet::from_probabilities("a", vec![0.3, 0.7, 0.7], 0.5);
        assert_eq!(tie.argmax, MotifId(1));
        assert!(tie.argmax_tied);
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = PredictionSet::from_logits("a", &[0.0, 0.0], 0.5);
        assert_eq!(p.predicted.len(), 2);
        let p = PredictionSet::from_logits("a", &[30.0, -2.0], 1.0);
        assert!(p.predicted.is_empty());
    }

    #[test]
    fn empty_prediction_set_is_total() {
        let a = ann("a", &[0], &[], RepresentativenessTag::Standard);
        let p = [PredictionSet::from_probabilities("a", vec![0.1, 0.2], 0.5)];
        let s = example_metrics(&p, &[&a], GroundTruthMode::PrimaryOnly, PrOrientation::AsPrinted).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn misaligned_and_empty() {
        let a = ann("a", &[0], &[], RepresentativenessTag::Standard);
        assert!(example_metrics(&[pred("b", 2, &[0])], &[&a], GroundTruthMode::PrimaryOnly, PrOrientation::AsPrinted).is_err());
        assert!(max_accuracy(&[], &[], GroundTruthMode::PrimaryOnly).is_err());
    }

    #[test]
    fn slices() {
        let recs = vec![
            ann("a", &[0], &[], RepresentativenessTag::RedFlag),
            ann("b", &[1], &[], RepresentativenessTag::Standard),
            ann("c", &[1], &[0], RepresentativenessTag::Standard),
        ];
        let m = DatasetManifest::new(vec!["x".into(), "y".into()], recs).unwrap();
        let preds = [pred("a", 2, &[0]), pred("b", 2, &[1]), pred("c", 2, &[1])];
        let opts = MetricOptions { threshold: 0.5, conventional_pr: false };
        let reports = all_slices(&preds, &m, &opts).unwrap();
        assert_eq!(reports[0].n_images, 3);
        assert_eq!(reports[0].f1, 1.0);
        assert_eq!(reports[1].n_images, 1);
        assert_eq!(reports[1].max_accuracy, 1.0);
        assert!(reports[2].empty);
        assert_eq!(reports[2].f1, 0.0);
        let table = reports_table(&reports);
        assert!(table.starts_with("Slice N Precision Recall F1 F1_SM MA ExactMatch\nall 3 1 1 1 "), "{table}");
    }

    #[test]
    fn secondary_credit_helps_when_predicted() {
        let a = ann("a", &[0], &[1], RepresentativenessTag::Standard);
        let p = [pred("a", 3, &[0, 1])];
        let prim = example_metrics(&p, &[&a], GroundTruthMode::PrimaryOnly, PrOrientation::AsPrinted).unwrap();
        let with = example_metrics(&p, &[&a], GroundTruthMode::WithSecondary, PrOrientation::AsPrinted).unwrap();
        assert!(with.f1 >= prim.f1);
        assert_eq!(with.f1, 1.0);
    }
}
