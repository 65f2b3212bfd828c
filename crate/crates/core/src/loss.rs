//! Tier-weighted multi-label binary cross-entropy.
//!
//! For an image with logits `x` over `N` motifs:
//!
//! * target `t_j` is 1 for a primary motif, `smt` for a secondary motif and
//!   0 otherwise;
//! * `l_j = -[t_j log σ(x_j) + (1 - t_j) log(1 - σ(x_j))]`;
//! * the image weight `w` is `rfw`, 1 or `cw` for a red-flag, standard or
//!   canonical image;
//! * the image loss is `w / N · Σ_j l_j`, and a batch loss is the plain mean
//!   of image losses.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, RepresentativenessTag};
use crate::error::{Error, Result};
use crate::numkernel::{sigmoid, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Secondary motif target.
    pub smt: f64,
    /// Red-flag image weight.
    pub rfw: f64,
    /// Canonical image weight.
    pub cw: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smt: 0.5,
            rfw: 0.5,
            cw: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.smt) {
            return Err(Error::Config(format!("smt out of range [0, 1]: {}", self.smt)));
        }
        if !(self.rfw > 0.0 && self.rfw <= 1.0) {
            return Err(Error::Config(format!("rfw out of range (0, 1]: {}", self.rfw)));
        }
        if !(self.cw >= 1.0 && self.cw.is_finite()) {
            return Err(Error::Config(format!("cw must be >= 1: {}", self.cw)));
        }
        Ok(())
    }
}

pub fn build_targets(annotation: &AnnotationRecord, config: &LossConfig, n_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_classes];
    for m in &annotation.secondary {
        t[m.0] = config.smt;
    }
    for m in &annotation.primary {
        t[m.0] = 1.0;
    }
    t
}

/// Weight keyed on the highest representativeness tier among the primary
/// motifs.
pub fn image_weight(annotation: &AnnotationRecord, config: &LossConfig) -> f64 {
    match annotation.tier() {
        RepresentativenessTag::RedFlag => config.rfw,
        RepresentativenessTag::Standard => 1.0,
        RepresentativenessTag::Canonical => config.cw,
    }
}

/// Binary cross-entropy between target `t` and `σ(x)`, evaluated as
/// `max(x, 0) - x·t + log(1 + exp(-|x|))`.
pub fn bce_per_class(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn check_len(logits: &[f64], n_classes: usize) -> Result<()> {
    if logits.len() != n_classes || n_classes == 0 {
        return Err(Error::Shape(format!(
            "{} logits for {n_classes} classes",
            logits.len()
        )));
    }
    Ok(())
}

fn check_indices(annotation: &AnnotationRecord, n_classes: usize) -> Result<()> {
    match annotation.max_motif() {
        Some(m) if m.0 >= n_classes => Err(Error::Shape(format!(
            "{}: motif {m} out of range for {n_classes} outputs",
            annotation.image_id
        ))),
        _ => Ok(()),
    }
}

pub fn image_loss(logits: &[f64], annotation: &AnnotationRecord, config: &LossConfig) -> Result<f64> {
    let n = logits.len();
    check_len(logits, n)?;
    check_indices(annotation, n)?;
    let t = build_targets(annotation, config, n);
    let sum: f64 = logits.iter().zip(&t).map(|(&x, &t)| bce_per_class(x, t)).sum();
    Ok(image_weight(annotation, config) * (sum / n as f64))
}

/// Image loss and its gradient with respect to the logits, for an image
/// that sits in a batch of `batch_len` images (the gradient is already
/// divided by the batch size; the loss is not).
pub fn image_loss_and_grad(
    logits: &[f64],
    annotation: &AnnotationRecord,
    config: &LossConfig,
    batch_len: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = logits.len();
    check_len(logits, n)?;
    check_indices(annotation, n)?;
    let t = build_targets(annotation, config, n);
    let w = image_weight(annotation, config);
    let scale = w / (n * batch_len) as f64;
    let mut sum = 0.0;
    let grad = logits
        .iter()
        .zip(&t)
        .map(|(&x, &t)| {
            sum += bce_per_class(x, t);
            scale * (sigmoid(x) - t)
        })
        .collect();
    Ok((w * (sum / n as f64), grad))
}

/// Mean image loss over a batch (one row of logits per image) and the
/// gradient of that mean with respect to every logit.
pub fn batch_loss_and_grad(
    logit_batch: &DenseMatrix,
    annotations: &[&AnnotationRecord],
    config: &LossConfig,
) -> Result<(f64, DenseMatrix)> {
    let b = logit_batch.rows();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if annotations.len() != b {
        return Err(Error::Shape(format!(
            "{} annotations for a batch of {b}",
            annotations.len()
        )));
    }
    let mut grads = DenseMatrix::zeros(b, logit_batch.cols());
    let mut total = 0.0;
    for (i, ann) in annotations.iter().enumerate() {
        let (l, g) = image_loss_and_grad(logit_batch.row(i), ann, config, b)?;
        total += l;
        grads.row_mut(i).copy_from_slice(&g);
    }
    Ok((total / b as f64, grads))
}
