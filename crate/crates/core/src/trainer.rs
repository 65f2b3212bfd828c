//! Training loop: seeded shuffling, mini-batches, Adam, periodic evaluation
//! and run-directory output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{manifest_to_string, AnnotationRecord, DatasetManifest, EmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::metrics::{self, MetricOptions, MetricsReport, PredictionSet};
use crate::model::{self, HeadConfig, HeadParams};
use crate::numkernel::DenseMatrix;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::par;

/// Samples per gradient work unit. Fixed so the reduction order does not
/// depend on the number of threads.
pub const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0: final only).
    pub eval_every: usize,
    pub threshold: f64,
    pub conventional_pr: bool,
    /// L2-normalize embeddings before they enter the head.
    pub normalize_features: bool,
    /// Used only when the manifest carries no split.
    pub test_fraction: f64,
    pub loss: LossConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    /// 200 epochs of Adam (lr 0.001, no weight decay) with batches of 256.
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 200,
            batch_size: 256,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            eval_every: 0,
            threshold: metrics::DEFAULT_THRESHOLD,
            conventional_pr: false,
            normalize_features: false,
            test_fraction: 0.2,
            loss: LossConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            threshold: self.threshold,
            conventional_pr: self.conventional_pr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.adam().validate()?;
        self.loss.validate()?;
        self.head.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEvaluation {
    pub epoch: usize,
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Mean image loss over the training split, per epoch.
    pub epoch_losses: Vec<f64>,
    pub evaluations: Vec<EpochEvaluation>,
    /// Test-split reports after the last epoch, one per slice.
    pub final_reports: Vec<MetricsReport>,
    pub params: HeadParams,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.final_reports.first()
    }
}

/// Feature rows for `records`, widened to f64 and optionally L2-normalized.
pub fn feature_matrix(store: &EmbeddingStore, records: &[&AnnotationRecord], normalize: bool) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(records.len(), store.dim());
    for (i, r) in records.iter().enumerate() {
        let row = store
            .get(&r.image_id)
            .ok_or_else(|| Error::Data(format!("no embedding for image '{}'", r.image_id)))?;
        let out = m.row_mut(i);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = f64::from(v);
        }
        if normalize {
            normalize_row(out);
        }
    }
    Ok(m)
}

pub fn normalize_row(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Mean batch loss and its gradient with respect to every parameter, over
/// the samples `rows` of `features`.
pub fn batch_objective(
    params: &HeadParams,
    features: &DenseMatrix,
    rows: &[usize],
    annotations: &[&AnnotationRecord],
    config: &LossConfig,
) -> Result<(f64, HeadParams)> {
    let b = rows.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let partials = par::map_chunks(rows, GRAD_CHUNK, |chunk| -> Result<(f64, HeadParams)> {
        let mut grads = params.zeros_like();
        let mut sum = 0.0;
        for &r in chunk {
            let (logits, trace) = model::forward(params, features.row(r))?;
            let (l, g) = loss::image_loss_and_grad(&logits, annotations[r], config, b)?;
            sum += l;
            model::backward_into(params, &trace, &g, &mut grads)?;
        }
        Ok((sum, grads))
    });
    let mut total = 0.0;
    let mut grads: Option<HeadParams> = None;
    for p in partials {
        let (l, g) = p?;
        total += l;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((total / b as f64, grads.expect("non-empty batch")))
}

pub fn predict_matrix(
    params: &HeadParams,
    ids: &[&str],
    features: &DenseMatrix,
    threshold: f64,
) -> Result<Vec<PredictionSet>> {
    let logits = model::logits_batch(params, features)?;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, id)| PredictionSet::from_logits(*id, logits.row(i), threshold))
        .collect())
}

fn check_compat(manifest: &DatasetManifest, store: &EmbeddingStore, head: &HeadConfig) -> Result<()> {
    store.check_dim(head.input_dim)?;
    if head.output_dim != manifest.n_classes() {
        return Err(Error::Shape(format!(
            "head has {} outputs, manifest declares {} motifs",
            head.output_dim,
            manifest.n_classes()
        )));
    }
    store.check_covers(manifest)
}

/// Trains a head on the manifest's train split and evaluates it on the
/// test split. With `run_dir`, writes the config snapshot, loss log,
/// checkpoint, split manifest and metric reports there.
pub fn train(
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate()?;
    check_compat(manifest, store, &config.head)?;
    let train_recs = manifest.split_records(Split::Train)?;
    let test_recs = manifest.split_records(Split::Test)?;
    if train_recs.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let x_train = feature_matrix(store, &train_recs, config.normalize_features)?;
    let x_test = feature_matrix(store, &test_recs, config.normalize_features)?;
    let test_ids: Vec<&str> = test_recs.iter().map(|r| r.image_id.as_str()).collect();
    let options = config.metric_options();

    let mut params = model::init_params(&config.head, config.seed)?;
    let mut state = AdamState::new(&params, config.adam());
    let n = train_recs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut evaluations = Vec::new();

    let evaluate = |params: &HeadParams| -> Result<Vec<MetricsReport>> {
        if test_recs.is_empty() {
            return Ok(Vec::new());
        }
        let preds = predict_matrix(params, &test_ids, &x_test, options.threshold)?;
        metrics::all_slices(&preds, manifest, &options)
    };

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = batch_objective(&params, &x_train, batch, &train_recs, &config.loss)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            epoch_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state)?;
        }
        let epoch_loss = epoch_sum / n as f64;
        log::debug!("epoch {} loss {epoch_loss}", epoch + 1);
        epoch_losses.push(epoch_loss);
        let done = epoch + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done != config.epochs {
            evaluations.push(EpochEvaluation {
                epoch: done,
                reports: evaluate(&params)?,
            });
        }
    }
    if params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    let final_reports = evaluate(&params)?;
    if !final_reports.is_empty() {
        evaluations.push(EpochEvaluation {
            epoch: config.epochs,
            reports: final_reports.clone(),
        });
    }
    let mut record = RunRecord {
        config: config.clone(),
        epoch_losses,
        evaluations,
        final_reports,
        params,
        checkpoint_path: None,
        wall_clock_secs: 0.0,
    };
    if let Some(dir) = run_dir {
        write_run_dir(&mut record, manifest, dir)?;
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    log::info!(
        "trained {} epochs on {n} images in {:.2}s",
        config.epochs,
        record.wall_clock_secs
    );
    Ok(record)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Run directory layout:
///
/// - `config.toml`: the training configuration
/// - `manifest.jsonl`: the manifest with its train/test split
/// - `loss.tsv`: per-epoch mean training loss
/// - `checkpoint.mhck`: final parameters
/// - `metrics_<slice>.json`, `metrics.dat`: final test-split reports
/// - `evaluations.json`: periodic reports
///
/// Timing is logged, never written, so reruns are byte-identical.
fn write_run_dir(record: &mut RunRecord, manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = toml::to_string(&record.config).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("config.toml"), config)?;
    write_file(&dir.join("manifest.jsonl"), manifest_to_string(manifest))?;
    let mut log = String::from("epoch\tloss\n");
    for (i, l) in record.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l}\n", i + 1));
    }
    write_file(&dir.join("loss.tsv"), log)?;
    let ck = dir.join("checkpoint.mhck");
    model::save_checkpoint(&record.params, &manifest.motif_names, &ck)?;
    record.checkpoint_path = Some(ck);
    write_reports(&record.final_reports, dir)?;
    let evals = serde_json::to_string_pretty(&record.evaluations).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&dir.join("evaluations.json"), evals)
}

/// Writes `metrics_<slice>.json` per report plus a combined `metrics.dat`.
pub fn write_reports(reports: &[MetricsReport], dir: &Path) -> Result<()> {
    for r in reports {
        let json = serde_json::to_string_pretty(r).map_err(|e| Error::Data(e.to_string()))?;
        write_file(&dir.join(format!("metrics_{}.json", r.slice.as_str())), json)?;
    }
    if !reports.is_empty() {
        write_file(&dir.join("metrics.dat"), metrics::reports_table(reports))?;
    }
    Ok(())
}

/// Runs a checkpoint over `ids` from `store`.
pub fn predict(
    checkpoint: &model::Checkpoint,
    store: &EmbeddingStore,
    ids: &[&str],
    threshold: f64,
    normalize: bool,
) -> Result<Vec<PredictionSet>> {
    store.check_dim(checkpoint.params.config().input_dim)?;
    let mut m = DenseMatrix::zeros(ids.len(), store.dim());
    for (i, id) in ids.iter().enumerate() {
        let row = store
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown image id '{id}'")))?;
        let out = m.row_mut(i);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = f64::from(v);
        }
        if normalize {
            normalize_row(out);
        }
    }
    predict_matrix(&checkpoint.params, ids, &m, threshold)
}

/// Tab-separated probability table: `image_id`, one column per motif, and
/// the predicted motif names joined by `,`.
pub fn predictions_table(preds: &[PredictionSet], motif_names: &[String]) -> String {
    let mut out = String::from("image_id");
    for n in motif_names {
        out.push('\t');
        out.push_str(n);
    }
    out.push_str("\tpredicted\n");
    for p in preds {
        out.push_str(&p.image_id);
        for v in &p.probabilities {
            out.push_str(&format!("\t{v:.6}"));
        }
        let names: Vec<&str> = p.predicted.iter().map(|m| motif_names[m.0].as_str()).collect();
        out.push('\t');
        out.push_str(&names.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, stratified_split, SynthParams};

    fn small() -> (DatasetManifest, EmbeddingStore) {
        let p = SynthParams { n_classes: 4, dim: 8, per_class: 20, sm_rate: 0.1, noise: 0.05, ..Default::default() };
        let (m, s) = generate_synthetic(&p).unwrap();
        (stratified_split(&m, 0.25, 3).unwrap(), s)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.01,
            seed: 9,
            head: HeadConfig::mlp(8, &[16], 4),
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (m, s) = small();
        let err = train(&m, &s, &cfg(0), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut c = cfg(1);
        c.head.input_dim = 9;
        assert!(matches!(train(&m, &s, &c, None), Err(Error::Shape(_))));
        assert!(train(&m.without_secondary(), &s, &cfg(1), None).is_ok());
        let mut unsplit = m.clone();
        unsplit.split = None;
        assert!(train(&unsplit, &s, &cfg(1), None).is_err());
    }

    #[test]
    fn missing_embeddings_are_listed() {
        let (m, _) = small();
        let (_, other) = generate_synthetic(&SynthParams { n_classes: 4, dim: 8, per_class: 10, ..Default::default() }).unwrap();
        let err = train(&m, &other, &cfg(1), None).unwrap_err();
        assert!(err.to_string().contains("missing from embedding store"), "{err}");
    }

    #[test]
    fn learns_and_is_deterministic() {
        let (m, s) = small();
        let a = train(&m, &s, &cfg(60), None).unwrap();
        let b = train(&m, &s, &cfg(60), None).unwrap();
        assert_eq!(a.epoch_losses.len(), 60);
        let bits = |r: &RunRecord| r.epoch_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.params, b.params);
        assert!(a.epoch_losses[59] < a.epoch_losses[0]);
        assert!(a.final_report().unwrap().max_accuracy > 0.9);
    }

    #[test]
    fn periodic_evaluations() {
        let (m, s) = small();
        let mut c = cfg(10);
        c.eval_every = 3;
        let r = train(&m, &s, &c, None).unwrap();
        let epochs: Vec<usize> = r.evaluations.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, vec![3, 6, 9, 10]);
    }

    #[test]
    fn batch_objective_is_chunk_invariant_in_value() {
        let (m, s) = small();
        let recs = m.split_records(Split::Train).unwrap();
        let x = feature_matrix(&s, &recs, false).unwrap();
        let p = model::init_params(&HeadConfig::mlp(8, &[5], 4), 2).unwrap();
        let rows: Vec<usize> = (0..recs.len()).collect();
        let (l, _) = batch_objective(&p, &x, &rows, &recs, &LossConfig::default()).unwrap();
        let direct: f64 = rows
            .iter()
            .map(|&r| loss::image_loss(&model::logits(&p, x.row(r)).unwrap(), recs[r], &LossConfig::default()).unwrap())
            .sum::<f64>()
            / rows.len() as f64;
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_head_predicts_everything_at_half() {
        let (m, s) = small();
        let params = HeadParams::zeros(&HeadConfig::mlp(8, &[3], 4)).unwrap();
        let ck = model::Checkpoint { params, motif_names: m.motif_names.clone() };
        let ids: Vec<&str> = s.ids().iter().take(3).map(String::as_str).collect();
        let preds = predict(&ck, &s, &ids, 0.5, false).unwrap();
        assert!(preds.iter().all(|p| p.predicted.len() == 4 && p.probabilities.iter().all(|&q| q == 0.5)));
        let none = predict(&ck, &s, &ids, 1.0, false).unwrap();
        assert!(none.iter().all(|p| p.predicted.is_empty()));
        assert!(predict(&ck, &s, &["nope"], 0.5, false).is_err());
    }
}
