//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cluster::{self, KMeansConfig};
use crate::data::{
    generate_synthetic, load_manifest, stratified_split, write_manifest, DatasetManifest, EmbeddingStore, Split,
    SynthParams,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricOptions};
use crate::model::{self, HeadConfig, DEFAULT_HIDDEN};
use crate::sweep::{self, SweepSpec};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "motifhead", version, about = "Train and evaluate multi-label heads over image embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a head and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a manifest.
    Eval(EvalArgs),
    /// Print per-image motif probabilities.
    Predict(PredictArgs),
    /// Train every point of a hyperparameter grid.
    Sweep(SweepArgs),
    /// K-means over embeddings, with agreement against motif labels.
    Cluster(ClusterArgs),
    /// Write a synthetic manifest and embedding store.
    GenSynth(GenSynthArgs),
    /// Validate an embedding store file.
    ExtractCheck(ExtractCheckArgs),
}

/// Run configuration file (TOML). Omitted fields take their defaults.
///
/// ```toml
/// manifest = "data/manifest.jsonl"
/// store = "data/store.mhed"
///
/// [train]
/// epochs = 200
///
/// [train.loss]
/// smt = 0.5
/// ```
///
/// Without a `[train.head]` table the head is `dim -> 256 -> motifs`, with
/// `dim` read from the store and `motifs` from the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub manifest: Option<PathBuf>,
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(skip)]
    pub head_given: bool,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file: RunConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        file.head_given = raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("head"));
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Training epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate, no weight decay [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for initialization, shuffling and splitting [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Secondary motif target [default: 0.5]
    #[arg(long)]
    pub smt: Option<f64>,
    /// Red-flag image weight [default: 0.5]
    #[arg(long)]
    pub rfw: Option<f64>,
    /// Canonical image weight [default: 2]
    #[arg(long)]
    pub cw: Option<f64>,
    /// Hidden layer widths, comma separated [default: 256]
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Probability threshold for predicted motifs [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Test share when the manifest has no split [default: 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Evaluate every N epochs, 0 for the final epoch only [default: 0]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// L2-normalize embeddings before the head
    #[arg(long)]
    pub normalize: bool,
    /// Use the conventional precision/recall denominators
    #[arg(long)]
    pub conventional_pr: bool,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(epochs => epochs);
        set!(batch_size => batch_size);
        set!(lr => lr);
        set!(seed => seed);
        set!(smt => loss.smt);
        set!(rfw => loss.rfw);
        set!(cw => loss.cw);
        set!(hidden => head.hidden_dims);
        set!(threshold => threshold);
        set!(test_fraction => test_fraction);
        set!(eval_every => eval_every);
        c.normalize_features |= self.normalize;
        c.conventional_pr |= self.conventional_pr;
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (overrides the config file)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Embedding store (overrides the config file)
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Run directory to create
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest with a train/test split
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Probability threshold for predicted motifs [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// L2-normalize embeddings before the head
    #[arg(long)]
    pub normalize: bool,
    /// Use the conventional precision/recall denominators
    #[arg(long)]
    pub conventional_pr: bool,
    /// Also write metrics_<slice>.json and metrics.dat here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Image ids, comma separated [default: every image in the store]
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<String>>,
    /// Probability threshold for predicted motifs [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// L2-normalize embeddings before the head
    #[arg(long)]
    pub normalize: bool,
    /// Write the table here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec file
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Train grid points concurrently
    #[arg(long)]
    pub parallel: bool,
    /// Metric to rank grid points by, e.g. MA or f1 [default: max_accuracy]
    #[arg(long)]
    pub rank_by: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Manifest for label agreement; clusters its images only
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of clusters [default: 20]
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    /// Skip L2 normalization of the embeddings
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Share of images with a secondary motif
    #[arg(long, default_value_t = 0.015)]
    pub sm_rate: f64,
    /// Share of red-flag images
    #[arg(long, default_value_t = 0.056)]
    pub rf_rate: f64,
    /// Share of canonical images
    #[arg(long, default_value_t = 0.108)]
    pub can_rate: f64,
    /// Gaussian noise scale around the class anchors
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Test share of the stratified split
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Directory for manifest.jsonl and store.mhed
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractCheckArgs {
    /// Store file to validate
    pub store: PathBuf,
    /// Expected embedding dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Require an embedding for every image of this manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::ExtractCheck(a) => cmd_extract_check(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn with_split(manifest: DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if manifest.split.is_some() {
        Ok(manifest)
    } else {
        stratified_split(&manifest, fraction, seed)
    }
}

pub fn default_head(store: &EmbeddingStore, manifest: &DatasetManifest) -> HeadConfig {
    HeadConfig::mlp(store.dim(), &[DEFAULT_HIDDEN], manifest.n_classes())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let manifest_path = a
        .manifest
        .clone()
        .or(file.manifest.take())
        .ok_or_else(|| Error::Config("no manifest given (--manifest or `manifest` in the config)".into()))?;
    let store_path = a
        .store
        .clone()
        .or(file.store.take())
        .ok_or_else(|| Error::Config("no store given (--store or `store` in the config)".into()))?;
    let mut config = file.train;
    let store = EmbeddingStore::open(&store_path)?;
    let manifest = load_manifest(&manifest_path)?;
    if !file.head_given {
        config.head = default_head(&store, &manifest);
    }
    a.overrides.apply(&mut config);
    config.validate()?;
    let manifest = with_split(manifest, config.test_fraction, config.seed)?;
    let record = trainer::train(&manifest, &store, &config, Some(&a.out))?;
    print!("{}", metrics::reports_table(&record.final_reports));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = model::load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    if ck.motif_names != manifest.motif_names {
        return Err(Error::Data("checkpoint motifs differ from the manifest's".into()));
    }
    let store = EmbeddingStore::open(&a.store)?;
    let test = manifest.split_records(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let options = MetricOptions {
        threshold: a.threshold.unwrap_or(metrics::DEFAULT_THRESHOLD),
        conventional_pr: a.conventional_pr,
    };
    if !(0.0..=1.0).contains(&options.threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {}", options.threshold)));
    }
    let ids: Vec<&str> = test.iter().map(|r| r.image_id.as_str()).collect();
    let preds = trainer::predict(&ck, &store, &ids, options.threshold, a.normalize)?;
    let reports = metrics::all_slices(&preds, &manifest, &options)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        trainer::write_reports(&reports, dir)?;
    }
    print!("{}", metrics::reports_table(&reports));
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = model::load_checkpoint(&a.checkpoint)?;
    let store = EmbeddingStore::open(&a.store)?;
    let threshold = a.threshold.unwrap_or(metrics::DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let ids: Vec<&str> = match &a.ids {
        Some(ids) => ids.iter().map(String::as_str).collect(),
        None => store.ids().iter().map(String::as_str).collect(),
    };
    let preds = trainer::predict(&ck, &store, &ids, threshold, a.normalize)?;
    let table = trainer::predictions_table(&preds, &ck.motif_names);
    match &a.out {
        Some(p) => write(p, table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let head_given = raw
        .get("base")
        .and_then(|b| b.as_table())
        .is_some_and(|b| b.contains_key("head"));
    let mut spec = SweepSpec::parse(&text)?;
    spec.parallel |= a.parallel;
    let store = EmbeddingStore::open(&a.store)?;
    let manifest = load_manifest(&a.manifest)?;
    if !head_given {
        spec.base.head = default_head(&store, &manifest);
        spec.validate()?;
    }
    let manifest = with_split(manifest, spec.base.test_fraction, spec.base.seed)?;
    create_dir(&a.out)?;
    let outcome = sweep::run_sweep(&spec, &manifest, &store, Some(&a.out))?;
    let rank_by = a.rank_by.as_deref().unwrap_or("max_accuracy");
    let ranking = sweep::rank_models(&outcome.table, rank_by)?;
    write(&a.out.join("ranking.tsv"), sweep::ranking_table(&ranking))?;
    print!("{}", outcome.table.to_dat());
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let store = EmbeddingStore::open(&a.store)?;
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let ids: Vec<&str> = match &manifest {
        Some(m) => {
            store.check_covers(m)?;
            m.records.iter().map(|r| r.image_id.as_str()).collect()
        }
        None => store.ids().iter().map(String::as_str).collect(),
    };
    let config = KMeansConfig {
        k: a.k,
        seed: a.seed,
        max_iters: a.max_iters,
        normalize: !a.raw,
        ..Default::default()
    };
    let points = cluster::embedding_matrix(&store, &ids, config.normalize)?;
    let result = cluster::kmeans(&points, &config)?;
    create_dir(&a.out)?;
    let mut inertia = String::from("iteration\tinertia\n");
    for (i, v) in result.inertia_history.iter().enumerate() {
        inertia.push_str(&format!("{}\t{v}\n", i + 1));
    }
    write(&a.out.join("inertia.tsv"), inertia)?;
    match &manifest {
        Some(m) => {
            write(&a.out.join("assignments.tsv"), cluster::assignments_table(&ids, &result, m))?;
            let labels: Vec<_> = ids
                .iter()
                .map(|id| m.record(id).expect("ids come from the manifest").first_primary())
                .collect();
            let agreement = cluster::cluster_label_agreement(&result.assignments, &labels, a.k, m.n_classes())?;
            write(
                &a.out.join("contingency.tsv"),
                cluster::contingency_table(&agreement, &m.motif_names),
            )?;
            println!("purity {}", agreement.purity);
        }
        None => {
            let mut out = String::from("image_id\tcluster\n");
            for (id, c) in ids.iter().zip(&result.assignments) {
                out.push_str(&format!("{id}\t{c}\n"));
            }
            write(&a.out.join("assignments.tsv"), out)?;
        }
    }
    println!(
        "k={} iterations={} converged={} inertia={}",
        a.k,
        result.iterations,
        result.converged,
        result.inertia()
    );
    Ok(())
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let params = SynthParams {
        n_classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        sm_rate: a.sm_rate,
        rf_rate: a.rf_rate,
        can_rate: a.can_rate,
        noise: a.noise,
        seed: a.seed,
    };
    let (manifest, store) = generate_synthetic(&params)?;
    let manifest = stratified_split(&manifest, a.test_fraction, a.seed)?;
    create_dir(&a.out)?;
    write_manifest(&manifest, &a.out.join("manifest.jsonl"))?;
    store.write(&a.out.join("store.mhed"))?;
    println!(
        "wrote {} images, {} motifs, dim {} to {}",
        store.len(),
        manifest.n_classes(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}

fn cmd_extract_check(a: &ExtractCheckArgs) -> Result<()> {
    let store = EmbeddingStore::open(&a.store)?;
    if let Some(dim) = a.dim {
        store.check_dim(dim)?;
    }
    if let Some(p) = &a.manifest {
        store.check_covers(&load_manifest(p)?)?;
    }
    println!("OK, count={}, dim={}", store.len(), store.dim());
    Ok(())
}
