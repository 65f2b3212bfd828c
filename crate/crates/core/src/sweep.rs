//! Grid sweeps over training hyperparameters.
//!
//! A sweep file is TOML:
//!
//! ```toml
//! metrics = ["precision", "recall", "f1", "f1_with_sm", "max_accuracy"]
//!
//! [base]
//! epochs = 200
//!
//! [[axes]]
//! name = "rfw"
//! values = [0.5, 0.75, 1.0]
//!
//! [[axes]]
//! name = "cw"
//! values = [1.0, 1.5, 2.0]
//! ```
//!
//! Every grid point is trained on the same split with the same seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::{stratified_split, DatasetManifest, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, METRIC_COLUMNS};
use crate::par;
use crate::trainer::{self, RunRecord, TrainConfig};

pub const AXIS_NAMES: [&str; 12] = [
    "smt",
    "rfw",
    "cw",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "hidden_dims",
    "conv_kernel",
    "conv_channels",
    "threshold",
    "normalize_features",
];

fn default_metrics() -> Vec<String> {
    ["precision", "recall", "f1", "f1_with_sm", "max_accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: TrainConfig,
    pub axes: Vec<Axis>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    /// Train grid points concurrently.
    #[serde(default)]
    pub parallel: bool,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(format!("sweep spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("sweep has no axes".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if !AXIS_NAMES.contains(&a.name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown sweep axis '{}' (expected one of {})",
                    a.name,
                    AXIS_NAMES.join(", ")
                )));
            }
            if a.values.is_empty() {
                return Err(Error::Config(format!("sweep axis '{}' has no values", a.name)));
            }
            if self.axes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("sweep axis '{}' given twice", a.name)));
            }
        }
        for m in &self.metrics {
            if !METRIC_COLUMNS.iter().any(|(k, _)| k == m) {
                return Err(Error::Config(format!("unknown metric '{m}'")));
            }
        }
        for point in self.grid() {
            self.config_at(&point)?;
        }
        Ok(())
    }

    /// Cross product of axis value indices, last axis varying fastest.
    pub fn grid(&self) -> Vec<Vec<usize>> {
        let mut points = vec![Vec::new()];
        for a in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    (0..a.values.len()).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn label_at(&self, point: &[usize]) -> String {
        self.axes
            .iter()
            .zip(point)
            .map(|(a, &i)| value_label(&a.values[i]))
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn config_at(&self, point: &[usize]) -> Result<TrainConfig> {
        let mut config = self.base.clone();
        for (a, &i) in self.axes.iter().zip(point) {
            apply_axis(&mut config, &a.name, &a.values[i])?;
        }
        config.validate().map_err(|e| Error::Config(format!("grid point {}: {e}", self.label_at(point))))?;
        Ok(config)
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::String(s) => s.replace(char::is_whitespace, "_"),
        Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join("_"),
        other => other.to_string(),
    }
}

fn as_f64(name: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("axis '{name}' expects numbers, got {v}"))),
    }
}

fn as_usize(name: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("axis '{name}' expects non-negative integers, got {v}"))),
    }
}

fn as_usizes(name: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_usize(name, x)).collect(),
        _ => Err(Error::Config(format!("axis '{name}' expects integer lists, got {v}"))),
    }
}

pub fn apply_axis(config: &mut TrainConfig, name: &str, v: &Value) -> Result<()> {
    match name {
        "smt" => config.loss.smt = as_f64(name, v)?,
        "rfw" => config.loss.rfw = as_f64(name, v)?,
        "cw" => config.loss.cw = as_f64(name, v)?,
        "lr" => config.lr = as_f64(name, v)?,
        "threshold" => config.threshold = as_f64(name, v)?,
        "epochs" => config.epochs = as_usize(name, v)?,
        "batch_size" => config.batch_size = as_usize(name, v)?,
        "seed" => config.seed = as_usize(name, v)? as u64,
        "conv_kernel" => config.head.conv_kernel = Some(as_usize(name, v)?),
        "hidden_dims" => config.head.hidden_dims = as_usizes(name, v)?,
        "conv_channels" => {
            let c = as_usizes(name, v)?;
            let pair: [usize; 2] = c
                .try_into()
                .map_err(|_| Error::Config(format!("axis '{name}' expects pairs, got {v}")))?;
            config.head.conv_channels = Some(pair);
        }
        "normalize_features" => {
            config.normalize_features = v
                .as_bool()
                .ok_or_else(|| Error::Config(format!("axis '{name}' expects booleans, got {v}")))?
        }
        _ => return Err(Error::Config(format!("unknown sweep axis '{name}'"))),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub values: Vec<f64>,
}

/// One row per grid point, one column per metric, over all test images.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis_label: String,
    /// Report keys, as in [`METRIC_COLUMNS`].
    pub metrics: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn column(&self, metric: &str) -> Result<usize> {
        self.metrics
            .iter()
            .position(|m| m == metric)
            .or_else(|| {
                let key = METRIC_COLUMNS.iter().find(|(_, c)| *c == metric)?.0;
                self.metrics.iter().position(|m| m == key)
            })
            .ok_or_else(|| Error::Config(format!("metric '{metric}' is not in the table")))
    }

    /// Whitespace-separated `.dat` text.
    pub fn to_dat(&self) -> String {
        let mut out = self.axis_label.clone();
        for m in &self.metrics {
            let col = METRIC_COLUMNS.iter().find(|(k, _)| k == m).map_or(m.as_str(), |c| c.1);
            out.push(' ');
            out.push_str(col);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label);
            for v in &r.values {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub rank: usize,
    pub label: String,
    pub value: f64,
}

/// Grid points by descending `metric`; ties keep label order.
pub fn rank_models(table: &SweepTable, metric: &str) -> Result<Vec<Ranked>> {
    let col = table.column(metric)?;
    let mut rows: Vec<&SweepRow> = table.rows.iter().collect();
    rows.sort_by(|a, b| {
        b.values[col]
            .total_cmp(&a.values[col])
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| Ranked {
            rank: i + 1,
            label: r.label.clone(),
            value: r.values[col],
        })
        .collect())
}

pub fn ranking_table(ranking: &[Ranked]) -> String {
    let mut out = String::from("rank\tpoint\tvalue\n");
    for r in ranking {
        out.push_str(&format!("{}\t{}\t{}\n", r.rank, r.label, r.value));
    }
    out
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub records: Vec<RunRecord>,
}

fn overall(record: &RunRecord) -> Result<&MetricsReport> {
    record
        .final_report()
        .ok_or_else(|| Error::Data("run produced no test metrics".into()))
}

/// Trains every grid point. With `out_dir`, each point gets a run directory
/// `point_NNN` and the combined table is written to `sweep.dat`.
pub fn run_sweep(
    spec: &SweepSpec,
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    spec.validate()?;
    let split;
    let manifest = if manifest.split.is_some() {
        manifest
    } else {
        split = stratified_split(manifest, spec.base.test_fraction, spec.base.seed)?;
        &split
    };
    let points = spec.grid();
    let run = |(i, point): (usize, &Vec<usize>)| -> Result<RunRecord> {
        let label = spec.label_at(point);
        let config = spec.config_at(point)?;
        let dir = out_dir.map(|d| d.join(format!("point_{i:03}")));
        log::info!("sweep point {}/{}: {label}", i + 1, points.len());
        trainer::train(manifest, store, &config, dir.as_deref()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("grid point {label}: {m}")),
            Error::Data(m) => Error::Data(format!("grid point {label}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("grid point {label}: {m}")),
            Error::Shape(m) => Error::Shape(format!("grid point {label}: {m}")),
            other => other,
        })
    };
    let indexed: Vec<(usize, &Vec<usize>)> = points.iter().enumerate().collect();
    let results: Vec<Result<RunRecord>> = if spec.parallel {
        par::map(&indexed, |&p| run(p))
    } else {
        indexed.iter().map(|&p| run(p)).collect()
    };
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(records.len());
    for (point, record) in points.iter().zip(&records) {
        let report = overall(record)?;
        let values = spec
            .metrics
            .iter()
            .map(|m| report.metric(m).expect("validated metric"))
            .collect();
        rows.push(SweepRow {
            label: spec.label_at(point),
            values,
        });
    }
    let table = SweepTable {
        axis_label: spec.axes.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join("/"),
        metrics: spec.metrics.clone(),
        rows,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("sweep.dat");
        std::fs::write(&path, table.to_dat()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SweepOutcome { table, records })
}
