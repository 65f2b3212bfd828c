//! K-means over embeddings and cluster/label agreement.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, EmbeddingStore, MotifId};
use crate::error::{Error, Result};
use crate::numkernel::{squared_distance, DenseMatrix};
use crate::par;
use crate::trainer::normalize_row;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 20,
            seed: 0,
            max_iters: 300,
            tol: 1e-8,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: DenseMatrix,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one iteration")
    }
}

/// Rows of `store` for `ids`, optionally L2-normalized.
pub fn embedding_matrix(store: &EmbeddingStore, ids: &[&str], normalize: bool) -> Result<DenseMatrix> {
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
    Ok(m)
}

/// Index and squared distance of the closest centroid. Ties go to the
/// lower index.
pub fn nearest(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn assign(points: &DenseMatrix, centroids: &DenseMatrix) -> Vec<(usize, f64)> {
    par::map_range(points.rows(), |i| nearest(points.row(i), centroids))
}

fn plus_plus_seed(points: &DenseMatrix, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a centroid already
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    let mut c = DenseMatrix::zeros(k, points.cols());
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(points.row(i));
    }
    c
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster is reseeded
/// at the point farthest from its centroid.
pub fn kmeans(points: &DenseMatrix, config: &KMeansConfig) -> Result<KMeansResult> {
    let (n, dim) = (points.rows(), points.cols());
    let k = config.k;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k must be in [1, {n}], got {k}")));
    }
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut settled = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let assigned = assign(points, &centroids);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        let changed = assigned.iter().zip(&assignments).any(|(a, &old)| a.0 != old);
        for (slot, a) in assignments.iter_mut().zip(&assigned) {
            *slot = a.0;
        }
        history.push(inertia);
        if !changed || settled {
            converged = true;
            break;
        }

        let mut sums = DenseMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = Vec::new();
        let mut shift: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let count = count as f64;
                let mean: Vec<f64> = sums.row(c).iter().map(|&s| s / count).collect();
                shift = shift.max(squared_distance(&mean, centroids.row(c)).sqrt());
                centroids.row_mut(c).copy_from_slice(&mean);
            }
        }
        for (c, _) in counts.iter().enumerate().filter(|(_, &n)| n == 0) {
            {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .map(|i| (i, squared_distance(points.row(i), centroids.row(assignments[i]))))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                taken.push(far.0);
                log::debug!("reseeding empty cluster {c} at point {}", far.0);
                centroids.row_mut(c).copy_from_slice(points.row(far.0));
            }
        }
        // one more assignment against the final centroids, then stop
        settled = taken.is_empty() && shift < config.tol;
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia_history: history,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// `table[cluster][motif]` image counts.
    pub table: Vec<Vec<usize>>,
    pub purity: f64,
}

/// Contingency of cluster assignments against motif labels, and purity
/// (the share of images carrying their cluster's majority label).
pub fn cluster_label_agreement(assignments: &[usize], labels: &[MotifId], k: usize, n_classes: usize) -> Result<Agreement> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::Data("no images to compare".into()));
    }
    let mut table = vec![vec![0usize; n_classes]; k];
    for (&c, &l) in assignments.iter().zip(labels) {
        if c >= k || l.0 >= n_classes {
            return Err(Error::Shape(format!("cluster {c} or motif {} out of range", l.0)));
        }
        table[c][l.0] += 1;
    }
    let majority: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(Agreement {
        table,
        purity: majority as f64 / assignments.len() as f64,
    })
}

/// `image_id<TAB>cluster<TAB>motif` rows, labelled by first primary motif.
pub fn assignments_table(ids: &[&str], result: &KMeansResult, manifest: &DatasetManifest) -> String {
    let mut out = String::from("image_id\tcluster\tmotif\n");
    for (id, &c) in ids.iter().zip(&result.assignments) {
        let motif = manifest
            .record(id)
            .map(|r| manifest.motif_names[r.first_primary().0].as_str())
            .unwrap_or("");
        out.push_str(&format!("{id}\t{c}\t{motif}\n"));
    }
    out
}

pub fn contingency_table(agreement: &Agreement, motif_names: &[String]) -> String {
    let mut out = String::from("cluster");
    for n in motif_names {
        out.push('\t');
        out.push_str(n);
    }
    out.push('\n');
    for (c, row) in agreement.table.iter().enumerate() {
        out.push_str(&c.to_string());
        for v in row {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}
