//! Annotated dataset model: motif labels with representativeness tiers,
//! the line-delimited manifest, the binary embedding store, stratified
//! splitting and a synthetic generator.

mod manifest;
mod split;
mod store;
mod synth;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, manifest_to_string, parse_manifest, write_manifest};
pub use split::stratified_split;
pub use store::{EmbeddingStore, STORE_MAGIC, STORE_VERSION};
pub use synth::{generate_synthetic, SynthParams};

/// Index of a motif (class) in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MotifId(pub usize);

impl fmt::Display for MotifId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How characteristic an image is of its primary motif(s).
///
/// Variants are declared from lowest to highest tier, so `Ord` ranks
/// `Canonical > Standard > RedFlag`.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativenessTag {
    RedFlag,
    #[default]
    Standard,
    Canonical,
}

impl RepresentativenessTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RepresentativenessTag::RedFlag => "red_flag",
            RepresentativenessTag::Standard => "standard",
            RepresentativenessTag::Canonical => "canonical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Which motifs count as correct at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthMode {
    PrimaryOnly,
    WithSecondary,
}

/// Labels for one image.
///
/// `tag` is the image-level tier. `motif_tags` optionally overrides the
/// tier for individual primary motifs; the effective tier of the image is
/// the highest tier across its primary motifs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub primary: BTreeSet<MotifId>,
    pub secondary: BTreeSet<MotifId>,
    pub tag: RepresentativenessTag,
    pub motif_tags: BTreeMap<MotifId, RepresentativenessTag>,
}

impl AnnotationRecord {
    pub fn new(
        image_id: impl Into<String>,
        primary: impl IntoIterator<Item = MotifId>,
        secondary: impl IntoIterator<Item = MotifId>,
        tag: RepresentativenessTag,
    ) -> Result<Self> {
        let rec = Self {
            image_id: image_id.into(),
            primary: primary.into_iter().collect(),
            secondary: secondary.into_iter().collect(),
            tag,
            motif_tags: BTreeMap::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Data("empty image id".into()));
        }
        if self.primary.is_empty() {
            return Err(Error::Data(format!(
                "{}: primary motif set is empty",
                self.image_id
            )));
        }
        if let Some(m) = self.primary.intersection(&self.secondary).next() {
            return Err(Error::Data(format!(
                "{}: motif {m} is both primary and secondary",
                self.image_id
            )));
        }
        if let Some(m) = self.motif_tags.keys().find(|m| !self.primary.contains(m)) {
            return Err(Error::Data(format!(
                "{}: tag override for motif {m}, which is not a primary motif",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Highest representativeness tier across the primary motifs.
    pub fn tier(&self) -> RepresentativenessTag {
        self.primary
            .iter()
            .map(|m| self.motif_tags.get(m).copied().unwrap_or(self.tag))
            .max()
            .unwrap_or(self.tag)
    }

    /// Lowest-index primary motif; the stratification and contingency key.
    pub fn first_primary(&self) -> MotifId {
        *self.primary.iter().next().expect("validated non-empty")
    }

    pub fn ground_truth(&self, mode: GroundTruthMode) -> Cow<'_, BTreeSet<MotifId>> {
        match mode {
            GroundTruthMode::PrimaryOnly => Cow::Borrowed(&self.primary),
            GroundTruthMode::WithSecondary if self.secondary.is_empty() => Cow::Borrowed(&self.primary),
            GroundTruthMode::WithSecondary => Cow::Owned(self.primary.union(&self.secondary).copied().collect()),
        }
    }

    pub fn max_motif(&self) -> Option<MotifId> {
        self.primary.iter().chain(&self.secondary).max().copied()
    }
}

/// Motif vocabulary, annotations and (optionally) a train/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub motif_names: Vec<String>,
    pub records: Vec<AnnotationRecord>,
    pub split: Option<BTreeMap<String, Split>>,
}

impl DatasetManifest {
    pub fn new(motif_names: Vec<String>, records: Vec<AnnotationRecord>) -> Result<Self> {
        let m = Self {
            motif_names,
            records,
            split: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.motif_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.motif_names.is_empty() {
            return Err(Error::Data("manifest declares no motifs".into()));
        }
        let mut names = BTreeSet::new();
        for n in &self.motif_names {
            if !names.insert(n.as_str()) {
                return Err(Error::Data(format!("duplicate motif name '{n}'")));
            }
        }
        if self.records.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Data(format!("duplicate image_id '{}'", r.image_id)));
            }
            if let Some(m) = r.max_motif().filter(|m| m.0 >= self.n_classes()) {
                return Err(Error::Data(format!(
                    "{}: motif index {m} out of range for {} motifs",
                    r.image_id,
                    self.n_classes()
                )));
            }
        }
        if let Some(split) = &self.split {
            if split.len() != self.records.len() || !self.records.iter().all(|r| split.contains_key(&r.image_id)) {
                return Err(Error::Data("split assignment does not cover every record".into()));
            }
        }
        Ok(())
    }

    pub fn motif_index(&self, name: &str) -> Option<MotifId> {
        self.motif_names.iter().position(|n| n == name).map(MotifId)
    }

    pub fn record(&self, image_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Records assigned to `split`, in manifest order. Fails if no split has
    /// been assigned.
    pub fn split_records(&self, which: Split) -> Result<Vec<&AnnotationRecord>> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Data("manifest has no train/test split assigned".into()))?;
        Ok(self
            .records
            .iter()
            .filter(|r| split.get(&r.image_id) == Some(&which))
            .collect())
    }

    /// Drops every secondary motif label.
    pub fn without_secondary(&self) -> DatasetManifest {
        let mut m = self.clone();
        for r in &mut m.records {
            r.secondary.clear();
        }
        m
    }

    /// Primary-motif counts per motif.
    pub fn primary_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for r in &self.records {
            for m in &r.primary {
                counts[m.0] += 1;
            }
        }
        counts
    }
}
