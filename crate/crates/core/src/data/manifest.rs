//! Line-delimited manifest.
//!
//! ```text
//! # comments start with '#'
//! {"motifs": ["Hug", "Brawl", "Kiss"]}
//! {"id": "img_0001", "primary": ["Hug"], "secondary": ["Brawl"], "tag": "canonical", "split": "test"}
//! {"id": "img_0002", "primary": ["Kiss"]}
//! ```
//!
//! The first non-comment line declares the ordered motif vocabulary. Each
//! following line is one image. `secondary`, `tag` (default `standard`),
//! `motif_tags` (per-primary-motif tier overrides) and `split` are
//! optional, but `split` must be present on all records or on none.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, DatasetManifest, MotifId, RepresentativenessTag, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    motifs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    primary: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    secondary: Vec<String>,
    #[serde(default)]
    tag: RepresentativenessTag,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    motif_tags: BTreeMap<String, RepresentativenessTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty manifest".into()))?;
    let header: HeaderLine = serde_json::from_str(header).map_err(|e| Error::Manifest {
        line: hline,
        msg: format!("expected motif header: {e}"),
    })?;
    let lookup: BTreeMap<&str, MotifId> = header
        .motifs
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), MotifId(i)))
        .collect();
    if lookup.len() != header.motifs.len() {
        return Err(Error::Manifest {
            line: hline,
            msg: "duplicate motif names".into(),
        });
    }

    let mut records = Vec::new();
    let mut split = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut unsplit = 0usize;
    for (line, raw) in lines {
        let err = |msg: String| Error::Manifest { line, msg };
        let rec: RecordLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let resolve = |names: &[String]| -> Result<BTreeSet<MotifId>> {
            names
                .iter()
                .map(|n| {
                    lookup
                        .get(n.as_str())
                        .copied()
                        .ok_or_else(|| err(format!("unknown motif '{n}'")))
                })
                .collect()
        };
        let primary = resolve(&rec.primary)?;
        let secondary = resolve(&rec.secondary)?;
        let mut motif_tags = BTreeMap::new();
        for (name, tag) in &rec.motif_tags {
            let id = resolve(std::slice::from_ref(name))?;
            motif_tags.insert(*id.iter().next().unwrap(), *tag);
        }
        let annotation = AnnotationRecord {
            image_id: rec.id.clone(),
            primary,
            secondary,
            tag: rec.tag,
            motif_tags,
        };
        annotation.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate image_id '{}'", rec.id)));
        }
        match rec.split {
            Some(s) => {
                split.insert(rec.id, s);
            }
            None => unsplit += 1,
        }
        records.push(annotation);
    }
    if records.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if unsplit != 0 && unsplit != records.len() {
        return Err(Error::Data(format!(
            "{unsplit} of {} records lack a split field",
            records.len()
        )));
    }
    let manifest = DatasetManifest {
        motif_names: header.motifs,
        records,
        split: (unsplit == 0).then_some(split),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Serializes in the format read by [`parse_manifest`].
pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    let header = HeaderLine {
        motifs: manifest.motif_names.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
    let names = |set: &BTreeSet<MotifId>| -> Vec<String> {
        set.iter().map(|m| manifest.motif_names[m.0].clone()).collect()
    };
    for r in &manifest.records {
        let line = RecordLine {
            id: r.image_id.clone(),
            primary: names(&r.primary),
            secondary: names(&r.secondary),
            tag: r.tag,
            motif_tags: r
                .motif_tags
                .iter()
                .map(|(m, t)| (manifest.motif_names[m.0].clone(), *t))
                .collect(),
            split: manifest.split.as_ref().and_then(|s| s.get(&r.image_id).copied()),
        };
        writeln!(out, "{}", serde_json::to_string(&line).unwrap()).unwrap();
    }
    out
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest_to_string(manifest)).map_err(|e| Error::io(path, e))
}
