use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, MotifId, Split};
use crate::error::{Error, Result};

/// Assigns every record to train or test, stratified by its lowest-index
/// primary motif.
///
/// Each stratum of `n` images contributes `round(n * test_fraction)` test
/// images, clamped to `[1, n - 1]`. Strata are processed in motif order and
/// shuffled with a single generator seeded from `seed`, so the result
/// depends only on the manifest contents and the seed.
pub fn stratified_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut strata: BTreeMap<MotifId, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        strata.entry(r.first_primary()).or_default().push(&r.image_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for (motif, mut ids) in strata {
        let n = ids.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "motif '{}' has {n} image(s); stratified splitting needs at least 2",
                manifest.motif_names[motif.0]
            )));
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            let which = if i < n_test { Split::Test } else { Split::Train };
            assignment.insert(id.to_string(), which);
        }
    }
    let mut out = manifest.clone();
    out.split = Some(assignment);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotationRecord, RepresentativenessTag};

    fn manifest(per_motif: &[usize]) -> DatasetManifest {
        let mut recs = Vec::new();
        for (m, &n) in per_motif.iter().enumerate() {
            for i in 0..n {
                recs.push(
                    AnnotationRecord::new(
                        format!("m{m}_{i}"),
                        [MotifId(m)],
                        [],
                        RepresentativenessTag::Standard,
                    )
                    .unwrap(),
                );
            }
        }
        let names = (0..per_motif.len()).map(|i| format!("motif{i}")).collect();
        DatasetManifest::new(names, recs).unwrap()
    }

    fn test_count(m: &DatasetManifest, motif: usize) -> usize {
        m.split_records(Split::Test)
            .unwrap()
            .iter()
            .filter(|r| r.first_primary() == MotifId(motif))
            .count()
    }

    #[test]
    fn single_motif_exact_and_deterministic() {
        let m = manifest(&[100]);
        let a = stratified_split(&m, 0.2, 7).unwrap();
        assert_eq!(test_count(&a, 0), 20);
        assert_eq!(a, stratified_split(&m, 0.2, 7).unwrap());
    }

    #[test]
    fn two_motifs_counts() {
        let a = stratified_split(&manifest(&[60, 40]), 0.25, 3).unwrap();
        assert_eq!(test_count(&a, 0), 15);
        assert_eq!(test_count(&a, 1), 10);
    }

    #[test]
    fn preconditions() {
        let m = manifest(&[10]);
        assert!(matches!(stratified_split(&m, 0.0, 1), Err(Error::Config(_))));
        assert!(stratified_split(&m, 1.0, 1).is_err());
        let err = stratified_split(&manifest(&[10, 1]), 0.2, 1).unwrap_err();
        assert!(err.to_string().contains("motif1"));
    }

    #[test]
    fn seeds_partition_and_differ() {
        let m = manifest(&[30, 25, 12]);
        let a = stratified_split(&m, 0.3, 1).unwrap();
        let b = stratified_split(&m, 0.3, 2).unwrap();
        assert_ne!(a.split, b.split);
        for s in [&a, &b] {
            let train = s.split_records(Split::Train).unwrap().len();
            let test = s.split_records(Split::Test).unwrap().len();
            assert_eq!(train + test, m.records.len());
            assert_eq!(s.split.as_ref().unwrap().len(), m.records.len());
        }
    }
}
