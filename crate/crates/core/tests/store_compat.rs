//! The fixture store was written byte by byte with Python's `struct`
//! module, the same way an external extractor would write it.

use std::path::PathBuf;
use std::process::Command;

use motifhead::data::{load_manifest, EmbeddingStore};
use motifhead::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn reads_externally_written_store() {
    let s = EmbeddingStore::open(&fixture("three_by_four.mhed")).unwrap();
    assert_eq!(s.dim(), 4);
    assert_eq!(s.ids(), ["img_a", "img_b", "img_c"]);
    let b = s.get("img_b").unwrap();
    assert_eq!(b[0].to_bits(), 1e-40f32.to_bits());
    assert_eq!(b[2], 65504.0);
    assert_eq!(s.get("img_a").unwrap()[1].to_bits(), (-0.0f32).to_bits());
    assert_eq!(s.features_f64("img_c").unwrap(), vec![0.0, 0.0, -1.0, 7.0]);
    s.check_covers(&load_manifest(&fixture("three_by_four.jsonl")).unwrap()).unwrap();
}

#[test]
fn rewrite_is_bit_exact() {
    let bytes = std::fs::read(fixture("three_by_four.mhed")).unwrap();
    let s = EmbeddingStore::from_bytes(&bytes).unwrap();
    assert_eq!(s.to_bytes(), bytes);
    let again = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
    assert_eq!(again, s);
}

#[test]
fn damaged_copies_are_rejected() {
    let bytes = std::fs::read(fixture("three_by_four.mhed")).unwrap();
    let truncated = &bytes[..bytes.len() - 3];
    match EmbeddingStore::from_bytes(truncated) {
        Err(Error::Store { msg, .. }) => assert!(msg.contains("img_c"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut nan = bytes.clone();
    let at = nan.len() - 4 * 4 - 4 * 4 + 4; // second value of img_b
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    match EmbeddingStore::from_bytes(&nan) {
        Err(Error::Store { offset, msg }) => {
            assert_eq!(offset, at as u64);
            assert!(msg.contains("img_b"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

fn extract_check(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_motifhead"))
        .arg("extract-check")
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn extract_check_command() {
    let store = fixture("three_by_four.mhed");
    let manifest = fixture("three_by_four.jsonl");
    let (code, out, _) = extract_check(&[store.to_str().unwrap(), "--dim", "4", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "OK, count=3, dim=4");

    let (code, _, err) = extract_check(&[store.to_str().unwrap(), "--dim", "1024"]);
    assert_eq!(code, 3);
    assert!(err.contains("1024"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cut = dir.path().join("cut.mhed");
    let bytes = std::fs::read(&store).unwrap();
    std::fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
    let (code, _, err) = extract_check(&[cut.to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(err.contains("byte offset"), "{err}");
}
