mod common;

use std::fs;

use proptest::prelude::*;
use slim::slim_core::Tensor;
use slim::store::{load_manifest, read_tensor, write_tensor, Manifest, Store};
use slim::Error;

fn manifest_in(dir: &std::path::Path, lines: &[&str], class_count: usize) -> Result<Manifest, Error> {
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    load_manifest(&path, class_count)
}

fn tensors(dir: &std::path::Path, ids: &[&str]) {
    for id in ids {
        write_tensor(&dir.join(format!("f/{id}.sltr")), &Tensor::zeros(vec![1, 1, 2]).unwrap()).unwrap();
        write_tensor(&dir.join(format!("a/{id}.sltr")), &Tensor::zeros(vec![1, 1]).unwrap()).unwrap();
    }
}

fn line(id: &str, label: usize) -> String {
    format!(r#"{{"id":"{id}","label":{label},"feature":"f/{id}.sltr","attribution":"a/{id}.sltr"}}"#)
}

#[test]
fn three_valid_lines() {
    let dir = tempfile::tempdir().unwrap();
    tensors(dir.path(), &["a", "b", "c"]);
    let lines = [line("c", 1), line("a", 0), line("b", 1)];
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let m = manifest_in(dir.path(), &refs, 2).unwrap();
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["c", "a", "b"]);
    assert_eq!(m.get("a").unwrap().label, 0);
    assert_eq!(m, manifest_in(dir.path(), &refs, 2).unwrap());
}

#[test]
fn duplicate_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    tensors(dir.path(), &["a"]);
    let err = manifest_in(dir.path(), &[&line("a", 0), &line("a", 1)], 2).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("`a`") && msg.contains(":2:"), "{msg}");
}

#[test]
fn label_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    tensors(dir.path(), &["a"]);
    let err = manifest_in(dir.path(), &[&line("a", 5)], 2).unwrap_err();
    assert!(err.to_string().contains("label 5"), "{err}");
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    tensors(dir.path(), &["a"]);
    let err = manifest_in(dir.path(), &[&line("a", 0), "", "{not json"], 2).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let err = manifest_in(
        dir.path(),
        &[r#"{"id":"a","label":0,"feature":"f/a.sltr","attribution":"a/a.sltr","extra":1}"#],
        2,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn bbox_and_paths_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    tensors(dir.path(), &["a"]);
    let bad_box = r#"{"id":"a","label":0,"feature":"f/a.sltr","attribution":"a/a.sltr","bbox":[0.5,0,0.4,1]}"#;
    assert!(manifest_in(dir.path(), &[bad_box], 2).unwrap_err().to_string().contains("bbox"));
    let ok_box = r#"{"id":"a","label":0,"feature":"f/a.sltr","attribution":"a/a.sltr","bbox":[0,0,1,1],"group":3,"split":"val"}"#;
    let m = manifest_in(dir.path(), &[ok_box], 2).unwrap();
    assert_eq!(m.records[0].group, Some(3));
    let err = manifest_in(dir.path(), &[&line("zz", 0)], 2).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn tensor_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.sltr");
    write_tensor(&path, &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 23);
    assert_eq!(&bytes[..4], b"SLTR");
    let zeros = Tensor::zeros(vec![2, 2]).unwrap();
    write_tensor(&path, &zeros).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.dims(), [2, 2]);
    assert_eq!(back.data(), [0.0; 4]);
    // Only the target remains after the atomic overwrite.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    fs::write(&path, &bad).unwrap();
    assert!(read_tensor(&path).unwrap_err().to_string().contains("magic"));
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_tensor(&path).is_err());
    assert!(Tensor::new(vec![], vec![]).is_err());
    assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
}

#[test]
fn attribution_is_rescaled_into_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_store(dir.path());
    let store = Store::new(dir.path());
    write_tensor(&dir.path().join("a/b.sltr"), &Tensor::new(vec![2, 2], vec![4.0, 2.0, 0.0, 1.0]).unwrap()).unwrap();
    let m = store.manifest().unwrap();
    let a = m.attribution(m.get("b").unwrap()).unwrap();
    assert_eq!(a.data(), [1.0, 0.5, 0.0, 0.25]);
    write_tensor(&dir.path().join("a/b.sltr"), &Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert!(m.attribution(m.get("b").unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tensor_files_round_trip(dims in prop::collection::vec(1usize..5, 1..=4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32) % 0x7f00_0000)).collect();
        let t = Tensor::new(dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sltr");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
