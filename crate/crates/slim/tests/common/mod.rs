#![allow(dead_code)]

use std::fs;
use std::path::Path;

use slim::bench::{synth_bench, BenchConfig, BenchSummary};
use slim::slim_core::synth::{SyntheticConfig, TrainConfig};
use slim::slim_core::Tensor;
use slim::store::{write_manifest, write_tensor, ManifestEntry, StoreMeta};

pub fn slim(args: &[&str]) -> i32 {
    let mut full = vec!["slim"];
    full.extend_from_slice(args);
    slim::cli::run_from(full)
}

/// A few hundred synthetic instances; enough to exercise every stage.
/// At this size only some seeds (1, 2 and 4 among the first ten) learn the
/// core feature, so tests that need correct attention use those.
pub fn small_bench(seed: u64) -> BenchConfig {
    BenchConfig {
        data: SyntheticConfig { n_samples: 400, seed, ..Default::default() },
        val_samples: 200,
        train: TrainConfig { eta: 0.5, steps: 400 },
        ..Default::default()
    }
}

pub fn small_store(dir: &Path, seed: u64) -> BenchSummary {
    synth_bench(dir, &small_bench(seed)).expect("synthetic export")
}

pub fn entry(id: &str, label: usize) -> ManifestEntry {
    ManifestEntry {
        id: id.into(),
        label,
        feature: format!("f/{id}.sltr"),
        attribution: format!("a/{id}.sltr"),
        image: None,
        group: None,
        bbox: None,
        split: None,
    }
}

/// Four records `a`..`d` with `[2, 2, 3]` features and `[2, 2]` attributions;
/// only `a` has an image.
pub fn tiny_store(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    slim::store::write_json(
        &dir.join("store.json"),
        &StoreMeta { class_count: 2, class_names: vec!["cat".into(), "dog".into()] },
    )
    .unwrap();
    let mut records = Vec::new();
    for (i, id) in ["a", "b", "c", "d"].iter().enumerate() {
        let f: Vec<f32> = (0..12).map(|k| (k + i) as f32 * 0.25).collect();
        write_tensor(&dir.join(format!("f/{id}.sltr")), &Tensor::new(vec![2, 2, 3], f).unwrap()).unwrap();
        let a = vec![1.0, 0.5, 0.25 * i as f32, 0.0];
        write_tensor(&dir.join(format!("a/{id}.sltr")), &Tensor::new(vec![2, 2], a).unwrap()).unwrap();
        let mut e = entry(id, i % 2);
        if i == 0 {
            fs::create_dir_all(dir.join("img")).unwrap();
            fs::write(dir.join("img/a.png"), b"\x89PNG fake").unwrap();
            e.image = Some("img/a.png".into());
        }
        records.push(e);
    }
    write_manifest(&dir.join("manifest.jsonl"), &records).unwrap();
}
