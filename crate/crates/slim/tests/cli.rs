mod common;

use std::fs;
use std::path::Path;

use common::{slim, small_store};
use serde_json::Value;
use slim::runlog::{sha256_file, RunManifest};
use slim::stages::{load_report, load_representatives, load_summary};
use slim::store::{read_json, Store};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn outputs(store: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for stage in ["curate", "retrain", "metrics", "spread"] {
        let run: RunManifest = read_json(&store.join("stages").join(stage).join("run.json")).unwrap();
        for rel in run.outputs.keys() {
            out.push((rel.clone(), fs::read(store.join(rel)).unwrap()));
        }
    }
    out
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(slim(&["--help"]), 0);
    assert_eq!(slim(&["pipeline", "--store", "x", "--no-such-flag"]), 2);
    assert_eq!(slim(&["curate", "--store", "x", "--k-core", "zero"]), 2);
}

#[test]
fn stages_name_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), 1);
    let store = s(dir.path());
    assert_eq!(slim(&["curate", "--store", store]), 3);
    assert_eq!(slim(&["embed", "--store", store]), 3);
    let err = slim::stages::curate(&Store::new(dir.path()), &Default::default()).unwrap_err();
    assert_eq!(err.missing_stage(), Some("spread"));

    for stage in ["ingest", "embed"] {
        assert_eq!(slim(&[stage, "--store", store, "--preset", "synth"]), 0);
    }
    assert_eq!(slim(&["sample", "--store", store, "--preset", "synth"]), 0);
    // No annotation session yet.
    let err = slim::stages::spread_stage(&Store::new(dir.path()), &Default::default(), None).unwrap_err();
    assert_eq!(err.missing_stage(), Some("serve"));
    assert_eq!(slim(&["spread", "--store", store]), 3);
    assert_eq!(slim(&["spread", "--store", store, "--oracle"]), 0);
    assert_eq!(slim(&["retrain", "--store", store]), 3);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), 2);
    let store = s(dir.path());
    assert_eq!(slim(&["pipeline", "--store", store, "--oracle", "--annotation-cap", "0.05"]), 2);
    assert_eq!(slim(&["pipeline", "--store", store, "--oracle", "--preset", "synth", "--k", "13"]), 2);
    assert_eq!(slim(&["pipeline", "--store", store, "--oracle", "--preset", "synth", "--budget", "100000"]), 2);
    assert_eq!(slim(&["pipeline", "--store", store, "--oracle", "--preset", "synth", "--alpha", "1.5"]), 2);
    assert_eq!(slim(&["pipeline", "--store", "/nonexistent/store", "--oracle"]), 2);
}

#[test]
fn oracle_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), 4);
    let store = s(dir.path());
    assert_eq!(slim(&["pipeline", "--store", store, "--oracle", "--preset", "synth", "--seed", "4"]), 0);
    let st = Store::new(dir.path());

    let reps = load_representatives(&st).unwrap();
    assert_eq!(reps.cap, 12);
    assert!(reps.ids.len() <= 12);
    let report = load_report(&st).unwrap();
    assert!(report.curated.worst <= report.curated.average);
    assert_eq!(report.curated_size, 80);
    let summary = load_summary(&st).unwrap();
    assert_eq!(summary.selected, 80);
    assert_eq!(summary.subgroups.iter().map(|g| g.quota).sum::<usize>(), 80);
    assert_eq!(summary.group_counts.values().sum::<usize>(), 80);

    let curated = fs::read_to_string(dir.path().join("stages/curate/curated.jsonl")).unwrap();
    let mut last = String::new();
    for line in curated.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["core", "env", "id"]);
        let id = v["id"].as_str().unwrap().to_string();
        assert!(id > last);
        last = id;
    }

    // Every stage recorded its configuration and output hashes.
    for stage in ["ingest", "embed", "sample", "spread", "curate", "retrain", "metrics"] {
        let run: RunManifest = read_json(&dir.path().join("stages").join(stage).join("run.json")).unwrap();
        assert_eq!(run.stage, stage);
        assert!(!run.inputs.is_empty());
        for (rel, digest) in &run.outputs {
            assert_eq!(&sha256_file(&dir.path().join(rel)).unwrap(), digest);
        }
    }
    let run: RunManifest = read_json(&dir.path().join("stages/curate/run.json")).unwrap();
    assert_eq!(run.config["threshold"], 0.5);
    assert_eq!(run.config["seed"], 4);
}

#[test]
fn reruns_are_byte_for_byte_no_ops() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), 1);
    let store = s(dir.path());
    let args = ["pipeline", "--store", store, "--oracle", "--preset", "synth", "--seed", "1"];
    assert_eq!(slim(&args), 0);
    let first = outputs(dir.path());
    let runs: Vec<Vec<u8>> = ["curate", "metrics"]
        .iter()
        .map(|st| fs::read(dir.path().join("stages").join(st).join("run.json")).unwrap())
        .collect();
    assert_eq!(slim(&args), 0);
    assert_eq!(outputs(dir.path()), first);
    assert_eq!(fs::read_dir(dir.path().join("sessions")).unwrap().count(), 1);
    for (st, before) in ["curate", "metrics"].iter().zip(runs) {
        assert_eq!(fs::read(dir.path().join("stages").join(st).join("run.json")).unwrap(), before);
    }

    // A different curation seed reruns curation and what follows.
    assert_eq!(slim(&["curate", "--store", store, "--preset", "synth", "--seed", "5"]), 0);
    let run: RunManifest = read_json(&dir.path().join("stages/curate/run.json")).unwrap();
    assert_eq!(run.config["seed"], 5);

    // Tampering with an output forces the stage to run again.
    let curated = dir.path().join("stages/curate/curated.jsonl");
    fs::write(&curated, "").unwrap();
    assert_eq!(slim(&["curate", "--store", store, "--preset", "synth", "--seed", "5"]), 0);
    assert!(!fs::read(&curated).unwrap().is_empty());
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        small_store(d.path(), 2);
        assert_eq!(slim(&["pipeline", "--store", s(d.path()), "--oracle", "--preset", "synth", "--seed", "2"]), 0);
    }
    assert_eq!(outputs(a.path()), outputs(b.path()));
}

#[test]
fn synth_bench_command_exports_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let args = ["synth-bench", "--out", s(&out), "--n", "60", "--val-n", "20", "--steps", "20", "--seed", "9"];
    assert_eq!(slim(&args), 0);
    let m = Store::new(&out).manifest().unwrap();
    assert_eq!(m.records.len(), 80);
    let r = m.get("s000000").unwrap();
    let f = m.feature(r).unwrap();
    assert_eq!(f.dims(), [5, 1, 50]);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,filter,core_align,spur_align"));
    assert_eq!(trace.lines().count(), 1 + 21 * 16);
    // A non-store directory is refused.
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    fs::write(other.join("x"), "x").unwrap();
    assert_eq!(slim(&["synth-bench", "--out", s(&other), "--n", "60"]), 2);
}
