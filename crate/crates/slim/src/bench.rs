//! Synthetic benchmark: generates patch data, trains the cubic CNN, and
//! exports everything as a store the pipeline can run on.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slim_core::metrics::{group_accuracy, GroupReport};
use slim_core::spread::AttentionValue;
use slim_core::synth::{
    attribution_grid, class_maps, cnn_forward, core_bbox, feature_tensor, generate_dataset, generate_with,
    oracle_attention_label, train_gd, AlignmentTrace, CnnModel, SyntheticConfig, SyntheticDataset, TrainConfig,
};
use slim_core::Tensor;

use crate::error::{Error, Result};
use crate::stages::{OracleLabel, CLASS_MAPS, ORACLE_LABELS};
use crate::store::{
    write_atomic, write_json, write_jsonl, write_manifest, write_tensor, ManifestEntry, Split, StoreMeta, MANIFEST,
    STORE_META,
};

pub const CLASS_NAMES: [&str; 2] = ["negative", "positive"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Training split.
    pub data: SyntheticConfig,
    pub val_samples: usize,
    /// Spurious agreement rate of the validation split.
    pub val_alpha: f64,
    pub filters: usize,
    pub sigma0: f64,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            val_samples: 2000,
            val_alpha: 0.5,
            filters: 16,
            sigma0: 0.01,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub train_alpha_hat: f64,
    pub val_alpha_hat: f64,
    /// Share of training instances whose attention the oracle marks correct.
    pub oracle_correct: f64,
    pub final_loss: f64,
    /// The trained CNN itself on the validation split.
    pub reference: GroupReport,
}

pub struct Bench {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub model: CnnModel,
    pub trace: AlignmentTrace,
}

/// Generates both splits and trains the reference CNN, without writing.
pub fn run_bench(cfg: &BenchConfig) -> Result<Bench> {
    let train = generate_dataset(&cfg.data)?;
    let val_cfg = SyntheticConfig {
        n_samples: cfg.val_samples,
        alpha: cfg.val_alpha,
        seed: cfg.data.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        ..cfg.data.clone()
    };
    let val = generate_with(&val_cfg, train.v_c.clone(), train.v_s.clone(), "v")?;
    let init = CnnModel::init(cfg.data.d, cfg.filters, cfg.sigma0, cfg.data.seed)?;
    let (model, trace) = train_gd(&init, &train.instances, &train.v_c, &train.v_s, &cfg.train)?;
    Ok(Bench { train, val, model, trace })
}

pub fn trace_csv(trace: &AlignmentTrace) -> String {
    let mut out = String::from("step,filter,core_align,spur_align\n");
    for (step, (core, spur)) in trace.core.iter().zip(&trace.spurious).enumerate() {
        for (j, (c, s)) in core.iter().zip(spur).enumerate() {
            let _ = writeln!(out, "{step},{j},{c},{s}");
        }
    }
    out
}

/// Runs the benchmark and exports a store into `out`.
pub fn synth_bench(out: &Path, cfg: &BenchConfig) -> Result<BenchSummary> {
    if out.exists()
        && !out.join(STORE_META).is_file()
        && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some()
    {
        return Err(Error::Config(format!("{} exists and is not a store", out.display())));
    }
    if !(0.5..=1.0).contains(&cfg.val_alpha) || cfg.val_samples == 0 {
        return Err(Error::Config("validation split needs a positive size and alpha in [0.5, 1]".into()));
    }
    let b = run_bench(cfg)?;

    let mut records = Vec::new();
    let mut oracle = Vec::new();
    for (split, data) in [(Split::Train, &b.train), (Split::Val, &b.val)] {
        for x in &data.instances {
            let feature = format!("features/{}.sltr", x.id);
            let attribution = format!("attributions/{}.sltr", x.id);
            write_tensor(&out.join(&feature), &feature_tensor(x)?)?;
            write_tensor(&out.join(&attribution), &attribution_grid(&b.model, x)?)?;
            write_tensor(&out.join(CLASS_MAPS).join(format!("{}.sltr", x.id)), &class_maps(&b.model, x)?)?;
            if split == Split::Train {
                oracle.push(OracleLabel { id: x.id.clone(), value: oracle_attention_label(&b.model, x)? });
            }
            records.push(ManifestEntry {
                id: x.id.clone(),
                label: x.class(),
                feature,
                attribution,
                image: None,
                group: Some(x.group()),
                bbox: Some(core_bbox(x)),
                split: Some(split),
            });
        }
    }
    write_json(
        &out.join(STORE_META),
        &StoreMeta { class_count: 2, class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect() },
    )?;
    write_manifest(&out.join(MANIFEST), &records)?;
    write_jsonl(&out.join(ORACLE_LABELS), &oracle)?;
    write_atomic(&out.join("trace.csv"), trace_csv(&b.trace).as_bytes())?;
    write_tensor(
        &out.join("cnn.sltr"),
        &Tensor::from_f64(vec![b.model.filters(), b.model.d()], b.model.w.as_slice())?,
    )?;

    let mut pred = Vec::new();
    for x in &b.val.instances {
        pred.push(usize::from(cnn_forward(&b.model, x)? > 0.0));
    }
    let labels: Vec<usize> = b.val.instances.iter().map(|x| x.class()).collect();
    let groups: Vec<usize> = b.val.instances.iter().map(|x| x.group()).collect();
    let correct = oracle.iter().filter(|o| o.value == AttentionValue::Correct).count();
    let summary = BenchSummary {
        config: cfg.clone(),
        train_alpha_hat: b.train.alpha_hat(),
        val_alpha_hat: b.val.alpha_hat(),
        oracle_correct: correct as f64 / oracle.len().max(1) as f64,
        final_loss: b.trace.loss.last().copied().unwrap_or(f64::NAN),
        reference: group_accuracy(&pred, &labels, &groups)?,
    };
    write_json(&out.join("bench.json"), &summary)?;
    Ok(summary)
}
