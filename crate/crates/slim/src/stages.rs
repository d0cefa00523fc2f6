//! Pipeline stages. Each reads its inputs from the store, writes its outputs
//! under `stages/{name}/`, and records a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slim_core::attention::{FeatureKind, WeightedFeature};
use slim_core::cluster::{elbow_select, kmeans, select_representatives, KMeansConfig};
use slim_core::curation::{self, allocate, cluster_spaces, draw_samples, draw_seed, screen, CurationConfig, KChoice};
use slim_core::embed::{embed, EmbedConfig, Embedding};
use slim_core::linalg::Matrix;
use slim_core::linear::{fit_linear, predict, FitConfig, LinearHead};
use slim_core::metrics::{aiou, group_accuracy, rasterize_bbox, soft_iou, GroupReport};
use slim_core::spread::{spread_labels, AttentionScore, AttentionValue, SpreadConfig};
use slim_core::Tensor;

use crate::error::{Error, Result};
use crate::runlog::{sha256_bytes, sha256_file, Outcome, StageRun};
use crate::session::{SessionState, SessionStore};
use crate::store::{
    read_json, read_jsonl, read_tensor, write_atomic, write_json, write_jsonl, write_tensor, Manifest, Split, Store,
    MANIFEST, STORE_META,
};

/// Ground-truth attention labels shipped with synthetic stores.
pub const ORACLE_LABELS: &str = "oracle_labels.jsonl";
/// Optional per-instance `[K, H, W]` class maps used for AIoU competitors.
pub const CLASS_MAPS: &str = "class_maps";

const KINDS: [(FeatureKind, &str); 3] =
    [(FeatureKind::Attention, "attention"), (FeatureKind::Inverse, "inverse"), (FeatureKind::Plain, "plain")];

fn kind_name(kind: FeatureKind) -> &'static str {
    KINDS.iter().find(|(k, _)| *k == kind).expect("all kinds listed").1
}

fn vectors_file(split: Split, kind: FeatureKind) -> String {
    format!("{}_{}.sltr", split.as_str(), kind_name(kind))
}

fn ids_file(split: Split) -> String {
    format!("{}_ids.json", split.as_str())
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Ok(Tensor::from_f64(vec![m.rows(), m.cols()], m.as_slice())?)
}

fn tensor_matrix(t: &Tensor, path: &Path) -> Result<Matrix> {
    if t.rank() != 2 {
        return Err(Error::format(path, format!("expected a matrix, found dims {:?}", t.dims())));
    }
    Ok(Matrix::from_vec(t.dims()[0], t.dims()[1], t.to_f64())?)
}

// ---- ingest ----

/// Pools every instance three ways (attention-weighted, inverse-weighted,
/// plain) and stores the vectors per split, rows sorted by id.
pub fn ingest(store: &Store) -> Result<Outcome> {
    let manifest = store.manifest()?;
    let mut run = StageRun::new(store, "ingest", &serde_json::json!({}));
    run.input_file(&store.root().join(STORE_META))?;
    run.input_file(&store.root().join(MANIFEST))?;
    let mut h = Sha256::new();
    for r in &manifest.records {
        for rel in [&r.feature, &r.attribution] {
            h.update(rel.as_bytes());
            h.update(sha256_file(&manifest.resolve(rel))?.as_bytes());
        }
    }
    run.input_digest("tensors", hex::encode(h.finalize()));
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    if !manifest.has_split(Split::Train) {
        return Err(Error::Config("the manifest has no training records".into()));
    }
    let dir = store.stage_dir("ingest");
    let mut outputs = Vec::new();
    for split in [Split::Train, Split::Val] {
        let mut records: Vec<_> = manifest.split(split).collect();
        if records.is_empty() {
            continue;
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rows: [Vec<f64>; 3] = Default::default();
        let mut channels = None;
        for r in &records {
            let f = manifest.feature(r)?;
            let a = manifest.attribution(r)?;
            for (slot, (kind, _)) in rows.iter_mut().zip(KINDS) {
                let w = WeightedFeature::build(r.id.as_str(), &f, &a, kind)
                    .map_err(|e| Error::format(&manifest.resolve(&r.feature), e.to_string()))?;
                if *channels.get_or_insert(w.vector.len()) != w.vector.len() {
                    return Err(Error::format(
                        &manifest.resolve(&r.feature),
                        format!("{} channels where earlier records have {}", w.vector.len(), channels.unwrap_or(0)),
                    ));
                }
                slot.extend(w.vector);
            }
        }
        let c = channels.unwrap_or(0);
        for (data, (kind, _)) in rows.iter().zip(KINDS) {
            let path = dir.join(vectors_file(split, kind));
            write_tensor(&path, &Tensor::from_f64(vec![records.len(), c], data)?)?;
            outputs.push(path);
        }
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let path = dir.join(ids_file(split));
        write_json(&path, &ids)?;
        outputs.push(path);
    }
    run.finish(&outputs)?;
    Ok(Outcome::Ran)
}

/// Pooled vectors of one split, rows sorted by id.
pub fn load_vectors(store: &Store, split: Split, kind: FeatureKind) -> Result<(Vec<String>, Matrix)> {
    let ids_path = store.require("ingest", &ids_file(split))?;
    let path = store.require("ingest", &vectors_file(split, kind))?;
    let ids: Vec<String> = read_json(&ids_path)?;
    let m = tensor_matrix(&read_tensor(&path)?, &path)?;
    if m.rows() != ids.len() {
        return Err(Error::format(&path, format!("{} rows for {} ids", m.rows(), ids.len())));
    }
    Ok((ids, m))
}

fn weighted(ids: &[String], m: &Matrix, kind: FeatureKind) -> Vec<WeightedFeature> {
    ids.iter()
        .zip(m.iter_rows())
        .map(|(id, row)| WeightedFeature { id: id.clone(), vector: row.to_vec(), kind })
        .collect()
}

// ---- embed ----

pub fn embed_stage(store: &Store, cfg: &EmbedConfig) -> Result<Outcome> {
    let ids_path = store.require("ingest", &ids_file(Split::Train))?;
    let vec_path = store.require("ingest", &vectors_file(Split::Train, FeatureKind::Attention))?;
    let mut run = StageRun::new(store, "embed", cfg);
    run.input_file(&ids_path)?;
    run.input_file(&vec_path)?;
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let (ids, m) = load_vectors(store, Split::Train, FeatureKind::Attention)?;
    let e = embed(&weighted(&ids, &m, FeatureKind::Attention), cfg)?;
    let dir = store.stage_dir("embed");
    let coords = dir.join("embedding.sltr");
    let id_path = dir.join("ids.json");
    write_tensor(&coords, &matrix_tensor(e.coords())?)?;
    write_json(&id_path, &e.ids())?;
    run.finish(&[coords, id_path])?;
    Ok(Outcome::Ran)
}

pub fn load_embedding(store: &Store) -> Result<Embedding> {
    let coords_path = store.require("embed", "embedding.sltr")?;
    let ids: Vec<String> = read_json(&store.require("embed", "ids.json")?)?;
    let cfg: EmbedConfig = read_json::<crate::runlog::RunManifest>(&store.require("embed", crate::runlog::RUN_FILE)?)
        .ok()
        .and_then(|r| serde_json::from_value(r.config).ok())
        .unwrap_or_default();
    let coords = tensor_matrix(&read_tensor(&coords_path)?, &coords_path)?;
    Ok(Embedding::from_parts(ids, coords, cfg.seed, cfg.method)?)
}

// ---- sample ----

/// How many instances to send for annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationK {
    /// Elbow rule over `2..=cap`.
    #[default]
    Auto,
    /// Exactly the cap.
    Cap,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub k: AnnotationK,
    /// Annotation budget as a fraction of the training set.
    pub cap_fraction: f64,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { k: AnnotationK::Auto, cap_fraction: 0.03, seed: 0, kmeans: KMeansConfig::default() }
    }
}

impl SampleConfig {
    /// `ceil(cap_fraction * n)`, at least one.
    pub fn cap(&self, n: usize) -> usize {
        ((self.cap_fraction * n as f64).ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representatives {
    pub k: usize,
    pub cap: usize,
    /// Elbow scan, when one ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertias: Option<Vec<(usize, f64)>>,
    /// One per non-empty cluster, in cluster order.
    pub ids: Vec<String>,
}

pub fn sample(store: &Store, cfg: &SampleConfig) -> Result<Outcome> {
    if !(cfg.cap_fraction > 0.0 && cfg.cap_fraction <= 1.0) {
        return Err(Error::Config(format!("annotation cap fraction {} outside (0, 1]", cfg.cap_fraction)));
    }
    let emb_path = store.require("embed", "embedding.sltr")?;
    let mut run = StageRun::new(store, "sample", cfg);
    run.input_file(&emb_path)?;
    run.input_file(&store.require("embed", "ids.json")?)?;
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let e = load_embedding(store)?;
    let cap = cfg.cap(e.len());
    let mut inertias = None;
    let k = match cfg.k {
        AnnotationK::Fixed(k) if k == 0 || k > cap => {
            return Err(Error::Config(format!(
                "annotation k = {k} outside 1..={cap} (cap {} of {} instances)",
                cfg.cap_fraction,
                e.len()
            )))
        }
        AnnotationK::Fixed(k) => k,
        AnnotationK::Cap => cap,
        AnnotationK::Auto if cap < 4 || cap > e.len() => cap.min(e.len()),
        AnnotationK::Auto => {
            // A single start per k keeps the scan affordable; the chosen k is
            // then refit with every restart.
            let scan = KMeansConfig { restarts: 1, ..cfg.kmeans };
            let elbow = elbow_select(e.ids(), e.coords(), 2..=cap, cfg.seed, &scan)?;
            inertias = Some(elbow.inertias);
            elbow.k
        }
    };
    let model = kmeans(e.ids(), e.coords(), k, cfg.seed, &cfg.kmeans)?;
    let ids = select_representatives(&model, e.ids(), e.coords())?;
    log::info!("sample: {} representatives (k = {k}, cap = {cap})", ids.len());
    let path = store.stage_dir("sample").join("representatives.json");
    write_json(&path, &Representatives { k, cap, inertias, ids })?;
    run.finish(&[path])?;
    Ok(Outcome::Ran)
}

pub fn load_representatives(store: &Store) -> Result<Representatives> {
    read_json(&store.require("sample", "representatives.json")?)
}

// ---- annotation (oracle) ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub id: String,
    pub value: AttentionValue,
}

pub fn load_oracle(store: &Store) -> Result<BTreeMap<String, AttentionValue>> {
    let path = store.root().join(ORACLE_LABELS);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{} has no {ORACLE_LABELS}; oracle annotation needs a synthetic store",
            store.root().display()
        )));
    }
    Ok(read_jsonl::<OracleLabel>(&path)?.into_iter().map(|l| (l.id, l.value)).collect())
}

/// Answers the representatives from the store's oracle labels, reusing a
/// complete session over the same queue when one exists. Returns its id.
pub fn oracle_annotate(store: &Store) -> Result<String> {
    let reps = load_representatives(store)?;
    let sessions = SessionStore::new(store.sessions_dir());
    if let Some(s) = sessions.find_complete(&reps.ids)? {
        return Ok(s.id().to_string());
    }
    let oracle = load_oracle(store)?;
    let manifest = store.manifest()?;
    let mut s = sessions.create(reps.ids, &manifest)?;
    while let Some(id) = s.next().map(str::to_string) {
        let value = *oracle.get(&id).ok_or_else(|| Error::Config(format!("no oracle label for `{id}`")))?;
        s.submit(&id, value, slim_core::spread::LabelSource::Oracle)?;
    }
    log::info!("annotate: oracle labeled {} instances in session {}", s.labels().len(), s.id());
    Ok(s.id().to_string())
}

// ---- spread ----

pub fn spread_stage(store: &Store, cfg: &SpreadConfig, session: Option<&str>) -> Result<Outcome> {
    let emb_path = store.require("embed", "embedding.sltr")?;
    let reps = load_representatives(store)?;
    let sessions = SessionStore::new(store.sessions_dir());
    let s = match session {
        Some(sid) => {
            let s = sessions.open(sid)?;
            if s.state() != SessionState::Complete {
                let st = s.status();
                return Err(Error::Config(format!("session {sid} is open ({}/{} labeled)", st.labeled, st.total)));
            }
            s
        }
        None => sessions
            .find_complete(&reps.ids)?
            .ok_or_else(|| Error::Missing { stage: "serve", path: store.sessions_dir() })?,
    };
    let labels = s.sorted_labels();
    let mut label_bytes = Vec::new();
    for l in &labels {
        serde_json::to_writer(&mut label_bytes, l).expect("label serializes");
        label_bytes.push(b'\n');
    }
    let mut run = StageRun::new(store, "spread", cfg);
    run.input_file(&emb_path)?;
    run.input_file(&store.require("embed", "ids.json")?)?;
    run.input_digest("labels", sha256_bytes(&label_bytes));
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let e = load_embedding(store)?;
    let out = spread_labels(&e, &labels, cfg)?;
    if !out.converged {
        log::warn!("spread: stopped after {} iterations without meeting the tolerance", out.iterations);
    }
    let dir = store.stage_dir("spread");
    let scores = dir.join("scores.jsonl");
    let used = dir.join("labels.jsonl");
    let info = dir.join("outcome.json");
    write_jsonl(&scores, &out.scores)?;
    write_atomic(&used, &label_bytes)?;
    write_json(
        &info,
        &serde_json::json!({
            "iterations": out.iterations,
            "converged": out.converged,
            "sigma": out.sigma,
            "labels": labels.len(),
        }),
    )?;
    run.finish(&[scores, used, info])?;
    Ok(Outcome::Ran)
}

pub fn load_scores(store: &Store) -> Result<Vec<AttentionScore>> {
    read_jsonl(&store.require("spread", "scores.jsonl")?)
}

// ---- curate ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurateConfig {
    pub threshold: f64,
    pub k_core: KChoice,
    pub k_env: KChoice,
    pub auto_range: (usize, usize),
    /// Instances to select; `None` means `budget_fraction` of the training set.
    pub budget: Option<usize>,
    pub budget_fraction: f64,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            k_core: KChoice::Auto,
            k_env: KChoice::Auto,
            auto_range: (1, 8),
            budget: None,
            budget_fraction: 0.2,
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

impl CurateConfig {
    pub fn budget_for(&self, n: usize) -> usize {
        self.budget.unwrap_or_else(|| (self.budget_fraction * n as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedRow {
    pub id: String,
    pub core: usize,
    pub env: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub size: usize,
    pub rho: f64,
    pub quota: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub core: usize,
    pub env: usize,
    pub size: usize,
    pub rho: f64,
    pub quota: usize,
    pub draw_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub threshold: f64,
    pub screened_in: usize,
    pub screened_out: usize,
    pub budget: usize,
    pub selected: usize,
    pub k_core: usize,
    pub k_env: usize,
    pub seed: u64,
    pub core: Vec<ClusterRow>,
    pub env: Vec<ClusterRow>,
    pub subgroups: Vec<SubgroupRow>,
    /// Ground-truth group sizes of the selection, when the manifest has groups.
    pub group_counts: BTreeMap<usize, usize>,
}

pub fn curate(store: &Store, cfg: &CurateConfig) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    let scores_path = store.require("spread", "scores.jsonl")?;
    let mut run = StageRun::new(store, "curate", cfg);
    run.input_file(&scores_path)?;
    for kind in [FeatureKind::Attention, FeatureKind::Inverse] {
        run.input_file(&store.require("ingest", &vectors_file(Split::Train, kind))?)?;
    }
    run.input_file(&store.require("ingest", &ids_file(Split::Train))?)?;
    run.input_file(&store.root().join(MANIFEST))?;
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let scores = load_scores(store)?;
    let kept = screen(&scores, cfg.threshold)?;
    let (ids, core_m) = load_vectors(store, Split::Train, FeatureKind::Attention)?;
    let (_, env_m) = load_vectors(store, Split::Train, FeatureKind::Inverse)?;
    let ccfg = CurationConfig {
        k_core: cfg.k_core,
        k_env: cfg.k_env,
        auto_range: cfg.auto_range,
        kmeans: cfg.kmeans,
        seed: cfg.seed,
    };
    let table = cluster_spaces(
        &kept,
        &weighted(&ids, &core_m, FeatureKind::Attention),
        &weighted(&ids, &env_m, FeatureKind::Inverse),
        &ccfg,
    )?;
    let budget = cfg.budget_for(ids.len());
    let table = allocate(table, budget)?;
    let subset = draw_samples(&table, cfg.seed)?;

    let manifest = store.manifest()?;
    let mut group_counts = BTreeMap::new();
    for e in &subset.entries {
        if let Some(g) = manifest.get(&e.id).and_then(|r| r.group) {
            *group_counts.entry(g).or_insert(0) += 1;
        }
    }
    let rows = |c: &[curation::ClusterSummary]| -> Vec<ClusterRow> {
        c.iter().map(|c| ClusterRow { size: c.members.len(), rho: c.rho, quota: c.quota }).collect()
    };
    let summary = CurationSummary {
        threshold: cfg.threshold,
        screened_in: kept.len(),
        screened_out: scores.len() - kept.len(),
        budget,
        selected: subset.len(),
        k_core: table.k_core,
        k_env: table.k_env,
        seed: cfg.seed,
        core: rows(&table.core),
        env: rows(&table.env),
        subgroups: table
            .subgroups
            .iter()
            .map(|g| SubgroupRow {
                core: g.core,
                env: g.env,
                size: g.members.len(),
                rho: g.rho,
                quota: g.quota,
                draw_seed: draw_seed(cfg.seed, g.core, g.env),
            })
            .collect(),
        group_counts,
    };
    log::info!(
        "curate: kept {} of {} after screening, selected {} ({} x {} clusters)",
        kept.len(),
        scores.len(),
        subset.len(),
        table.core.len(),
        table.env.len()
    );
    let dir = store.stage_dir("curate");
    let curated = dir.join("curated.jsonl");
    let summary_path = dir.join("summary.json");
    let out: Vec<CuratedRow> =
        subset.entries.iter().map(|e| CuratedRow { id: e.id.clone(), core: e.core, env: e.env }).collect();
    write_jsonl(&curated, &out)?;
    write_json(&summary_path, &summary)?;
    run.finish(&[curated, summary_path])?;
    Ok(Outcome::Ran)
}

pub fn load_curated(store: &Store) -> Result<Vec<CuratedRow>> {
    read_jsonl(&store.require("curate", "curated.jsonl")?)
}

pub fn load_summary(store: &Store) -> Result<CurationSummary> {
    read_json(&store.require("curate", "summary.json")?)
}

// ---- retrain ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub class_count: usize,
    pub channels: usize,
    pub subset: String,
    pub rows: usize,
    pub fit: FitConfig,
}

pub const HEADS: [&str; 2] = ["curated", "erm"];

fn write_head(dir: &Path, head: &LinearHead, meta: &HeadMeta) -> Result<Vec<PathBuf>> {
    let w = dir.join("weights.sltr");
    let b = dir.join("bias.sltr");
    let m = dir.join("head.json");
    write_tensor(&w, &matrix_tensor(&head.weights)?)?;
    write_tensor(&b, &Tensor::from_f64(vec![head.bias.len()], &head.bias)?)?;
    write_json(&m, meta)?;
    Ok(vec![w, b, m])
}

/// Reads `stages/retrain/{name}` back.
pub fn load_head(store: &Store, name: &str) -> Result<LinearHead> {
    let w = store.require("retrain", &format!("{name}/weights.sltr"))?;
    let b = store.require("retrain", &format!("{name}/bias.sltr"))?;
    let meta: HeadMeta = read_json(&store.require("retrain", &format!("{name}/head.json"))?)?;
    let weights = tensor_matrix(&read_tensor(&w)?, &w)?;
    let bias = read_tensor(&b)?.to_f64();
    if weights.rows() != meta.class_count || bias.len() != meta.class_count || weights.cols() != meta.channels {
        return Err(Error::format(&w, "head tensors do not match head.json"));
    }
    Ok(LinearHead { weights, bias, l2: meta.fit.l2, seed: meta.fit.seed })
}

/// Fits the last layer on the curated subset, and an ERM baseline on the
/// whole training split, both over plain pooled features.
pub fn retrain(store: &Store, cfg: &FitConfig) -> Result<Outcome> {
    let curated_path = store.require("curate", "curated.jsonl")?;
    let plain = store.require("ingest", &vectors_file(Split::Train, FeatureKind::Plain))?;
    let mut run = StageRun::new(store, "retrain", cfg);
    run.input_file(&curated_path)?;
    run.input_file(&plain)?;
    run.input_file(&store.require("ingest", &ids_file(Split::Train))?)?;
    run.input_file(&store.root().join(MANIFEST))?;
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let manifest = store.manifest()?;
    let (ids, x) = load_vectors(store, Split::Train, FeatureKind::Plain)?;
    let labels = labels_of(&manifest, &ids)?;
    let row_of: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let curated = load_curated(store)?;
    let rows = curated
        .iter()
        .map(|c| row_of.get(c.id.as_str()).copied().ok_or_else(|| slim_core::Error::UnknownId(c.id.clone())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sub_ids: Vec<String> = rows.iter().map(|&i| ids[i].clone()).collect();
    let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();

    let dir = store.stage_dir("retrain");
    let mut outputs = Vec::new();
    for (name, ids, x, labels) in
        [(HEADS[0], &sub_ids, &x.select_rows(&rows), &sub_labels), (HEADS[1], &ids, &x, &labels)]
    {
        let head = fit_linear(ids, x, labels, manifest.class_count, cfg)?;
        let meta = HeadMeta {
            class_count: manifest.class_count,
            channels: x.cols(),
            subset: name.to_string(),
            rows: ids.len(),
            fit: *cfg,
        };
        outputs.extend(write_head(&dir.join(name), &head, &meta)?);
    }
    run.finish(&outputs)?;
    Ok(Outcome::Ran)
}

fn labels_of(manifest: &Manifest, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| manifest.get(id).map(|r| r.label).ok_or_else(|| slim_core::Error::UnknownId(id.clone()).into()))
        .collect()
}

// ---- metrics ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAiou {
    pub count: usize,
    pub mean_aiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// Training instances with a box.
    pub instances: usize,
    pub mean_soft_iou: f64,
    /// Over instances that have class maps; absent when none do.
    pub mean_aiou: Option<f64>,
    /// AIoU split by the oracle attention label, when the store has one.
    pub by_oracle: BTreeMap<String, OracleAiou>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eval_split: Split,
    pub curated_size: usize,
    pub curated: GroupReport,
    pub erm: GroupReport,
    pub attention: Option<AttentionReport>,
}

/// Competitor maps for `label` from the instance's class-map sidecar.
fn competitor_maps(path: &Path, label: usize, cells: usize) -> Result<Option<Vec<Vec<f64>>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let t = read_tensor(path)?;
    let k = t.dims()[0];
    if t.rank() != 3 || t.dims()[1] * t.dims()[2] != cells || label >= k {
        return Err(Error::format(path, format!("class maps {:?} do not fit the attribution grid", t.dims())));
    }
    let data = t.to_f64();
    Ok(Some((0..k).filter(|&c| c != label).map(|c| data[c * cells..(c + 1) * cells].to_vec()).collect()))
}

/// Soft IoU and AIoU of the training attributions against their boxes.
pub fn attention_report(store: &Store, manifest: &Manifest) -> Result<Option<AttentionReport>> {
    let oracle = load_oracle(store).ok();
    let (mut ious, mut aious) = (Vec::new(), Vec::new());
    let mut by_oracle: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in manifest.split(Split::Train) {
        let Some(bbox) = r.bbox else { continue };
        let a = manifest.attribution(r)?;
        if a.rank() != 2 {
            return Err(Error::format(&manifest.resolve(&r.attribution), "attribution must be [H, W]"));
        }
        let m = a.to_f64();
        let b = rasterize_bbox(bbox, a.dims()[0], a.dims()[1])?;
        ious.push(soft_iou(&m, &b)?);
        let maps_path = store.root().join(CLASS_MAPS).join(format!("{}.sltr", r.id));
        if let Some(rivals) = competitor_maps(&maps_path, r.label, m.len())? {
            let refs: Vec<&[f64]> = rivals.iter().map(Vec::as_slice).collect();
            let v = aiou(&m, &b, &refs)?;
            aious.push(v);
            if let Some(value) = oracle.as_ref().and_then(|o| o.get(&r.id)) {
                let key =
                    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                by_oracle.entry(key).or_default().push(v);
            }
        }
    }
    if ious.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(AttentionReport {
        instances: ious.len(),
        mean_soft_iou: mean(&ious),
        mean_aiou: (!aious.is_empty()).then(|| mean(&aious)),
        by_oracle: by_oracle
            .into_iter()
            .map(|(k, v)| (k, OracleAiou { count: v.len(), mean_aiou: mean(&v) }))
            .collect(),
    }))
}

pub fn metrics(store: &Store) -> Result<Outcome> {
    let mut run = StageRun::new(store, "metrics", &serde_json::json!({}));
    for name in HEADS {
        for file in ["weights.sltr", "bias.sltr", "head.json"] {
            run.input_file(&store.require("retrain", &format!("{name}/{file}"))?)?;
        }
    }
    let manifest = store.manifest()?;
    let split = if manifest.has_split(Split::Val) { Split::Val } else { Split::Train };
    run.input_file(&store.require("ingest", &vectors_file(split, FeatureKind::Plain))?)?;
    run.input_file(&store.require("ingest", &ids_file(split))?)?;
    run.input_file(&store.require("curate", "curated.jsonl")?)?;
    run.input_file(&store.root().join(MANIFEST))?;
    let oracle_path = store.root().join(ORACLE_LABELS);
    if oracle_path.is_file() {
        run.input_file(&oracle_path)?;
    }
    if run.is_current() {
        return Ok(Outcome::Skipped);
    }
    let (ids, x) = load_vectors(store, split, FeatureKind::Plain)?;
    let labels = labels_of(&manifest, &ids)?;
    let groups: Vec<usize> = ids.iter().map(|id| manifest.get(id).and_then(|r| r.group).unwrap_or(0)).collect();
    let mut reports = Vec::new();
    for name in HEADS {
        let head = load_head(store, name)?;
        let pred = predict(&head, &ids, &x)?;
        let p: Vec<usize> = ids.iter().map(|id| pred[id]).collect();
        reports.push(group_accuracy(&p, &labels, &groups)?);
    }
    let erm = reports.pop().expect("two heads");
    let curated = reports.pop().expect("two heads");
    let report = MetricsReport {
        eval_split: split,
        curated_size: load_curated(store)?.len(),
        curated,
        erm,
        attention: attention_report(store, &manifest)?,
    };
    let mut text = format!("curated head ({} instances), evaluated on {}\n", report.curated_size, split.as_str());
    text.push_str(&report.curated.table());
    text.push_str(&format!("\nERM head (full training split), evaluated on {}\n", split.as_str()));
    text.push_str(&report.erm.table());
    if let Some(a) = &report.attention {
        text.push_str(&format!("\nattention over {} boxed instances\n", a.instances));
        text.push_str(&format!("{:>16}  {:>9.4}\n", "soft IoU", a.mean_soft_iou));
        if let Some(v) = a.mean_aiou {
            text.push_str(&format!("{:>16}  {:>9.4}\n", "AIoU", v));
        }
        for (k, v) in &a.by_oracle {
            text.push_str(&format!("{:>16}  {:>9.4}  ({} instances)\n", format!("AIoU {k}"), v.mean_aiou, v.count));
        }
    }
    log::info!("metrics: worst-group {:.4} curated vs {:.4} ERM", report.curated.worst, report.erm.worst);
    let dir = store.stage_dir("metrics");
    let json = dir.join("report.json");
    let txt = dir.join("report.txt");
    write_json(&json, &report)?;
    write_atomic(&txt, text.as_bytes())?;
    run.finish(&[json, txt])?;
    Ok(Outcome::Ran)
}

pub fn load_report(store: &Store) -> Result<MetricsReport> {
    read_json(&store.require("metrics", "report.json")?)
}
