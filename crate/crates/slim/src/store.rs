//! On-disk dataset: a JSON Lines manifest plus one SLTR file per tensor.
//!
//! Paths inside the manifest are relative to the directory holding it.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slim_core::attention::normalize_attribution;
use slim_core::Tensor;

use crate::error::{Error, Result};

pub const STORE_META: &str = "store.json";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub class_count: usize,
    /// Display names, one per class. Empty means "class {k}".
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl StoreMeta {
    pub fn class_name(&self, k: usize) -> String {
        self.class_names.get(k).cloned().unwrap_or_else(|| format!("class {k}"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub feature: String,
    pub attribution: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn split(&self) -> Split {
        self.split.unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// In file order.
    pub records: Vec<ManifestEntry>,
    pub class_count: usize,
    base: PathBuf,
    index: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.records.iter().filter(move |r| r.split() == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.split(split).next().is_some()
    }

    /// Absolute location of a path named in the manifest.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn feature(&self, e: &ManifestEntry) -> Result<Tensor> {
        read_tensor(&self.resolve(&e.feature))
    }

    /// The attribution grid brought into `[0, 1]`; rescaling is logged.
    pub fn attribution(&self, e: &ManifestEntry) -> Result<Tensor> {
        let path = self.resolve(&e.attribution);
        let (a, rescaled) =
            normalize_attribution(read_tensor(&path)?).map_err(|err| Error::format(&path, err.to_string()))?;
        if rescaled {
            log::warn!("{}: attribution maximum exceeds 1, rescaled by its maximum", path.display());
        }
        Ok(a)
    }
}

/// Parses and validates a manifest without touching the tensors it names,
/// beyond checking that they exist.
pub fn load_manifest(path: &Path, class_count: usize) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut records = Vec::new();
    let mut index = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(raw).map_err(|err| parse_err(line, err.to_string()))?;
        if e.id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        if e.label >= class_count {
            return Err(parse_err(line, format!("label {} of `{}` outside 0..{class_count}", e.label, e.id)));
        }
        if let Some(b) = e.bbox {
            let [x0, y0, x1, y1] = b;
            if !(b.iter().all(|v| (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1) {
                return Err(parse_err(line, format!("bbox {b:?} of `{}` is not a normalized rectangle", e.id)));
            }
        }
        for rel in [Some(&e.feature), Some(&e.attribution), e.image.as_ref()].into_iter().flatten() {
            if !base.join(rel).is_file() {
                return Err(parse_err(line, format!("`{rel}` referenced by `{}` does not exist", e.id)));
            }
        }
        if index.insert(e.id.clone(), records.len()).is_some() {
            return Err(parse_err(line, format!("duplicate id `{}`", e.id)));
        }
        records.push(e);
    }
    Ok(Manifest { records, class_count, base, index })
}

/// Writes `records` as a manifest, one object per line.
pub fn write_manifest(path: &Path, records: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest entries serialize");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &t.encode())
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Serializes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A store directory: `store.json`, `manifest.jsonl`, the tensors, and the
/// stage outputs under `stages/`.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> Result<StoreMeta> {
        let path = self.root.join(STORE_META);
        if !path.is_file() {
            return Err(Error::Config(format!("{} is not a store (no {STORE_META})", self.root.display())));
        }
        let meta: StoreMeta = read_json(&path)?;
        if meta.class_count < 2 {
            return Err(Error::format(&path, format!("class_count {} must be at least 2", meta.class_count)));
        }
        Ok(meta)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let meta = self.meta()?;
        load_manifest(&self.root.join(MANIFEST), meta.class_count)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(stage)
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    /// `stages/{stage}/{name}`, or a missing-artifact error naming `stage`.
    pub fn require(&self, stage: &'static str, name: &str) -> Result<PathBuf> {
        let path = self.stage_dir(stage).join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::Missing { stage, path })
        }
    }
}

/// Drops repeated ids, keeping the first occurrence of each.
pub fn dedup_preserving_order(ids: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.into_iter().filter(|id| seen.insert(id.clone())).collect()
}
