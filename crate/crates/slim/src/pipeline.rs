//! Stage configuration presets and the all-stages driver.

use serde::{Deserialize, Serialize};
use slim_core::embed::{EmbedConfig, EmbedMethod};
use slim_core::linear::FitConfig;
use slim_core::spread::SpreadConfig;

use crate::error::{Error, Result};
use crate::runlog::Outcome;
use crate::stages::{self, AnnotationK, CurateConfig, SampleConfig};
use crate::store::Store;

/// Annotation budget ceiling of the `paper` preset, as a share of the
/// training set.
pub const PAPER_ANNOTATION_CAP: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Neighbor-graph embedding and elbow-chosen annotation k, with the
    /// annotation cap held to 3%.
    #[default]
    Paper,
    /// PCA embedding and annotation k at the cap; tuned for the synthetic
    /// benchmark.
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub embed: EmbedConfig,
    pub sample: SampleConfig,
    pub spread: SpreadConfig,
    pub curate: CurateConfig,
    pub fit: FitConfig,
    /// Annotation session feeding `spread`; the latest complete one over the
    /// current representatives when unset.
    pub session: Option<String>,
}

impl PipelineConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut cfg = Self {
            preset,
            embed: EmbedConfig::default(),
            sample: SampleConfig::default(),
            spread: SpreadConfig::default(),
            curate: CurateConfig::default(),
            fit: FitConfig::default(),
            session: None,
        };
        match preset {
            Preset::Paper => {
                cfg.embed.method = EmbedMethod::NeighborGraph;
                cfg.sample.k = AnnotationK::Auto;
            }
            Preset::Synth => {
                cfg.embed.method = EmbedMethod::Pca;
                cfg.sample.k = AnnotationK::Cap;
            }
        }
        cfg.set_seed(seed);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.embed.seed = seed;
        self.sample.seed = seed;
        self.curate.seed = seed;
        self.fit.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset == Preset::Paper && self.sample.cap_fraction > PAPER_ANNOTATION_CAP {
            return Err(Error::Config(format!(
                "annotation cap {} exceeds the {PAPER_ANNOTATION_CAP} ceiling of the paper preset",
                self.sample.cap_fraction
            )));
        }
        Ok(())
    }
}

/// Runs every stage in order. With `oracle`, annotation is answered from the
/// store's ground truth; otherwise a complete session must already exist.
pub fn run_pipeline(store: &Store, cfg: &PipelineConfig, oracle: bool) -> Result<Vec<(&'static str, Outcome)>> {
    cfg.validate()?;
    let mut done = Vec::new();
    let mut note = |name: &'static str, o: Outcome| {
        log::info!("{name}: {}", if o == Outcome::Ran { "done" } else { "unchanged, skipped" });
        done.push((name, o));
    };
    note("ingest", stages::ingest(store)?);
    note("embed", stages::embed_stage(store, &cfg.embed)?);
    note("sample", stages::sample(store, &cfg.sample)?);
    let session = match (&cfg.session, oracle) {
        (Some(s), _) => Some(s.clone()),
        (None, true) => Some(stages::oracle_annotate(store)?),
        (None, false) => None,
    };
    note("spread", stages::spread_stage(store, &cfg.spread, session.as_deref())?);
    note("curate", stages::curate(store, &cfg.curate)?);
    note("retrain", stages::retrain(store, &cfg.fit)?);
    note("metrics", stages::metrics(store)?);
    Ok(done)
}
