//! The `slim` command line.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slim_core::curation::KChoice;
use slim_core::embed::EmbedMethod;
use slim_core::spread::Bandwidth;
use slim_core::synth::{PatchLayout, SyntheticConfig, TrainConfig};

use crate::bench::{synth_bench, BenchConfig};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineConfig, Preset};
use crate::runlog::Outcome;
use crate::service::{serve, AppState};
use crate::stages::{self, AnnotationK};
use crate::store::Store;

#[derive(Parser, Debug)]
#[command(name = "slim", version, about = "Attention-guided training-set curation")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pool features into attention, inverse and plain vectors.
    Ingest(StageArgs),
    /// Project attention vectors into the attention space.
    Embed(StageArgs),
    /// Pick representatives for annotation.
    Sample(StageArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Spread the annotation labels over the attention space.
    Spread(StageArgs),
    /// Screen, cluster and draw the curated subset.
    Curate(StageArgs),
    /// Fit the last layer on the curated subset and the ERM baseline.
    Retrain(StageArgs),
    /// Group accuracy and attention reports.
    Metrics(StageArgs),
    /// Run every stage.
    Pipeline(StageArgs),
    /// Generate, train and export the synthetic benchmark.
    SynthBench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Pca,
    Graph,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Synth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Fixed,
    Random,
}

/// `auto` or a positive integer.
#[derive(Clone, Copy, Debug)]
enum KArg {
    Auto,
    Cap,
    Fixed(usize),
}

impl FromStr for KArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "cap" => Ok(Self::Cap),
            _ => s
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(Self::Fixed)
                .ok_or_else(|| format!("expected `auto`, `cap` or a positive integer, got `{s}`")),
        }
    }
}

fn cluster_k(k: KArg, flag: &str) -> Result<KChoice> {
    match k {
        KArg::Auto => Ok(KChoice::Auto),
        KArg::Fixed(k) => Ok(KChoice::Fixed(k)),
        KArg::Cap => Err(Error::Config(format!("{flag} takes `auto` or an integer"))),
    }
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Store directory (holds store.json and manifest.jsonl).
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attention-space dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Annotation cluster count: `auto`, `cap`, or an integer.
    #[arg(long)]
    k: Option<KArg>,
    /// Annotation budget as a fraction of the training set.
    #[arg(long)]
    annotation_cap: Option<f64>,
    /// Label-spreading alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Label-spreading bandwidth: `auto` or a positive number.
    #[arg(long)]
    sigma: Option<String>,
    /// Annotation session to spread (default: latest complete one).
    #[arg(long)]
    session: Option<String>,
    /// Screening threshold on the probability of correct attention.
    #[arg(long)]
    threshold: Option<f64>,
    /// Core-space cluster count: `auto` or an integer.
    #[arg(long)]
    k_core: Option<KArg>,
    /// Environment-space cluster count: `auto` or an integer.
    #[arg(long)]
    k_env: Option<KArg>,
    /// Curated subset size (default: 20% of the training set).
    #[arg(long)]
    budget: Option<usize>,
    /// L2 penalty of the retrained head.
    #[arg(long)]
    l2: Option<f64>,
    /// Learning rate of the retrained head.
    #[arg(long)]
    lr: Option<f64>,
    /// Full-batch epochs of the retrained head.
    #[arg(long)]
    epochs: Option<usize>,
    /// Answer annotation from the store's oracle labels.
    #[arg(long)]
    oracle: bool,
}

impl StageArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let preset = match self.preset {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Synth => Preset::Synth,
        };
        let mut cfg = PipelineConfig::preset(preset, self.seed);
        if let Some(d) = self.dim {
            cfg.embed.dim = d;
        }
        if let Some(m) = self.method {
            cfg.embed.method = match m {
                MethodArg::Pca => EmbedMethod::Pca,
                MethodArg::Graph => EmbedMethod::NeighborGraph,
            };
        }
        if let Some(k) = self.k {
            cfg.sample.k = match k {
                KArg::Auto => AnnotationK::Auto,
                KArg::Cap => AnnotationK::Cap,
                KArg::Fixed(k) => AnnotationK::Fixed(k),
            };
        }
        if let Some(c) = self.annotation_cap {
            cfg.sample.cap_fraction = c;
        }
        if let Some(a) = self.alpha {
            cfg.spread.alpha = a;
        }
        if let Some(s) = &self.sigma {
            cfg.spread.bandwidth = match s.as_str() {
                "auto" => Bandwidth::Auto,
                v => Bandwidth::Fixed(
                    v.parse().map_err(|_| Error::Config(format!("--sigma takes `auto` or a number, got `{v}`")))?,
                ),
            };
        }
        cfg.session.clone_from(&self.session);
        if let Some(t) = self.threshold {
            cfg.curate.threshold = t;
        }
        if let Some(k) = self.k_core {
            cfg.curate.k_core = cluster_k(k, "--k-core")?;
        }
        if let Some(k) = self.k_env {
            cfg.curate.k_env = cluster_k(k, "--k-env")?;
        }
        if self.budget.is_some() {
            cfg.curate.budget = self.budget;
        }
        if let Some(v) = self.l2 {
            cfg.fit.l2 = v;
        }
        if let Some(v) = self.lr {
            cfg.fit.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.fit.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Store directory (holds store.json and manifest.jsonl).
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory of static UI files served under `/ui/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Output store directory.
    #[arg(long, alias = "store")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training instances.
    #[arg(long, default_value_t = 4000)]
    n: usize,
    /// Patch dimension.
    #[arg(long, default_value_t = 50)]
    d: usize,
    /// Patches per instance.
    #[arg(long, default_value_t = 5)]
    patches: usize,
    /// Share of training instances whose spurious patch agrees with the label.
    #[arg(long, default_value_t = 0.95)]
    data_alpha: f64,
    /// Core feature strength.
    #[arg(long, default_value_t = 1.0)]
    beta_c: f64,
    /// Spurious feature strength.
    #[arg(long, default_value_t = 2.0)]
    beta_s: f64,
    /// Noise scale of the background patches.
    #[arg(long, default_value_t = 3.0)]
    sigma_p: f64,
    /// Core and spurious patch positions.
    #[arg(long, value_enum, default_value = "fixed")]
    layout: LayoutArg,
    /// Convolution filters of the reference network.
    #[arg(long, default_value_t = 16)]
    filters: usize,
    /// Standard deviation of the initial filters.
    #[arg(long, default_value_t = 0.01)]
    sigma0: f64,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// Gradient-descent steps.
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Held-out instances.
    #[arg(long, default_value_t = 2000)]
    val_n: usize,
    /// Spurious agreement rate of the held-out split.
    #[arg(long, default_value_t = 0.5)]
    val_alpha: f64,
}

impl BenchArgs {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            data: SyntheticConfig {
                n_samples: self.n,
                d: self.d,
                patches: self.patches,
                alpha: self.data_alpha,
                beta_c: self.beta_c,
                beta_s: self.beta_s,
                sigma_p: self.sigma_p,
                seed: self.seed,
                layout: match self.layout {
                    LayoutArg::Fixed => PatchLayout::Fixed,
                    LayoutArg::Random => PatchLayout::Random,
                },
            },
            val_samples: self.val_n,
            val_alpha: self.val_alpha,
            filters: self.filters,
            sigma0: self.sigma0,
            train: TrainConfig { eta: self.eta, steps: self.steps },
        }
    }
}

fn report(stage: &str, o: Outcome) {
    match o {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::Skipped => println!("{stage}: unchanged, skipped"),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => report("ingest", stages::ingest(&Store::new(&a.store))?),
        Command::Embed(a) => report("embed", stages::embed_stage(&Store::new(&a.store), &a.config()?.embed)?),
        Command::Sample(a) => report("sample", stages::sample(&Store::new(&a.store), &a.config()?.sample)?),
        Command::Spread(a) => {
            let cfg = a.config()?;
            let store = Store::new(&a.store);
            let session = match (&cfg.session, a.oracle) {
                (None, true) => Some(stages::oracle_annotate(&store)?),
                (s, _) => s.clone(),
            };
            report("spread", stages::spread_stage(&store, &cfg.spread, session.as_deref())?)
        }
        Command::Curate(a) => report("curate", stages::curate(&Store::new(&a.store), &a.config()?.curate)?),
        Command::Retrain(a) => report("retrain", stages::retrain(&Store::new(&a.store), &a.config()?.fit)?),
        Command::Metrics(a) => {
            let store = Store::new(&a.store);
            report("metrics", stages::metrics(&store)?);
            print_report(&store)?;
        }
        Command::Pipeline(a) => {
            let store = Store::new(&a.store);
            for (stage, o) in run_pipeline(&store, &a.config()?, a.oracle)? {
                report(stage, o);
            }
            print_report(&store)?;
        }
        Command::Serve(a) => {
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|_| Error::Config(format!("bad listen address {}:{}", a.host, a.port)))?;
            let state = Arc::new(AppState::new(Store::new(&a.store), a.ui)?);
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
            rt.block_on(serve(state, addr))?;
        }
        Command::SynthBench(a) => {
            let s = synth_bench(&a.out, &a.config())?;
            println!("exported {} to {}", a.n + a.val_n, a.out.display());
            println!("train alpha_hat {:.4}, val alpha_hat {:.4}", s.train_alpha_hat, s.val_alpha_hat);
            println!("oracle-correct attention {:.4}, final loss {:.6}", s.oracle_correct, s.final_loss);
            print!("reference CNN on val\n{}", s.reference.table());
        }
    }
    Ok(())
}

fn print_report(store: &Store) -> Result<()> {
    let path = store.require("metrics", "report.txt")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        // Route through the capture-aware writer so test harnesses can hold it.
        .is_test(true)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
