//! The `inpaint-compose` command line. [`run`] parses arguments, executes
//! one subcommand and returns the process exit code: 0 on success, 1 for
//! bad input, 2 for internal failures.
//!
//! Every subcommand accepts `--seed`, `--config <file.json>` and `--json`.
//! Keys in the config file use the long flag names with underscores and
//! override values given on the command line. Default paths live under
//! `$INPAINT_COMPOSE_DATA` (or `./data`).

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use inpaint_compose::checkpoint::{load_bundle, save_bundle};
use inpaint_compose::composer::{compose_batch, compose_request, write_composites, ComposeOptions, ComposeRequest};
use inpaint_compose::datasets::{generate_shapes_world, load_manifest, Corpus, ShapesWorldConfig};
use inpaint_compose::denoiser::{DenoiserConfig, ModelBundle};
use inpaint_compose::diffusion::{make_schedule, SamplerConfig, SamplerKind};
use inpaint_compose::imaging::BBox;
use inpaint_compose::metrics::{evaluate_run, Embedder, EmbeddingTable, EvalConfig, RealSet};
use inpaint_compose::trainer::{finetune_subject, pretrain, JsonlLog, StepRecord, TrainConfig};
use inpaint_compose_studio::{CoreBackend, Store, Studio};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "INPAINT_COMPOSE_DATA";
/// Version of the summaries printed by `pretrain`, `finetune` and `compose`.
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl From<inpaint_compose::Error> for CliError {
    fn from(e: inpaint_compose::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<inpaint_compose_studio::StudioError> for CliError {
    fn from(e: inpaint_compose_studio::StudioError) -> Self {
        match e.code() {
            "internal" => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "inpaint-compose", version, about = "Subject-driven image composition with a small inpainting diffusion model")]
pub struct Cli {
    /// Random seed; every subcommand except serve is deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file whose keys override the command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print one machine-readable JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic shapes-world dataset (manifest, references, backgrounds, corpus).
    GenData(GenDataArgs),
    /// Pretrain a base inpainting model on a shapes-world corpus.
    Pretrain(PretrainArgs),
    /// Finetune a base model on one subject's references.
    Finetune(FinetuneArgs),
    /// Composite a subject into one background, or every pair of a manifest.
    Compose(ComposeArgs),
    /// Score generated composites: foreground fidelity and FID.
    Evaluate(EvaluateArgs),
    /// Run the human-in-the-loop review studio HTTP server.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// Output directory [default: $INPAINT_COMPOSE_DATA/world]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub n_categories: usize,
    #[arg(long, default_value_t = 2)]
    pub subjects_per_category: usize,
    #[arg(long, default_value_t = 5)]
    pub refs_per_subject: usize,
    #[arg(long, default_value_t = 8)]
    pub backgrounds_per_category: usize,
    #[arg(long, default_value_t = 500)]
    pub corpus_per_category: usize,
    /// Side of reference and corpus images.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 64)]
    pub background_size: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    /// Dataset directory holding corpus.json [default: $INPAINT_COMPOSE_DATA/world]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output bundle [default: $INPAINT_COMPOSE_DATA/base.bundle]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub learning_rate: f64,
    /// Channel width of the first U-Net level.
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    /// Diffusion timesteps T of the linear schedule.
    #[arg(long, default_value_t = 200)]
    pub schedule_steps: usize,
    /// Training log, one JSON line per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Full denoiser configuration; only settable from --config.
    #[arg(skip)]
    pub model: Option<DenoiserConfig>,
    /// Full training configuration; only settable from --config.
    #[arg(skip)]
    pub train: Option<TrainConfig>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    /// Base bundle [default: $INPAINT_COMPOSE_DATA/base.bundle]
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Dataset manifest [default: $INPAINT_COMPOSE_DATA/world/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Subject id from the manifest.
    #[arg(long)]
    pub subject: Option<String>,
    /// Number of references to train on, taken in manifest order.
    #[arg(long, default_value_t = 5)]
    pub refs: usize,
    #[arg(long, default_value = "rare0")]
    pub rare_token: String,
    /// Output bundle [default: $INPAINT_COMPOSE_DATA/bundles/<subject>.bundle]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Full training configuration; only settable from --config.
    #[arg(skip)]
    pub train: Option<TrainConfig>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeArgs {
    /// Bundle for single-background mode.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Background image; selects single-background mode.
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// Target box "x,y,w,h" in background pixels.
    #[arg(long)]
    pub bbox: Option<BBox>,
    /// Manifest; selects batch mode over every (subject, background) pair.
    #[arg(long, conflicts_with = "background")]
    pub manifest: Option<PathBuf>,
    /// Directory of `<subject>.bundle` files for batch mode [default: $INPAINT_COMPOSE_DATA/bundles]
    #[arg(long)]
    pub bundles: Option<PathBuf>,
    /// Output directory [default: $INPAINT_COMPOSE_DATA/gen]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Samples per background.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Prompt override, e.g. "a rare0 star".
    #[arg(long)]
    pub prompt: Option<String>,
    /// ddim or ddpm.
    #[arg(long, default_value = "ddim")]
    pub sampler: SamplerKind,
    /// DDIM steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Generated tree `<subject>/<background>/<k>.png` [default: $INPAINT_COMPOSE_DATA/gen]
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Manifest [default: $INPAINT_COMPOSE_DATA/world/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Real images for FID, laid out `<category>/<name>.png` [default: the manifest's corpus/]
    #[arg(long)]
    pub real_images: Option<PathBuf>,
    /// Precomputed real-image embeddings for FID.
    #[arg(long, conflicts_with = "real_images")]
    pub real_emb: Option<PathBuf>,
    /// External embedding file replacing the CLIP-style foreground embedder.
    #[arg(long)]
    pub clip_emb: Option<PathBuf>,
    /// External embedding file replacing the DINO-style foreground embedder.
    #[arg(long)]
    pub dino_emb: Option<PathBuf>,
    /// External embedding file replacing the FID embedder.
    #[arg(long)]
    pub fid_emb: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Studio storage [default: $INPAINT_COMPOSE_DATA/studio]
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Directory that relative paths in create-project requests resolve against [default: .]
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    /// ddim or ddpm.
    #[arg(long, default_value = "ddim")]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn or_data(p: &Option<PathBuf>, rel: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| data_dir().join(rel))
}

/// Applies the config file over the parsed flags. Returns the merged
/// arguments and seed.
fn resolve<T: Serialize + DeserializeOwned>(args: &T, cli: &Cli) -> CliResult<(T, u64)> {
    let Some(path) = &cli.config else {
        return Ok((serde_json::from_value(serde_json::to_value(args).map_err(internal)?).map_err(internal)?, cli.seed));
    };
    let text = std::fs::read_to_string(path).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    let overlay: Value = serde_json::from_str(&text).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    let Value::Object(overlay) = overlay else {
        return Err(user(format!("config {} must be a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(args).map_err(internal)?;
    let mut seed = cli.seed;
    let obj = merged.as_object_mut().expect("args serialize to objects");
    for (k, v) in overlay {
        if k == "seed" {
            seed = serde_json::from_value(v).map_err(|e| user(format!("config seed: {e}")))?;
        } else {
            obj.insert(k, v);
        }
    }
    let args = serde_json::from_value(merged).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    Ok((args, seed))
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

struct Out<'a> {
    json: bool,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Out<'_> {
    /// Progress and human-readable output; suppressed from stdout in JSON mode.
    fn say(&mut self, line: &str) {
        let _ = if self.json {
            writeln!(self.stderr, "{line}")
        } else {
            writeln!(self.stdout, "{line}")
        };
    }

    fn doc(&mut self, v: &impl Serialize) -> CliResult<()> {
        if self.json {
            let s = serde_json::to_string_pretty(v).map_err(internal)?;
            writeln!(self.stdout, "{s}").map_err(internal)?;
        }
        Ok(())
    }
}

fn progress_logger<'a, 'b>(
    log: Option<&Path>,
    total: usize,
    out: &'a mut Out<'b>,
) -> CliResult<impl FnMut(&StepRecord) -> inpaint_compose::Result<()> + use<'a, 'b>> {
    let mut file = log.map(JsonlLog::create).transpose()?;
    let every = (total / 20).max(1);
    Ok(move |r: &StepRecord| {
        if let Some(f) = file.as_mut() {
            f.write(r)?;
        }
        if r.step % every == 0 || r.step + 1 == total {
            out.say(&format!("step {:>6} loss {:.4} ({:.0}s)", r.step, r.loss, r.wall_time));
        }
        Ok(())
    })
}

fn gen_data(a: GenDataArgs, seed: u64, out: &mut Out) -> CliResult<()> {
    let dir = or_data(&a.out, "world");
    let cfg = ShapesWorldConfig {
        n_categories: a.n_categories,
        subjects_per_category: a.subjects_per_category,
        refs_per_subject: a.refs_per_subject,
        backgrounds_per_category: a.backgrounds_per_category,
        image_size: a.image_size,
        background_size: a.background_size,
        corpus_per_category: a.corpus_per_category,
        seed,
    };
    let m = generate_shapes_world(&cfg, &dir)?;
    out.say(&format!(
        "wrote {} categories, {} pairs to {}",
        m.categories.len(),
        m.pair_count(),
        dir.display()
    ));
    out.doc(&m)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleSummary {
    pub version: u32,
    pub bundle: PathBuf,
    pub hash: String,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

fn summary(path: &Path, hash: String, records: &[StepRecord]) -> BundleSummary {
    BundleSummary {
        version: SUMMARY_VERSION,
        bundle: path.to_path_buf(),
        hash,
        steps: records.len(),
        first_loss: records.first().map(|r| r.loss),
        final_loss: records.last().map(|r| r.loss),
    }
}

fn run_pretrain(a: PretrainArgs, seed: u64, out: &mut Out) -> CliResult<()> {
    let data = or_data(&a.data, "world");
    let dest = or_data(&a.out, "base.bundle");
    let corpus_path = data.join("corpus.json");
    if !corpus_path.exists() {
        return Err(user(format!("no corpus at {}; run gen-data first", corpus_path.display())));
    }
    let corpus = Corpus::load_samples(&corpus_path)?;
    let model = a.model.clone().unwrap_or(DenoiserConfig {
        base_width: a.base_width,
        ..DenoiserConfig::default()
    });
    let train = a.train.clone().unwrap_or(TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed,
        ..TrainConfig::pretrain()
    });
    let schedule = make_schedule(a.schedule_steps, 1e-4, 0.02)?;
    let (bundle, records) = {
        let mut log = progress_logger(a.log.as_deref(), train.steps, out)?;
        pretrain(&corpus, &train, &model, &schedule, &mut log)?
    };
    let hash = save_bundle(&bundle, &dest)?;
    out.say(&format!("saved {} ({hash})", dest.display()));
    out.doc(&summary(&dest, hash, &records))
}

fn run_finetune(a: FinetuneArgs, seed: u64, out: &mut Out) -> CliResult<()> {
    if a.refs == 0 {
        return Err(user("--refs must be at least 1"));
    }
    let subject = a.subject.clone().ok_or_else(|| user("--subject is required"))?;
    let manifest_path = or_data(&a.manifest, "world/manifest.json");
    let m = load_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    m.validate(Some(root))?;
    let mut refs = m.reference_set(&subject, &a.rare_token)?;
    if a.refs > refs.items.len() {
        return Err(user(format!(
            "--refs {} exceeds the {} references of {subject}",
            a.refs,
            refs.items.len()
        )));
    }
    refs.items.truncate(a.refs);
    let images = refs.load(root)?;
    let base_path = or_data(&a.base, "base.bundle");
    let base = load_bundle(&base_path)?;
    let train = a.train.clone().unwrap_or(TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed,
        ..TrainConfig::finetune()
    });
    let (bundle, records) = {
        let mut log = progress_logger(a.log.as_deref(), train.steps, out)?;
        finetune_subject(&base, &refs, &images, &train, &mut log)?
    };
    let dest = a
        .out
        .clone()
        .unwrap_or_else(|| data_dir().join("bundles").join(format!("{subject}.bundle")));
    let hash = save_bundle(&bundle, &dest)?;
    out.say(&format!("saved {} ({hash})", dest.display()));
    out.doc(&summary(&dest, hash, &records))
}

fn run_compose(a: ComposeArgs, seed: u64, out: &mut Out) -> CliResult<()> {
    if a.n == 0 {
        return Err(user("--n must be at least 1"));
    }
    let options = ComposeOptions {
        prompt: a.prompt.clone(),
        n_samples: a.n,
        sampler: SamplerConfig {
            kind: a.sampler,
            steps: a.steps,
        },
        seed,
    };
    let dest = or_data(&a.out, "gen");
    if let Some(background) = &a.background {
        let req = ComposeRequest {
            bundle: a.bundle.clone().ok_or_else(|| user("--bundle is required with --background"))?,
            background: background.clone(),
            bbox: a.bbox.ok_or_else(|| user("--bbox is required with --background"))?,
            options,
        };
        let composites = compose_request(&req)?;
        let paths = write_composites(&dest, &composites)?;
        out.say(&format!("wrote {} composites to {}", paths.len(), dest.display()));
        let samples: Vec<Value> = paths
            .iter()
            .zip(&composites)
            .map(|(p, c)| json!({"path": p, "meta": c.meta}))
            .collect();
        return out.doc(&json!({"version": SUMMARY_VERSION, "samples": samples}));
    }
    let Some(manifest_path) = &a.manifest else {
        return Err(user("compose needs --background (single) or --manifest (batch)"));
    };
    let m = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let bundles_dir = or_data(&a.bundles, "bundles");
    let mut cache: HashMap<String, Arc<ModelBundle>> = HashMap::new();
    let mut load = |subject: &str| -> inpaint_compose::Result<Arc<ModelBundle>> {
        if let Some(b) = cache.get(subject) {
            return Ok(b.clone());
        }
        let b = Arc::new(load_bundle(bundles_dir.join(format!("{subject}.bundle")))?);
        cache.insert(subject.to_string(), b.clone());
        Ok(b)
    };
    let s = compose_batch(&m, root, &dest, &mut load, &options)?;
    out.say(&format!(
        "{} pairs: {} samples generated, {} pairs already complete",
        s.pairs, s.generated, s.skipped_pairs
    ));
    out.doc(&json!({"version": SUMMARY_VERSION, "gen": dest, "summary": s}))
}

fn external(path: &Option<PathBuf>, default: Embedder) -> CliResult<Embedder> {
    Ok(match path {
        Some(p) => Embedder::External(EmbeddingTable::load(p)?),
        None => default,
    })
}

fn run_evaluate(a: EvaluateArgs, out: &mut Out) -> CliResult<()> {
    let gen = or_data(&a.gen, "gen");
    let manifest_path = or_data(&a.manifest, "world/manifest.json");
    let m = load_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let real = match (&a.real_emb, &a.real_images) {
        (Some(p), _) => RealSet::Embeddings(p.clone()),
        (None, Some(p)) => RealSet::Images(p.clone()),
        (None, None) => RealSet::Images(root.join("corpus")),
    };
    let defaults = EvalConfig::default();
    let cfg = EvalConfig {
        clip: external(&a.clip_emb, defaults.clip)?,
        dino: external(&a.dino_emb, defaults.dino)?,
        fid: external(&a.fid_emb, defaults.fid)?,
    };
    let report = evaluate_run(&gen, &m, root, &real, &cfg)?;
    if let Some(p) = &a.out {
        let bytes = serde_json::to_vec_pretty(&report).map_err(internal)?;
        inpaint_compose::imaging::write_atomic(p, &bytes)?;
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    out.say(&format!(
        "overall  clip_fg {}  dino_fg {}  fid {}  ({} pairs, {} samples)",
        fmt(report.overall.clip_fg),
        fmt(report.overall.dino_fg),
        fmt(report.overall.fid),
        report.overall.n_pairs,
        report.overall.n_samples
    ));
    for (cat, s) in &report.per_category {
        out.say(&format!(
            "{cat:<8} clip_fg {}  dino_fg {}  fid {}",
            fmt(s.clip_fg),
            fmt(s.dino_fg),
            fmt(s.fid)
        ));
    }
    if report.partial {
        out.say(&format!("partial: {} pairs missing", report.missing.len()));
    }
    out.doc(&report)
}

fn run_serve(a: ServeArgs, out: &mut Out) -> CliResult<()> {
    let addr: SocketAddr = a.addr.parse().map_err(|e| user(format!("--addr {}: {e}", a.addr)))?;
    let store = Store::open(or_data(&a.store, "studio"))?;
    let backend = Arc::new(CoreBackend {
        sampler: SamplerConfig {
            kind: a.sampler,
            steps: a.steps,
        },
    });
    let studio = Arc::new(Studio::new(store, backend, a.source_root.clone().unwrap_or_else(|| ".".into())));
    out.say(&format!("listening on http://{addr}"));
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    rt.block_on(inpaint_compose_studio::api::serve(studio, addr))
        .map_err(|e| internal(format!("server: {e}")))
}

fn dispatch(cli: &Cli, out: &mut Out) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => {
            let (a, seed) = resolve(a, cli)?;
            gen_data(a, seed, out)
        }
        Command::Pretrain(a) => {
            let (a, seed) = resolve(a, cli)?;
            run_pretrain(a, seed, out)
        }
        Command::Finetune(a) => {
            let (a, seed) = resolve(a, cli)?;
            run_finetune(a, seed, out)
        }
        Command::Compose(a) => {
            let (a, seed) = resolve(a, cli)?;
            run_compose(a, seed, out)
        }
        Command::Evaluate(a) => {
            let (a, _) = resolve(a, cli)?;
            run_evaluate(a, out)
        }
        Command::Serve(a) => {
            let (a, _) = resolve(a, cli)?;
            run_serve(a, out)
        }
    }
}

/// Runs one invocation, writing to the given streams, and returns the exit code.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let mut out = Out {
        json: cli.json,
        stdout,
        stderr,
    };
    match dispatch(&cli, &mut out) {
        Ok(()) => 0,
        Err(CliError::User(m)) => {
            let _ = writeln!(out.stderr, "error: {m}");
            1
        }
        Err(CliError::Internal(m)) => {
            let _ = writeln!(out.stderr, "internal error: {m}");
            2
        }
    }
}

/// Runs with the process's stdout and stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("inpaint-compose").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn config_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"steps": 7, "seed": 9, "bbox": [1, 2, 3, 4]}"#).unwrap();
        let cli = parse(&["--seed", "3", "--config", cfg.to_str().unwrap(), "compose", "--steps", "20", "--n", "2"]);
        let Command::Compose(a) = &cli.command else { panic!() };
        let (a, seed) = resolve(a, &cli).unwrap();
        assert_eq!((a.steps, a.n, seed, a.bbox), (7, 2, 9, Some(BBox::new(1, 2, 3, 4))));
    }

    #[test]
    fn unknown_config_keys_are_user_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"stepz": 7}"#).unwrap();
        let cli = parse(&["--config", cfg.to_str().unwrap(), "pretrain"]);
        let Command::Pretrain(a) = &cli.command else { panic!() };
        assert!(matches!(resolve(a, &cli), Err(CliError::User(_))));
    }

    #[test]
    fn bbox_flag_parses_x_y_w_h() {
        let cli = parse(&["compose", "--bbox", "48,48,32,32"]);
        let Command::Compose(a) = &cli.command else { panic!() };
        assert_eq!(a.bbox, Some(BBox::new(48, 48, 32, 32)));
        assert!(Cli::try_parse_from(["x", "compose", "--bbox", "1,2,3"]).is_err());
    }
}
