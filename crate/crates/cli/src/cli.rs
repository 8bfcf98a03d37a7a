//! Subcommands. Usage and config problems exit 2; everything else that fails exits 1.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use layoutdiff_core::diffusion::{file_hash, DiffusionModel, SamplerKind};
use layoutdiff_core::eval::{
    evaluate, load_manifest_items, per_example_rows, read_manifest, write_csv, write_manifest, CropClassifier, EvalItem, EvalManifestEntry,
};
use layoutdiff_core::experiment::{run as run_experiment, train_variant, ExperimentConfig};
use layoutdiff_core::query::{parse, Query};
use layoutdiff_core::scenegen::{scene_lexicon_vocab, Dataset, DatasetManifest, QueryMode, SplitSizes};
use layoutdiff_core::service::{region_overlay, run_root, ArtifactRef, RunDir, RunState};

use crate::config::{ConfigError, FileConfig};
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "layoutdiff", version, about = "Region-controlled text-to-image diffusion at desk scale")]
pub struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for content-addressed run directories [env: LAYOUTDIFF_RUN_ROOT, default: runs].
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    /// Seeds every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic scene datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one model on a dataset under a query mode.
    Train(TrainArgs),
    /// Generate one image from a checkpoint.
    Sample(SampleArgs),
    /// Score images listed in an evaluation manifest.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Run the three-variant ordering experiment, guidance sweep and localization.
    Compare(CompareArgs),
    /// Print the effective config as TOML.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Generate, render and write a dataset.
    Gen(DatasetGenArgs),
}

#[derive(Debug, Args)]
pub struct DatasetGenArgs {
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    CaptionOnly,
    PositionWords,
    PositionTokens,
    OdLabels,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::CaptionOnly => QueryMode::CaptionOnly,
            ModeArg::PositionWords => QueryMode::PositionWords,
            ModeArg::PositionTokens => QueryMode::PositionTokens,
            ModeArg::OdLabels => QueryMode::OdLabels,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `dataset gen`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "position-tokens")]
    pub mode: ModeArg,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerArg {
    Plms,
    Ddim,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Canonical query text, e.g. "a red square ; <100,200,500,599> red square".
    #[arg(long, conflicts_with = "query_file", required_unless_present = "query_file")]
    pub query: Option<String>,
    /// JSON query file: {"caption": ..., "regions": [{"box": [x1,y1,x2,y2], "text": ...}]}.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long, default_value = "sample.png")]
    pub out: PathBuf,
    /// Also write one attention overlay PNG per region here.
    #[arg(long)]
    pub attention_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON-lines manifest of images, queries and optional ground-truth scenes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature network for toy-FID; without it only region metrics are computed.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Train a feature network from the config's eval section instead of loading one.
    #[arg(long, conflicts_with = "classifier")]
    pub train_classifier: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    /// Serve the studio UI (or any static files) from this directory.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Seconds-scale configuration that exercises every stage.
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Failed(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn load_config(cli: &Cli) -> Result<FileConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    Ok(cfg)
}

fn root(cli: &Cli) -> PathBuf {
    cli.run_root.clone().unwrap_or_else(run_root)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let root = root(&cli);
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Dataset(DatasetCommand::Gen(a)) => {
            cfg.splits = SplitSizes { train: a.train.unwrap_or(cfg.splits.train), test: a.test.unwrap_or(cfg.splits.test) };
            cfg.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            dataset_gen(&cfg, &root)
        }
        Command::Train(a) => {
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.micro_batch {
                cfg.train.micro_batch = v;
            }
            if let Some(v) = a.lr {
                cfg.train.learning_rate = v;
            }
            cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            train(&cfg, &root, &a.dataset, a.mode.into())
        }
        Command::Sample(a) => {
            if let Some(v) = a.steps {
                cfg.sampler.steps = v;
            }
            if let Some(v) = a.scale {
                cfg.sampler.guidance_scale = v;
            }
            match a.sampler {
                Some(SamplerArg::Plms) => cfg.sampler.kind = SamplerKind::Plms,
                Some(SamplerArg::Ddim) => cfg.sampler.kind = SamplerKind::Ddim,
                None => {}
            }
            sample(&cfg, a)
        }
        Command::Eval(a) => eval(&cfg, &root, a),
        Command::Serve(a) => {
            if let Some(v) = &a.bind {
                cfg.service.bind = v.clone();
            }
            if let Some(v) = a.workers {
                cfg.service.workers = v;
            }
            if let Some(v) = a.queue_capacity {
                cfg.service.queue_capacity = v;
            }
            if let Some(v) = &a.static_dir {
                cfg.service.static_dir = Some(v.clone());
            }
            if cfg.service.workers == 0 || cfg.service.queue_capacity == 0 {
                return Err(CliError::Usage("--workers and --queue-capacity must be positive".into()));
            }
            serve(&cfg, &root, &a.checkpoint)
        }
        Command::Compare(a) => {
            let mut exp = if a.smoke { ExperimentConfig::smoke() } else { cfg.experiment() };
            if let Some(s) = cli.seed {
                exp.seed = s;
                exp.train.seed = s;
                exp.sampler.seed = s;
            }
            if let Some(v) = a.steps {
                exp.train.steps = v;
            }
            if let Some(v) = a.train_scenes {
                exp.splits.train = v;
            }
            if let Some(v) = a.test_scenes {
                exp.splits.test = v;
            }
            exp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            compare(&exp, &root)
        }
    }
}

fn dataset_gen(cfg: &FileConfig, root: &Path) -> Result<(), CliError> {
    let manifest =
        DatasetManifest::new(cfg.seed, cfg.scene.clone(), cfg.splits, cfg.model.quantizer).context("building dataset manifest")?;
    let hash = manifest.hash();
    let dir = match RunDir::open(root, "dataset", &manifest).context("opening run directory")? {
        RunState::Complete(_, dir) => dir,
        RunState::Fresh(run) => {
            let dataset = Dataset::generate(manifest).context("generating scenes")?;
            dataset.write(&run.path).context("writing dataset")?;
            // Ground-truth renders of the test split, scorable by `eval`.
            let entries: Vec<EvalManifestEntry> = dataset
                .test
                .iter()
                .map(|r| EvalManifestEntry {
                    image: PathBuf::from(&r.image),
                    query: r.query(QueryMode::PositionTokens).clone(),
                    scene: Some(r.scene.clone()),
                    reference: None,
                })
                .collect();
            write_manifest(&run.path.join("test_eval.jsonl"), &entries).context("writing eval manifest")?;
            let dir = run.path.clone();
            run.finish(Some(hash.clone()), vec![], BTreeMap::new()).context("writing run manifest")?;
            dir
        }
    };
    println!("manifest_hash {hash}");
    println!("dataset {}", dir.display());
    Ok(())
}

fn train(cfg: &FileConfig, root: &Path, dataset_dir: &Path, mode: QueryMode) -> Result<(), CliError> {
    let dataset = Dataset::load(dataset_dir).with_context(|| format!("loading dataset {}", dataset_dir.display()))?;
    let dataset_hash = dataset.manifest.hash();
    let mut exp = cfg.experiment();
    exp.scene = dataset.manifest.scene.clone();
    if exp.scene.height != exp.model.image_size || exp.scene.width != exp.model.image_size {
        return Err(ConfigError::Invalid(format!(
            "dataset canvas is {}x{} but model.image_size is {}",
            exp.scene.height, exp.scene.width, exp.model.image_size
        ))
        .into());
    }
    if dataset.manifest.quantizer != exp.model.quantizer {
        return Err(ConfigError::Invalid("dataset and model quantizers differ".into()).into());
    }
    let key = serde_json::json!({
        "dataset": dataset_hash, "mode": mode, "model": exp.model, "train": exp.train, "seed": exp.seed,
    });
    let run = match RunDir::open(root, "train", &key).context("opening run directory")? {
        RunState::Complete(m, dir) => {
            let ckpt = m.checkpoints.first().map(|c| c.path.display().to_string()).unwrap_or_default();
            println!("checkpoint {ckpt}");
            println!("run {} (already complete)", dir.display());
            return Ok(());
        }
        RunState::Fresh(run) => run,
    };
    let every = (exp.train.steps / 50).max(1);
    let total = exp.train.steps;
    let model = train_variant(&dataset, mode, &exp, &mut |step, loss| {
        if step % every == 0 || step + 1 == total {
            log::info!("step {step}/{total} loss {loss:.5}");
        }
    })
    .context("training")?;
    let path = run.path.join("model.safetensors");
    let sha = model.save(&path, Some(&dataset_hash), total).context("saving checkpoint")?;
    let dir = run.path.clone();
    run.finish(Some(dataset_hash), vec![ArtifactRef { path: path.clone(), sha256: sha }], BTreeMap::new())
        .context("writing run manifest")?;
    println!("checkpoint {}", path.display());
    println!("run {}", dir.display());
    Ok(())
}

fn read_query(a: &SampleArgs, cfg: &FileConfig) -> Result<Query, CliError> {
    match (&a.query, &a.query_file) {
        (Some(text), _) => parse(text, &cfg.model.quantizer).map_err(|e| {
            let caret = format!("{}^", " ".repeat(text[..e.offset.min(text.len())].chars().count()));
            CliError::Usage(format!("invalid --query: {e}\n  {text}\n  {caret}"))
        }),
        (None, Some(path)) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("invalid query file {}: {e}", path.display())))
        }
        (None, None) => Err(CliError::Usage("one of --query or --query-file is required".into())),
    }
}

fn load_model(cfg: &FileConfig, path: &Path) -> Result<(DiffusionModel, String), CliError> {
    let quant = cfg.model.quantizer;
    let (model, _) = DiffusionModel::load_expecting(path, &scene_lexicon_vocab(&quant), &quant, DType::F32, &Device::Cpu)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let sha = file_hash(path).context("hashing checkpoint")?;
    Ok((model, sha))
}

fn sample(cfg: &FileConfig, a: &SampleArgs) -> Result<(), CliError> {
    let query = read_query(a, cfg)?;
    let (model, _) = load_model(cfg, &a.checkpoint)?;
    let mut sampler = cfg.sampler.clone();
    sampler.record_attention = a.attention_dir.is_some() && !query.regions.is_empty();
    sampler.validate(model.schedule().len()).map_err(|e| CliError::Usage(e.to_string()))?;
    let s = model.sample(&query, &sampler).context("sampling")?;
    s.image.save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("image {}", a.out.display());
    if let Some(dir) = &a.attention_dir {
        std::fs::create_dir_all(dir).context("creating attention directory")?;
        for r in 0..query.regions.len() {
            let p = dir.join(format!("attention_{r}.png"));
            region_overlay(&s, &query, r).context("attention overlay")?.save_png(&p).context("writing overlay")?;
            println!("attention {}", p.display());
        }
    }
    Ok(())
}

fn eval(cfg: &FileConfig, root: &Path, a: &EvalArgs) -> Result<(), CliError> {
    let (items, refs) = load_manifest_items(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let clf = match (&a.classifier, a.train_classifier) {
        (Some(p), _) => Some(CropClassifier::load(p, &Device::Cpu).with_context(|| format!("loading {}", p.display()))?),
        (None, true) => {
            let crops = layoutdiff_core::eval::training_crops(cfg.eval.classifier_scenes, &cfg.scene, cfg.seed)
                .context("rendering classifier crops")?;
            let c = CropClassifier::new(cfg.seed, &Device::Cpu).context("building classifier")?;
            c.train(&crops, &cfg.eval.classifier).context("training classifier")?;
            Some(c)
        }
        (None, false) => None,
    };
    let reference: Option<Vec<EvalItem>> = if refs.iter().all(Option::is_some) && !refs.is_empty() {
        Some(
            refs.into_iter()
                .zip(&items)
                .map(|(img, it)| EvalItem { image: img.expect("checked"), regions: it.regions.clone() })
                .collect(),
        )
    } else {
        None
    };
    let pair = match (&reference, &clf) {
        (Some(r), Some(c)) => Some((r.as_slice(), c)),
        _ => None,
    };
    let manifest_sha = file_hash(&a.manifest).context("hashing manifest")?;
    let key = serde_json::json!({ "manifest": manifest_sha, "analytic": cfg.eval.analytic, "fid": pair.is_some() });
    let mut report = evaluate(&items, pair, &cfg.eval.analytic).context("evaluating")?;
    report.hashes.insert("manifest".into(), manifest_sha);
    let dir = match RunDir::open(root, "eval", &key).context("opening run directory")? {
        RunState::Complete(_, dir) => dir,
        RunState::Fresh(run) => {
            report.write_json(&run.path.join("report.json")).context("writing report")?;
            let names: Vec<String> = read_manifest(&a.manifest)
                .context("reading manifest")?
                .iter()
                .map(|e| e.image.display().to_string())
                .collect();
            let rows = per_example_rows(&items, &names, &cfg.eval.analytic).context("per-example rows")?;
            write_csv(&run.path.join("examples.csv"), &rows).context("writing csv")?;
            let dir = run.path.clone();
            let mut reports = BTreeMap::new();
            reports.insert("eval".to_string(), serde_json::to_value(&report).context("serializing report")?);
            run.finish(None, vec![], reports).context("writing run manifest")?;
            dir
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    eprintln!("run {}", dir.display());
    Ok(())
}

fn serve(cfg: &FileConfig, root: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let addr: SocketAddr = cfg.service.bind.parse().map_err(|e| CliError::Usage(format!("bad bind address: {e}")))?;
    let (model, sha) = load_model(cfg, checkpoint)?;
    let job_dir = root.join(format!("serve-{}", &sha[..16])).join("jobs");
    std::fs::create_dir_all(&job_dir).context("creating job directory")?;
    let state = server::start(model, sha, job_dir, cfg.service.workers, cfg.service.queue_capacity);
    let app = server::router(state, cfg.service.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(server::serve(app, addr)).context("serving")?;
    Ok(())
}

fn compare(exp: &ExperimentConfig, root: &Path) -> Result<(), CliError> {
    let report = match RunDir::open(root, "compare", exp).context("opening run directory")? {
        RunState::Complete(m, dir) => {
            eprintln!("run {} (already complete)", dir.display());
            let r = m.reports.get("experiment").cloned().context("run manifest lacks the experiment report")?;
            serde_json::from_value(r).context("reading experiment report")?
        }
        RunState::Fresh(run) => {
            let report = run_experiment(exp, &run.path, &mut |l| log::info!("{l}")).context("running experiment")?;
            let checkpoints = report
                .checkpoints
                .iter()
                .map(|(mode, sha)| ArtifactRef { path: run.path.join(format!("{mode}.safetensors")), sha256: sha.clone() })
                .collect();
            let mut reports = BTreeMap::new();
            reports.insert("experiment".to_string(), serde_json::to_value(&report).context("serializing report")?);
            let dir = run.path.clone();
            run.finish(Some(report.dataset_hash.clone()), checkpoints, reports).context("writing run manifest")?;
            eprintln!("run {}", dir.display());
            report
        }
    };
    let report: layoutdiff_core::ExperimentReport = report;
    for v in &report.verdicts {
        println!("{}: {} ({})", v.criterion, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    Ok(())
}
