//! `flakysieve`: ingest, augment, embed, train, eval and report.
//!
//! Exit codes: 0 success, 2 input validation, 3 pipeline/runtime,
//! 4 configuration.

mod manifest;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flakysieve::augment::{augment_dataset, load_augmented, AugmentError};
use flakysieve::dataset::{
    filter_min_category_support, load_dataset, Dataset, SplitError, SplitSpec, Taxonomy,
};
use flakysieve::embed::{embed_dataset, load_store, ChunkSpec, EmbeddingStore, RemoteProvider};
use flakysieve::evaluate::{
    evaluate_model, prepare_partitions, run_experiment, AugmentTarget, Augmentation,
    EmbeddingSource, ExperimentConfig, ExperimentError, ExperimentReport,
};
use flakysieve::siamese::{fit, Checkpoint, TrainConfig, TrainError};

use manifest::{write_atomic, RunManifest};

#[derive(Parser)]
#[command(
    name = "flakysieve",
    version,
    about = "Few-shot flaky test detection and classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a labeled CSV and write it back normalized.
    Ingest(IngestArgs),
    /// Grow a dataset with mutated variants.
    Augment(AugmentArgs),
    /// Encode test sources through an HTTP embedding service.
    Embed(EmbedArgs),
    /// Train the encoder head on the training partition.
    Train(TrainArgs),
    /// Run the pipeline (or a saved checkpoint) and write JSON + Markdown reports.
    Eval(EvalArgs),
    /// Render a JSON report as Markdown.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    taxonomy: Taxonomy,
    /// Drop categories with fewer examples than this.
    #[arg(long)]
    min_support: Option<usize>,
    /// Apply --min-support per project.
    #[arg(long)]
    per_project: bool,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    taxonomy: Taxonomy,
    /// Size of the output (originals plus variants).
    #[arg(long)]
    target_total: usize,
    #[arg(long, env = "FLAKYSIEVE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct EmbedArgs {
    /// Dataset or augmented CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    taxonomy: Taxonomy,
    #[arg(long)]
    endpoint: String,
    #[command(flatten)]
    chunk: ChunkArgs,
}

#[derive(Args, Serialize, Clone, Copy)]
struct ChunkArgs {
    #[arg(long, default_value_t = 512)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    overlap: usize,
}

impl ChunkArgs {
    fn spec(self) -> ChunkSpec {
        ChunkSpec {
            max_tokens: self.max_tokens,
            overlap: self.overlap,
        }
    }
}

#[derive(Args, Serialize)]
struct SourceArgs {
    /// JSON-lines embedding file.
    #[arg(
        long,
        required_unless_present = "endpoint",
        conflicts_with = "endpoint"
    )]
    store: Option<PathBuf>,
    /// Embedding service URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[command(flatten)]
    chunk: ChunkArgs,
}

#[derive(Args, Serialize)]
struct HyperArgs {
    #[arg(long, default_value_t = 450)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    /// Triplets per SGD step.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 128)]
    embedding_size: usize,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    hidden_dims: Vec<usize>,
}

#[derive(Args, Serialize)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    taxonomy: Taxonomy,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, env = "FLAKYSIEVE_SEED", default_value_t = 0)]
    seed: u64,
    /// Augmented CSV; variants of training tests join the training partition.
    #[arg(long, conflicts_with = "target_total")]
    augment: Option<PathBuf>,
    /// Generate variants so the training partition reaches this size.
    #[arg(long)]
    target_total: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Checkpoint path; the training log goes next to it as `*.log.json`.
    #[arg(long)]
    out: PathBuf,
    /// Write null instead of wall-clock times.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Report path (JSON); the Markdown table goes next to it as `*.md`.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate a trained checkpoint instead of training.
    #[arg(long, conflicts_with = "per_project")]
    checkpoint: Option<PathBuf>,
    /// Run the pipeline separately in each project.
    #[arg(long)]
    per_project: bool,
    /// Write null instead of wall-clock times.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// JSON report written by `eval`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Results")]
    title: String,
}

/// An error with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn pipeline(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: e.into(),
    }
}

fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 4,
        error: e.into(),
    }
}

fn experiment_failure(e: ExperimentError) -> Failure {
    match e {
        ExperimentError::Split(SplitError::InvalidRatio(_))
        | ExperimentError::Train(TrainError::Config(_))
        | ExperimentError::Augment(AugmentError::TargetTooSmall { .. }) => config(e),
        ExperimentError::Split(SplitError::SingletonClass(_)) => validation(e),
        other => pipeline(other),
    }
}

type Outcome = Result<Vec<PathBuf>, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let manifest = RunManifest::start(std::env::args().collect());
    let (name, result, cfg, seed, inputs) = match &cli.command {
        Command::Ingest(a) => (
            "ingest",
            ingest(a),
            to_value(a),
            None,
            vec![a.input.clone()],
        ),
        Command::Augment(a) => (
            "augment",
            augment(a),
            to_value(a),
            Some(a.seed),
            vec![a.input.clone()],
        ),
        Command::Embed(a) => ("embed", embed(a), to_value(a), None, vec![a.input.clone()]),
        Command::Train(a) => (
            "train",
            train_cmd(a),
            to_value(a),
            Some(a.data.seed),
            data_inputs(&a.data, &a.source),
        ),
        Command::Eval(a) => {
            let mut inputs = data_inputs(&a.data, &a.source);
            inputs.extend(a.checkpoint.clone());
            ("eval", eval(a), to_value(a), Some(a.data.seed), inputs)
        }
        Command::Report(a) => (
            "report",
            report(a),
            to_value(a),
            None,
            vec![a.input.clone()],
        ),
    };
    match result {
        Ok(outputs) => {
            let Some(primary) = outputs.first() else {
                return ExitCode::SUCCESS;
            };
            let path = manifest::manifest_path(primary);
            let m = manifest.finish(name, cfg, seed, inputs, outputs.clone());
            if let Err(e) = m.write(&path) {
                eprintln!("error: cannot write manifest {}: {e:#}", path.display());
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn data_inputs(data: &DataArgs, source: &SourceArgs) -> Vec<PathBuf> {
    let mut v = vec![data.input.clone()];
    v.extend(data.augment.clone());
    v.extend(source.store.clone());
    v
}

fn load(path: &Path, taxonomy: Taxonomy) -> Result<Dataset, Failure> {
    load_dataset(path, taxonomy)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(validation)
}

fn csv_bytes<E: Into<anyhow::Error>>(
    write: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| pipeline(e.into()))?;
    Ok(buf)
}

fn save(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(pipeline)
}

fn ingest(a: &IngestArgs) -> Outcome {
    let mut d = load(&a.input, a.taxonomy)?;
    if let Some(min) = a.min_support {
        let before = d.len();
        d = filter_min_category_support(&d, min, a.per_project);
        eprintln!(
            "kept {} of {before} tests with category support >= {min}",
            d.len()
        );
        if d.is_empty() {
            return Err(validation(anyhow!("no category reaches support {min}")));
        }
    }
    for (label, n) in d.class_counts() {
        eprintln!("{label}\t{n}");
    }
    save(&a.out, &csv_bytes(|b| d.write_csv(b))?)?;
    Ok(vec![a.out.clone()])
}

fn augment(a: &AugmentArgs) -> Outcome {
    let d = load(&a.input, a.taxonomy)?;
    let aug = augment_dataset(&d, a.target_total, a.seed).map_err(|e| match e {
        AugmentError::TargetTooSmall { .. } => config(e),
        other => pipeline(other),
    })?;
    eprintln!(
        "{} originals + {} variants",
        aug.originals.len(),
        aug.variants.len()
    );
    save(&a.out, &csv_bytes(|b| aug.write_csv(b))?)?;
    Ok(vec![a.out.clone()])
}

fn embed(a: &EmbedArgs) -> Outcome {
    let d = load(&a.input, a.taxonomy)?;
    let spec = a.chunk.spec();
    spec.validate().map_err(config)?;
    let provider = RemoteProvider::new(&a.endpoint);
    let store = embed_dataset(&d, &provider, &spec)
        .context("embed stage")
        .map_err(pipeline)?;
    let mut buf = Vec::new();
    store.write_jsonl(&mut buf).map_err(pipeline)?;
    save(&a.out, &buf)?;
    Ok(vec![a.out.clone()])
}

fn augmentation(data: &DataArgs) -> Result<Augmentation, Failure> {
    if let Some(path) = &data.augment {
        let aug = load_augmented(path, data.taxonomy)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(validation)?;
        return Ok(Augmentation::Precomputed(aug));
    }
    Ok(match data.target_total {
        Some(n) => Augmentation::Generate {
            target: AugmentTarget::Total(n),
            seed: data.seed,
        },
        None => Augmentation::None,
    })
}

fn split_spec(data: &DataArgs, per_project: bool) -> Result<SplitSpec, Failure> {
    if !(data.train_ratio > 0.0 && data.train_ratio <= 1.0) {
        return Err(config(SplitError::InvalidRatio(data.train_ratio)));
    }
    Ok(SplitSpec {
        train_ratio: data.train_ratio,
        seed: data.seed,
        group_by_project: per_project,
    })
}

fn train_config(h: &HyperArgs, seed: u64) -> Result<TrainConfig, Failure> {
    let cfg = TrainConfig {
        epochs: h.epochs,
        learning_rate: h.lr,
        batch_size: h.batch,
        margin: h.margin,
        seed,
        hidden_dims: h.hidden_dims.clone(),
        embedding_size: h.embedding_size,
    };
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

fn open_store(path: &Path) -> Result<EmbeddingStore, Failure> {
    load_store(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(validation)
}

/// Vectors for every test in `sets`, from the store file or the service.
fn vectors_for(
    source: &SourceArgs,
    taxonomy: Taxonomy,
    sets: &[&Dataset],
) -> Result<EmbeddingStore, Failure> {
    if let Some(path) = &source.store {
        return open_store(path);
    }
    let endpoint = source
        .endpoint
        .as_deref()
        .expect("clap requires store or endpoint");
    let spec = source.chunk.spec();
    spec.validate().map_err(config)?;
    let tests = sets
        .iter()
        .flat_map(|d| d.tests().iter().cloned())
        .collect();
    let all = Dataset::new(taxonomy, tests).map_err(validation)?;
    embed_dataset(&all, &RemoteProvider::new(endpoint), &spec)
        .context("embed stage")
        .map_err(pipeline)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let cfg = train_config(&a.hyper, a.data.seed)?;
    let split = split_spec(&a.data, false)?;
    let d = load(&a.data.input, a.data.taxonomy)?;
    let aug = augmentation(&a.data)?;
    let (train_set, _) = prepare_partitions(&d, &split, &aug).map_err(experiment_failure)?;
    let store = vectors_for(&a.source, a.data.taxonomy, &[&train_set])?;
    let (model, log) = fit(&store, &train_set.labeled_ids(), &cfg)
        .map_err(|e| experiment_failure(ExperimentError::Train(e)))?;
    eprintln!(
        "trained on {} tests; final epoch loss {:.6}",
        train_set.len(),
        log.epoch_loss.last().copied().unwrap_or(0.0)
    );

    let checkpoint = Checkpoint {
        model,
        train_config: Some(cfg),
    };
    let mut text = checkpoint.to_json().map_err(pipeline)?;
    text.push('\n');
    save(&a.out, text.as_bytes())?;

    let mut log_json = serde_json::to_value(&log).map_err(pipeline)?;
    if a.no_timing {
        log_json["wall_clock_seconds"] = serde_json::Value::Null;
    }
    let log_path = with_extension(&a.out, "log.json");
    save(&log_path, &pretty(&log_json)?)?;
    Ok(vec![a.out.clone(), log_path])
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(pipeline)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn eval(a: &EvalArgs) -> Outcome {
    let cfg = train_config(&a.hyper, a.data.seed)?;
    let split = split_spec(&a.data, a.per_project)?;
    let d = load(&a.data.input, a.data.taxonomy)?;
    let augmentation = augmentation(&a.data)?;

    let report = if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(validation)?;
        let (train_set, test) =
            prepare_partitions(&d, &split, &augmentation).map_err(experiment_failure)?;
        let store = vectors_for(&a.source, a.data.taxonomy, &[&train_set, &test])?;
        let mut overall =
            evaluate_model(&ck.model, &store, &train_set, &test).map_err(experiment_failure)?;
        overall.seed = Some(a.data.seed);
        ExperimentReport {
            overall,
            projects: Vec::new(),
            project_weighted_f1: None,
            skipped: Vec::new(),
            train_size: train_set.len(),
            test_ids: test.tests().iter().map(|t| t.id.clone()).collect(),
        }
    } else {
        let exp = ExperimentConfig {
            split,
            augmentation,
            train: cfg,
            record_timing: !a.no_timing,
        };
        let result = if let Some(path) = &a.source.store {
            let store = open_store(path)?;
            run_experiment(&d, &EmbeddingSource::Store(&store), &exp)
        } else {
            let spec = a.source.chunk.spec();
            spec.validate().map_err(config)?;
            let provider = RemoteProvider::new(
                a.source
                    .endpoint
                    .as_deref()
                    .expect("clap requires a source"),
            );
            run_experiment(
                &d,
                &EmbeddingSource::Provider {
                    provider: &provider,
                    chunk: spec,
                },
                &exp,
            )
        };
        result.map_err(experiment_failure)?
    };

    eprintln!("{}", report.overall);
    save(&a.out, &pretty(&report)?)?;
    let md_path = with_extension(&a.out, "md");
    let title = a
        .data
        .input
        .file_stem()
        .map_or("Results".into(), |s| s.to_string_lossy().into_owned());
    save(&md_path, report.to_markdown(&title).as_bytes())?;
    Ok(vec![a.out.clone(), md_path])
}

fn report(a: &ReportArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))
        .map_err(validation)?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.input.display()))
        .map_err(validation)?;
    let md = report.to_markdown(&a.title);
    save(&a.out, md.as_bytes())?;
    let _ = std::io::stdout().write_all(md.as_bytes());
    Ok(vec![a.out.clone()])
}
