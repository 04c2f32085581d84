use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use log::info;
use serde::Deserialize;
use serde_json::json;

use mergemix::analytics::{
    correlate_tasks, emit_report, read_pairs_csv, write_plot_csv, Report, ReportFormat, SimilarityReport,
    SimilarityRow,
};
use mergemix::baselines::{best_of, SimilarityIndex, SimilarityMetric};
use mergemix::bench::{
    hidden_embeddings, run_benchmark_with_artifacts, BenchArtifacts, BenchConfig, BenchReport, EmbeddingSource,
    TrainConfig,
};
use mergemix::evaluator::{read_eval_dataset, write_eval_dataset, BuiltinEvaluator, ExternalEvaluator};
use mergemix::tensor_store::{read_embeddings, write_checkpoint, write_embeddings};
use mergemix::{merge_uniform, merge_weighted, Checkpoint, EmbeddingSet, Error, MixtureVector, ModelBank};
use mergemix::{run_search, Evaluator, Objective, SearchConfig};

use crate::bank::{entry_file_name, list_bank, load_bank};
use crate::manifest::{sidecar_path, ManifestBuilder};

fn format_for(path: &Path) -> ReportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => ReportFormat::Json,
        _ => ReportFormat::Csv,
    }
}

fn write_report<R: Report>(report: &R, path: &Path, manifest: &mut ManifestBuilder) -> anyhow::Result<()> {
    emit_report(report, format_for(path), path).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path);
    Ok(())
}

#[derive(Args)]
pub struct MergeArgs {
    /// Checkpoints to average.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated non-negative weights, one per model.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Manifest path (default: `<out>.manifest.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn merge(args: MergeArgs) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new("merge", json!({ "models": args.models, "weights": args.weights }));
    let mut raw = Vec::with_capacity(args.models.len());
    for path in &args.models {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let ckpt = Checkpoint::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        manifest.input(path)?;
        raw.push((bytes, ckpt));
    }
    let bank = ModelBank::unnamed(raw.iter().map(|(_, c)| c.clone()).collect())?;
    let merged = match &args.weights {
        Some(w) => merge_weighted(&bank, w)?,
        None => merge_uniform(&bank, &MixtureVector::all(bank.len())?)?,
    };

    if raw.len() == 1 {
        fs::write(&args.out, &raw[0].0).with_context(|| format!("writing {}", args.out.display()))?;
    } else {
        let mut merged = merged.clone();
        let first = &raw[0].1.metadata;
        if raw.iter().all(|(_, c)| &c.metadata == first) {
            merged.metadata = first.clone();
        }
        write_checkpoint(&merged, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    }
    manifest.output(&args.out);
    manifest.finish(&args.manifest.unwrap_or_else(|| sidecar_path(&args.out)))?;

    println!(
        "{}",
        json!({
            "models": raw.len(),
            "tensors": merged.tensors.len(),
            "parameters": merged.num_parameters(),
            "out": args.out,
        })
    );
    Ok(())
}

#[derive(Args)]
pub struct SearchArgs {
    /// Directory of `<index>_<name>.mtm` checkpoints; index order is bit order.
    #[arg(long)]
    bank: PathBuf,
    /// Target data: an evaluation-dataset file for `builtin`, passed verbatim
    /// as `{data}` to an external command.
    #[arg(long)]
    target: String,
    /// `builtin` or a command template with `{checkpoint}` and `{data}`.
    #[arg(long, default_value = "builtin")]
    evaluator: String,
    /// `accuracy` (maximize) or `loss` (minimize).
    #[arg(long, default_value = "accuracy")]
    objective: Objective,
    /// CSV report; a JSON twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// JSON report path (default: `--out` with a `.json` extension).
    #[arg(long)]
    json: Option<PathBuf>,
    /// Record wall-clock time per mixture (makes reports non-reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn search(args: SearchArgs) -> anyhow::Result<()> {
    let entries = list_bank(&args.bank)?;
    let mut manifest = ManifestBuilder::new(
        "search",
        json!({
            "bank": args.bank,
            "target": args.target,
            "evaluator": args.evaluator,
            "objective": args.objective,
            "timing": args.timing,
        }),
    );
    for e in &entries {
        manifest.input(&e.path)?;
    }
    let bank = load_bank(&entries)?;
    info!("bank of {} models: {}", bank.len(), bank.names().join(", "));

    let config = SearchConfig {
        objective: args.objective,
        record_timing: args.timing,
        ..Default::default()
    };
    let target_path = Path::new(&args.target);
    let report = if args.evaluator == "builtin" {
        let data = read_eval_dataset(target_path).with_context(|| format!("loading target {}", args.target))?;
        manifest.input(target_path)?;
        run_search(&bank, &BuiltinEvaluator { data: &data }, &config)?
    } else {
        if target_path.is_file() {
            manifest.input(target_path)?;
        }
        let evaluator = ExternalEvaluator {
            command_template: args.evaluator.clone(),
            data_ref: args.target.clone(),
        };
        run_search(&bank, &evaluator as &dyn Evaluator, &config)?
    };

    let json_path = args.json.unwrap_or_else(|| args.out.with_extension("json"));
    if json_path == args.out {
        bail!(Error::InvalidConfig("--json must differ from --out".into()));
    }
    emit_report(&report, ReportFormat::Csv, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    emit_report(&report, ReportFormat::Json, &json_path).with_context(|| format!("writing {}", json_path.display()))?;
    manifest.output(&args.out);
    manifest.output(&json_path);
    manifest.finish(&args.manifest.unwrap_or_else(|| sidecar_path(&args.out)))?;

    println!("{}\t{}", report.best_alpha, bank.selected_names(&report.best_alpha).join(","));
    Ok(())
}

#[derive(Args)]
pub struct SimilarityArgs {
    /// Target embeddings (tensor `embeddings`).
    #[arg(long)]
    target: PathBuf,
    /// Per-dataset embeddings, in bit order.
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    /// One of the six metric names, or `all`.
    #[arg(long, default_value = "avg_max_cos")]
    metric: String,
    /// Report of every mixture's score; `.json` selects JSON, otherwise CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn similarity(args: SimilarityArgs) -> anyhow::Result<()> {
    let metrics: Vec<SimilarityMetric> = if args.metric == "all" {
        SimilarityMetric::ALL.to_vec()
    } else {
        vec![args.metric.parse()?]
    };
    let mut manifest = ManifestBuilder::new(
        "similarity",
        json!({ "target": args.target, "datasets": args.datasets, "metric": args.metric }),
    );
    let target = read_embeddings(&args.target).with_context(|| format!("loading {}", args.target.display()))?;
    manifest.input(&args.target)?;
    let datasets = args
        .datasets
        .iter()
        .map(|p| {
            manifest.input(p)?;
            read_embeddings(p).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<EmbeddingSet>>>()?;

    let with_cosine = metrics.iter().any(|m| m.is_cosine());
    let index = SimilarityIndex::new(&target, &datasets, with_cosine)?;
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for &metric in &metrics {
        let table = index.score_all(metric)?;
        best.push((metric, best_of(&table, metric)?));
        rows.extend(table.into_iter().map(|(mixture, score)| SimilarityRow { mixture, metric, score }));
    }
    let report = SimilarityReport {
        target_name: target.source_name.clone(),
        rows,
    };
    write_report(&report, &args.out, &mut manifest)?;
    manifest.finish(&args.manifest.unwrap_or_else(|| sidecar_path(&args.out)))?;

    for (metric, (alpha, score)) in best {
        if metrics.len() == 1 {
            println!("{alpha}\t{score:?}");
        } else {
            println!("{metric}\t{alpha}\t{score:?}");
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct CorrelateArgs {
    /// CSV with columns `task,x,y,n_selected`.
    #[arg(long)]
    input: PathBuf,
    /// Report path; `.json` selects JSON, otherwise CSV.
    #[arg(long)]
    out: PathBuf,
    /// Keep single-dataset pairs (they sit on x = y and inflate r).
    #[arg(long)]
    keep_singletons: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn correlate(args: CorrelateArgs) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new(
        "correlate",
        json!({ "input": args.input, "exclude_singletons": !args.keep_singletons }),
    );
    let inputs = read_pairs_csv(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    manifest.input(&args.input)?;
    let report = correlate_tasks(&inputs, !args.keep_singletons)?;
    for (task, r) in &report.per_task {
        info!("{task}: r = {r}");
    }
    write_report(&report, &args.out, &mut manifest)?;
    manifest.finish(&args.manifest.unwrap_or_else(|| sidecar_path(&args.out)))?;
    println!("{:?}", report.average_r);
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Hidden,
    Raw,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Seed for both the universe and training.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with optional `bench` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cluster_noise: Option<f64>,
    #[arg(long, value_enum)]
    embeddings: Option<EmbeddingArg>,
    #[arg(long, default_value = "bench_out")]
    out_dir: PathBuf,
    /// Also write checkpoints, datasets and embeddings under `artifacts/`.
    #[arg(long)]
    save_artifacts: bool,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    bench: BenchConfig,
    train: TrainConfig,
}

pub fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BenchFile::default(),
    };
    let (mut bench_cfg, mut train_cfg) = (file.bench, file.train);
    if let Some(seed) = args.seed {
        bench_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    if let Some(sigma) = args.cluster_noise {
        bench_cfg.cluster_noise = sigma;
    }
    if let Some(e) = args.embeddings {
        bench_cfg.embedding_source = match e {
            EmbeddingArg::Hidden => EmbeddingSource::Hidden,
            EmbeddingArg::Raw => EmbeddingSource::Raw,
        };
    }

    let mut manifest = ManifestBuilder::new("bench", json!({ "bench": bench_cfg, "train": train_cfg }));
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let (report, artifacts) = run_benchmark_with_artifacts(&bench_cfg, &train_cfg)?;

    let json_path = args.out_dir.join("bench_report.json");
    let csv_path = args.out_dir.join("bench_report.csv");
    let plot_path = args.out_dir.join("plot.csv");
    write_report(&report, &json_path, &mut manifest)?;
    write_report(&report, &csv_path, &mut manifest)?;
    let points = report.plot_points()?;
    write_plot_csv(points.iter().map(|(t, p)| (t.as_str(), p.as_slice())), &plot_path)?;
    manifest.output(&plot_path);
    if args.save_artifacts {
        save_artifacts(&args.out_dir.join("artifacts"), &bench_cfg, &artifacts, &mut manifest)?;
    }
    manifest.finish(&args.out_dir.join("manifest.json"))?;

    println!("{}", summary(&report));
    Ok(())
}

fn summary(report: &BenchReport) -> serde_json::Value {
    let best = report.best_similarity_correlation();
    json!({
        "average_r": report.correlation_raw.as_ref().map(|c| c.average_r),
        "average_r_logit": report.correlation_logit.as_ref().map(|c| c.average_r),
        "best_similarity_metric": best.map(|(m, _)| m.to_string()),
        "best_similarity_r": best.map(|(_, r)| r),
        "mean_test_accuracy": report.mean_test_accuracy,
    })
}

/// Layout under `dir`:
/// `base.mtm`, `bank/<i>_<name>.mtm`, `finetuned/<bits>.mtm`,
/// `data/<dataset>_<split>.mtm`, `targets/<target>_<split>.mtm`,
/// `embeddings/<name>.mtm`.
fn save_artifacts(
    dir: &Path,
    cfg: &BenchConfig,
    artifacts: &BenchArtifacts,
    manifest: &mut ManifestBuilder,
) -> anyhow::Result<()> {
    for sub in ["bank", "finetuned", "data", "targets", "embeddings"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut ckpt = |c: &Checkpoint, p: PathBuf| -> anyhow::Result<()> {
        write_checkpoint(c, &p).with_context(|| format!("writing {}", p.display()))?;
        manifest.output(&p);
        Ok(())
    };
    ckpt(&artifacts.base, dir.join("base.mtm"))?;
    for (i, (model, name)) in artifacts.bank.models().iter().zip(artifacts.bank.names()).enumerate() {
        ckpt(model, dir.join("bank").join(entry_file_name(i + 1, name)))?;
    }
    for (alpha, model) in &artifacts.finetuned {
        ckpt(model, dir.join("finetuned").join(format!("{alpha}.mtm")))?;
    }

    let universe = &artifacts.universe;
    let mut data_files = Vec::new();
    for d in &universe.datasets {
        for split in [&d.train, &d.val, &d.test] {
            data_files.push((split, dir.join("data").join(format!("{}_{}.mtm", d.name, split.split))));
        }
    }
    for t in &universe.targets {
        for split in [&t.val, &t.test] {
            data_files.push((split, dir.join("targets").join(format!("{}_{}.mtm", t.name, split.split))));
        }
    }
    for (data, path) in data_files {
        write_eval_dataset(data, &path).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(&path);
    }

    let sets = universe
        .datasets
        .iter()
        .map(|d| (&d.name, &d.val))
        .chain(universe.targets.iter().map(|t| (&t.name, &t.val)));
    for (i, (name, val)) in sets.enumerate() {
        let set = match cfg.embedding_source {
            EmbeddingSource::Hidden => hidden_embeddings(&artifacts.base, val, name)?,
            EmbeddingSource::Raw => {
                let n = universe.datasets.len();
                if i < n {
                    universe.dataset_embeddings[i].clone()
                } else {
                    universe.target_embeddings[i - n].clone()
                }
            }
        };
        let path = dir.join("embeddings").join(format!("{name}.mtm"));
        write_embeddings(&set, &path).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(&path);
    }
    Ok(())
}
