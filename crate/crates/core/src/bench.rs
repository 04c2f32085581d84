//! Desk-scale end-to-end benchmark.
//!
//! A universe of `C` Gaussian clusters (one class each) is split among `N`
//! candidate datasets by round-robin cluster assignment; every target task
//! draws its clusters from the union of two or three datasets, so the best
//! mixture is usually a strict subset. A small MLP is pretrained on all
//! clusters, fine-tuned on every non-empty mixture (the ground truth), and
//! the merged surrogates are compared against fine-tuned models and the
//! baseline selectors.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    correlate_tasks, plot_coordinates, CorrelationInput, CorrelationPoint, CorrelationReport, PlotPoint,
    PlotSurrogate, Report,
};
use crate::baselines::{best_of, random_selection_mean, MeanMode, SimilarityIndex, SimilarityMetric};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_builtin, BuiltinEvaluator, EvalDataset, Score, Split};
use crate::merge::{all_mixtures, subset_merges, MixtureVector, ModelBank};
use crate::mlp::Mlp;
use crate::rng;
use crate::search::{oracle_select, run_search, ScoreRecord, SearchConfig};
use crate::tensor_store::{Checkpoint, EmbeddingSet, Tensor};

/// Largest bank for which the benchmark trains every mixture.
pub const MAX_BENCH_N: usize = 12;
/// Pretraining samples drawn per cluster.
pub const PRETRAIN_PER_CLUSTER: usize = 100;

const STREAM_CENTERS: u64 = 1;
const STREAM_DATASET: u64 = 1_000;
const STREAM_TARGET: u64 = 2_000;
const STREAM_PRETRAIN_DATA: u64 = 3_000;
const STREAM_INIT: u64 = 4_000;
const STREAM_PRETRAIN: u64 = 5_000;
const STREAM_FINETUNE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Post-ReLU hidden activations of the pretrained base model.
    #[default]
    Hidden,
    /// Raw feature rows.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub input_dim: usize,
    pub num_clusters: usize,
    pub num_datasets: usize,
    pub clusters_per_dataset: usize,
    pub samples_per_dataset: usize,
    pub cluster_noise: f64,
    pub num_targets: usize,
    pub clusters_per_target: usize,
    /// Target samples, split evenly into val and test.
    pub samples_per_target: usize,
    pub embedding_source: EmbeddingSource,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            input_dim: 10,
            num_clusters: 8,
            num_datasets: 5,
            clusters_per_dataset: 3,
            samples_per_dataset: 2000,
            cluster_noise: 0.3,
            num_targets: 4,
            clusters_per_target: 4,
            samples_per_target: 1000,
            embedding_source: EmbeddingSource::Hidden,
            seed: 42,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.num_clusters < 2 || self.num_datasets == 0 || self.num_targets == 0 {
            return fail("input_dim, num_datasets and num_targets must be positive, num_clusters >= 2".into());
        }
        if self.num_datasets > 20 {
            return fail(format!("num_datasets {} exceeds 20", self.num_datasets));
        }
        if self.clusters_per_dataset == 0 || self.clusters_per_dataset > self.num_clusters {
            return fail(format!("clusters_per_dataset must be in 1..={}", self.num_clusters));
        }
        if self.clusters_per_target == 0 || self.clusters_per_target > self.num_clusters {
            return fail(format!("clusters_per_target must be in 1..={}", self.num_clusters));
        }
        let covered = (self.num_datasets * self.clusters_per_dataset).min(self.num_clusters);
        if self.clusters_per_target > covered {
            return fail(format!(
                "clusters_per_target {} exceeds the {covered} clusters the datasets cover",
                self.clusters_per_target
            ));
        }
        if self.samples_per_dataset < 10 || self.samples_per_target < 2 {
            return fail("samples_per_dataset must be >= 10 and samples_per_target >= 2".into());
        }
        if !self.cluster_noise.is_finite() || self.cluster_noise < 0.0 {
            return fail("cluster_noise must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 64,
            hidden_dim: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("batch_size and hidden_dim must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub name: String,
    pub clusters: Vec<usize>,
    pub train: EvalDataset,
    pub val: EvalDataset,
    pub test: EvalDataset,
}

#[derive(Debug, Clone)]
pub struct TargetSplits {
    pub name: String,
    pub clusters: Vec<usize>,
    /// Datasets whose clusters the target was drawn from.
    pub source_datasets: Vec<usize>,
    pub val: EvalDataset,
    pub test: EvalDataset,
}

#[derive(Debug, Clone)]
pub struct Universe {
    pub config: BenchConfig,
    pub centers: Vec<Vec<f32>>,
    pub datasets: Vec<DatasetSplits>,
    pub targets: Vec<TargetSplits>,
    /// Raw validation features per dataset.
    pub dataset_embeddings: Vec<EmbeddingSet>,
    /// Raw validation features per target.
    pub target_embeddings: Vec<EmbeddingSet>,
}

/// Draws one sample per entry of `clusters` around the matching centers.
fn sample_points<R: Rng>(
    centers: &[Vec<f32>],
    clusters: &[usize],
    sigma: f64,
    rng: &mut R,
) -> (Vec<Vec<f32>>, Vec<usize>) {
    let rows = clusters
        .iter()
        .map(|&c| {
            centers[c]
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m as f64 + sigma * z) as f32
                })
                .collect()
        })
        .collect();
    (rows, clusters.to_vec())
}

/// Balanced, shuffled cluster assignment for `n` samples.
fn assignments<R: Rng>(clusters: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n).map(|s| clusters[s % clusters.len()]).collect();
    out.shuffle(rng);
    out
}

fn make_split(rows: &[Vec<f32>], labels: &[usize], name: &str, split: Split) -> Result<EvalDataset> {
    EvalDataset::from_rows(rows.to_vec(), labels.to_vec(), name, split)
}

pub fn generate_universe(cfg: &BenchConfig) -> Result<Universe> {
    cfg.validate()?;
    let c = cfg.num_clusters;
    let mut rng_centers = rng::stream(cfg.seed, STREAM_CENTERS);
    let centers: Vec<Vec<f32>> = (0..c)
        .map(|_| {
            (0..cfg.input_dim)
                .map(|_| (2.0 * rng_centers.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect();

    let mut datasets = Vec::with_capacity(cfg.num_datasets);
    for i in 0..cfg.num_datasets {
        let mut rng = rng::stream(cfg.seed, STREAM_DATASET + i as u64);
        let clusters: Vec<usize> = (0..cfg.clusters_per_dataset)
            .map(|k| (i * cfg.clusters_per_dataset + k) % c)
            .collect();
        let n = cfg.samples_per_dataset;
        let assign = assignments(&clusters, n, &mut rng);
        let (rows, labels) = sample_points(&centers, &assign, cfg.cluster_noise, &mut rng);
        let (n_train, n_val) = (n * 8 / 10, n / 10);
        let name = format!("D{}", i + 1);
        datasets.push(DatasetSplits {
            train: make_split(&rows[..n_train], &labels[..n_train], &name, Split::Train)?,
            val: make_split(&rows[n_train..n_train + n_val], &labels[n_train..n_train + n_val], &name, Split::Val)?,
            test: make_split(&rows[n_train + n_val..], &labels[n_train + n_val..], &name, Split::Test)?,
            name,
            clusters,
        });
    }

    let mut targets = Vec::with_capacity(cfg.num_targets);
    for t in 0..cfg.num_targets {
        let mut rng = rng::stream(cfg.seed, STREAM_TARGET + t as u64);
        let k = rng.random_range(2..=3).min(cfg.num_datasets);
        let mut pool: Vec<usize> = index::sample(&mut rng, cfg.num_datasets, cfg.num_datasets).into_vec();
        let mut source: Vec<usize> = pool.drain(..k).collect();
        let union = |src: &[usize]| -> Vec<usize> {
            let mut u: Vec<usize> = src.iter().flat_map(|&d| datasets[d].clusters.iter().copied()).collect();
            u.sort_unstable();
            u.dedup();
            u
        };
        let mut candidates = union(&source);
        while candidates.len() < cfg.clusters_per_target {
            source.push(pool.remove(0));
            candidates = union(&source);
        }
        source.sort_unstable();
        let mut clusters: Vec<usize> = index::sample(&mut rng, candidates.len(), cfg.clusters_per_target)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        clusters.sort_unstable();

        let n = cfg.samples_per_target;
        let assign = assignments(&clusters, n, &mut rng);
        let (rows, labels) = sample_points(&centers, &assign, cfg.cluster_noise, &mut rng);
        let n_val = n / 2;
        let name = format!("T{}", t + 1);
        targets.push(TargetSplits {
            val: make_split(&rows[..n_val], &labels[..n_val], &name, Split::Val)?,
            test: make_split(&rows[n_val..], &labels[n_val..], &name, Split::Test)?,
            name,
            clusters,
            source_datasets: source,
        });
    }

    let raw = |d: &EvalDataset, name: &str| EmbeddingSet::new(d.features().clone(), name);
    let dataset_embeddings = datasets.iter().map(|d| raw(&d.val, &d.name)).collect::<Result<_>>()?;
    let target_embeddings = targets.iter().map(|t| raw(&t.val, &t.name)).collect::<Result<_>>()?;
    Ok(Universe {
        config: cfg.clone(),
        centers,
        datasets,
        targets,
        dataset_embeddings,
        target_embeddings,
    })
}

/// Fine-tunes with minibatch SGD using the stream seeded by `cfg.seed`.
pub fn train(init: &Checkpoint, data: &EvalDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_run(init, data, cfg, 0)
}

/// Minibatch SGD on softmax cross-entropy for exactly `cfg.epochs` epochs.
///
/// Each epoch reshuffles with a generator derived from `(cfg.seed,
/// run_id)`, so independent runs can execute in any order.
pub fn train_run(init: &Checkpoint, data: &EvalDataset, cfg: &TrainConfig, run_id: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut mlp = Mlp::from_checkpoint(init)?;
    if data.is_empty() {
        return Err(Error::InvalidDataset("empty training data".into()));
    }
    if data.input_dim() != mlp.input_dim {
        return Err(Error::ModelSchema(format!(
            "model input dim {} but training data has {}",
            mlp.input_dim,
            data.input_dim()
        )));
    }
    if data.labels().iter().any(|&l| l >= mlp.num_classes) {
        return Err(Error::ModelSchema("training label outside the model's classes".into()));
    }
    if cfg.epochs == 0 {
        return Ok(init.clone());
    }
    let mut rng = rng::stream(cfg.seed, run_id);
    let mut grads = mlp.gradients();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            mlp.loss_and_grad(batch.iter().map(|&i| data.sample(i)), &mut grads);
            mlp.sgd_step(&grads, cfg.learning_rate);
        }
    }
    Ok(mlp.to_checkpoint())
}

/// Balanced sample over every cluster used to pretrain the base model.
pub fn pretrain_data(universe: &Universe) -> Result<EvalDataset> {
    let cfg = &universe.config;
    let mut rng = rng::stream(cfg.seed, STREAM_PRETRAIN_DATA);
    let all: Vec<usize> = (0..cfg.num_clusters).collect();
    let assign = assignments(&all, PRETRAIN_PER_CLUSTER * cfg.num_clusters, &mut rng);
    let (rows, labels) = sample_points(&universe.centers, &assign, cfg.cluster_noise, &mut rng);
    EvalDataset::from_rows(rows, labels, "pretrain", Split::Train)
}

/// The base model: fan-in uniform init trained for `epochs / 2` epochs on
/// [`pretrain_data`].
pub fn pretrain_base(universe: &Universe, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let bc = &universe.config;
    let init = Mlp::init(
        bc.input_dim,
        cfg.hidden_dim,
        bc.num_clusters,
        &mut rng::stream(cfg.seed, STREAM_INIT),
    )
    .to_checkpoint();
    let data = pretrain_data(universe)?;
    let half = TrainConfig {
        epochs: cfg.epochs / 2,
        ..cfg.clone()
    };
    train_run(&init, &data, &half, STREAM_PRETRAIN)
}

/// Hidden activations of `base` for every row, dropping all-zero rows
/// (undefined under cosine metrics).
pub fn hidden_embeddings(base: &Checkpoint, data: &EvalDataset, name: &str) -> Result<EmbeddingSet> {
    let mlp = Mlp::from_checkpoint(base)?;
    let mut h = vec![0.0; mlp.hidden_dim];
    let mut rows = Vec::new();
    for (x, _) in data.samples() {
        mlp.hidden(x, &mut h);
        if h.iter().any(|&v| v != 0.0) {
            rows.push(h.iter().map(|&v| v as f32).collect::<Vec<f32>>());
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset(format!("{name}: every hidden activation is zero")));
    }
    let dim = mlp.hidden_dim;
    let n = rows.len();
    EmbeddingSet::new(Tensor::new(vec![n, dim], rows.concat())?, name)
}

/// Scores of one mixture on one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub alpha: MixtureVector,
    pub merged_val: Score,
    pub merged_test: Score,
    pub finetuned_val: Score,
    pub finetuned_test: Score,
    pub similarity: BTreeMap<SimilarityMetric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTable {
    pub target: String,
    pub clusters: Vec<usize>,
    pub source_datasets: Vec<usize>,
    pub base_val: Score,
    pub base_test: Score,
    pub rows: Vec<MixtureRow>,
}

impl TargetTable {
    /// Rows as search records for one split.
    pub fn records(&self, split: Split) -> Vec<ScoreRecord> {
        self.rows
            .iter()
            .map(|r| {
                let (merged, ft) = match split {
                    Split::Val => (r.merged_val, r.finetuned_val),
                    _ => (r.merged_test, r.finetuned_test),
                };
                ScoreRecord {
                    alpha: r.alpha.clone(),
                    merged_score: merged,
                    finetuned_score: Some(ft),
                    elapsed_ms: 0,
                }
            })
            .collect()
    }

    pub fn row(&self, alpha: &MixtureVector) -> Option<&MixtureRow> {
        self.rows.iter().find(|r| &r.alpha == alpha)
    }

    fn finetuned(&self, split: Split) -> BTreeMap<MixtureVector, Score> {
        self.rows
            .iter()
            .map(|r| {
                let s = if split == Split::Val { r.finetuned_val } else { r.finetuned_test };
                (r.alpha.clone(), s)
            })
            .collect()
    }
}

/// Mixture chosen by one method on one target; `alpha` is absent for the
/// random-selection expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub alpha: Option<MixtureVector>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

pub const METHOD_M2M: &str = "merge_to_mix_finetuned";
pub const METHOD_M2M_MERGED: &str = "merge_to_mix_merged";
pub const METHOD_ALL: &str = "all_datasets";
pub const METHOD_RANDOM: &str = "random_mean";
pub const METHOD_ORACLE: &str = "oracle";

pub fn similarity_method(metric: SimilarityMetric) -> String {
    format!("similarity_{metric}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelections {
    pub target: String,
    pub selections: Vec<Selection>,
}

impl TargetSelections {
    pub fn get(&self, method: &str) -> Option<&Selection> {
        self.selections.iter().find(|s| s.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub bench_config: BenchConfig,
    pub train_config: TrainConfig,
    pub dataset_names: Vec<String>,
    pub dataset_clusters: Vec<Vec<usize>>,
    pub tables: Vec<TargetTable>,
    pub selections: Vec<TargetSelections>,
    /// Similarity metric with the highest mean test accuracy of its picks.
    pub best_similarity_metric: SimilarityMetric,
    /// Mean test accuracy per method across targets.
    pub mean_test_accuracy: BTreeMap<String, f64>,
    /// Merged vs fine-tuned test accuracy, singletons excluded. `None`
    /// when no target has enough non-degenerate pairs.
    pub correlation_raw: Option<CorrelationReport>,
    /// Same on logit-improvement coordinates.
    pub correlation_logit: Option<CorrelationReport>,
    /// Similarity score vs fine-tuned test accuracy, singletons excluded.
    /// `None` when every task was degenerate.
    pub similarity_correlations: BTreeMap<SimilarityMetric, Option<CorrelationReport>>,
    /// Average r with L2 metrics sign-flipped, so larger always means the
    /// metric ranks mixtures more like fine-tuning does.
    pub similarity_aligned_r: BTreeMap<SimilarityMetric, f64>,
}

impl BenchReport {
    /// Metric with the largest direction-aligned average correlation.
    pub fn best_similarity_correlation(&self) -> Option<(SimilarityMetric, f64)> {
        self.similarity_aligned_r
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(m, r)| (*m, *r))
    }

    /// Merged-mode plot points on test accuracy, per target.
    pub fn plot_points(&self) -> Result<Vec<(String, Vec<PlotPoint>)>> {
        self.tables
            .iter()
            .map(|t| {
                let pts = plot_coordinates(&t.records(Split::Test), t.base_test.accuracy, PlotSurrogate::Merged)?;
                Ok((t.target.clone(), pts))
            })
            .collect()
    }
}

impl Report for BenchReport {
    fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "target",
            "mixture_bits",
            "n_selected",
            "merged_val_accuracy",
            "merged_test_accuracy",
            "finetuned_val_accuracy",
            "finetuned_test_accuracy",
            "merged_test_loss",
            "finetuned_test_loss",
        ]
        .map(String::from)
        .to_vec();
        h.extend(SimilarityMetric::ALL.iter().map(|m| m.to_string()));
        h
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for t in &self.tables {
            for r in &t.rows {
                let mut row = vec![
                    t.target.clone(),
                    r.alpha.to_string(),
                    r.alpha.count().to_string(),
                    r.merged_val.accuracy.to_string(),
                    r.merged_test.accuracy.to_string(),
                    r.finetuned_val.accuracy.to_string(),
                    r.finetuned_test.accuracy.to_string(),
                    r.merged_test.mean_loss.to_string(),
                    r.finetuned_test.mean_loss.to_string(),
                ];
                row.extend(
                    SimilarityMetric::ALL
                        .iter()
                        .map(|m| r.similarity.get(m).map(|v| v.to_string()).unwrap_or_default()),
                );
                out.push(row);
            }
        }
        out
    }
}

/// Models produced along the way, for optional persistence.
pub struct BenchArtifacts {
    pub universe: Universe,
    pub base: Checkpoint,
    pub bank: ModelBank,
    /// Fine-tuned model per mixture, Gray-code order.
    pub finetuned: Vec<(MixtureVector, Checkpoint)>,
}

/// Singleton-excluded correlation, or `None` if every task was skipped.
fn optional_correlation(inputs: &[CorrelationInput]) -> Result<Option<CorrelationReport>> {
    match correlate_tasks(inputs, true) {
        Ok(rep) => Ok(Some(rep)),
        Err(Error::NoCorrelation) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn run_benchmark(bench: &BenchConfig, train_cfg: &TrainConfig) -> Result<BenchReport> {
    run_benchmark_with_artifacts(bench, train_cfg).map(|(r, _)| r)
}

pub fn run_benchmark_with_artifacts(bench: &BenchConfig, train_cfg: &TrainConfig) -> Result<(BenchReport, BenchArtifacts)> {
    bench.validate()?;
    train_cfg.validate()?;
    let n = bench.num_datasets;
    if n > MAX_BENCH_N {
        return Err(Error::InvalidConfig(format!(
            "benchmark trains all 2^N - 1 mixtures; N = {n} exceeds {MAX_BENCH_N}"
        )));
    }
    let universe = generate_universe(bench)?;
    let base = pretrain_base(&universe, train_cfg)?;
    let order = all_mixtures(n)?;

    // Ground truth: one fine-tuning run per mixture, all from the same base
    // and the same TrainConfig. Singletons double as the model bank.
    let finetuned: Vec<Checkpoint> = order
        .par_iter()
        .map(|alpha| {
            let parts: Vec<&EvalDataset> = alpha.selected().map(|i| &universe.datasets[i].train).collect();
            let data = EvalDataset::concat(&parts, alpha.to_string())?;
            let mask = alpha.to_mask().expect("n <= MAX_BENCH_N");
            train_run(&base, &data, train_cfg, STREAM_FINETUNE + mask)
        })
        .collect::<Result<_>>()?;
    let mut singles: Vec<(usize, Checkpoint)> = order
        .iter()
        .zip(&finetuned)
        .filter(|(a, _)| a.is_singleton())
        .map(|(a, c)| (a.selected().next().expect("singleton"), c.clone()))
        .collect();
    singles.sort_by_key(|(i, _)| *i);
    let names: Vec<String> = universe.datasets.iter().map(|d| d.name.clone()).collect();
    let bank = ModelBank::new(singles.into_iter().map(|(_, c)| c).collect(), names.clone())?;

    let merged: Vec<Checkpoint> = subset_merges(&bank, order.iter().cloned())
        .map(|r| r.map(|(_, c)| c))
        .collect::<Result<_>>()?;

    let dataset_embeddings: Vec<EmbeddingSet> = match bench.embedding_source {
        EmbeddingSource::Raw => universe.dataset_embeddings.clone(),
        EmbeddingSource::Hidden => universe
            .datasets
            .iter()
            .map(|d| hidden_embeddings(&base, &d.val, &d.name))
            .collect::<Result<_>>()?,
    };

    let mut tables = Vec::new();
    let mut selections = Vec::new();
    for (t_idx, target) in universe.targets.iter().enumerate() {
        let target_emb = match bench.embedding_source {
            EmbeddingSource::Raw => universe.target_embeddings[t_idx].clone(),
            EmbeddingSource::Hidden => hidden_embeddings(&base, &target.val, &target.name)?,
        };
        let index = SimilarityIndex::new(&target_emb, &dataset_embeddings, true)?;
        let sim_tables: BTreeMap<SimilarityMetric, Vec<(MixtureVector, f64)>> = SimilarityMetric::ALL
            .iter()
            .map(|&m| Ok((m, index.score_all(m)?)))
            .collect::<Result<_>>()?;

        let rows: Vec<MixtureRow> = order
            .par_iter()
            .enumerate()
            .map(|(k, alpha)| {
                Ok(MixtureRow {
                    alpha: alpha.clone(),
                    merged_val: evaluate_builtin(&merged[k], &target.val)?,
                    merged_test: evaluate_builtin(&merged[k], &target.test)?,
                    finetuned_val: evaluate_builtin(&finetuned[k], &target.val)?,
                    finetuned_test: evaluate_builtin(&finetuned[k], &target.test)?,
                    similarity: sim_tables.iter().map(|(m, tbl)| (*m, tbl[k].1)).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let table = TargetTable {
            target: target.name.clone(),
            clusters: target.clusters.clone(),
            source_datasets: target.source_datasets.clone(),
            base_val: evaluate_builtin(&base, &target.val)?,
            base_test: evaluate_builtin(&base, &target.test)?,
            rows,
        };

        let search_cfg = SearchConfig {
            record_timing: false,
            ..Default::default()
        };
        let m2m = run_search(&bank, &BuiltinEvaluator { data: &target.val }, &search_cfg)?.best_alpha;
        let pick = |method: String, alpha: &MixtureVector, merged_model: bool| -> Selection {
            let row = table.row(alpha).expect("complete table");
            let (v, t) = if merged_model {
                (row.merged_val, row.merged_test)
            } else {
                (row.finetuned_val, row.finetuned_test)
            };
            Selection {
                method,
                alpha: Some(alpha.clone()),
                val_accuracy: v.accuracy,
                test_accuracy: t.accuracy,
            }
        };
        let mut sel = vec![
            pick(METHOD_M2M.into(), &m2m, false),
            pick(METHOD_M2M_MERGED.into(), &m2m, true),
            pick(METHOD_ALL.into(), &MixtureVector::all(n)?, false),
        ];
        for (m, tbl) in &sim_tables {
            let (alpha, _) = best_of(tbl, *m)?;
            sel.push(pick(similarity_method(*m), &alpha, false));
        }
        sel.push(Selection {
            method: METHOD_RANDOM.into(),
            alpha: None,
            val_accuracy: random_selection_mean(&table.finetuned(Split::Val), MeanMode::Exact { n })?,
            test_accuracy: random_selection_mean(&table.finetuned(Split::Test), MeanMode::Exact { n })?,
        });
        let oracle = oracle_select(&table.finetuned(Split::Val))?;
        sel.push(pick(METHOD_ORACLE.into(), &oracle, false));

        tables.push(table);
        selections.push(TargetSelections {
            target: target.name.clone(),
            selections: sel,
        });
    }

    let mut mean_test_accuracy = BTreeMap::new();
    for s in &selections[0].selections {
        let mean = selections
            .iter()
            .map(|ts| ts.get(&s.method).expect("same methods per target").test_accuracy)
            .sum::<f64>()
            / selections.len() as f64;
        mean_test_accuracy.insert(s.method.clone(), mean);
    }
    let best_similarity_metric = SimilarityMetric::ALL
        .into_iter()
        .max_by(|a, b| {
            let (ma, mb) = (
                mean_test_accuracy[&similarity_method(*a)],
                mean_test_accuracy[&similarity_method(*b)],
            );
            // earlier metric wins ties
            ma.total_cmp(&mb).then(b.cmp(a))
        })
        .expect("six metrics");

    let inputs = |x: &dyn Fn(&MixtureRow) -> f64| -> Vec<CorrelationInput> {
        tables
            .iter()
            .map(|t| CorrelationInput {
                task_name: t.target.clone(),
                pairs: t
                    .rows
                    .iter()
                    .map(|r| CorrelationPoint {
                        x: x(r),
                        y: r.finetuned_test.accuracy,
                        n_selected: r.alpha.count(),
                    })
                    .collect(),
            })
            .collect()
    };
    let correlation_raw = optional_correlation(&inputs(&|r| r.merged_test.accuracy))?;
    let logit_inputs: Vec<CorrelationInput> = tables
        .iter()
        .map(|t| {
            let pts = plot_coordinates(&t.records(Split::Test), t.base_test.accuracy, PlotSurrogate::Merged)?;
            Ok(CorrelationInput {
                task_name: t.target.clone(),
                pairs: pts
                    .iter()
                    .map(|p| CorrelationPoint { x: p.x, y: p.y, n_selected: p.n_selected })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    let correlation_logit = optional_correlation(&logit_inputs)?;

    let mut similarity_correlations = BTreeMap::new();
    let mut similarity_aligned_r = BTreeMap::new();
    for m in SimilarityMetric::ALL {
        let rep = optional_correlation(&inputs(&|r| r.similarity[&m]))?;
        if let Some(rep) = &rep {
            let sign = if m.is_cosine() { 1.0 } else { -1.0 };
            similarity_aligned_r.insert(m, sign * rep.average_r);
        }
        similarity_correlations.insert(m, rep);
    }

    let report = BenchReport {
        bench_config: bench.clone(),
        train_config: train_cfg.clone(),
        dataset_names: names,
        dataset_clusters: universe.datasets.iter().map(|d| d.clusters.clone()).collect(),
        tables,
        selections,
        best_similarity_metric,
        mean_test_accuracy,
        correlation_raw,
        correlation_logit,
        similarity_correlations,
        similarity_aligned_r,
    };
    let artifacts = BenchArtifacts {
        universe,
        base,
        bank,
        finetuned: order.into_iter().zip(finetuned).collect(),
    };
    Ok((report, artifacts))
}
