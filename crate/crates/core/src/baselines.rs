//! Comparison selectors: all datasets, embedding similarity, random choice.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::Score;
use crate::merge::{gray_code_order, MixtureVector};
use crate::search::compare_by_value;
use crate::tensor_store::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// Mean over target rows of the best cosine against the mixture.
    AvgMaxCos,
    /// Mean over target rows of the nearest L2 distance.
    AvgMinL2,
    AvgAvgCos,
    AvgAvgL2,
    /// Single best cosine over all pairs.
    MaxMaxCos,
    /// Single smallest distance over all pairs.
    MinMinL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 6] = [
        SimilarityMetric::AvgMaxCos,
        SimilarityMetric::AvgMinL2,
        SimilarityMetric::AvgAvgCos,
        SimilarityMetric::AvgAvgL2,
        SimilarityMetric::MaxMaxCos,
        SimilarityMetric::MinMinL2,
    ];

    pub fn direction(self) -> Direction {
        if self.is_cosine() {
            Direction::Maximize
        } else {
            Direction::Minimize
        }
    }

    pub fn is_cosine(self) -> bool {
        matches!(
            self,
            SimilarityMetric::AvgMaxCos | SimilarityMetric::AvgAvgCos | SimilarityMetric::MaxMaxCos
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMetric::AvgMaxCos => "avg_max_cos",
            SimilarityMetric::AvgMinL2 => "avg_min_l2",
            SimilarityMetric::AvgAvgCos => "avg_avg_cos",
            SimilarityMetric::AvgAvgL2 => "avg_avg_l2",
            SimilarityMetric::MaxMaxCos => "max_max_cos",
            SimilarityMetric::MinMinL2 => "min_min_l2",
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown similarity metric {s:?}")))
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_pair(target: &EmbeddingSet, other: &EmbeddingSet, metric: SimilarityMetric) -> Result<()> {
    if target.dim() != other.dim() {
        return Err(Error::LengthMismatch {
            expected: target.dim(),
            actual: other.dim(),
        });
    }
    if metric.is_cosine() {
        for set in [target, other] {
            if let Some(i) = set.rows().position(|r| norm(r) == 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "row {i} of {} has zero norm under a cosine metric",
                    set.source_name
                )));
            }
        }
    }
    Ok(())
}

/// Per-(target row, dataset) statistics from which every metric of any
/// pooled mixture can be assembled.
#[derive(Debug, Clone, Copy)]
struct PairStats {
    max_cos: f64,
    min_l2: f64,
    sum_cos: f64,
    sum_l2: f64,
}

fn pair_stats(x: &[f32], x_norm: f64, set: &EmbeddingSet, need_cos: bool) -> PairStats {
    let mut s = PairStats {
        max_cos: f64::NEG_INFINITY,
        min_l2: f64::INFINITY,
        sum_cos: 0.0,
        sum_l2: 0.0,
    };
    for y in set.rows() {
        let d = l2(x, y);
        s.min_l2 = s.min_l2.min(d);
        s.sum_l2 += d;
        if need_cos {
            let c = dot(x, y) / (x_norm * norm(y));
            s.max_cos = s.max_cos.max(c);
            s.sum_cos += c;
        }
    }
    s
}

/// Similarity of a target to a pooled mixture under one metric.
pub fn similarity_score(target: &EmbeddingSet, mixture: &EmbeddingSet, metric: SimilarityMetric) -> Result<f64> {
    let index = SimilarityIndex::new(target, std::slice::from_ref(mixture), metric.is_cosine())?;
    Ok(index.score(&MixtureVector::all(1)?, metric))
}

/// Precomputed target-vs-dataset statistics for scoring many mixtures.
pub struct SimilarityIndex {
    /// `stats[x][j]` for target row `x` and dataset `j`.
    stats: Vec<Vec<PairStats>>,
    counts: Vec<usize>,
    has_cos: bool,
}

impl SimilarityIndex {
    pub fn new(target: &EmbeddingSet, datasets: &[EmbeddingSet], with_cosine: bool) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::EmptyBank);
        }
        let probe = if with_cosine {
            SimilarityMetric::AvgMaxCos
        } else {
            SimilarityMetric::AvgMinL2
        };
        for d in datasets {
            check_pair(target, d, probe)?;
        }
        let stats = (0..target.num_samples())
            .into_par_iter()
            .map(|i| {
                let x = target.row(i);
                let xn = norm(x);
                datasets.iter().map(|d| pair_stats(x, xn, d, with_cosine)).collect()
            })
            .collect();
        Ok(Self {
            stats,
            counts: datasets.iter().map(EmbeddingSet::num_samples).collect(),
            has_cos: with_cosine,
        })
    }

    pub fn num_datasets(&self) -> usize {
        self.counts.len()
    }

    /// Score of the pooled mixture `alpha` (must be non-empty).
    pub fn score(&self, alpha: &MixtureVector, metric: SimilarityMetric) -> f64 {
        assert!(!metric.is_cosine() || self.has_cos, "index built without cosine statistics");
        let sel: Vec<usize> = alpha.selected().collect();
        let pooled: usize = sel.iter().map(|&j| self.counts[j]).sum();
        let per_row = |row: &Vec<PairStats>| -> f64 {
            match metric {
                SimilarityMetric::AvgMaxCos | SimilarityMetric::MaxMaxCos => {
                    sel.iter().map(|&j| row[j].max_cos).fold(f64::NEG_INFINITY, f64::max)
                }
                SimilarityMetric::AvgMinL2 | SimilarityMetric::MinMinL2 => {
                    sel.iter().map(|&j| row[j].min_l2).fold(f64::INFINITY, f64::min)
                }
                SimilarityMetric::AvgAvgCos => {
                    sel.iter().map(|&j| row[j].sum_cos).sum::<f64>() / pooled as f64
                }
                SimilarityMetric::AvgAvgL2 => {
                    sel.iter().map(|&j| row[j].sum_l2).sum::<f64>() / pooled as f64
                }
            }
        };
        let values = self.stats.iter().map(per_row);
        match metric {
            SimilarityMetric::MaxMaxCos => values.fold(f64::NEG_INFINITY, f64::max),
            SimilarityMetric::MinMinL2 => values.fold(f64::INFINITY, f64::min),
            _ => values.sum::<f64>() / self.stats.len() as f64,
        }
    }

    /// Scores every non-empty mixture in Gray-code order.
    pub fn score_all(&self, metric: SimilarityMetric) -> Result<Vec<(MixtureVector, f64)>> {
        Ok(gray_code_order(self.num_datasets())?
            .map(|alpha| {
                let s = self.score(&alpha, metric);
                (alpha, s)
            })
            .collect())
    }
}

/// Best pooled mixture under `metric`, with its score. Ties follow the
/// search tie-break (fewer datasets, then smaller bit string).
pub fn similarity_select(
    target: &EmbeddingSet,
    per_dataset: &[EmbeddingSet],
    metric: SimilarityMetric,
) -> Result<(MixtureVector, f64)> {
    let index = SimilarityIndex::new(target, per_dataset, metric.is_cosine())?;
    best_of(&index.score_all(metric)?, metric)
}

/// Optimum of a scored table under the metric's direction.
pub fn best_of(table: &[(MixtureVector, f64)], metric: SimilarityMetric) -> Result<(MixtureVector, f64)> {
    let maximize = metric.direction() == Direction::Maximize;
    table
        .iter()
        .min_by(|a, b| compare_by_value((&a.0, a.1), (&b.0, b.1), maximize))
        .cloned()
        .ok_or(Error::EmptyBank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    /// Requires every non-empty mixture over `n` datasets.
    Exact { n: usize },
    /// Monte Carlo estimate over whatever samples are given.
    Sampled,
}

/// Expected accuracy of a uniformly random non-empty mixture.
pub fn random_selection_mean(scores: &BTreeMap<MixtureVector, Score>, mode: MeanMode) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::IncompleteTable("no scores".into()));
    }
    if let MeanMode::Exact { n } = mode {
        if n == 0 || n > 63 {
            return Err(Error::out_of_range("N", n, 1, 63));
        }
        let expected = (1u64 << n) - 1;
        let valid = scores.keys().filter(|a| a.len() == n && a.count() > 0).count() as u64;
        if valid != expected || scores.len() as u64 != expected {
            return Err(Error::IncompleteTable(format!(
                "expected all {expected} mixtures of {n} datasets, found {}",
                scores.len()
            )));
        }
    }
    Ok(scores.values().map(|s| s.accuracy).sum::<f64>() / scores.len() as f64)
}

pub fn all_datasets_vector(n: usize) -> Result<MixtureVector> {
    MixtureVector::all(n)
}
