//! Exhaustive merge-and-evaluate search over dataset mixtures.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, Score};
use crate::merge::{gray_code_order, subset_merges, MixtureVector, ModelBank};

/// Which score drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MaxAccuracy,
    MinLoss,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::MaxAccuracy => "max_accuracy",
            Objective::MinLoss => "min_loss",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "max_accuracy" => Ok(Objective::MaxAccuracy),
            "loss" | "min_loss" => Ok(Objective::MinLoss),
            _ => Err(Error::InvalidConfig(format!("unknown objective {s:?}"))),
        }
    }
}

/// Orders two candidates; `Less` means `a` is preferred.
///
/// Better objective first, then fewer selected datasets, then the
/// lexicographically smaller bit string.
pub fn compare_candidates(
    objective: Objective,
    a: (&MixtureVector, &Score),
    b: (&MixtureVector, &Score),
) -> Ordering {
    let by_score = match objective {
        Objective::MaxAccuracy => b.1.accuracy.total_cmp(&a.1.accuracy),
        Objective::MinLoss => a.1.mean_loss.total_cmp(&b.1.mean_loss),
    };
    by_score
        .then_with(|| a.0.count().cmp(&b.0.count()))
        .then_with(|| a.0.cmp(b.0))
}

/// Tie-break for raw values where larger is better.
pub fn compare_by_value(a: (&MixtureVector, f64), b: (&MixtureVector, f64), maximize: bool) -> Ordering {
    let by_value = if maximize {
        b.1.total_cmp(&a.1)
    } else {
        a.1.total_cmp(&b.1)
    };
    by_value
        .then_with(|| a.0.count().cmp(&b.0.count()))
        .then_with(|| a.0.cmp(b.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub alpha: MixtureVector,
    pub merged_score: Score,
    pub finetuned_score: Option<Score>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub records: Vec<ScoreRecord>,
    pub best_alpha: MixtureVector,
    pub objective: Objective,
    pub target_name: String,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub objective: Objective,
    /// Largest bank size enumerated exhaustively without a candidate list.
    pub max_exhaustive_n: usize,
    /// Explicit mixtures to evaluate instead of all `2^N - 1`.
    pub candidates: Option<Vec<MixtureVector>>,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub jobs: Option<usize>,
    /// Record wall-clock time per mixture. Off gives reproducible reports.
    pub record_timing: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MaxAccuracy,
            max_exhaustive_n: 20,
            candidates: None,
            jobs: None,
            record_timing: true,
        }
    }
}

/// Merges and scores every candidate mixture, returning all records in
/// enumeration order together with the best mixture.
///
/// The default enumeration is the Gray-code walk over all non-empty
/// mixtures. Work is split into contiguous chunks, each streamed through
/// its own incremental merge buffer.
pub fn run_search(bank: &ModelBank, evaluator: &dyn Evaluator, config: &SearchConfig) -> Result<SearchReport> {
    let n = bank.len();
    let order: Vec<MixtureVector> = match &config.candidates {
        Some(list) => {
            if list.is_empty() {
                return Err(Error::InvalidConfig("empty candidate list".into()));
            }
            for alpha in list {
                if alpha.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        actual: alpha.len(),
                    });
                }
                if alpha.count() == 0 {
                    return Err(Error::EmptyMixture);
                }
            }
            list.clone()
        }
        None => {
            if n > config.max_exhaustive_n {
                return Err(Error::InvalidConfig(format!(
                    "{n} datasets exceed max_exhaustive_n = {}; pass an explicit candidate list",
                    config.max_exhaustive_n
                )));
            }
            gray_code_order(n)?.collect()
        }
    };

    let work = || -> Result<Vec<ScoreRecord>> {
        let chunk = order.len().div_ceil(rayon::current_num_threads() * 4).max(1);
        let chunks: Vec<Vec<ScoreRecord>> = order
            .par_chunks(chunk)
            .map(|part| {
                let mut out = Vec::with_capacity(part.len());
                let mut start = Instant::now();
                for item in subset_merges(bank, part.iter().cloned()) {
                    let (alpha, merged) = item?;
                    let score = evaluator.evaluate(&merged).map_err(|e| Error::Search {
                        alpha: alpha.clone(),
                        source: Box::new(e),
                    })?;
                    let elapsed_ms = if config.record_timing {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    };
                    out.push(ScoreRecord {
                        alpha,
                        merged_score: score,
                        finetuned_score: None,
                        elapsed_ms,
                    });
                    start = Instant::now();
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    };
    let records = match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    let best_alpha = best_record(&records, config.objective)
        .expect("at least one record")
        .alpha
        .clone();
    Ok(SearchReport {
        records,
        best_alpha,
        objective: config.objective,
        target_name: evaluator.target_name().to_string(),
    })
}

fn best_record(records: &[ScoreRecord], objective: Objective) -> Option<&ScoreRecord> {
    records.iter().min_by(|a, b| {
        compare_candidates(
            objective,
            (&a.alpha, &a.merged_score),
            (&b.alpha, &b.merged_score),
        )
    })
}

/// Best record of a report under its objective.
pub fn select_best(report: &SearchReport) -> MixtureVector {
    best_record(&report.records, report.objective)
        .map(|r| r.alpha.clone())
        .unwrap_or_else(|| report.best_alpha.clone())
}

/// Mixture whose fine-tuned model has the highest validation accuracy.
pub fn oracle_select(scores: &BTreeMap<MixtureVector, Score>) -> Result<MixtureVector> {
    scores
        .iter()
        .min_by(|a, b| compare_candidates(Objective::MaxAccuracy, (a.0, a.1), (b.0, b.1)))
        .map(|(alpha, _)| alpha.clone())
        .ok_or(Error::IncompleteTable("no scores to select from".into()))
}
