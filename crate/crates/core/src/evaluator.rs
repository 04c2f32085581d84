//! Scoring checkpoints on a target task.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{argmax, softmax_in_place, Mlp};
use crate::tensor_store::{read_checkpoint, write_checkpoint, Checkpoint, Tensor};

/// Clamp applied to accuracies before taking log-odds.
pub const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidDataset(format!("unknown split {s:?}"))),
        }
    }
}

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    features: Tensor,
    labels: Vec<usize>,
    pub name: String,
    pub split: Split,
}

impl EvalDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, name: impl Into<String>, split: Split) -> Result<Self> {
        let [n, _] = features.shape() else {
            return Err(Error::InvalidDataset(format!(
                "features must be rank 2, got {:?}",
                features.shape()
            )));
        };
        if *n != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
            split,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>, labels: Vec<usize>, name: impl Into<String>, split: Split) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidDataset("empty or ragged feature rows".into()));
        }
        let n = rows.len();
        let data = rows.into_iter().flatten().collect();
        Self::new(Tensor::new(vec![n, dim], data)?, labels, name, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f32], usize) {
        (self.features.row(i), self.labels[i])
    }

    pub fn samples(&self) -> impl Iterator<Item = (&[f32], usize)> {
        self.features
            .data()
            .chunks_exact(self.input_dim())
            .zip(self.labels.iter().copied())
    }

    /// Concatenates datasets in order; the result takes `name` and the split
    /// of the first input.
    pub fn concat(parts: &[&EvalDataset], name: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidDataset("nothing to concatenate".into()))?;
        let dim = first.input_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim() != dim {
                return Err(Error::InvalidDataset(format!(
                    "input dims differ: {dim} vs {}",
                    p.input_dim()
                )));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        let n = labels.len();
        Self::new(Tensor::new(vec![n, dim], data)?, labels, name, first.split)
    }
}

/// Stores a dataset as an MTM container with tensors `features [n, d]` and
/// `labels [n]` (class indices as f32) plus `name`/`split` metadata.
pub fn write_eval_dataset(data: &EvalDataset, path: impl AsRef<Path>) -> Result<()> {
    let labels = Tensor::new(
        vec![data.len()],
        data.labels.iter().map(|&l| l as f32).collect(),
    )?;
    let mut ckpt = Checkpoint::from_tensors([
        ("features".to_string(), data.features.clone()),
        ("labels".to_string(), labels),
    ])?;
    ckpt.metadata = Some(BTreeMap::from([
        ("name".to_string(), data.name.clone()),
        ("split".to_string(), data.split.to_string()),
    ]));
    write_checkpoint(&ckpt, path)
}

pub fn read_eval_dataset(path: impl AsRef<Path>) -> Result<EvalDataset> {
    let path = path.as_ref();
    let mut ckpt = read_checkpoint(path)?;
    let missing = |n: &str| Error::InvalidDataset(format!("{} has no {n:?} tensor", path.display()));
    let features = ckpt.tensors.remove("features").ok_or_else(|| missing("features"))?;
    let labels = ckpt.tensors.remove("labels").ok_or_else(|| missing("labels"))?;
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(Error::InvalidDataset(format!("label {l} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = ckpt.metadata.unwrap_or_default();
    let name = meta.get("name").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let split = meta.get("split").map_or(Ok(Split::Test), |s| s.parse())?;
    EvalDataset::new(features, labels, name, split)
}

/// Accuracy and mean loss of one model on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub num_samples: usize,
}

impl Score {
    pub fn new(accuracy: f64, mean_loss: f64, num_samples: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::AccuracyOutOfRange(accuracy));
        }
        if !mean_loss.is_finite() || mean_loss < 0.0 {
            return Err(Error::LossOutOfRange(mean_loss));
        }
        Ok(Self {
            accuracy,
            mean_loss,
            num_samples,
        })
    }
}

/// Forward-pass evaluation of a toy-MLP checkpoint.
///
/// Accuracy counts argmax hits with ties going to the lowest class; loss is
/// the mean stabilized softmax cross-entropy.
pub fn evaluate_builtin(ckpt: &Checkpoint, data: &EvalDataset) -> Result<Score> {
    let mlp = Mlp::from_checkpoint(ckpt)?;
    evaluate_mlp(&mlp, data)
}

pub fn evaluate_mlp(mlp: &Mlp, data: &EvalDataset) -> Result<Score> {
    if data.is_empty() {
        return Err(Error::InvalidDataset(format!("{} is empty", data.name)));
    }
    if data.input_dim() != mlp.input_dim {
        return Err(Error::ModelSchema(format!(
            "model input dim {} but data {} has {}",
            mlp.input_dim,
            data.name,
            data.input_dim()
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= mlp.num_classes) {
        return Err(Error::ModelSchema(format!(
            "label {l} outside the model's {} classes",
            mlp.num_classes
        )));
    }
    let mut hidden = vec![0.0; mlp.hidden_dim];
    let mut logits = vec![0.0; mlp.num_classes];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, label) in data.samples() {
        mlp.hidden(x, &mut hidden);
        mlp.logits_from_hidden(&hidden, &mut logits);
        if argmax(&logits) == label {
            correct += 1;
        }
        loss += softmax_in_place(&mut logits, label);
    }
    let n = data.len();
    Score::new(correct as f64 / n as f64, loss / n as f64, n)
}

#[derive(Deserialize)]
struct ExternalReply {
    accuracy: f64,
    loss: f64,
    #[serde(default)]
    num_samples: usize,
}

/// Runs an external evaluator.
///
/// The template is split on whitespace into a program and arguments, and
/// `{checkpoint}` / `{data}` are substituted inside each argument; no shell
/// is involved. The last non-empty stdout line must be
/// `{"accuracy": <float>, "loss": <float>}`.
pub fn evaluate_external(ckpt_path: &Path, data_ref: &str, command_template: &str) -> Result<Score> {
    if !command_template.contains("{checkpoint}") || !command_template.contains("{data}") {
        return Err(Error::InvalidConfig(
            "evaluator command must contain {checkpoint} and {data}".into(),
        ));
    }
    let ckpt = ckpt_path.to_string_lossy();
    let mut args = command_template
        .split_whitespace()
        .map(|a| a.replace("{checkpoint}", &ckpt).replace("{data}", data_ref));
    let program = args
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty evaluator command".into()))?;
    let output = Command::new(&program)
        .args(args)
        .output()
        .map_err(|e| Error::EvaluatorFailed(format!("cannot run {program}: {e}")))?;
    if !output.status.success() {
        return Err(match output.status.code() {
            Some(code) => Error::EvaluatorExit(code),
            None => Error::EvaluatorFailed("terminated by signal".into()),
        });
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::EvaluatorOutput("empty stdout".into()))?;
    let reply: ExternalReply =
        serde_json::from_str(line.trim()).map_err(|e| Error::EvaluatorOutput(format!("{e}: {line}")))?;
    Score::new(reply.accuracy, reply.loss, reply.num_samples)
}

/// Anything that can score a merged checkpoint on a fixed target.
pub trait Evaluator: Sync {
    fn evaluate(&self, ckpt: &Checkpoint) -> Result<Score>;

    fn target_name(&self) -> &str {
        "target"
    }
}

impl<F> Evaluator for F
where
    F: Fn(&Checkpoint) -> Result<Score> + Sync,
{
    fn evaluate(&self, ckpt: &Checkpoint) -> Result<Score> {
        self(ckpt)
    }
}

/// [`evaluate_builtin`] against a fixed dataset.
pub struct BuiltinEvaluator<'a> {
    pub data: &'a EvalDataset,
}

impl Evaluator for BuiltinEvaluator<'_> {
    fn evaluate(&self, ckpt: &Checkpoint) -> Result<Score> {
        evaluate_builtin(ckpt, self.data)
    }

    fn target_name(&self) -> &str {
        &self.data.name
    }
}

/// [`evaluate_external`] with each checkpoint written to a fresh temp file.
pub struct ExternalEvaluator {
    pub command_template: String,
    pub data_ref: String,
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, ckpt: &Checkpoint) -> Result<Score> {
        let file = tempfile::Builder::new().suffix(".mtm").tempfile()?;
        write_checkpoint(ckpt, file.path())?;
        evaluate_external(file.path(), &self.data_ref, &self.command_template)
    }

    fn target_name(&self) -> &str {
        &self.data_ref
    }
}

/// Natural log-odds of `p` after clamping to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
pub fn logit(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::out_of_range("probability", p, 0, 1));
    }
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    Ok(p.ln() - (-p).ln_1p())
}

/// `logit(acc_model) - logit(acc_base)`.
pub fn logit_improvement(acc_model: f64, acc_base: f64) -> Result<f64> {
    Ok(logit(acc_model)? - logit(acc_base)?)
}
