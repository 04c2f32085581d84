//! One-hidden-layer ReLU MLP with a softmax cross-entropy head.
//!
//! Checkpoint schema: `w1 [h, in]`, `b1 [h]`, `w2 [c, h]`, `b2 [c]`.
//! Arithmetic runs in f64; checkpoints store f32.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor_store::{Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient buffers with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &Mlp) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn zero(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Flattened in checkpoint order (`b1`, `b2`, `w1`, `w2`).
    pub fn flatten(&self) -> Vec<f64> {
        [&self.b1, &self.b2, &self.w1, &self.w2]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; num_classes * hidden_dim],
            b2: vec![0.0; num_classes],
        }
    }

    /// Fan-in scaled uniform init: every parameter of a layer is drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input_dim, hidden_dim, num_classes);
        let b = 1.0 / (input_dim as f64).sqrt();
        m.w1.iter_mut().chain(m.b1.iter_mut()).for_each(|v| *v = rng.random_range(-b..b));
        let b = 1.0 / (hidden_dim as f64).sqrt();
        m.w2.iter_mut().chain(m.b2.iter_mut()).for_each(|v| *v = rng.random_range(-b..b));
        m
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::ModelSchema(format!("missing tensor {name}")))
        };
        let (w1, b1, w2, b2) = (get("w1")?, get("b1")?, get("w2")?, get("b2")?);
        if ckpt.tensors.len() != 4 {
            return Err(Error::ModelSchema(format!(
                "expected exactly w1, b1, w2, b2; found {:?}",
                ckpt.tensors.keys().collect::<Vec<_>>()
            )));
        }
        let [h, input_dim] = w1.shape() else {
            return Err(Error::ModelSchema(format!("w1 shape {:?} is not rank 2", w1.shape())));
        };
        let [c, h2] = w2.shape() else {
            return Err(Error::ModelSchema(format!("w2 shape {:?} is not rank 2", w2.shape())));
        };
        if h != h2 || b1.shape() != [*h] || b2.shape() != [*c] {
            return Err(Error::ModelSchema(format!(
                "inconsistent shapes w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        let widen = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect();
        Ok(Self {
            input_dim: *input_dim,
            hidden_dim: *h,
            num_classes: *c,
            w1: widen(w1),
            b1: widen(b1),
            w2: widen(w2),
            b2: widen(b2),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let narrow = |shape: Vec<usize>, v: &[f64]| {
            Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).expect("layer shape")
        };
        let (h, i, c) = (self.hidden_dim, self.input_dim, self.num_classes);
        Checkpoint::from_tensors([
            ("w1".to_string(), narrow(vec![h, i], &self.w1)),
            ("b1".to_string(), narrow(vec![h], &self.b1)),
            ("w2".to_string(), narrow(vec![c, h], &self.w2)),
            ("b2".to_string(), narrow(vec![c], &self.b2)),
        ])
        .expect("distinct names")
    }

    /// Post-ReLU hidden activations.
    pub fn hidden(&self, x: &[f32], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let z = row.iter().zip(x).fold(self.b1[j], |acc, (w, &xi)| acc + w * xi as f64);
            *o = z.max(0.0);
        }
    }

    pub fn logits_from_hidden(&self, hidden: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
            *o = row.iter().zip(hidden).fold(self.b2[k], |acc, (w, h)| acc + w * h);
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim];
        let mut out = vec![0.0; self.num_classes];
        self.hidden(x, &mut h);
        self.logits_from_hidden(&h, &mut out);
        out
    }

    /// Mean loss over `samples` and its gradient, accumulated into `grads`
    /// (which is overwritten).
    pub fn loss_and_grad<'a>(
        &self,
        samples: impl IntoIterator<Item = (&'a [f32], usize)>,
        grads: &mut Gradients,
    ) -> f64 {
        grads.zero();
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut probs = vec![0.0; self.num_classes];
        let mut dh = vec![0.0; self.hidden_dim];
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, label) in samples {
            count += 1;
            self.hidden(x, &mut hidden);
            self.logits_from_hidden(&hidden, &mut probs);
            total += softmax_in_place(&mut probs, label);
            // probs now holds dL/dlogits
            probs[label] -= 1.0;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (k, &g) in probs.iter().enumerate() {
                grads.b2[k] += g;
                let w_row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                let g_row = &mut grads.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                for j in 0..self.hidden_dim {
                    g_row[j] += g * hidden[j];
                    dh[j] += g * w_row[j];
                }
            }
            for j in 0..self.hidden_dim {
                if hidden[j] <= 0.0 {
                    continue;
                }
                let g = dh[j];
                grads.b1[j] += g;
                let g_row = &mut grads.w1[j * self.input_dim..(j + 1) * self.input_dim];
                for (gw, &xi) in g_row.iter_mut().zip(x) {
                    *gw += g * xi as f64;
                }
            }
        }
        if count == 0 {
            return 0.0;
        }
        let inv = 1.0 / count as f64;
        for v in [&mut grads.w1, &mut grads.b1, &mut grads.w2, &mut grads.b2] {
            v.iter_mut().for_each(|g| *g *= inv);
        }
        total * inv
    }

    pub fn gradients(&self) -> Gradients {
        Gradients::zeros_like(self)
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in [
            (&mut self.w1, &grads.w1),
            (&mut self.b1, &grads.b1),
            (&mut self.w2, &grads.w2),
            (&mut self.b2, &grads.b2),
        ] {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        }
    }

    /// Parameters flattened in checkpoint order (`b1`, `b2`, `w1`, `w2`).
    pub fn flatten(&self) -> Vec<f64> {
        [&self.b1, &self.b2, &self.w1, &self.w2]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn parameter_mut(&mut self, mut idx: usize) -> &mut f64 {
        for v in [&mut self.b1, &mut self.b2, &mut self.w1, &mut self.w2] {
            if idx < v.len() {
                return &mut v[idx];
            }
            idx -= v.len();
        }
        panic!("parameter index out of range");
    }
}

/// Replaces logits with softmax probabilities and returns the
/// cross-entropy of `label`, using max subtraction for stability.
pub fn softmax_in_place(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    sum.ln() - shifted_label
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
