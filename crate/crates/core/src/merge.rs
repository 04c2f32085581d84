//! Surrogate construction by parameter averaging.
//!
//! A [`MixtureVector`] selects a subset of the bank; [`merge_uniform`]
//! averages the selected checkpoints elementwise. [`SubsetMerges`] walks a
//! sequence of mixtures while keeping a running parameter sum, so that a
//! Gray-code walk over all `2^N - 1` subsets costs one model add or remove
//! per step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor_store::{validate_bank, Checkpoint, Tensor, TensorSchema};

/// Largest `N` accepted by [`gray_code_order`].
pub const MAX_GRAY_N: usize = 30;

/// Running sums are rebuilt from scratch after this many emissions.
pub const REFRESH_INTERVAL: u64 = 1 << 12;

/// Binary selection over the `N` candidate datasets.
///
/// Text form is the bit string with dataset 1 leftmost, e.g. `"10110"`.
/// The derived ordering compares bit strings lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MixtureVector {
    bits: Vec<bool>,
}

impl MixtureVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidMixture(String::new()));
        }
        Ok(Self { bits })
    }

    /// Decodes a mask whose most significant of `n` bits is dataset 1.
    pub fn from_mask(mask: u64, n: usize) -> Result<Self> {
        if n == 0 || n > 64 {
            return Err(Error::out_of_range("mixture length", n, 1, 64));
        }
        Ok(Self {
            bits: (0..n).map(|i| (mask >> (n - 1 - i)) & 1 == 1).collect(),
        })
    }

    /// Inverse of [`MixtureVector::from_mask`]; `None` above 64 datasets.
    pub fn to_mask(&self) -> Option<u64> {
        if self.bits.len() > 64 {
            return None;
        }
        Some(self.bits.iter().fold(0u64, |m, &b| (m << 1) | b as u64))
    }

    pub fn all(n: usize) -> Result<Self> {
        Self::new(vec![true; n])
    }

    pub fn singleton(i: usize, n: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::out_of_range("dataset index", i, 0, n.saturating_sub(1)));
        }
        let mut bits = vec![false; n];
        bits[i] = true;
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// `|S_alpha|`, the number of selected datasets.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_singleton(&self) -> bool {
        self.count() == 1
    }

    /// Indices of the selected datasets, ascending.
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    fn require_nonempty(&self, n: usize) -> Result<()> {
        if self.bits.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.bits.len(),
            });
        }
        if self.count() == 0 {
            return Err(Error::EmptyMixture);
        }
        Ok(())
    }
}

impl fmt::Display for MixtureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for MixtureVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::InvalidMixture(s.to_string())),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits).map_err(|_| Error::InvalidMixture(s.to_string()))
    }
}

impl Serialize for MixtureVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixtureVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The `N` individually fine-tuned checkpoints; list order fixes bit order.
#[derive(Debug, Clone)]
pub struct ModelBank {
    models: Vec<Checkpoint>,
    schema: TensorSchema,
    names: Vec<String>,
}

impl ModelBank {
    pub fn new(models: Vec<Checkpoint>, names: Vec<String>) -> Result<Self> {
        let schema = validate_bank(&models)?;
        if names.len() != models.len() {
            return Err(Error::LengthMismatch {
                expected: models.len(),
                actual: names.len(),
            });
        }
        Ok(Self {
            models,
            schema,
            names,
        })
    }

    /// Bank with names `D1..DN`.
    pub fn unnamed(models: Vec<Checkpoint>) -> Result<Self> {
        let names = (1..=models.len()).map(|i| format!("D{i}")).collect();
        Self::new(models, names)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[Checkpoint] {
        &self.models
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn schema(&self) -> &TensorSchema {
        &self.schema
    }

    pub fn selected_names(&self, alpha: &MixtureVector) -> Vec<&str> {
        alpha.selected().map(|i| self.names[i].as_str()).collect()
    }

    fn num_parameters(&self) -> usize {
        self.schema.values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Adds `scale * model[i]` into a flat accumulator in schema order.
    fn accumulate(&self, acc: &mut [f64], i: usize, scale: f64) {
        let mut offset = 0;
        for t in self.models[i].tensors.values() {
            let dst = &mut acc[offset..offset + t.numel()];
            if scale == 1.0 {
                for (a, &v) in dst.iter_mut().zip(t.data()) {
                    *a += v as f64;
                }
            } else if scale == -1.0 {
                for (a, &v) in dst.iter_mut().zip(t.data()) {
                    *a -= v as f64;
                }
            } else {
                for (a, &v) in dst.iter_mut().zip(t.data()) {
                    *a += scale * v as f64;
                }
            }
            offset += t.numel();
        }
    }

    /// Builds a checkpoint from a flat sum divided by `denom`.
    fn emit(&self, acc: &[f64], denom: f64) -> Checkpoint {
        let mut offset = 0;
        let tensors = self
            .schema
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = acc[offset..offset + n]
                    .iter()
                    .map(|&s| (s / denom) as f32)
                    .collect();
                offset += n;
                (name.clone(), Tensor::new(shape.clone(), data).expect("schema shape"))
            })
            .collect();
        Checkpoint {
            tensors,
            metadata: None,
        }
    }

    fn full_sum(&self, alpha: &MixtureVector) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.num_parameters()];
        for i in alpha.selected() {
            self.accumulate(&mut acc, i, 1.0);
        }
        acc
    }
}

/// Uniform average of the selected models, summed in ascending index order
/// in f64 and rounded once to f32.
pub fn merge_uniform(bank: &ModelBank, alpha: &MixtureVector) -> Result<Checkpoint> {
    alpha.require_nonempty(bank.len())?;
    let acc = bank.full_sum(alpha);
    Ok(bank.emit(&acc, alpha.count() as f64))
}

/// Convex combination of the bank with non-negative weights, normalized
/// internally.
///
/// Weights are rescaled by their maximum before accumulation, so equal
/// weights over a support reproduce [`merge_uniform`] bit for bit.
pub fn merge_weighted(bank: &ModelBank, weights: &[f64]) -> Result<Checkpoint> {
    if weights.len() != bank.len() {
        return Err(Error::LengthMismatch {
            expected: bank.len(),
            actual: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or non-finite")));
    }
    let max = weights.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    let mut acc = vec![0.0f64; bank.num_parameters()];
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let scaled = w / max;
        bank.accumulate(&mut acc, i, scaled);
        total += scaled;
    }
    Ok(bank.emit(&acc, total))
}

/// All non-empty mixtures over `n` datasets in binary-reflected Gray-code
/// order: entry `i` (for `i = 1..2^n`) is `g = i ^ (i >> 1)` written as an
/// `n`-bit string, most significant bit first.
pub fn gray_code_order(n: usize) -> Result<GrayCodeOrder> {
    if !(1..=MAX_GRAY_N).contains(&n) {
        return Err(Error::out_of_range("N", n, 1, MAX_GRAY_N));
    }
    Ok(GrayCodeOrder {
        n,
        next: 1,
        end: 1u64 << n,
    })
}

/// [`gray_code_order`] collected into a vector.
pub fn all_mixtures(n: usize) -> Result<Vec<MixtureVector>> {
    Ok(gray_code_order(n)?.collect())
}

#[derive(Debug, Clone)]
pub struct GrayCodeOrder {
    n: usize,
    next: u64,
    end: u64,
}

impl Iterator for GrayCodeOrder {
    type Item = MixtureVector;

    fn next(&mut self) -> Option<MixtureVector> {
        if self.next >= self.end {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(MixtureVector::from_mask(i ^ (i >> 1), self.n).expect("n checked"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for GrayCodeOrder {}

/// Streams `(alpha, merge_uniform(bank, alpha))` for each mixture of an
/// order, updating a running sum on single-bit transitions and rebuilding
/// it otherwise.
pub struct SubsetMerges<'a, I> {
    bank: &'a ModelBank,
    order: I,
    acc: Vec<f64>,
    current: Option<MixtureVector>,
    emitted: u64,
}

/// Incremental merge stream over `order`.
pub fn subset_merges<'a, I>(bank: &'a ModelBank, order: I) -> SubsetMerges<'a, I::IntoIter>
where
    I: IntoIterator<Item = MixtureVector>,
{
    SubsetMerges {
        bank,
        order: order.into_iter(),
        acc: vec![0.0; bank.num_parameters()],
        current: None,
        emitted: 0,
    }
}

impl<I> SubsetMerges<'_, I> {
    fn advance(&mut self, alpha: &MixtureVector) -> Result<()> {
        alpha.require_nonempty(self.bank.len())?;
        let flip = match &self.current {
            Some(prev) if self.emitted % REFRESH_INTERVAL != 0 => {
                let mut diff = prev
                    .bits()
                    .iter()
                    .zip(alpha.bits())
                    .enumerate()
                    .filter(|(_, (a, b))| a != b)
                    .map(|(i, _)| i);
                match (diff.next(), diff.next()) {
                    (Some(i), None) => Some(i),
                    _ => None,
                }
            }
            _ => None,
        };
        match flip {
            Some(i) => {
                let sign = if alpha.get(i) { 1.0 } else { -1.0 };
                self.bank.accumulate(&mut self.acc, i, sign);
            }
            None if self.current.as_ref() == Some(alpha) && self.emitted % REFRESH_INTERVAL != 0 => {}
            None => {
                self.acc.iter_mut().for_each(|a| *a = 0.0);
                for i in alpha.selected() {
                    self.bank.accumulate(&mut self.acc, i, 1.0);
                }
            }
        }
        self.current = Some(alpha.clone());
        Ok(())
    }
}

impl<I> Iterator for SubsetMerges<'_, I>
where
    I: Iterator<Item = MixtureVector>,
{
    type Item = Result<(MixtureVector, Checkpoint)>;

    fn next(&mut self) -> Option<Self::Item> {
        let alpha = self.order.next()?;
        if let Err(e) = self.advance(&alpha) {
            return Some(Err(e));
        }
        self.emitted += 1;
        let merged = self.bank.emit(&self.acc, alpha.count() as f64);
        Some(Ok((alpha, merged)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}
