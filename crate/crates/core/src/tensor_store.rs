//! MTM container v1: reading, writing and validating checkpoints.
//!
//! The layout is byte-compatible with safetensors restricted to `F32`:
//!
//! ```text
//! [0, 8)          u64 little-endian header length N
//! [8, 8 + N)      UTF-8 JSON header, space padded to a multiple of 8
//! [8 + N, ..)     packed little-endian f32 data, row-major
//! ```
//!
//! Header entries map a tensor name to
//! `{"dtype":"F32","shape":[..],"data_offsets":[begin,end]}`; an optional
//! `"__metadata__"` entry holds a string map. Tensors are written in
//! lexicographic name order, so identical checkpoints produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const DTYPE_F32: &str = "F32";
/// Tensor name used by embedding files.
pub const EMBEDDINGS_KEY: &str = "embeddings";

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape("<tensor>", &shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }
}

fn check_shape(name: &str, shape: &[usize], len: usize) -> Result<()> {
    let invalid = |reason: String| Error::InvalidTensor {
        name: name.to_string(),
        reason,
    };
    if shape.is_empty() {
        return Err(invalid("shape must be non-empty".into()));
    }
    if shape.contains(&0) {
        return Err(invalid(format!("shape {shape:?} has a zero extent")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid(format!("shape {shape:?} overflows")))?;
    if numel != len {
        return Err(invalid(format!(
            "shape {shape:?} needs {numel} elements, found {len}"
        )));
    }
    Ok(())
}

/// Names and shapes shared by every checkpoint of a bank.
pub type TensorSchema = BTreeMap<String, Vec<usize>>;

/// Named collection of f32 tensors. Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut ckpt = Self::new();
        for (name, t) in tensors {
            ckpt.insert(name, t)?;
        }
        Ok(ckpt)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn schema(&self) -> TensorSchema {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.shape.clone()))
            .collect()
    }

    /// Total element count `d` across all tensors.
    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from("{");
        let mut offset = 0usize;
        let mut first = true;
        if let Some(meta) = &self.metadata {
            header.push_str(&serde_json::to_string(METADATA_KEY)?);
            header.push(':');
            header.push_str(&serde_json::to_string(meta)?);
            first = false;
        }
        for (name, t) in &self.tensors {
            check_shape(name, &t.shape, t.data.len())?;
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
            if !first {
                header.push(',');
            }
            first = false;
            let end = offset + 4 * t.data.len();
            header.push_str(&format!(
                "{}:{{\"dtype\":\"{DTYPE_F32}\",\"shape\":{},\"data_offsets\":[{offset},{end}]}}",
                serde_json::to_string(name)?,
                serde_json::to_string(&t.shape)?,
            ));
            offset = end;
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedHeader);
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let file_len = bytes.len() as u64;
        if header_len > file_len - 8 {
            return Err(Error::HeaderTooLarge {
                header_len,
                file_len,
            });
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::InvalidHeader(format!("not UTF-8: {e}")))?;
        let entries: OrderedEntries = serde_json::from_str(header)
            .map_err(|e| Error::InvalidHeader(e.to_string()))?;
        let data = &bytes[header_end..];

        let mut metadata = None;
        let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (name, value) in entries.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateTensor(name));
            }
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> = serde_json::from_value(value)
                    .map_err(|e| Error::InvalidHeader(format!("__metadata__: {e}")))?;
                metadata = Some(meta);
                continue;
            }
            let info: TensorInfo = serde_json::from_value(value)
                .map_err(|e| Error::InvalidHeader(format!("tensor {name}: {e}")))?;
            if info.dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype {
                    name,
                    dtype: info.dtype,
                });
            }
            let [begin, end] = info.data_offsets;
            if end < begin {
                return Err(Error::InvalidHeader(format!(
                    "tensor {name}: data_offsets [{begin},{end}] are reversed"
                )));
            }
            let numel = info.shape.iter().product::<usize>();
            if end - begin != numel * 4 {
                return Err(Error::InvalidTensor {
                    name,
                    reason: format!(
                        "data_offsets [{begin},{end}] do not hold {numel} f32 values"
                    ),
                });
            }
            check_shape(&name, &info.shape, numel)?;
            specs.push((name, info.shape, begin, end));
        }

        specs.sort_by_key(|s| (s.2, s.3));
        let mut cursor = 0usize;
        for (name, _, begin, end) in &specs {
            if *begin < cursor {
                return Err(Error::OverlappingOffsets(name.clone()));
            }
            if *begin > cursor {
                return Err(Error::GappedOffsets(name.clone()));
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return Err(Error::DataRegionMismatch {
                declared: cursor,
                actual: data.len(),
            });
        }

        let mut tensors = BTreeMap::new();
        for (name, shape, begin, end) in specs {
            let values = data[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor { shape, data: values });
        }
        Ok(Self { tensors, metadata })
    }
}

#[derive(Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// JSON object entries in file order, duplicates kept.
struct OrderedEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

/// Returns the schema shared by all checkpoints, or names the first mismatch.
pub fn validate_bank(ckpts: &[Checkpoint]) -> Result<TensorSchema> {
    let first = ckpts.first().ok_or(Error::EmptyBank)?;
    let schema = first.schema();
    for (i, ckpt) in ckpts.iter().enumerate().skip(1) {
        let names_a: Vec<&String> = schema.keys().collect();
        let names_b: Vec<&String> = ckpt.tensors.keys().collect();
        if names_a != names_b {
            let missing = names_a.iter().find(|n| !ckpt.tensors.contains_key(n.as_str()));
            let extra = names_b.iter().find(|n| !schema.contains_key(n.as_str()));
            let detail = match (missing, extra) {
                (Some(m), _) => format!("checkpoint {i} lacks {m}"),
                (None, Some(e)) => format!("checkpoint {i} has unexpected {e}"),
                (None, None) => format!("checkpoint {i}"),
            };
            return Err(Error::NameMismatch(detail));
        }
        for (name, shape) in &schema {
            if ckpt.tensors[name].shape != *shape {
                return Err(Error::ShapeMismatch(name.clone()));
            }
        }
    }
    Ok(schema)
}

/// Per-sample embedding vectors, shape `[num_samples, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Tensor,
    pub source_name: String,
}

impl EmbeddingSet {
    pub fn new(embeddings: Tensor, source_name: impl Into<String>) -> Result<Self> {
        let source_name = source_name.into();
        if embeddings.shape.len() != 2 {
            return Err(Error::InvalidTensor {
                name: EMBEDDINGS_KEY.into(),
                reason: format!("expected rank 2, got shape {:?}", embeddings.shape),
            });
        }
        if embeddings.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(EMBEDDINGS_KEY.into()));
        }
        Ok(Self {
            embeddings,
            source_name,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], source_name: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidTensor {
                name: EMBEDDINGS_KEY.into(),
                reason: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(Tensor::new(vec![rows.len(), dim], data)?, source_name)
    }

    pub fn num_samples(&self) -> usize {
        self.embeddings.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.embeddings.row(i)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.embeddings.data.chunks_exact(self.dim())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.embeddings
    }

    /// Multiset union of several sets, in order.
    pub fn concat(sets: &[&EmbeddingSet], source_name: impl Into<String>) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::InvalidTensor {
            name: EMBEDDINGS_KEY.into(),
            reason: "nothing to concatenate".into(),
        })?;
        let dim = first.dim();
        let mut data = Vec::new();
        for s in sets {
            if s.dim() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: s.dim(),
                });
            }
            data.extend_from_slice(&s.embeddings.data);
        }
        let n = data.len() / dim;
        Self::new(Tensor::new(vec![n, dim], data)?, source_name)
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert(EMBEDDINGS_KEY, set.embeddings.clone())?;
    ckpt.metadata = Some(BTreeMap::from([(
        "source_name".to_string(),
        set.source_name.clone(),
    )]));
    write_checkpoint(&ckpt, path)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut ckpt = read_checkpoint(path)?;
    let tensor = ckpt
        .tensors
        .remove(EMBEDDINGS_KEY)
        .ok_or_else(|| Error::NameMismatch(format!("{} has no \"embeddings\" tensor", path.display())))?;
    let name = ckpt
        .metadata
        .as_ref()
        .and_then(|m| m.get("source_name").cloned())
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    EmbeddingSet::new(tensor, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> Checkpoint {
        Checkpoint::from_tensors(
            entries
                .iter()
                .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap())),
        )
        .unwrap()
    }

    /// Builds a container by hand, independently of the writer.
    fn raw_container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn single_tensor_bytes_match_reference_encoding() {
        let c = ckpt(&[("w", vec![2], vec![1.0, 2.0])]);
        let bytes = c.to_bytes().unwrap();
        let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let padded = format!("{header:<width$}", width = header.len().div_ceil(8) * 8);
        let expected = raw_container(&padded, &[0, 0, 0x80, 0x3F, 0, 0, 0, 0x40]);
        assert_eq!(bytes, expected);
        assert_eq!(&bytes[..8], &(padded.len() as u64).to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let c = ckpt(&[("w", vec![2], vec![1.0, f32::NAN])]);
        let err = c.to_bytes().unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = ckpt(&[("w", vec![1], vec![1.0])]).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..4]).unwrap_err();
        assert_eq!(err.to_string(), "truncated header");
    }

    #[test]
    fn header_longer_than_file_is_rejected() {
        let mut bytes = ckpt(&[("w", vec![1], vec![1.0])]).to_bytes().unwrap();
        bytes[..8].copy_from_slice(&1_000u64.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::HeaderTooLarge { .. })
        ));
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let bytes = raw_container(header, &[0u8; 12]);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("overlapping offsets"), "{err}");
    }

    #[test]
    fn gapped_offsets_are_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#;
        let bytes = raw_container(header, &[0u8; 12]);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::GappedOffsets(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let bytes = raw_container(header, &[0u8; 8]);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::DataRegionMismatch { .. })
        ));
    }

    #[test]
    fn unknown_dtype_and_duplicates_are_rejected() {
        let header = r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&raw_container(header, &[0u8; 4])),
            Err(Error::UnsupportedDtype { .. })
        ));
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&raw_container(header, &[0u8; 8])),
            Err(Error::DuplicateTensor(_))
        ));
    }

    #[test]
    fn zero_extent_is_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[0],"data_offsets":[0,0]}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(&raw_container(header, &[])),
            Err(Error::InvalidTensor { .. })
        ));
    }

    #[test]
    fn metadata_round_trips() {
        let mut c = ckpt(&[("b", vec![1], vec![3.0]), ("a", vec![2, 1], vec![1.0, -2.5])]);
        c.metadata = Some(BTreeMap::from([("k".into(), "v".into())]));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtm");
        let c = ckpt(&[("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])]);
        write_checkpoint(&c, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn validate_bank_cases() {
        let a = ckpt(&[("w", vec![2, 2], vec![0.0; 4])]);
        let schema = validate_bank(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(schema, BTreeMap::from([("w".to_string(), vec![2, 2])]));

        let err = validate_bank(&[ckpt(&[("w", vec![2], vec![0.0; 2])]), ckpt(&[("w", vec![3], vec![0.0; 3])])])
            .unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch at w");

        let err = validate_bank(&[ckpt(&[("w", vec![2], vec![0.0; 2])]), ckpt(&[("v", vec![2], vec![0.0; 2])])])
            .unwrap_err();
        assert!(err.to_string().starts_with("tensor name mismatch"), "{err}");

        assert!(matches!(validate_bank(&[]), Err(Error::EmptyBank)));
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.mtm");
        let set = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], "target").unwrap();
        write_embeddings(&set, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.row(1), &[0.0, 1.0]);
    }
}
