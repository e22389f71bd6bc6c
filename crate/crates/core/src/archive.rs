//! Tensor Archive v1: a flat container of named little-endian f32 tensors.
//!
//! Layout:
//!
//! ```text
//! [u64 LE header length n][n bytes of minified JSON header][payload]
//! ```
//!
//! The header is `{"meta": {..}, "tensors": {name: {"dtype": "f32", "offsets": [b, e], "shape": [..]}}}`
//! with keys sorted. Offsets are relative to the payload start, tensors are laid
//! out back to back in lexicographic name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Meta key holding the serialized `ModelConfig`.
pub const MODEL_CONFIG_KEY: &str = "model_config";

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Data(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Data(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named tensors plus string metadata. Iteration is in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(meta: BTreeMap<String, String>) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    /// Inserts (or replaces) a tensor, rejecting non-finite data.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !tensor.is_finite() {
            return Err(Error::Data(format!("tensor {name:?} contains NaN or Inf")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Compat(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Ok iff both archives hold the same names with identical shapes.
    pub fn check_compatible(&self, other: &TensorArchive) -> Result<()> {
        for name in self.tensors.keys() {
            if !other.tensors.contains_key(name) {
                return Err(Error::Compat(format!("tensor {name:?} missing from other archive")));
            }
        }
        for (name, t) in &other.tensors {
            let Some(mine) = self.tensors.get(name) else {
                return Err(Error::Compat(format!("tensor {name:?} missing from archive")));
            };
            if mine.shape != t.shape {
                return Err(Error::Compat(format!(
                    "tensor {name:?} shape {:?} vs {:?}",
                    mine.shape, t.shape
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::Data(format!("tensor {name:?} contains NaN or Inf")));
            }
            let end = offset + 4 * t.numel();
            entries.insert(
                name.clone(),
                json!({"dtype": "f32", "shape": t.shape, "offsets": [offset, end]}),
            );
            offset = end;
        }
        let meta: Map<String, Value> = self
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        let header = json!({"tensors": entries, "meta": meta});
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncation("file shorter than header length prefix".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncation(format!("header length {n} exceeds file size")))?;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let payload = &bytes[header_end..];

        let obj = header
            .as_object()
            .ok_or_else(|| Error::Format("header is not a JSON object".into()))?;
        let entries = obj
            .get("tensors")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Format("header lacks a \"tensors\" object".into()))?;
        let mut meta = BTreeMap::new();
        if let Some(m) = obj.get("meta") {
            let m = m
                .as_object()
                .ok_or_else(|| Error::Format("\"meta\" is not an object".into()))?;
            for (k, v) in m {
                let v = v
                    .as_str()
                    .ok_or_else(|| Error::Format(format!("meta value {k:?} is not a string")))?;
                meta.insert(k.clone(), v.to_string());
            }
        }

        let mut tensors = BTreeMap::new();
        let mut expected_begin = 0usize;
        // serde_json maps iterate in sorted key order, matching the layout rule.
        for (name, entry) in entries {
            let (shape, begin, end) = parse_entry(name, entry)?;
            if begin != expected_begin {
                return Err(Error::Format(format!(
                    "tensor {name:?} starts at {begin}, expected {expected_begin}"
                )));
            }
            let numel: usize = shape.iter().product();
            if end < begin || end - begin != 4 * numel {
                return Err(Error::Format(format!(
                    "tensor {name:?} offsets [{begin}, {end}] do not match shape {shape:?}"
                )));
            }
            if end > payload.len() {
                return Err(Error::Truncation(format!(
                    "tensor {name:?} ends at {end}, payload has {} bytes",
                    payload.len()
                )));
            }
            let data: Vec<f32> = payload[begin..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            if !tensor.is_finite() {
                return Err(Error::Data(format!("tensor {name:?} contains NaN or Inf")));
            }
            tensors.insert(name.clone(), tensor);
            expected_begin = end;
        }
        if payload.len() != expected_begin {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                payload.len() - expected_begin
            )));
        }
        Ok(Self { tensors, meta })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn parse_entry(name: &str, entry: &Value) -> Result<(Vec<usize>, usize, usize)> {
    let bad = |what: &str| Error::Format(format!("tensor {name:?}: {what}"));
    let entry = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
    match entry.get("dtype").and_then(Value::as_str) {
        Some("f32") => {}
        Some(other) => return Err(bad(&format!("unsupported dtype {other:?}"))),
        None => return Err(bad("missing dtype")),
    }
    let shape = entry
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|v| v.as_u64().filter(|&d| d > 0).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must be positive integers"))?;
    let offsets = entry
        .get("offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("offsets must be [begin, end]"))?;
    let begin = offsets[0].as_u64().ok_or_else(|| bad("bad begin offset"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("bad end offset"))? as usize;
    Ok((shape, begin, end))
}

/// Reads an archive from disk.
pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    TensorArchive::read(path)
}

/// Writes an archive in canonical form. Nothing is written if validation fails.
pub fn write_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    archive.write(path)
}

/// τ = θ_fine − θ_base, elementwise per tensor.
pub fn task_vector(fine_tuned: &TensorArchive, base: &TensorArchive) -> Result<TensorArchive> {
    base.check_compatible(fine_tuned)?;
    let mut meta = base.meta.clone();
    meta.insert("kind".into(), "task_vector".into());
    let mut out = TensorArchive::with_meta(meta);
    for (name, b) in &base.tensors {
        let f = &fine_tuned.tensors[name];
        let data = f.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        out.insert(name.clone(), Tensor::new(b.shape.clone(), data)?)?;
    }
    Ok(out)
}

/// `out[n] = base[n] + Σ_t coeffs[n][t] · vectors[t][n]`, accumulated in f64.
pub fn linear_combine(
    base: &TensorArchive,
    vectors: &[TensorArchive],
    coeffs: &BTreeMap<String, Vec<f64>>,
) -> Result<TensorArchive> {
    for v in vectors {
        base.check_compatible(v)?;
    }
    let mut out = TensorArchive::with_meta(base.meta.clone());
    for (name, b) in &base.tensors {
        let c = coeffs
            .get(name)
            .ok_or_else(|| Error::Coeff(format!("no coefficients for {name:?}")))?;
        if c.len() != vectors.len() {
            return Err(Error::Coeff(format!(
                "{name:?} has {} coefficients for {} vectors",
                c.len(),
                vectors.len()
            )));
        }
        let mut acc: Vec<f64> = b.data.iter().map(|&x| x as f64).collect();
        for (v, &ct) in vectors.iter().zip(c) {
            for (a, &x) in acc.iter_mut().zip(&v.tensors[name].data) {
                *a += ct * x as f64;
            }
        }
        let data = acc.into_iter().map(|x| x as f32).collect();
        out.insert(name.clone(), Tensor::new(b.shape.clone(), data)?)?;
    }
    Ok(out)
}

/// Same coefficient vector for every tensor name.
pub fn uniform_coeffs(archive: &TensorArchive, coeffs: &[f64]) -> BTreeMap<String, Vec<f64>> {
    archive.names().map(|n| (n.to_string(), coeffs.to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, shape: Vec<usize>, data: Vec<f32>) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        a
    }

    #[test]
    fn smallest_archive_round_trips() {
        let a = single("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = a.to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + n + 16);
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.get("w").unwrap().shape(), &[2, 2]);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_archive_header() {
        let mut a = TensorArchive::new();
        a.meta_mut().insert("k".into(), "v".into());
        let bytes = a.to_bytes().unwrap();
        let header: Value = serde_json::from_slice(&bytes[8..]).unwrap();
        assert_eq!(header, json!({"tensors": {}, "meta": {"k": "v"}}));
        assert_eq!(
            std::str::from_utf8(&bytes[8..]).unwrap(),
            r#"{"meta":{"k":"v"},"tensors":{}}"#
        );
    }

    #[test]
    fn header_offset_past_payload_is_truncation() {
        let a = single("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = a.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(TensorArchive::from_bytes(cut), Err(Error::Truncation(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let mut bytes = 5u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"nope!");
        assert!(matches!(TensorArchive::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(TensorArchive::from_bytes(&bytes), Err(Error::Truncation(_))));
    }

    #[test]
    fn nan_rejected_on_read_and_write() {
        assert!(matches!(single_raw_nan(), Err(Error::Data(_))));
        let mut a = single("w", vec![1], vec![1.0]);
        a.tensors.get_mut("w").unwrap().data[0] = f32::NAN;
        assert!(matches!(a.to_bytes(), Err(Error::Data(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tza");
        assert!(write_archive(&a, &path).is_err());
        assert!(!path.exists());
    }

    fn single_raw_nan() -> Result<TensorArchive> {
        let good = single("w", vec![1], vec![1.0]).to_bytes().unwrap();
        let mut bytes = good.clone();
        let l = bytes.len();
        bytes[l - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        TensorArchive::from_bytes(&bytes)
    }

    #[test]
    fn task_vector_cases() {
        let ft = single("w", vec![2], vec![1.0, 2.0]);
        let base = single("w", vec![2], vec![0.5, 2.0]);
        let tau = task_vector(&ft, &base).unwrap();
        assert_eq!(tau.get("w").unwrap().data(), &[0.5, 0.0]);
        assert_eq!(tau.meta()["kind"], "task_vector");

        let same = task_vector(&base, &base).unwrap();
        assert!(same.get("w").unwrap().data().iter().all(|&x| x == 0.0));

        let mut bigger = ft.clone();
        bigger.insert("v", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(task_vector(&bigger, &base), Err(Error::Compat(_))));
    }

    #[test]
    fn linear_combine_cases() {
        let base = single("n", vec![1], vec![1.0]);
        let v1 = single("n", vec![1], vec![2.0]);
        let v2 = single("n", vec![1], vec![4.0]);
        let mut coeffs = BTreeMap::new();
        coeffs.insert("n".to_string(), vec![0.5, 0.25]);
        let out = linear_combine(&base, &[v1.clone(), v2.clone()], &coeffs).unwrap();
        assert_eq!(out.get("n").unwrap().data(), &[3.0]);

        let zero = uniform_coeffs(&base, &[0.0, 0.0]);
        assert_eq!(linear_combine(&base, &[v1.clone(), v2.clone()], &zero).unwrap(), base);

        coeffs.insert("n".to_string(), vec![0.5]);
        assert!(matches!(
            linear_combine(&base, &[v1.clone(), v2], &coeffs),
            Err(Error::Coeff(_))
        ));
        assert!(matches!(
            linear_combine(&base, &[v1], &BTreeMap::new()),
            Err(Error::Coeff(_))
        ));
    }

    #[test]
    fn single_vector_with_unit_coeff_recovers_fine_tuned() {
        let base = single("w", vec![3], vec![0.1, -0.2, 0.3]);
        let ft = single("w", vec![3], vec![0.15, -0.5, 1.0]);
        let tau = task_vector(&ft, &base).unwrap();
        let out = linear_combine(&base, &[tau], &uniform_coeffs(&base, &[1.0])).unwrap();
        assert_eq!(out.get("w").unwrap().data(), ft.get("w").unwrap().data());
    }
}
