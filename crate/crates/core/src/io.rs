//! FLT1 tensor files and model checkpoints.
//!
//! A FLT1 record is the magic `FLT1`, a dtype byte (0 = f32, 1 = f64), four
//! little-endian u32 dims `(n, c, h, w)` and the row-major little-endian values.
//! A checkpoint is a directory holding `params.flt1` (records back to back)
//! and `manifest.json` naming each record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::FlattenConfig;
use crate::model::FlatteNet;
use crate::tensor::{DType, Dims, Scalar, Tensor};
use crate::toylab::{History, ToyBackboneSpec};

pub const MAGIC: &[u8; 4] = b"FLT1";
pub const HEADER_LEN: usize = 4 + 1 + 16;

pub const CHECKPOINT_FORMAT: &str = "flattenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.flt1";

fn format_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Format(detail.into()))
}

pub fn encode_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    for d in t.dims().as_array() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

/// A decoded record of either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

fn header(bytes: &[u8]) -> Result<(DType, Dims, usize)> {
    if bytes.len() < HEADER_LEN {
        return format_err(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return format_err(format!("bad magic {:?}", &bytes[..4]));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2), dim(3));
    let payload = dims
        .as_array()
        .iter()
        .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims} overflow")))?;
    if bytes.len() - HEADER_LEN < payload {
        return format_err(format!("payload truncated: {} of {payload} bytes", bytes.len() - HEADER_LEN));
    }
    Ok((dtype, dims, HEADER_LEN + payload))
}

fn values<T: Scalar>(dims: Dims, bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::from_vec(dims, data)
}

/// Decodes the first record and returns it with the remaining bytes.
pub fn read_record(bytes: &[u8]) -> Result<(AnyTensor, &[u8])> {
    let (dtype, dims, len) = header(bytes)?;
    let body = &bytes[HEADER_LEN..len];
    let t = match dtype {
        DType::F32 => AnyTensor::F32(values(dims, body)?),
        DType::F64 => AnyTensor::F64(values(dims, body)?),
    };
    Ok((t, &bytes[len..]))
}

/// Decodes a buffer holding exactly one record.
pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, rest) = read_record(bytes)?;
    if !rest.is_empty() {
        return format_err(format!("{} trailing bytes", rest.len()));
    }
    Ok(t)
}

/// Decodes a single record of dtype `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, dims, len) = header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::DType {
            expected: T::DTYPE.name(),
            found: dtype.name(),
        });
    }
    if len != bytes.len() {
        return format_err(format!("{} trailing bytes", bytes.len() - len));
    }
    values(dims, &bytes[HEADER_LEN..])
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_any(&fs::read(path)?)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: [usize; 4],
    /// Byte offset of the record inside `params.flt1`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: FlattenConfig,
    pub backbone: Option<ToyBackboneSpec>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub history: Option<History>,
}

fn running_stat_names(i: usize) -> (String, String) {
    (format!("bn{i}.running_mean"), format!("bn{i}.running_var"))
}

/// Every parameter followed by the batch-norm running statistics, in a fixed order.
fn model_tensors<T: Scalar>(model: &FlatteNet<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out: Vec<(String, Tensor<T>)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    for (i, bn) in model.batch_norms().into_iter().enumerate() {
        let c = bn.state.running_mean.len();
        let (m, v) = running_stat_names(i);
        out.push((m, Tensor::from_vec((1, c, 1, 1), bn.state.running_mean.clone())?));
        out.push((v, Tensor::from_vec((1, c, 1, 1), bn.state.running_var.clone())?));
    }
    Ok(out)
}

/// Writes `manifest.json` and `params.flt1` into `dir`, creating it if needed.
pub fn save_checkpoint<T: Scalar>(model: &FlatteNet<T>, dir: impl AsRef<Path>, history: Option<&History>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model_tensors(model)? {
        tensors.push(TensorEntry {
            name,
            dims: t.dims().as_array(),
            offset: blob.len(),
        });
        encode_into(&t, &mut blob)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.name().into(),
        config: model.config().clone(),
        backbone: model.backbone.as_ref().map(|b| b.spec.clone()),
        tensors,
        history: history.cloned(),
    };
    fs::write(dir.join(PARAMS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(dir.as_ref().join(MANIFEST_FILE))?)?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return format_err(format!("unsupported checkpoint {} v{}", m.format, m.version));
    }
    Ok(m)
}

/// Rebuilds the model recorded in `dir` and restores every tensor.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(FlatteNet<T>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let found = match manifest.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return format_err(format!("unknown checkpoint dtype {other:?}")),
    };
    if found != T::DTYPE {
        return Err(Error::DType {
            expected: T::DTYPE.name(),
            found: found.name(),
        });
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let mut model = FlatteNet::<T>::new(&manifest.config, manifest.backbone.as_ref(), 0)?;
    let expected: Vec<String> = model_tensors(&model)?.into_iter().map(|(n, _)| n).collect();
    let names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    if names != expected {
        return format_err("checkpoint tensors do not match the model described by its manifest");
    }
    let read = |e: &TensorEntry| -> Result<Tensor<T>> {
        let bytes = blob.get(e.offset..).ok_or_else(|| Error::Format(format!("{}: offset past end", e.name)))?;
        let (dtype, dims, len) = header(bytes)?;
        if dtype != T::DTYPE || dims.as_array() != e.dims {
            return format_err(format!("{}: record is {dtype} {dims}, manifest says {:?}", e.name, e.dims));
        }
        values(dims, &bytes[HEADER_LEN..len])
    };
    let n_params = model.store.len();
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        loaded.push(read(e)?);
    }
    let mut it = loaded.into_iter();
    for p in model.store.iter_mut() {
        let t = it.next().expect("length checked");
        if t.dims() != p.value.dims() {
            return format_err(format!("{}: dims {} do not fit {}", p.name, t.dims(), p.value.dims()));
        }
        p.value = t;
        p.zero_grad();
    }
    debug_assert_eq!(manifest.tensors.len() - n_params, 2 * model.batch_norms().len());
    for bn in model.batch_norms_mut() {
        let (m, v) = (it.next().expect("length checked"), it.next().expect("length checked"));
        if m.numel() != bn.state.running_mean.len() {
            return format_err("running statistics do not fit the model");
        }
        bn.state.running_mean = m.into_data();
        bn.state.running_var = v.into_data();
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::shipped;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec((1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..5], b"FLT1\x00");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), HEADER_LEN + 8);
    }

    #[test]
    fn round_trip_both_dtypes() {
        let a = Tensor::<f64>::uniform((2, 3, 4, 5), 1.0, 3);
        let b = encode(&a).unwrap();
        assert_eq!(decode::<f64>(&b).unwrap(), a);
        assert_eq!(decode_any(&b).unwrap().encode().unwrap(), b);
        let s: Tensor<f32> = a.cast();
        assert_eq!(decode::<f32>(&encode(&s).unwrap()).unwrap(), s);
        assert!(matches!(decode::<f32>(&b), Err(Error::DType { .. })));
    }

    #[test]
    fn malformed_rejected() {
        let b = encode(&Tensor::<f64>::ones((1, 1, 2, 2))).unwrap();
        assert!(decode_any(&b[..b.len() - 1]).is_err());
        assert!(decode_any(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_any(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 7;
        assert!(decode_any(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(decode_any(&extra).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = shipped::load("table1").unwrap();
        cfg.c_in = 64;
        cfg.layers[0].g1 = 8;
        cfg.layers[0].g2 = 8;
        cfg.layers[0].g3 = 8;
        cfg.predictor.classes = 3;
        let mut model = FlatteNet::<f64>::new(&cfg, None, 4).unwrap();
        model.batch_norms_mut()[0].state.running_mean[1] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), None).unwrap();
        let (back, m) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(m.config, cfg);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.batch_norms()[0].state.running_mean[1], 0.5);
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
