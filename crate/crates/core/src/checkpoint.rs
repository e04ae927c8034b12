//! `SLPM` tensor container and the three files built on it: a model
//! checkpoint, Charlie's bundle and David's bundle.
//!
//! Layout: magic `SLPM`, version u16, tensor count u32, then per tensor the
//! name length u16, UTF-8 name, dtype u8, rank u8, dims as u64 and the
//! little-endian payload. Everything is little-endian. Each file carries one
//! `meta` tensor of dtype `u8` holding JSON.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{Factors, LayerId, PlannedModel};
use crate::linalg::Matrix;
use crate::models::{Activation, Layer, ModelKind, ModelParams};
use crate::protocol::{CharlieLayer, DavidLayer, Topology};
use crate::ring::RingParams;

pub const MAGIC: &[u8; 4] = b"SLPM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an SLPM file")]
    BadMagic,
    #[error("unsupported SLPM version {0}")]
    Version(u16),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("file holds a {found} bundle, expected {expected}")]
    Role { expected: &'static str, found: String },
}

fn tensor_err(name: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Tensor { name: name.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::I64(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Tensor { name: name.into(), dims: vec![v.len() as u64], data: TensorData::F64(v.to_vec()) }
    }

    /// Values as f64; f32 and i64 are widened.
    pub fn to_f64(&self) -> Result<Vec<f64>, CheckpointError> {
        match &self.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::I64(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::U8(_) => Err(tensor_err(&self.name, "byte tensor is not numeric")),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, CheckpointError> {
        if self.dims.len() != 2 {
            return Err(tensor_err(&self.name, format!("rank {} where a matrix is expected", self.dims.len())));
        }
        Matrix::from_vec(self.dims[0] as usize, self.dims[1] as usize, self.to_f64()?)
            .map_err(|e| tensor_err(&self.name, e.to_string()))
    }
}

/// An ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn set_meta<T: Serialize>(&mut self, meta: &T) -> Result<(), CheckpointError> {
        let bytes = serde_json::to_vec(meta)?;
        self.tensors.retain(|t| t.name != "meta");
        self.tensors
            .insert(0, Tensor { name: "meta".into(), dims: vec![bytes.len() as u64], data: TensorData::U8(bytes) });
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T, CheckpointError> {
        match &self.get("meta")?.data {
            TensorData::U8(b) => Ok(serde_json::from_slice(b)?),
            _ => Err(tensor_err("meta", "metadata must be a byte tensor")),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let expected: u64 = t.dims.iter().product();
            if expected != t.data.len() as u64 {
                return Err(tensor_err(&t.name, format!("dims hold {expected} values, payload {}", t.data.len())));
            }
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| tensor_err(&t.name, "name too long"))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| tensor_err(&t.name, "rank too large"))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.data.code(), rank])?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &t.data {
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::I64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = u32::from_le_bytes(read_array(r)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
            let [dtype, rank] = read_array(r)?;
            let dims = (0..rank).map(|_| read_array(r).map(u64::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c <= (1 << 40))
                .ok_or_else(|| tensor_err(&name, "implausible size"))? as usize;
            let width = match dtype {
                0 | 2 => 8,
                1 => 4,
                3 => 1,
                other => return Err(CheckpointError::Dtype(other)),
            };
            let mut raw = Vec::new();
            r.take((count * width) as u64).read_to_end(&mut raw)?;
            if raw.len() != count * width {
                return Err(tensor_err(&name, "truncated payload"));
            }
            let data = match dtype {
                0 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::U8(raw),
            };
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Container { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    id: LayerId,
    activation: Activation,
    bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    role: String,
    kind: ModelKind,
    max_tokens: usize,
    layers: Vec<LayerMeta>,
}

fn optional_vector(c: &Container, name: &str, present: bool) -> Result<Option<Vec<f64>>, CheckpointError> {
    present.then(|| c.get(name).and_then(Tensor::to_f64)).transpose()
}

pub fn model_to_container(model: &ModelParams) -> Result<Container, CheckpointError> {
    let mut c = Container::default();
    c.set_meta(&ModelMeta {
        role: "model".into(),
        kind: model.kind,
        max_tokens: model.max_tokens,
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta { id: l.id, activation: l.activation, bias: l.bias.is_some() })
            .collect(),
    })?;
    for (i, l) in model.layers.iter().enumerate() {
        c.push(Tensor::matrix(format!("layer.{i}.weight"), &l.weight));
        if let Some(b) = &l.bias {
            c.push(Tensor::vector(format!("layer.{i}.bias"), b));
        }
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<ModelParams, CheckpointError> {
    check_role(c, "model")?;
    let meta: ModelMeta = c.meta()?;
    let layers = meta
        .layers
        .iter()
        .enumerate()
        .map(|(i, lm)| {
            Ok(Layer {
                id: lm.id,
                weight: c.get(&format!("layer.{i}.weight"))?.to_matrix()?,
                bias: optional_vector(c, &format!("layer.{i}.bias"), lm.bias)?,
                activation: lm.activation,
            })
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    Ok(ModelParams { kind: meta.kind, layers, max_tokens: meta.max_tokens })
}

pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    model_to_container(model)?.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams, CheckpointError> {
    model_from_container(&Container::load(path)?)
}

#[derive(Deserialize)]
struct RoleOnly {
    role: String,
}

fn check_role(c: &Container, expected: &'static str) -> Result<(), CheckpointError> {
    expect_role(&c.meta::<RoleOnly>()?.role, expected)
}

fn expect_role(found: &str, expected: &'static str) -> Result<(), CheckpointError> {
    if found == expected {
        Ok(())
    } else {
        Err(CheckpointError::Role { expected, found: found.to_string() })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CharlieLayerMeta {
    activation: Activation,
    factors: bool,
    bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta<L> {
    role: String,
    ring: RingParams,
    topology: Topology,
    layers: Vec<L>,
}

/// Everything Charlie needs to serve a planned model.
#[derive(Debug, Clone, PartialEq)]
pub struct CharlieBundle {
    pub ring: RingParams,
    pub topology: Topology,
    pub layers: Vec<Option<CharlieLayer>>,
}

impl CharlieBundle {
    pub fn from_planned(planned: &PlannedModel, ring: RingParams) -> Self {
        let topology = Topology::from_planned(planned);
        let layers = CharlieLayer::extract(planned, &topology);
        CharlieBundle { ring, topology, layers }
    }

    pub fn to_container(&self) -> Result<Container, CheckpointError> {
        let mut c = Container::default();
        let metas: Vec<Option<CharlieLayerMeta>> = self
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|l| CharlieLayerMeta {
                    activation: l.activation,
                    factors: l.factors.is_some(),
                    bias: l.bias.is_some(),
                })
            })
            .collect();
        c.set_meta(&BundleMeta {
            role: "charlie".into(),
            ring: self.ring,
            topology: self.topology.clone(),
            layers: metas,
        })?;
        for (i, l) in self.layers.iter().enumerate() {
            let Some(l) = l else { continue };
            if let Some(f) = &l.factors {
                c.push(Tensor::matrix(format!("layer.{i}.u"), &f.u));
                c.push(Tensor::vector(format!("layer.{i}.sigma"), &f.sigma));
                c.push(Tensor::matrix(format!("layer.{i}.v"), &f.v));
            }
            c.push(Tensor::matrix(format!("layer.{i}.w_d"), &l.w_d));
            if let Some(b) = &l.bias {
                c.push(Tensor::vector(format!("layer.{i}.bias"), b));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        check_role(c, "charlie")?;
        let meta: BundleMeta<Option<CharlieLayerMeta>> = c.meta()?;
        let layers = meta
            .layers
            .iter()
            .enumerate()
            .map(|(i, lm)| {
                let Some(lm) = lm else { return Ok(None) };
                let factors = if lm.factors {
                    Some(Factors {
                        u: c.get(&format!("layer.{i}.u"))?.to_matrix()?,
                        sigma: c.get(&format!("layer.{i}.sigma"))?.to_f64()?,
                        v: c.get(&format!("layer.{i}.v"))?.to_matrix()?,
                    })
                } else {
                    None
                };
                Ok(Some(CharlieLayer {
                    factors,
                    w_d: c.get(&format!("layer.{i}.w_d"))?.to_matrix()?,
                    bias: optional_vector(c, &format!("layer.{i}.bias"), lm.bias)?,
                    activation: lm.activation,
                }))
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(CharlieBundle { ring: meta.ring, topology: meta.topology, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Everything David needs: residuals of split layers, whole offloaded layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DavidBundle {
    pub ring: RingParams,
    pub topology: Topology,
    pub layers: Vec<DavidLayer>,
}

impl DavidBundle {
    pub fn from_planned(planned: &PlannedModel, ring: RingParams) -> Self {
        DavidBundle { ring, topology: Topology::from_planned(planned), layers: DavidLayer::extract(planned) }
    }

    pub fn to_container(&self) -> Result<Container, CheckpointError> {
        let mut c = Container::default();
        let metas: Vec<CharlieLayerMeta> = self
            .layers
            .iter()
            .map(|l| CharlieLayerMeta { activation: l.activation, factors: false, bias: l.bias.is_some() })
            .collect();
        c.set_meta(&BundleMeta {
            role: "david".into(),
            ring: self.ring,
            topology: self.topology.clone(),
            layers: metas,
        })?;
        for (i, l) in self.layers.iter().enumerate() {
            c.push(Tensor::matrix(format!("layer.{i}.w"), &l.w));
            if let Some(b) = &l.bias {
                c.push(Tensor::vector(format!("layer.{i}.bias"), b));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        check_role(c, "david")?;
        let meta: BundleMeta<CharlieLayerMeta> = c.meta()?;
        let layers = meta
            .layers
            .iter()
            .enumerate()
            .map(|(i, lm)| {
                Ok(DavidLayer {
                    w: c.get(&format!("layer.{i}.w"))?.to_matrix()?,
                    bias: optional_vector(c, &format!("layer.{i}.bias"), lm.bias)?,
                    activation: lm.activation,
                })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(DavidBundle { ring: meta.ring, topology: meta.topology, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Per-layer `W^C + W^D` from the two bundles; `None` for a layer Charlie
/// holds nothing of.
pub fn densified_layers(charlie: &CharlieBundle, david: &DavidBundle) -> Vec<Matrix> {
    david
        .layers
        .iter()
        .zip(&charlie.layers)
        .map(|(d, c)| match c.as_ref().and_then(|c| c.factors.as_ref()) {
            Some(f) => f.dense().add(&d.w),
            None => d.w.clone(),
        })
        .collect()
}
