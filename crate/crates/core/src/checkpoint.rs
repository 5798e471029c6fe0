//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ALRE"  u32 version (= 1)  u32 tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32, 1 = f64), u8 rank, rank × u64 dims
//!   row-major payload
//! ```
//!
//! Models, adapter banks and datasets map to named tensors; their shape
//! hyperparameters travel in small `meta.*` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::alore::{AloreBank, AloreConfig, Site};
use crate::backbone::{ViTConfig, ViTModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Precision, Real};

pub const MAGIC: &[u8; 4] = b"ALRE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            TensorData::F32(_) => Precision::F32,
            TensorData::F64(_) => Precision::F64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl PartialEq for Tensor {
    /// Bitwise equality (distinguishes `0.0` from `-0.0`, matches identical NaNs).
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()))
                }
                (TensorData::F64(a), TensorData::F64(b)) => {
                    a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()))
                }
                _ => false,
            }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector_f64(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: TensorData::F64(values),
        }
    }

    /// Rank-2 tensor in the matrix's own precision.
    pub fn from_matrix<T: Real>(m: &Matrix<T>) -> Self {
        let shape = vec![m.rows(), m.cols()];
        let data = match T::PRECISION {
            Precision::F32 => TensorData::F32(m.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
            Precision::F64 => TensorData::F64(m.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()),
        };
        Self { shape, data }
    }

    /// Matrix view of a rank-1 (as one row) or rank-2 tensor, converted to `T`.
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        let (rows, cols) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(Error::Format(format!(
                    "rank-{} tensor is not a matrix",
                    self.shape.len()
                )))
            }
        };
        Matrix::from_vec(rows, cols, self.values::<T>())
    }

    pub fn values<T: Real>(&self) -> Vec<T> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap_or_else(T::nan)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap_or_else(T::nan)).collect(),
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Lookup(format!("checkpoint has no tensor {name}")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("rank too high for {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.data.precision().code(), rank])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => {
                    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
                TensorData::F64(v) => {
                    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut out = Checkpoint::new();
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = read_u8(&mut r)?;
            let precision = Precision::from_code(dtype)
                .ok_or_else(|| Error::Format(format!("unknown dtype {dtype} for {name}")))?;
            let rank = read_u8(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(read_u64(&mut r)?).map_err(|_| Error::Format("dimension overflow".into()))?;
                total = total
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("element count overflow in {name}")))?;
                shape.push(d);
            }
            let data = match precision {
                Precision::F32 => {
                    let mut bytes = vec![
                        0u8;
                        total
                            .checked_mul(4)
                            .ok_or_else(|| Error::Format("size overflow".into()))?
                    ];
                    read_exact(&mut r, &mut bytes)?;
                    TensorData::F32(
                        bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                Precision::F64 => {
                    let mut bytes = vec![
                        0u8;
                        total
                            .checked_mul(8)
                            .ok_or_else(|| Error::Format("size overflow".into()))?
                    ];
                    read_exact(&mut r, &mut bytes)?;
                    TensorData::F64(
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
            };
            out.insert(name, Tensor { shape, data })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn as_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what} must be a non-negative integer, got {v}")))
    }
}

fn vit_meta(c: &ViTConfig) -> Tensor {
    Tensor::vector_f64(
        [
            c.image_size,
            c.patch_size,
            c.channels,
            c.d,
            c.depth,
            c.heads,
            c.mlp_ratio,
            c.classes,
        ]
        .map(|v| v as f64)
        .to_vec(),
    )
}

fn vit_from_meta(t: &Tensor) -> Result<ViTConfig> {
    let v = t.values::<f64>();
    if v.len() != 8 {
        return Err(Error::Format(format!("meta.vit has {} entries, expected 8", v.len())));
    }
    let u = |i: usize| as_usize(v[i], "meta.vit entry");
    Ok(ViTConfig {
        image_size: u(0)?,
        patch_size: u(1)?,
        channels: u(2)?,
        d: u(3)?,
        depth: u(4)?,
        heads: u(5)?,
        mlp_ratio: u(6)?,
        classes: u(7)?,
    })
}

fn site_code(s: Site) -> f64 {
    Site::ALL.iter().position(|&x| x == s).expect("site is listed") as f64
}

fn alore_meta(c: &AloreConfig) -> Tensor {
    let mut v = vec![c.d as f64, c.n as f64, c.r as f64, c.layers_adapted as f64, c.dropout_p];
    v.extend(c.sites.iter().map(|&s| site_code(s)));
    Tensor::vector_f64(v)
}

fn alore_from_meta(t: &Tensor) -> Result<AloreConfig> {
    let v = t.values::<f64>();
    if v.len() < 6 {
        return Err(Error::Format("meta.alore is too short".into()));
    }
    let sites = v[5..]
        .iter()
        .map(|&c| {
            Site::ALL
                .get(as_usize(c, "site code")?)
                .copied()
                .ok_or_else(|| Error::Format(format!("unknown site code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AloreConfig {
        d: as_usize(v[0], "d")?,
        n: as_usize(v[1], "n")?,
        r: as_usize(v[2], "r")?,
        layers_adapted: as_usize(v[3], "layers_adapted")?,
        dropout_p: v[4],
        sites,
    })
}

/// Model tensors (and adapter bank, if any) in their native precision.
pub fn model_to_checkpoint<T: Real>(model: &ViTModel<T>, bank: Option<&AloreBank<T>>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert("meta.vit", vit_meta(&model.config))?;
    for (name, t) in model.tensors() {
        ck.insert(name, Tensor::from_matrix(t))?;
    }
    if let Some(b) = bank {
        ck.insert("meta.alore", alore_meta(b.config()))?;
        for (name, t) in b.tensors() {
            ck.insert(name, Tensor::from_matrix(t))?;
        }
    }
    Ok(ck)
}

fn fill<T: Real>(ck: &Checkpoint, targets: Vec<(String, &mut Matrix<T>)>) -> Result<()> {
    for (name, t) in targets {
        let m = ck.require(&name)?.to_matrix::<T>()?;
        if m.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                t.shape()
            )));
        }
        *t = m;
    }
    Ok(())
}

/// Inverse of [`model_to_checkpoint`], converting values to `T`.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(ViTModel<T>, Option<AloreBank<T>>)> {
    let config = vit_from_meta(ck.require("meta.vit")?)?;
    let mut model = ViTModel::<T>::zeros(&config)?;
    fill(ck, model.tensors_mut())?;
    let bank = match ck.get("meta.alore") {
        None => None,
        Some(meta) => {
            let cfg = alore_from_meta(meta)?;
            let mut bank = AloreBank::<T>::zeros(&cfg, config.depth)?;
            fill(ck, bank.tensors_mut())?;
            Some(bank)
        }
    };
    Ok((model, bank))
}

/// Dataset as tensors `images`, `labels`, `split_train`, `split_val`, `split_test`.
pub fn dataset_to_checkpoint(ds: &Dataset) -> Result<Checkpoint> {
    let idx = |v: &[usize]| Tensor::vector_f64(v.iter().map(|&i| i as f64).collect());
    let mut ck = Checkpoint::new();
    ck.insert("images", Tensor::from_matrix(&ds.images))?;
    ck.insert("labels", idx(&ds.labels))?;
    ck.insert("split_train", idx(&ds.train))?;
    ck.insert("split_val", idx(&ds.val))?;
    ck.insert("split_test", idx(&ds.test))?;
    Ok(ck)
}

/// Inverse of [`dataset_to_checkpoint`]; the class count is `max(label) + 1`.
pub fn dataset_from_checkpoint(ck: &Checkpoint) -> Result<Dataset> {
    let idx = |name: &str| -> Result<Vec<usize>> {
        ck.require(name)?
            .values::<f64>()
            .into_iter()
            .map(|v| as_usize(v, name))
            .collect()
    };
    let images = ck.require("images")?.to_matrix::<f32>()?;
    let labels = idx("labels")?;
    let ds = Dataset {
        images,
        classes: labels.iter().max().map_or(0, |m| m + 1),
        labels,
        train: idx("split_train")?,
        val: idx("split_val")?,
        test: idx("split_test")?,
    };
    ds.validate()?;
    Ok(ds)
}
