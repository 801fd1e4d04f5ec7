//! Binary checkpoint format.
//!
//! ```text
//! "CSWN" | u16 version = 1 | u32 count
//! count x { u16 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//!           | u8 rank | rank x u32 extent | little-endian scalars }
//! u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! All integers are little-endian. Entries hold parameters and batch-norm
//! buffers under their registry names, optimizer velocities under
//! `momentum/<name>` and the optimizer step count as the rank-0 f64
//! `optimizer/step`.

use std::collections::BTreeMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{io_err, CheckpointError, Error, Result};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CSWN";
pub const VERSION: u16 = 1;
pub const MOMENTUM_PREFIX: &str = "momentum/";
pub const STEP_NAME: &str = "optimizer/step";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian scalars.
    pub data: Vec<u8>,
}

impl Entry {
    fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut data = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut data);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data,
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let size = T::DTYPE.size();
        let data = self.data.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data).expect("entry sized by its shape")
    }
}

/// Parsed checkpoint contents in file order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, opt: Option<&Sgd<T>>) -> Self {
        let mut named: BTreeMap<&str, &Tensor<T>> = store.params().map(|p| (p.name.as_str(), &p.tensor)).collect();
        named.extend(store.buffers().map(|(n, t)| (n.as_str(), t)));
        let mut entries: Vec<Entry> = named.into_iter().map(|(n, t)| Entry::from_tensor(n, t)).collect();
        if let Some(opt) = opt {
            for (n, v) in &opt.velocity {
                entries.push(Entry::from_tensor(format!("{MOMENTUM_PREFIX}{n}"), v));
            }
            entries.push(Entry::from_tensor(STEP_NAME, &Tensor::<f64>::scalar(opt.step as f64)));
        }
        Self { entries }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let malformed = |m: String| Error::Checkpoint(CheckpointError::Malformed(m));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| malformed("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len()).map_err(|_| malformed(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(u8::try_from(e.shape.len()).map_err(|_| malformed(format!("rank too high: {}", e.name)))?);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| malformed(format!("extent too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype code {code} for `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(dtype.size(), |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
            let data = r.take(n)?.to_vec();
            entries.push(Entry { name, dtype, shape, data });
        }
        let body = r.pos;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed = CRC64.checksum(&bytes[..body]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(Self { entries })
    }

    /// Copies the entries into `store` (and `opt`), first checking that
    /// every name, shape and dtype matches exactly. Nothing is modified on
    /// error. Without `opt`, optimizer entries are skipped.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>, opt: Option<&mut Sgd<T>>) -> Result<(), CheckpointError> {
        let mut expected: BTreeMap<String, Vec<usize>> = store
            .params()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        expected.extend(store.buffers().map(|(n, t)| (n.clone(), t.shape().to_vec())));
        let with_opt = opt.is_some();
        if with_opt {
            for p in store.params() {
                expected.insert(format!("{MOMENTUM_PREFIX}{}", p.name), p.tensor.shape().to_vec());
            }
        }
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            let is_opt = e.name.starts_with(MOMENTUM_PREFIX) || e.name == STEP_NAME;
            if e.name == STEP_NAME {
                if e.dtype != DType::F64 || !e.shape.is_empty() {
                    return Err(CheckpointError::Malformed(format!("`{STEP_NAME}` must be a rank-0 f64")));
                }
                seen.insert(e.name.clone(), e);
                continue;
            }
            if is_opt && !with_opt {
                continue;
            }
            let Some(shape) = expected.get(&e.name) else {
                return Err(CheckpointError::UnknownTensor(e.name.clone()));
            };
            if e.dtype != T::DTYPE {
                return Err(CheckpointError::DType {
                    name: e.name.clone(),
                    file: e.dtype.code(),
                    expected: T::DTYPE.code(),
                });
            }
            if &e.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    file: e.shape.clone(),
                    expected: shape.clone(),
                });
            }
            if seen.insert(e.name.clone(), e).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{}`", e.name)));
            }
        }
        if let Some(name) = expected.keys().find(|n| !seen.contains_key(*n)) {
            return Err(CheckpointError::MissingTensor(name.clone()));
        }
        if with_opt && !seen.contains_key(STEP_NAME) {
            return Err(CheckpointError::MissingTensor(STEP_NAME.into()));
        }

        for p in store.params_mut() {
            p.tensor = seen[&p.name].to_tensor();
        }
        let buffer_names: Vec<String> = store.buffers().map(|(n, _)| n.clone()).collect();
        for n in buffer_names {
            *store.buffer_mut(&n).expect("listed buffer") = seen[&n].to_tensor();
        }
        if let Some(opt) = opt {
            opt.velocity = store
                .params()
                .map(|p| (p.name.clone(), seen[&format!("{MOMENTUM_PREFIX}{}", p.name)].to_tensor()))
                .collect();
            opt.step = seen[STEP_NAME].to_tensor::<f64>().data()[0] as u64;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes atomically (temp file then rename) so an interrupted save never
/// replaces a good checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, opt: Option<&Sgd<T>>) -> Result<()> {
    let bytes = Checkpoint::capture(store, opt).encode()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, store: &mut ParamStore<T>, opt: Option<&mut Sgd<T>>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes)?.restore(store, opt)?;
    Ok(())
}
