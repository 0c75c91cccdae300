//! Little-endian binary container shared by the model checkpoints:
//! an 8-byte magic, a format version, then typed fields in a fixed order.

use std::fs;
use std::path::Path;

use crate::data::records::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{lit, DType, Scalar};
use crate::tensor::Tensor;

pub struct CheckpointWriter {
    buf: Vec<u8>,
}

impl CheckpointWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Dtype tag, count, then per tensor: name, rank, dims, values.
    pub fn params<T: Scalar>(&mut self, ps: &ParamSet<T>) {
        self.u8(T::DTYPE.tag());
        self.u32(ps.len() as u32);
        for p in ps.iter() {
            self.str(&p.name);
            self.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                self.u64(d as u64);
            }
            for &v in p.value.data() {
                v.write_le(&mut self.buf);
            }
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.buf)
    }
}

pub struct CheckpointReader {
    bytes: Vec<u8>,
    pos: usize,
    pub version: u32,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

impl CheckpointReader {
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(fs::read(path)?, magic)
    }

    pub fn from_bytes(bytes: Vec<u8>, magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Self {
            bytes,
            pos: 8,
            version: 0,
        };
        r.version = r.u32()?;
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| corrupt(what))?;
        if end > self.bytes.len() {
            return Err(corrupt(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let b = self.take(n, "string")?.to_vec();
        String::from_utf8(b).map_err(|_| corrupt("utf-8"))
    }

    /// Overwrites `ps` in place; names and shapes must match exactly.
    /// Values stored in another precision are converted.
    pub fn params_into<T: Scalar>(&mut self, ps: &mut ParamSet<T>) -> Result<()> {
        let dtype = DType::from_tag(self.u8()?).ok_or_else(|| corrupt("dtype"))?;
        let count = self.u32()? as usize;
        if count != ps.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, model expects {}",
                ps.len()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = ps
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in expected.into_iter().enumerate() {
            let got = self.str()?;
            let rank = self.u32()? as usize;
            let dims = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if got != name || dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: found `{got}` {dims:?}, expected `{name}` {shape:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let data: Vec<T> = match dtype {
                DType::F32 => self
                    .take(4 * n, "f32 data")?
                    .chunks_exact(4)
                    .map(|c| lit(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => self
                    .take(8 * n, "f64 data")?
                    .chunks_exact(8)
                    .map(|c| lit(f64::read_le(c)))
                    .collect(),
            };
            *ps.by_index_mut(i) = Tensor::new(&dims, data);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
        }
        Ok(())
    }
}
