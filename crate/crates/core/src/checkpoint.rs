//! Binary checkpoints: the model's config text followed by every named
//! parameter tensor.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VCMR"  u16 version  u32 len + config text  u32 tensor count
//! per tensor: u16 len + name  u8 dtype  u8 rank  rank × u32 dims  payload
//! ```

use std::path::Path;

use crate::config::CoMerConfig;
use crate::error::{Error, Result};
use crate::model::CoMer;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"VCMR";
pub const VERSION: u16 = 1;

/// One tensor record; `payload` is the byte range of its data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: std::ops::Range<usize>,
}

impl Record {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Header {
    pub version: u16,
    pub config_text: String,
    pub config: CoMerConfig,
    pub records: Vec<Record>,
}

impl Header {
    /// The element type shared by every record, if any.
    pub fn dtype(&self) -> Option<DType> {
        let first = self.records.first()?.dtype;
        self.records.iter().all(|r| r.dtype == first).then_some(first)
    }

    pub fn payload_scalars(&self) -> usize {
        self.records.iter().map(Record::numel).sum()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }
}

/// Parses the header and record table, checking that every payload is
/// present but not reading it.
pub fn inspect(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config_text = r.utf8(len, "config text")?.to_string();
    let config = CoMerConfig::from_text(&config_text)?;
    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = r.utf8(len, "tensor name")?.to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("`{name}`: unknown dtype {code}")))?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("`{name}`: size overflow")))?;
        let start = r.pos;
        r.take(bytes, "tensor payload")?;
        records.push(Record {
            name,
            dtype,
            dims,
            payload: start..r.pos,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Header {
        version,
        config_text,
        config,
        records,
    })
}

pub fn encode<T: Scalar>(model: &CoMer<T>) -> Vec<u8> {
    let text = model.cfg.to_text();
    let mut out = Vec::with_capacity(64 + text.len() + model.store.numel() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Rebuilds a model from checkpoint bytes. Every parameter the config
/// implies must be present exactly once with the right shape and with
/// element type `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<CoMer<T>> {
    let header = inspect(bytes)?;
    let mut model = CoMer::<T>::new(&header.config, 0)?;
    if header.records.len() != model.store.len() {
        return Err(corrupt(format!(
            "{} tensors in file, config implies {}",
            header.records.len(),
            model.store.len()
        )));
    }
    let mut seen = vec![false; model.store.len()];
    for rec in &header.records {
        if rec.dtype != T::DTYPE {
            return Err(Error::Dtype {
                expected: T::DTYPE.name(),
                found: rec.dtype.name(),
            });
        }
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{}`", rec.name)))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(corrupt(format!("duplicate tensor `{}`", rec.name)));
        }
        let expected = model.store.get(id).dims();
        if expected != rec.dims.as_slice() {
            return Err(corrupt(format!(
                "`{}` has dims {:?}, config implies {expected:?}",
                rec.name, rec.dims
            )));
        }
        let data = bytes[rec.payload.clone()]
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        model.store.set(id, Tensor::new(&rec.dims, data)?)?;
    }
    Ok(model)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save<T: Scalar>(model: &CoMer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(io_err(path))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(io_err(path))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<CoMer<T>> {
    decode(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CoMer<f32> {
        CoMer::new(&CoMerConfig::toy(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&toy());
        let again = encode(&decode::<f32>(&bytes).unwrap());
        assert_eq!(bytes, again);
    }

    #[test]
    fn payload_matches_param_count() {
        let m = toy();
        let h = inspect(&encode(&m)).unwrap();
        assert_eq!(h.payload_scalars(), m.analytic_breakdown().total());
        assert_eq!(h.dtype(), Some(DType::F32));
    }

    #[test]
    fn header_corruption_is_reported() {
        let mut bytes = encode(&toy());
        bytes[0] = b'X';
        let e = decode::<f32>(&bytes).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");
    }

    #[test]
    fn truncation_and_dtype_are_reported() {
        let bytes = encode(&toy());
        let e = decode::<f32>(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Dtype { .. })));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let mut m = toy();
        m.cfg.num_classes = 5;
        let e = decode::<f32>(&encode(&m)).unwrap_err().to_string();
        assert!(e.contains("head.cls0.weight") && e.contains("dims"), "{e}");
    }
}
