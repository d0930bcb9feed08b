//! Binary checkpoints of a [`ParamStore`].
//!
//! Layout: magic `LZKT`, u32 version, then records until end of file. A record
//! is u32 name length, name bytes (UTF-8), u8 dtype tag, u32 rank, rank × u64
//! dims, raw data. All integers and floats are little-endian. Curvatures are
//! rank-0 records named `manifold.<name>.kappa_raw`.

use std::path::Path;

use lorentzian::autodiff::Tensor;
use lorentzian::params::ParamStore;
use lorentzian::{Dtype, Scalar};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LZKT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint record `{name}`: {detail}")]
    Record { name: String, detail: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn dtype(&self) -> Dtype {
        match self {
            Data::F32(_) => Dtype::F32,
            Data::F64(_) => Dtype::F64,
        }
    }

    fn cast<T: Scalar>(&self) -> Vec<T> {
        match self {
            Data::F32(v) => v.iter().map(|x| T::from_f32(*x).unwrap_or_else(T::nan)).collect(),
            Data::F64(v) => v.iter().map(|x| T::c(*x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Data,
}

pub fn kappa_name(manifold: &str) -> String {
    format!("manifold.{manifold}.kappa_raw")
}

fn push_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out.extend_from_slice(&T::to_le_bytes_vec(data));
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in store.slots() {
        push_record(&mut out, &s.name, s.value.shape(), s.value.data());
    }
    for h in store.manifolds() {
        push_record(&mut out, &kappa_name(h.name()), &[], &[h.kappa_raw()]);
    }
    out
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut records = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Record { name: "?".into(), detail: "name is not UTF-8".into() })?;
        let tag = r.take(1, "dtype")?[0];
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| CheckpointError::Record { name: name.clone(), detail: format!("unknown dtype tag {tag}") })?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Record { name, detail: format!("implausible rank {rank}") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("shape")?).map_err(|_| CheckpointError::Truncated("shape"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| CheckpointError::Record { name: name.clone(), detail: "shape overflows".into() })?;
        let bytes = count.checked_mul(dtype.size_of()).ok_or(CheckpointError::Truncated("data"))?;
        let raw = r.take(bytes, "data")?;
        let data = match dtype {
            Dtype::F32 => Data::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            Dtype::F64 => Data::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        };
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&std::fs::read(path)?)
}

/// Overwrite every slot and curvature of `store` from `records`. The record set
/// must match the store exactly. Records of the other precision are converted;
/// each conversion is reported in the returned warnings.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, records: &[Record]) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let expected = store.slots().len() + store.manifolds().len();
    if records.len() != expected {
        return Err(CheckpointError::Mismatch(format!("{} records for {} model entries", records.len(), expected)));
    }
    let mut converted = 0usize;
    for rec in records {
        if rec.data.dtype() != T::DTYPE {
            converted += 1;
        }
        let data: Vec<T> = rec.data.cast();
        if let Some(id) = store.find(&rec.name) {
            let t = Tensor::new(rec.shape.clone(), data)
                .map_err(|e| CheckpointError::Record { name: rec.name.clone(), detail: e.to_string() })?;
            store
                .set_value(id, t)
                .map_err(|e| CheckpointError::Mismatch(format!("`{}`: {e}", rec.name)))?;
        } else if let Some(i) = store.manifolds().iter().position(|h| kappa_name(h.name()) == rec.name) {
            if !rec.shape.is_empty() || data.len() != 1 {
                return Err(CheckpointError::Record { name: rec.name.clone(), detail: "curvature must be a scalar".into() });
            }
            let id = store.manifolds()[i].id();
            store.manifold_mut(id).restore(data[0]);
        } else {
            return Err(CheckpointError::Mismatch(format!("unknown entry `{}`", rec.name)));
        }
    }
    if converted > 0 {
        let from = if T::DTYPE == Dtype::F32 { Dtype::F64 } else { Dtype::F32 };
        let verb = if T::DTYPE == Dtype::F32 { "downcast" } else { "upcast" };
        let msg = format!("{verb} {converted} checkpoint records from {from} to {}", T::DTYPE);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(warnings)
}

pub fn load<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<Vec<String>> {
    let records = read(path)?;
    restore(store, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lorentzian::params::ParamKind;

    fn store<T: Scalar>() -> ParamStore<T> {
        let mut s = ParamStore::new();
        let m = s.add_manifold("head", 2, T::c(0.7), true);
        let geo = s.manifold(m).geometry();
        s.add("w", ParamKind::Euclidean, Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 1e-7, 5.0, -6.5]).unwrap()).unwrap();
        s.add("p", ParamKind::Lorentz(m), Tensor::from_rows(&[geo.exp0(&[T::c(0.3), T::c(-0.1)])]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let a = store::<f32>();
        let mut b = store::<f32>();
        b.manifold_mut(lorentzian::ManifoldId(0)).restore(0.0);
        b.set_value(b.find("w").unwrap(), Tensor::zeros(&[2, 3])).unwrap();
        let w = restore(&mut b, &decode(&encode(&a)).unwrap()).unwrap();
        assert!(w.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn header_corruption_is_a_clean_error() {
        let mut bytes = encode(&store::<f64>());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(_))));
        let mut bytes = encode(&store::<f64>());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version(_))));
    }

    #[test]
    fn truncation_is_a_clean_error() {
        let bytes = encode(&store::<f64>());
        for cut in [3, 7, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn cross_precision_load_warns() {
        let a = store::<f64>();
        let mut b = store::<f32>();
        let w = restore(&mut b, &decode(&encode(&a)).unwrap()).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("downcast"));
        assert_eq!(b.value(b.find("w").unwrap()).data()[3], 1e-7f32);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let a = store::<f64>();
        let mut b = ParamStore::<f64>::new();
        b.add("w", ParamKind::Euclidean, Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(restore(&mut b, &decode(&encode(&a)).unwrap()), Err(CheckpointError::Mismatch(_))));
    }
}
