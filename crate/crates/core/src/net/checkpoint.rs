//! Versioned little-endian checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "VSCK"
//! version    u32       FORMAT_VERSION
//! dtype      u8        bytes per value: 4 (f32) or 8 (f64)
//! spec_len   u32       followed by the NetSpec as UTF-8 JSON
//! n_arrays   u32
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 x ndim
//!   values   dtype x prod(dims)
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use super::arch::NetSpec;
use super::model::{Model, ParamArray, Params, Real};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(spec: &NetSpec, params: &Params<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + params.len() * T::BYTES as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::BYTES);
    let json = serde_json::to_vec(spec)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
    for a in &params.arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if needed, and
/// checks the arrays against the embedded architecture.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(NetSpec, Params<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let dtype = r.take(1)?[0];
    if dtype != 4 && dtype != 8 {
        return Err(Error::Checkpoint(format!("unknown value width {dtype}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: NetSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("embedded architecture: {e}")))?;
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("array {name} has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("array size overflows".into()))?;
        let raw = r.take(count.checked_mul(dtype as usize).ok_or_else(|| Error::Checkpoint("array size overflows".into()))?)?;
        let data = if dtype == 4 {
            raw.chunks_exact(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect()
        };
        arrays.push(ParamArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = Params { arrays };
    // validates layout against the spec and finiteness
    let model = Model::new(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let spec = model.spec().clone();
    Ok((spec, model.into_params()))
}

pub fn save_checkpoint<T: Real>(params: &Params<T>, spec: &NetSpec, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(spec, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(NetSpec, Params<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let spec = NetSpec::reference();
        let params = Params::<f32>::he_init(&spec, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vsck");
        save_checkpoint(&params, &spec, &path).unwrap();
        let (spec2, params2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(spec2, spec);
        assert!(params.arrays.iter().zip(&params2.arrays).all(|(a, b)| {
            a.name == b.name
                && a.shape == b.shape
                && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        }));
    }

    #[test]
    fn reference_checkpoint_names_each_conv() {
        let spec = NetSpec::reference();
        let bytes = encode_checkpoint(&spec, &Params::<f32>::zeros(&spec)).unwrap();
        let (spec, params) = decode_checkpoint::<f32>(&bytes).unwrap();
        let convs = params.arrays.iter().filter(|a| a.name.starts_with("conv") && a.name.ends_with(".weight")).count();
        assert_eq!(convs, spec.conv_count());
        assert_eq!(convs, 5);
    }

    #[test]
    fn version_mismatch_and_corruption_rejected() {
        let spec = NetSpec::reference();
        let bytes = encode_checkpoint(&spec, &Params::<f64>::zeros(&spec)).unwrap();
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_checkpoint::<f64>(&bad).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint::<f64>(b"JUNKJUNK").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f64>(&extra).is_err());
    }

    #[test]
    fn f64_checkpoint_loads_as_f32() {
        let spec = NetSpec::reference();
        let p = Params::<f64>::he_init(&spec, 1);
        let bytes = encode_checkpoint(&spec, &p).unwrap();
        let (_, q) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(q.arrays[0].data[0], p.arrays[0].data[0] as f32);
    }
}
