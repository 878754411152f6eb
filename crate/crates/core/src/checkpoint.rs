//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SVAC`, version `u32 = 1`, record count `u32`,
//! then per record: name length `u16`, UTF-8 name, rank `u8`, dims as `u32`,
//! row-major `f64` payload. Optimizer state lives under the `adam/` prefix.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SVAC";
pub const VERSION: u32 = 1;
pub const ADAM_PREFIX: &str = "adam/";

pub fn encode(records: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        records.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok(records)
}

/// Serializes parameters, plus optimizer moments when `adam` is given.
pub fn save(path: &Path, params: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    let mut records: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    if let Some(a) = adam {
        records.push((format!("{ADAM_PREFIX}step"), Tensor::scalar(a.step as f64)));
        records.push((format!("{ADAM_PREFIX}lr"), Tensor::scalar(a.lr)));
        for ((name, _), (m, v)) in params.iter().zip(a.m.iter().zip(&a.v)) {
            records.push((format!("{ADAM_PREFIX}m/{name}"), m.clone()));
            records.push((format!("{ADAM_PREFIX}v/{name}"), v.clone()));
        }
    }
    let bytes = encode(&records)?;
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Overwrites every parameter in `params` from `records`; names and shapes must match.
pub fn load_into(records: &[(String, Tensor)], params: &mut ParamStore) -> Result<()> {
    let mut seen = 0;
    for (name, t) in records.iter().filter(|(n, _)| !n.starts_with(ADAM_PREFIX)) {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has unexpected parameter {name}")))?;
        if params.get(id).shape() != t.shape() {
            return Err(Error::shape("checkpoint", params.get(id).shape(), t.shape()));
        }
        *params.get_mut(id) = t.clone();
        seen += 1;
    }
    if seen != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {seen} of {} parameters",
            params.len()
        )));
    }
    Ok(())
}

/// Restores optimizer state if present in `records`.
pub fn load_adam(records: &[(String, Tensor)], params: &ParamStore) -> Result<Option<AdamState>> {
    let find = |n: &str| records.iter().find(|(name, _)| name == n).map(|(_, t)| t);
    let Some(step) = find(&format!("{ADAM_PREFIX}step")) else {
        return Ok(None);
    };
    let lr = find(&format!("{ADAM_PREFIX}lr")).map_or(1e-3, |t| t.data()[0]);
    let mut state = AdamState::new(params, lr);
    state.step = step.data()[0] as u64;
    for (i, (name, p)) in params.iter().enumerate() {
        for (key, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let t = find(&format!("{ADAM_PREFIX}{key}/{name}"))
                .ok_or_else(|| Error::Format(format!("missing optimizer state for {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::shape("checkpoint adam", p.shape(), t.shape()));
            }
            *slot = t.clone();
        }
    }
    Ok(Some(state))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("a".into(), Tensor::vector(vec![1.5]))]).unwrap();
        assert_eq!(&bytes[0..4], b"SVAC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let mut bytes = encode(&[("a".into(), Tensor::vector(vec![1.5]))]).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn adam_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut adam = AdamState::new(&store, 0.01);
        adam.step(&mut store, &[Tensor::vector(vec![0.5, -0.5])]).unwrap();
        save(&path, &store, Some(&adam)).unwrap();
        let records = read_records(&path).unwrap();
        let mut fresh = ParamStore::new();
        fresh.insert("w", Tensor::zeros(&[2]));
        load_into(&records, &mut fresh).unwrap();
        assert_eq!(fresh.values(), store.values());
        let back = load_adam(&records, &fresh).unwrap().unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.m, adam.m);
        assert_eq!(back.v, adam.v);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            name in "[a-z/._]{1,20}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let recs = vec![(name, Tensor::new(&dims, data).unwrap())];
            prop_assert_eq!(decode(&encode(&recs).unwrap()).unwrap(), recs);
        }
    }
}
