//! `VASP` parameter checkpoints.
//!
//! Layout, all little-endian: magic `b"VASP"`, version `u16`, then records
//! until end of file. Each record is `name_len: u16`, the UTF-8 name,
//! `rank: u8`, `rank` dimensions as `u32`, and the values as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NetError, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VASP";
const VERSION: u16 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for p in store.params() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len()).expect("parameter name longer than 65535 bytes");
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.value.shape();
        out.write_all(&[u8::try_from(shape.len()).expect("rank above 255")])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let io_err = |source| NetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_params(store, BufWriter::new(file)).map_err(io_err)
}

/// Parses a checkpoint; `label` names the source in error messages.
pub fn read_params<R: Read>(mut input: R, label: &str) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|source| NetError::Io {
            path: label.to_string(),
            source,
        })?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        label,
    };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(cur.error(0, format!("bad magic {magic:?}, expected \"VASP\"")));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(cur.error(4, format!("unsupported version {version}")));
    }

    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| cur.error(start + 2, "parameter name is not UTF-8".into()))?
            .to_string();
        if store.find(&name).is_some() {
            return Err(cur.error(start, format!("duplicate parameter `{name}`")));
        }
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = cur.take(count * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::from_vec(&shape, data);
        let grad = Tensor::zeros(&shape);
        store.push_loaded(Param { name, value, grad });
    }
    Ok(store)
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let label = path.display().to_string();
    let file = File::open(path).map_err(|source| NetError::Io {
        path: label.clone(),
        source,
    })?;
    read_params(BufReader::new(file), &label)
}

impl ParamStore {
    /// Copies values from `other`, which must hold the same names and shapes
    /// in the same order. Gradients are cleared.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(NetError::State(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.params().iter().zip(other.params()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(NetError::State(format!(
                    "checkpoint parameter `{}` {:?} does not match model parameter `{}` {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        for id in other.ids() {
            self.value_mut(id).copy_from_slice(other.value(id));
        }
        self.zero_grads();
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Cursor<'a> {
    fn error(&self, offset: usize, reason: String) -> NetError {
        NetError::Format {
            path: self.label.to_string(),
            offset: offset as u64,
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add(
            "fc.weight",
            Tensor::from_vec(
                &[2, 3],
                vec![1.0, -0.5, 1e-300, f64::MIN_POSITIVE, 3.25, -0.0],
            ),
        );
        store.add("fc.bias", Tensor::vector(vec![0.125, 7.0]));
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let mut bytes = Vec::new();
        write_params(&store, &mut bytes).unwrap();
        let back = read_params(bytes.as_slice(), "mem").unwrap();
        for (a, b) in store.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits_a: Vec<u64> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_params(&sample_store(), &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"VASP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        // first record: name length 9, "fc.weight", rank 2, dims 2 and 3
        assert_eq!(&bytes[6..8], &[9, 0]);
        assert_eq!(&bytes[8..17], b"fc.weight");
        assert_eq!(bytes[17], 2);
        assert_eq!(&bytes[18..26], &[2, 0, 0, 0, 3, 0, 0, 0]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = Vec::new();
        write_params(&sample_store(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_params(bytes.as_slice(), "ckpt.vasp").unwrap_err();
        match err {
            NetError::Format { path, offset, .. } => {
                assert_eq!(path, "ckpt.vasp");
                assert!(offset > 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let err = read_params(&b"VASF\x01\x00"[..], "x").unwrap_err();
        assert!(matches!(err, NetError::Format { offset: 0, .. }));
    }

    #[test]
    fn assign_checks_layout() {
        let mut store = sample_store();
        let mut other = ParamStore::new();
        other.add_zeros("fc.weight", &[3, 2]);
        other.add_zeros("fc.bias", &[2]);
        assert!(store.assign_from(&other).is_err());
    }
}
