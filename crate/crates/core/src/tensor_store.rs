//! Little-endian binary container for named float32 tensors.
//!
//! Layout: magic `VPE1`, format version u32, d_z u32, tensor count u32, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the
//! row-major float32 payload. Model checkpoints, prototype catalogs, and
//! buffered observation sets all reuse this container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"VPE1";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered set of named tensors plus the latent width they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorStore {
    pub d_z: u32,
    entries: Vec<(String, ArrayD<f32>)>,
}

impl TensorStore {
    pub fn new(d_z: u32) -> Self {
        Self {
            d_z,
            entries: Vec::new(),
        }
    }

    /// Append a tensor. Names must be unique within a store.
    pub fn push(&mut self, name: &str, tensor: ArrayD<f32>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("tensor name too long: {name:?}")));
        }
        self.entries.push((name.to_owned(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("tensor {name:?} missing from store")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.d_z.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            let rank = u8::try_from(tensor.ndim())
                .map_err(|_| Error::Contract(format!("tensor {name:?} rank exceeds u8")))?;
            w.write_all(&[rank]).map_err(io)?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            // as_standard_layout is a no-op copy for freshly built arrays and
            // guarantees row-major order for views.
            let std_layout = tensor.as_standard_layout();
            for &v in std_layout.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: String| Error::Data(format!("{}: {detail}", path.display()));

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected \"VPE1\"")));
        }
        let version = read_u32(&mut r, path)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let d_z = read_u32(&mut r, path)?;
        let count = read_u32(&mut r, path)? as usize;

        let mut store = Self::new(d_z);
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            read_exact(&mut r, &mut len_buf, path)?;
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, path)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| bad(format!("tensor name is not UTF-8: {e}")))?;

            let mut rank_buf = [0u8; 1];
            read_exact(&mut r, &mut rank_buf, path)?;
            let rank = rank_buf[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r, path)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut payload = vec![0f32; n];
            for v in payload.iter_mut() {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, path)?;
                *v = f32::from_le_bytes(b);
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), payload)
                .map_err(|e| bad(format!("tensor {name:?}: {e}")))?;
            store.push(&name, tensor)?;
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, ArrayD};

    fn sample_store() -> TensorStore {
        let mut store = TensorStore::new(16);
        store
            .push("enc.w", arr2(&[[1.0f32, -2.5], [0.0, 3.25]]).into_dyn())
            .unwrap();
        store
            .push(
                "enc.b",
                ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -0.5, 7.0]).unwrap(),
            )
            .unwrap();
        store
    }

    #[test]
    fn round_trip_is_exact() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.vpe");
        store.save(&path).unwrap();
        let back = TensorStore::load(&path).unwrap();
        assert_eq!(store, back);
    }

    /// Byte-level check of the header and first record, independent of the
    /// writer implementation.
    #[test]
    fn on_disk_layout_matches_contract() {
        let mut store = TensorStore::new(4);
        store
            .push(
                "w",
                ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, 2.0]).unwrap(),
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.vpe");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut expect = Vec::new();
        expect.extend_from_slice(b"VPE1");
        expect.extend_from_slice(&1u32.to_le_bytes()); // format version
        expect.extend_from_slice(&4u32.to_le_bytes()); // d_z
        expect.extend_from_slice(&1u32.to_le_bytes()); // tensor count
        expect.extend_from_slice(&1u16.to_le_bytes()); // name length
        expect.extend_from_slice(b"w");
        expect.push(1u8); // rank
        expect.extend_from_slice(&2u32.to_le_bytes()); // dim 0
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupted_magic() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vpe");
        store.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(TensorStore::load(&path).is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut store = TensorStore::new(2);
        store.push("a", ArrayD::zeros(IxDyn(&[1]))).unwrap();
        assert!(store.push("a", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }
}
