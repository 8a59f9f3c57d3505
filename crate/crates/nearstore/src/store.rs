//! One backing file per device plus a JSON sidecar that records which
//! flattened segment each byte extent holds. Scalars are little-endian.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredDtype {
    Fp32,
    Fp16,
    /// Compressed gradient records.
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub variable: String,
    pub segment_offset: u64,
    pub segment_len: u64,
    pub dtype: StoredDtype,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub device: usize,
    pub capacity: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub struct ShardStore {
    device: usize,
    path: PathBuf,
    capacity: u64,
    file: Mutex<File>,
    manifest: Mutex<Manifest>,
}

impl ShardStore {
    /// Creates (or truncates) `dir/dev{device}.bin`.
    pub fn create(dir: &Path, device: usize, capacity: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("dev{device}.bin"));
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            device,
            path,
            capacity,
            file: Mutex::new(file),
            manifest: Mutex::new(Manifest { device, capacity, entries: Vec::new() }),
        })
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path.with_extension("json")
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn len(&self) -> Result<u64> {
        let f = self.file.lock().unwrap();
        f.metadata().map(|m| m.len()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Registers an extent; extents must not overlap.
    pub fn add_entry(&self, entry: ManifestEntry) -> Result<()> {
        let end = entry.byte_offset + entry.byte_len;
        if end > self.capacity {
            return Err(Error::CapacityExceeded { device: self.device, end, capacity: self.capacity });
        }
        let mut m = self.manifest.lock().unwrap();
        if let Some(other) =
            m.entries.iter().find(|e| entry.byte_offset < e.byte_offset + e.byte_len && e.byte_offset < end)
        {
            return Err(Error::Config(format!(
                "device {}: extent of {} overlaps {}",
                self.device, entry.variable, other.variable
            )));
        }
        m.entries.push(entry);
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().unwrap().clone()
    }

    pub fn save_manifest(&self) -> Result<()> {
        let path = self.manifest_path();
        let json = serde_json::to_string_pretty(&*self.manifest.lock().unwrap()).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load_manifest(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
    }

    pub fn read_at(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut f = self.file.lock().unwrap();
        let size = f.metadata().map_err(|e| Error::io(&self.path, e))?.len();
        let end = offset + len;
        if end > size {
            return Err(Error::OutOfBounds { device: self.device, offset, end, len: size });
        }
        let mut buf = vec![0u8; len as usize];
        f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&self.path, e))?;
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    pub fn write_at(&self, offset: u64, bytes: &[u8]) -> Result<()> {
        let end = offset + bytes.len() as u64;
        if end > self.capacity {
            return Err(Error::CapacityExceeded { device: self.device, end, capacity: self.capacity });
        }
        let mut f = self.file.lock().unwrap();
        f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn f32_to_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8], out: &mut [f32]) {
    assert_eq!(bytes.len(), out.len() * 4);
    for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *o = f32::from_le_bytes(c.try_into().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShardStore::create(dir.path(), 0, 64).unwrap();
        s.write_at(8, &[1, 2, 3, 4]).unwrap();
        assert_eq!(s.read_at(8, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(s.read_at(0, 4).unwrap(), vec![0; 4]);
        assert!(matches!(s.read_at(10, 4), Err(Error::OutOfBounds { .. })));
        assert!(matches!(s.write_at(62, &[0; 4]), Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn manifest_rejects_overlap_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShardStore::create(dir.path(), 3, 1000).unwrap();
        let e = |v: &str, off| ManifestEntry {
            variable: v.into(),
            segment_offset: 0,
            segment_len: 10,
            dtype: StoredDtype::Fp32,
            byte_offset: off,
            byte_len: 40,
        };
        s.add_entry(e("params32", 0)).unwrap();
        assert!(s.add_entry(e("momentum", 20)).is_err());
        s.add_entry(e("momentum", 40)).unwrap();
        s.save_manifest().unwrap();
        let m = ShardStore::load_manifest(&s.manifest_path()).unwrap();
        assert_eq!(m, s.manifest());
        assert_eq!(m.device, 3);
    }
}
