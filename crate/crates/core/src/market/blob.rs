//! Content-addressed blob storage. Unauthenticated by design: anyone may
//! put, get or delete, and every get re-checks the content hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::crypto::hash::{hash256, Digest};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StorageError {
    #[error("blob not found")]
    NotFound,
    #[error("stored bytes fail the content hash check")]
    IntegrityError,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for StorageError {
    fn from(e: io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

#[derive(Debug)]
enum Backend {
    Memory(RwLock<BTreeMap<Digest, Vec<u8>>>),
    Dir(PathBuf),
}

#[derive(Debug)]
pub struct BlobStore {
    backend: Backend,
}

pub fn content_id(bytes: &[u8]) -> Digest {
    hash256(bytes)
}

impl BlobStore {
    pub fn in_memory() -> Self {
        BlobStore { backend: Backend::Memory(RwLock::new(BTreeMap::new())) }
    }

    /// Blobs live under `data_dir/blobs/<hex content id>`.
    pub fn open(data_dir: &Path) -> Result<Self, StorageError> {
        let dir = data_dir.join("blobs");
        fs::create_dir_all(&dir)?;
        Ok(BlobStore { backend: Backend::Dir(dir) })
    }

    fn path(dir: &Path, id: &Digest) -> PathBuf {
        dir.join(hex::encode(id))
    }

    pub fn put(&self, bytes: &[u8]) -> Result<Digest, StorageError> {
        let id = content_id(bytes);
        match &self.backend {
            Backend::Memory(m) => {
                m.write().expect("blob lock").insert(id, bytes.to_vec());
            }
            Backend::Dir(dir) => {
                let target = Self::path(dir, &id);
                let tmp = dir.join(format!(".{}.tmp", hex::encode(id)));
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
                fs::rename(&tmp, &target)?;
            }
        }
        Ok(id)
    }

    pub fn get(&self, id: &Digest) -> Result<Vec<u8>, StorageError> {
        let bytes = match &self.backend {
            Backend::Memory(m) => m.read().expect("blob lock").get(id).cloned().ok_or(StorageError::NotFound)?,
            Backend::Dir(dir) => match fs::read(Self::path(dir, id)) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StorageError::NotFound),
                Err(e) => return Err(e.into()),
            },
        };
        if &content_id(&bytes) != id {
            return Err(StorageError::IntegrityError);
        }
        Ok(bytes)
    }

    pub fn delete(&self, id: &Digest) -> Result<(), StorageError> {
        match &self.backend {
            Backend::Memory(m) => {
                m.write().expect("blob lock").remove(id).map(|_| ()).ok_or(StorageError::NotFound)
            }
            Backend::Dir(dir) => match fs::remove_file(Self::path(dir, id)) {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StorageError::NotFound),
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn ids(&self) -> Result<Vec<Digest>, StorageError> {
        match &self.backend {
            Backend::Memory(m) => Ok(m.read().expect("blob lock").keys().copied().collect()),
            Backend::Dir(dir) => {
                let mut ids = Vec::new();
                for entry in fs::read_dir(dir)? {
                    let name = entry?.file_name();
                    let Some(name) = name.to_str() else { continue };
                    if let Ok(raw) = hex::decode(name) {
                        if let Ok(id) = Digest::try_from(raw.as_slice()) {
                            ids.push(id);
                        }
                    }
                }
                ids.sort();
                Ok(ids)
            }
        }
    }

    /// Raw stored bytes, without the hash check. For state inspection.
    pub fn raw(&self, id: &Digest) -> Option<Vec<u8>> {
        match &self.backend {
            Backend::Memory(m) => m.read().expect("blob lock").get(id).cloned(),
            Backend::Dir(dir) => fs::read(Self::path(dir, id)).ok(),
        }
    }

    /// Overwrites stored bytes in place. Simulates a corrupted backing store.
    pub fn corrupt(&self, id: &Digest, bytes: Vec<u8>) -> Result<(), StorageError> {
        match &self.backend {
            Backend::Memory(m) => {
                m.write().expect("blob lock").insert(*id, bytes);
                Ok(())
            }
            Backend::Dir(dir) => Ok(fs::write(Self::path(dir, id), bytes)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn stores() -> (tempfile::TempDir, Vec<BlobStore>) {
        let dir = tempfile::tempdir().unwrap();
        let disk = BlobStore::open(dir.path()).unwrap();
        (dir, vec![BlobStore::in_memory(), disk])
    }

    #[test]
    fn round_trip_random_blobs() {
        let (_dir, stores) = stores();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for store in &stores {
            for _ in 0..1000 {
                let mut b = vec![0u8; rng.gen_range(0..512)];
                rng.fill_bytes(&mut b);
                let id = store.put(&b).unwrap();
                assert_eq!(id, hash256(&b));
                assert_eq!(store.get(&id).unwrap(), b);
            }
        }
    }

    #[test]
    fn delete_then_get() {
        let (_dir, stores) = stores();
        for store in &stores {
            let id = store.put(b"bye").unwrap();
            store.delete(&id).unwrap();
            assert_eq!(store.get(&id), Err(StorageError::NotFound));
            assert_eq!(store.delete(&id), Err(StorageError::NotFound));
        }
    }

    #[test]
    fn every_bit_flip_is_an_integrity_error() {
        let (_dir, stores) = stores();
        let blob = b"x\"00ff\" small fixture".to_vec();
        for store in &stores {
            let id = store.put(&blob).unwrap();
            for i in 0..blob.len() {
                for bit in 0..8 {
                    let mut bad = blob.clone();
                    bad[i] ^= 1 << bit;
                    store.corrupt(&id, bad).unwrap();
                    assert_eq!(store.get(&id), Err(StorageError::IntegrityError));
                }
            }
            store.corrupt(&id, blob.clone()).unwrap();
            assert_eq!(store.get(&id).unwrap(), blob);
        }
    }

    #[test]
    fn disk_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let id = store.put(b"abc").unwrap();
        let path = dir.path().join("blobs").join(hex::encode(id));
        assert_eq!(fs::read(path).unwrap(), b"abc");
        assert_eq!(store.ids().unwrap(), vec![id]);
    }
}
