//! On-disk layout: content-addressed blobs plus one JSON metadata document
//! per session and per job. Every write goes to a temporary file first and
//! is renamed into place, so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(storage(path, e));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        for sub in ["blobs", "sessions", "jobs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| storage(&dir, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, hash: &str) -> Result<PathBuf, ServiceError> {
        if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(ServiceError::NotFound(format!("blob {hash}")));
        }
        Ok(self.root.join("blobs").join(hash))
    }

    /// Stores `bytes` under their SHA-256 and returns the hex digest.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, ServiceError> {
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash)?;
        if !path.exists() {
            atomic_write(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>, ServiceError> {
        let path = self.blob_path(hash)?;
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServiceError::NotFound(format!("blob {hash}")),
            _ => storage(&path, e),
        })?;
        if sha256_hex(&bytes) != hash {
            return Err(ServiceError::Storage(format!("blob {hash} fails its checksum")));
        }
        Ok(bytes)
    }

    fn doc_path(&self, kind: &str, id: &str) -> Result<PathBuf, ServiceError> {
        if !valid_key(id) {
            return Err(ServiceError::NotFound(format!("{kind} {id}")));
        }
        Ok(self.root.join(kind).join(format!("{id}.json")))
    }

    pub fn put_doc<T: Serialize>(&self, kind: &str, id: &str, doc: &T) -> Result<(), ServiceError> {
        let bytes = serde_json::to_vec_pretty(doc).map_err(|e| ServiceError::Internal(e.to_string()))?;
        atomic_write(&self.doc_path(kind, id)?, &bytes)
    }

    /// Every document of `kind`, in file-name order.
    pub fn all_docs<T: DeserializeOwned>(&self, kind: &str) -> Result<Vec<T>, ServiceError> {
        let dir = self.root.join(kind);
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| storage(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| storage(p, e))?;
                serde_json::from_slice(&bytes).map_err(|e| storage(p, e))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let h = store.put_blob(b"hello").unwrap();
        assert_eq!(h, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        assert_eq!(store.put_blob(b"hello").unwrap(), h);
        assert_eq!(store.get_blob(&h).unwrap(), b"hello");
        assert!(matches!(store.get_blob("../etc"), Err(ServiceError::NotFound(_))));
        assert!(matches!(store.get_blob(&"0".repeat(64)), Err(ServiceError::NotFound(_))));
    }

    #[test]
    fn corrupted_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let h = store.put_blob(b"abc").unwrap();
        fs::write(dir.path().join("blobs").join(&h), b"abd").unwrap();
        assert!(matches!(store.get_blob(&h), Err(ServiceError::Storage(_))));
    }

    #[test]
    fn docs_round_trip_and_leave_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_doc("jobs", "b", &vec![2]).unwrap();
        store.put_doc("jobs", "a", &vec![1]).unwrap();
        store.put_doc("jobs", "a", &vec![3]).unwrap();
        let all: Vec<Vec<i32>> = store.all_docs("jobs").unwrap();
        assert_eq!(all, vec![vec![3], vec![2]]);
        assert!(store.put_doc("jobs", "../x", &1).is_err());
        let leftovers = fs::read_dir(dir.path().join("jobs"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }
}
