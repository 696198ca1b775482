//! Artifact persistence. Every report number traces back to one of these
//! files; timestamps live only in the run metadata file so all other
//! payloads are byte-reproducible.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const META_FILE: &str = "meta.json";

/// A directory of named run artifacts.
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn create(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_string(&self, name: &str, contents: &str) -> io::Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> io::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        text.push('\n');
        self.write_string(name, &text)
    }

    pub fn write_csv<F>(&self, name: &str, write: F) -> io::Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
    {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &bytes)?;
        Ok(path)
    }

    pub fn read_string(&self, name: &str) -> io::Result<String> {
        fs::read_to_string(self.path(name))
    }

    /// Write run metadata (the only artifact allowed to carry timestamps).
    pub fn write_meta(&self, wall_time_ms: u128) -> io::Result<PathBuf> {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "finished_unix_ms": stamp,
            "wall_time_ms": wall_time_ms,
        });
        self.write_json(META_FILE, &meta)
    }

    /// Names of all regular files under the store, relative to its root,
    /// sorted.
    pub fn list(&self) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else if let Ok(rel) = path.strip_prefix(&self.root) {
                    names.push(rel.to_string_lossy().into_owned());
                }
            }
        }
        names.sort();
        Ok(names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::create(dir.path().join("run")).unwrap();
        store.write_string("a.txt", "hello\n").unwrap();
        store.write_json("sub/b.json", &serde_json::json!({"x": 1})).unwrap();
        assert_eq!(store.read_string("a.txt").unwrap(), "hello\n");
        assert_eq!(store.list().unwrap(), vec!["a.txt".to_string(), "sub/b.json".to_string()]);
    }
}
