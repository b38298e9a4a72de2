//! Run directories: artifacts are staged in a hidden directory and moved into
//! place only once the command has succeeded.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_json(value: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serialisable value"))
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    /// Picks `<root>/<command>-<timestamp>-<seed>`, adding a counter if a run
    /// with the same name already exists.
    pub fn create(root: &Path, command: &str, timestamp: &str, seed: u64) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        let base = format!("{command}-{timestamp}-{seed}");
        let mut name = base.clone();
        let mut k = 1;
        while root.join(&name).exists() || root.join(format!(".{name}.partial")).exists() {
            k += 1;
            name = format!("{base}-{k}");
        }
        let staging = root.join(format!(".{name}.partial"));
        fs::create_dir(&staging)?;
        Ok(Self {
            staging,
            target: root.join(name),
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.staging.join(name), bytes)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Every file below the staging directory, sorted, with its hash.
    pub fn artifacts(&self) -> io::Result<Vec<Artifact>> {
        let mut files = Vec::new();
        collect(&self.staging, &mut files)?;
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let bytes = fs::read(&p)?;
                let rel = p.strip_prefix(&self.staging).expect("file below staging dir");
                Ok(Artifact {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect()
    }

    pub fn commit(self) -> io::Result<PathBuf> {
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }

    pub fn discard(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn staged_files_move_on_commit() {
        let root = tempfile::tempdir().unwrap();
        let run = RunDir::create(root.path(), "simulate", "20260101T000000Z", 7).unwrap();
        run.write("a.csv", b"x\n").unwrap();
        let arts = run.artifacts().unwrap();
        assert_eq!(arts.len(), 1);
        assert_eq!(arts[0].bytes, 2);
        let dir = run.commit().unwrap();
        assert!(dir.ends_with("simulate-20260101T000000Z-7"));
        assert!(dir.join("a.csv").exists());
        let again = RunDir::create(root.path(), "simulate", "20260101T000000Z", 7).unwrap();
        assert!(again.commit().unwrap().ends_with("simulate-20260101T000000Z-7-2"));
    }

    #[test]
    fn discard_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let run = RunDir::create(root.path(), "hjb", "t", 1).unwrap();
        run.write("layer.csv", b"1").unwrap();
        run.discard();
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
