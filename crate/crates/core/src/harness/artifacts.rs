use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FAILED_MARKER: &str = "FAILED";
const STAGE_DIR: &str = "stages";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Record of a completed stage: its seed and the hashes of every file it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: Option<u64>,
    /// Paths relative to the fold directory.
    pub files: BTreeMap<String, String>,
}

impl StageManifest {
    fn path(fold_dir: &Path, stage: &str) -> PathBuf {
        fold_dir.join(STAGE_DIR).join(format!("{stage}.json"))
    }

    /// Hashes `files` (relative to `fold_dir`) and writes the manifest last.
    pub fn record(fold_dir: &Path, stage: &str, seed: Option<u64>, files: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for f in files {
            map.insert(f.clone(), sha256_file(&fold_dir.join(f))?);
        }
        let m = Self {
            stage: stage.to_string(),
            seed,
            files: map,
        };
        write_atomic(&Self::path(fold_dir, stage), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    pub fn load(fold_dir: &Path, stage: &str) -> Result<Option<Self>> {
        let path = Self::path(fold_dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Checks every listed file against its recorded hash.
    pub fn verify(&self, fold_dir: &Path) -> Result<()> {
        for (f, want) in &self.files {
            let path = fold_dir.join(f);
            if !path.exists() {
                return Err(Error::Artifact {
                    path,
                    reason: "file missing".into(),
                });
            }
            let got = sha256_file(&path)?;
            if &got != want {
                return Err(Error::Artifact {
                    path,
                    reason: format!("sha256 {got} != recorded {want}"),
                });
            }
        }
        Ok(())
    }

    /// Verified manifest of a completed stage, or `None` when it must be (re)built.
    pub fn completed(fold_dir: &Path, stage: &str) -> Option<Self> {
        let m = Self::load(fold_dir, stage).ok().flatten()?;
        m.verify(fold_dir).ok()?;
        Some(m)
    }

    pub fn remove(fold_dir: &Path, stage: &str) -> Result<()> {
        let path = Self::path(fold_dir, stage);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Reads a file and checks it against a stage manifest before returning its contents.
pub fn read_verified(fold_dir: &Path, manifest: &StageManifest, rel: &str) -> Result<String> {
    let path = fold_dir.join(rel);
    let want = manifest.files.get(rel).ok_or_else(|| Error::Artifact {
        path: path.clone(),
        reason: format!("not listed in stage `{}`", manifest.stage),
    })?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let got = sha256_hex(&bytes);
    if &got != want {
        return Err(Error::Artifact {
            path,
            reason: format!("sha256 {got} != recorded {want}"),
        });
    }
    String::from_utf8(bytes).map_err(|e| Error::Artifact {
        path,
        reason: e.to_string(),
    })
}

pub fn mark_failed(fold_dir: &Path, stage: &str, err: &Error) -> Result<()> {
    write_atomic(
        &fold_dir.join(FAILED_MARKER),
        format!("stage: {stage}\nerror: {err}\n").as_bytes(),
    )
}

pub fn clear_failed(fold_dir: &Path) -> Result<()> {
    let path = fold_dir.join(FAILED_MARKER);
    match fs::remove_file(&path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Lists files under `dir` as paths relative to `base`, sorted.
pub fn list_files(base: &Path, dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() {
            let rel = p.strip_prefix(base).expect("under base").to_string_lossy().into_owned();
            out.push(rel);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a.json"), b"{}").unwrap();
        StageManifest::record(dir.path(), "a", Some(3), &["a.json".into()]).unwrap();
        assert!(StageManifest::completed(dir.path(), "a").is_some());
        fs::write(dir.path().join("a.json"), b"{ }").unwrap();
        assert!(StageManifest::completed(dir.path(), "a").is_none());
        let m = StageManifest::load(dir.path(), "a").unwrap().unwrap();
        assert!(matches!(read_verified(dir.path(), &m, "a.json"), Err(Error::Artifact { .. })));
    }

    #[test]
    fn failed_marker_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        mark_failed(dir.path(), "flow", &Error::MissingTau).unwrap();
        assert!(dir.path().join(FAILED_MARKER).exists());
        clear_failed(dir.path()).unwrap();
        clear_failed(dir.path()).unwrap();
        assert!(!dir.path().join(FAILED_MARKER).exists());
    }
}
