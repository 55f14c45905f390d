//! Content-addressed record store: one `<fingerprint>.json` file per record.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::record::EvalRecord;
use crate::{Error, Result};

pub const CACHE_ENV: &str = "DISPROBE_CACHE_DIR";

#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$DISPROBE_CACHE_DIR`, else `$XDG_CACHE_HOME/disprobe`, else
    /// `$HOME/.cache/disprobe`, else `.disprobe-cache`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty());
        let dir = if let Some(d) = var(CACHE_ENV) {
            PathBuf::from(d)
        } else if let Some(d) = var("XDG_CACHE_HOME") {
            PathBuf::from(d).join("disprobe")
        } else if let Some(h) = var("HOME") {
            PathBuf::from(h).join(".cache").join("disprobe")
        } else {
            PathBuf::from(".disprobe-cache")
        };
        Self::new(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    fn check_fingerprint(fingerprint: &str) -> Result<()> {
        if fingerprint.is_empty() || !fingerprint.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::Config(format!("malformed fingerprint {fingerprint:?}")));
        }
        Ok(())
    }

    pub fn lookup(&self, fingerprint: &str) -> Result<Option<EvalRecord>> {
        Self::check_fingerprint(fingerprint)?;
        let path = self.path_for(fingerprint);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let record = read_record(&path, &bytes)?;
        if record.fingerprint != fingerprint {
            return Err(Error::Cache {
                path,
                reason: format!("stored fingerprint {} does not match file name", record.fingerprint),
            });
        }
        Ok(Some(record))
    }

    /// Writes the record atomically (temporary file, then rename).
    pub fn store(&self, record: &EvalRecord) -> Result<PathBuf> {
        Self::check_fingerprint(&record.fingerprint)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path_for(&record.fingerprint);
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let tmp = self.dir.join(format!(
            ".{}.{}.{nanos}.tmp",
            record.fingerprint,
            std::process::id()
        ));
        let bytes = serde_json::to_vec_pretty(record).map_err(|e| Error::Encode(e.to_string()))?;
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(&path, e)
        })?;
        Ok(path)
    }

    /// All records, ordered by fingerprint. Temporary files are ignored.
    pub fn list(&self) -> Result<Vec<EvalRecord>> {
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".json") && !name.starts_with('.') {
                paths.push(path);
            }
        }
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                read_record(&p, &bytes)
            })
            .collect()
    }

    /// Returns whether a record was removed.
    pub fn remove(&self, fingerprint: &str) -> Result<bool> {
        Self::check_fingerprint(fingerprint)?;
        let path = self.path_for(fingerprint);
        match std::fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

fn read_record(path: &Path, bytes: &[u8]) -> Result<EvalRecord> {
    serde_json::from_slice(bytes).map_err(|e| Error::Cache {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
