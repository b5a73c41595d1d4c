//! Per-stage JSON run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::persist::write_atomic;

pub const STAGES: [&str; 4] = ["gen-corpus", "pretrain", "finetune", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Every setting of the run, as canonical `key = value` pairs.
    pub config: BTreeMap<String, String>,
    /// Input paths and the SHA-256 of their bytes.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 per corpus source.
    pub corpus_digest: BTreeMap<String, String>,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// SHA-256 of a file, or of every file below a directory in path order.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        collect_files(&entry.path(), out)?;
    }
    Ok(())
}

impl Manifest {
    pub fn start(stage: &str, config: Vec<(&str, String)>, seed: u64) -> Self {
        Manifest {
            stage: stage.to_string(),
            config: config.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            inputs: BTreeMap::new(),
            corpus_digest: BTreeMap::new(),
            seed,
            started_unix: now(),
            finished_unix: None,
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(now());
    }

    /// Manifest path for an output: `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Format contract: known stage, ordered timestamps, hex digests,
    /// and (once finished) existing artifacts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("manifest: {m}")));
        if !STAGES.contains(&self.stage.as_str()) {
            return bad(format!("unknown stage {:?}", self.stage));
        }
        let hex64 = |s: &str| s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit());
        if let Some((k, _)) = self.inputs.iter().chain(&self.corpus_digest).find(|(_, v)| !hex64(v)) {
            return bad(format!("digest of {k} is not SHA-256 hex"));
        }
        match self.finished_unix {
            Some(f) if f < self.started_unix => bad("finished before it started".into()),
            Some(_) => match self.artifacts.iter().find(|a| !a.exists()) {
                Some(a) => bad(format!("artifact {} is missing", a.display())),
                None => Ok(()),
            },
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "one").unwrap();
        let d1 = file_digest(dir.path()).unwrap();
        assert_eq!(d1, file_digest(dir.path()).unwrap());
        std::fs::write(&f, "two").unwrap();
        assert_ne!(d1, file_digest(dir.path()).unwrap());
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("out.bin");
        std::fs::write(&art, "x").unwrap();
        let mut m = Manifest::start("pretrain", vec![("steps", "3".into())], 7);
        m.add_input(&art).unwrap();
        m.artifacts.push(art.clone());
        m.finish();
        m.validate().unwrap();
        let p = Manifest::path_for(&art);
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        m.stage = "bake".into();
        assert!(m.validate().is_err());
    }
}
