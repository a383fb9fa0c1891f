//! Per-invocation output directory and its manifest.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::OverrideRecord;

pub const MANIFEST: &str = "manifest.json";
pub const RUNS_ENV: &str = "ICCR_RUNS_DIR";

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub format: String,
    pub version: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub overrides: Vec<OverrideRecord>,
    pub seed: u64,
    pub input_digest: String,
    pub started_unix: u64,
    pub wall_clock: f64,
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub struct RunDir {
    root: PathBuf,
    started: Instant,
    manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

impl RunDir {
    /// Creates `<base>/<unix>-<digest12>` with its standard subdirectories.
    pub fn create(
        base: Option<&Path>,
        command: &str,
        argv: Vec<String>,
        config: serde_json::Value,
        overrides: Vec<OverrideRecord>,
        seed: u64,
    ) -> Result<Self> {
        let base = match base {
            Some(b) => b.to_path_buf(),
            None => std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
        };
        let doc = serde_json::json!({ "command": command, "config": config });
        let input_digest = hex(&Sha256::digest(doc.to_string().as_bytes()));
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let stem = format!("{}-{}", started_unix, &input_digest[..12]);
        std::fs::create_dir_all(&base).with_context(|| format!("creating {}", base.display()))?;
        let mut root = base.join(&stem);
        let mut k = 1;
        while root.exists() {
            root = base.join(format!("{}-{}", stem, k));
            k += 1;
        }
        for sub in ["dataset", "checkpoints", "metrics"] {
            std::fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.display()))?;
        }
        let run = RunDir {
            root,
            started: Instant::now(),
            manifest: Manifest {
                command: command.into(),
                argv,
                config,
                overrides,
                seed,
                input_digest,
                started_unix,
                wall_clock: 0.0,
                status: "running".into(),
                error: None,
                artifacts: Vec::new(),
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Hashes an already-written file and lists it in the manifest.
    pub fn record(&mut self, rel: &str, format: &str, version: u32) -> Result<PathBuf> {
        let path = self.join(rel);
        let sha256 = sha256_file(&path)?;
        self.manifest.artifacts.retain(|a| a.path != rel);
        self.manifest.artifacts.push(Artifact {
            path: rel.into(),
            sha256,
            format: format.into(),
            version,
        });
        Ok(path)
    }

    /// Writes `text` to `rel` and records it.
    pub fn write_text(&mut self, rel: &str, format: &str, text: &str) -> Result<PathBuf> {
        let path = self.join(rel);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel, format, 1)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, format: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_text(rel, format, &(text + "\n"))
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Stamps the outcome; called on success and failure alike.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<PathBuf> {
        self.manifest.wall_clock = self.started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(format!("{:#}", e));
            }
        }
        self.write_manifest()?;
        Ok(self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collisions_get_suffixes_and_manifest_survives_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mk = || RunDir::create(Some(dir.path()), "x", vec![], serde_json::json!({}), vec![], 0).unwrap();
        let (a, b) = (mk(), mk());
        assert_ne!(a.path(), b.path());
        let err: Result<()> = Err(anyhow::anyhow!("boom"));
        let root = a.finish(&err).unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m["status"], "failed");
        assert_eq!(m["error"], "boom");
        assert!(root.join("metrics").is_dir());
    }

    #[test]
    fn artifacts_are_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunDir::create(Some(dir.path()), "x", vec![], serde_json::json!({}), vec![], 0).unwrap();
        r.write_text("metrics/a.txt", "text", "abc").unwrap();
        assert_eq!(
            r.manifest.artifacts[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
