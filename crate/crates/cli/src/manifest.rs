//! Run manifests: what a command consumed and produced, with content digests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    /// Reading inputs and writing artifacts.
    pub io_ms: f64,
    /// Everything else: generation, training, retrieval, analysis.
    pub compute_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Effective configuration after defaults, config file and flags.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Manifest of the run that produced a consumed model, if any.
    pub parent: Option<FileDigest>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        // serde_json maps are ordered, so the serialisation is canonical.
        let config_hash = sha256_bytes(config.to_string().as_bytes());
        Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            parent: None,
            timings: Timings::default(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    /// Links the manifest sitting next to `artifact`, when there is one.
    pub fn link_parent(&mut self, artifact: &Path) -> Result<()> {
        let candidate = artifact.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
        if candidate.is_file() {
            self.parent = Some(FileDigest { path: candidate.display().to_string(), sha256: sha256_file(&candidate)? });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }

    /// Files whose current digest differs from the recorded one.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for d in self.inputs.iter().chain(&self.outputs).chain(&self.parent) {
            let p = Path::new(&d.path);
            if !p.is_file() || sha256_file(p)? != d.sha256 {
                bad.push(d.path.clone());
            }
        }
        Ok(bad)
    }
}

/// Accumulates wall-clock time into the io and compute buckets.
pub struct Stopwatch {
    start: Instant,
    io: f64,
}

impl Default for Stopwatch {
    fn default() -> Self {
        Self::new()
    }
}

impl Stopwatch {
    pub fn new() -> Self {
        Self { start: Instant::now(), io: 0.0 }
    }

    pub fn io<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.io += t.elapsed().as_secs_f64() * 1e3;
        out
    }

    pub fn timings(&self) -> Timings {
        let total = self.start.elapsed().as_secs_f64() * 1e3;
        Timings { total_ms: total, io_ms: self.io, compute_ms: (total - self.io).max(0.0) }
    }
}
