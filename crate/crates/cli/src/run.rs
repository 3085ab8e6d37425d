use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use probe_core::ProbeError;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_PARSE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;
pub const EXIT_EMPTY_SPLIT: u8 = 4;
pub const EXIT_VIOLATION: u8 = 5;

/// A theorem check found counterexamples.
#[derive(Debug)]
pub struct Violation(pub usize);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} theorem check(s) violated", self.0)
    }
}

impl std::error::Error for Violation {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Violation>() {
            return EXIT_VIOLATION;
        }
        if let Some(e) = cause.downcast_ref::<ProbeError>() {
            return match e {
                ProbeError::Parse { .. } | ProbeError::Io(_) | ProbeError::Json(_) | ProbeError::Csv(_) => EXIT_PARSE,
                ProbeError::NonFinite(_) | ProbeError::Diverged { .. } => EXIT_NON_FINITE,
                ProbeError::EmptyInput("test split") => EXIT_EMPTY_SPLIT,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_PARSE;
        }
    }
    EXIT_PARSE
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub artifact_version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: &'a serde_json::Value,
    pub inputs: &'a BTreeMap<String, String>,
    pub outputs: &'a [OutputFile],
    pub exit_code: u8,
    pub error: Option<String>,
    pub started_unix_ms: u128,
    pub duration_ms: u128,
}

/// Output directory of one command plus what it read and wrote.
pub struct Run {
    pub out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<OutputFile>,
    started: Instant,
    started_unix_ms: u128,
}

impl Run {
    pub fn new(out: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.display().to_string());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.retain(|o| o.path != name);
        self.outputs.push(OutputFile {
            path: name.to_string(),
            bytes: bytes.len(),
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> probe_core::Result<()>) -> anyhow::Result<PathBuf> {
        let mut bytes = Vec::new();
        fill(&mut bytes)?;
        self.write(name, &bytes)
    }

    pub fn finish(self, command: &str, seed: u64, threads: usize, config: &serde_json::Value, result: &anyhow::Result<()>) -> anyhow::Result<()> {
        let (exit_code, error) = match result {
            Ok(()) => (0, None),
            Err(e) => (exit_code(e), Some(format!("{e:#}"))),
        };
        let manifest = Manifest {
            command,
            artifact_version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            exit_code,
            error,
            started_unix_ms: self.started_unix_ms,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.out.join("manifest.json");
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
