//! Run directory layout, the exclusive lock, and the append-only logs.
//!
//! ```text
//! <out>/clean.bin               clean reference samples (generate-data)
//! <out>/observations.bin        corrupted observations (generate-data)
//! <out>/run.lock                held while a subcommand writes here
//! <out>/checkpoints/ckpt_KKKK.bin
//! <out>/recon/recon_KKKK.bin    the dataset θ^(k) was trained on
//! <out>/metrics.jsonl           one record per completed EM iteration
//! <out>/timings.jsonl           wall-clock seconds per iteration
//! <out>/prior.bin               unconditional model on the final dataset
//! ```
//!
//! Both logs start with a header line
//! `{"format": ..., "version": 1, "fingerprint": "<hex>"}`. Metric records
//! carry the keys `k`, `loss` (`first`, `last`, `mean`, `steps`),
//! `dataset_mean`, `dataset_var`, `sinkhorn`, `sinkhorn_converged` and
//! `frechet`; they are deterministic. Wall time lives in the timings log
//! so reruns produce byte-identical metric logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{hex, Fingerprint};
use super::format::{write_atomic, FORMAT_VERSION};
use super::CliError;

pub const OUTPUT_ROOT_ENV: &str = "DIFFEM_OUTPUT_ROOT";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `--output` if given, else `$DIFFEM_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub fn resolve(output: Option<&Path>, name: &str) -> Self {
        match output {
            Some(p) => Self::new(p),
            None => {
                let base = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                Self::new(base.join(name))
            }
        }
    }

    pub fn create(&self) -> Result<(), CliError> {
        for d in [self.root.clone(), self.root.join("checkpoints"), self.root.join("recon")] {
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        Ok(())
    }

    pub fn clean(&self) -> PathBuf {
        self.root.join("clean.bin")
    }
    pub fn observations(&self) -> PathBuf {
        self.root.join("observations.bin")
    }
    pub fn checkpoint(&self, k: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("ckpt_{k:04}.bin"))
    }
    pub fn recon(&self, k: usize) -> PathBuf {
        self.root.join("recon").join(format!("recon_{k:04}.bin"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.jsonl")
    }
    pub fn prior(&self) -> PathBuf {
        self.root.join("prior.bin")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.bin")
    }
    pub fn theory(&self) -> PathBuf {
        self.root.join("theory.jsonl")
    }

    /// Highest `k` with a checkpoint on disk.
    pub fn latest_checkpoint(&self) -> Result<Option<usize>, CliError> {
        let dir = self.root.join("checkpoints");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CliError::io(&dir, e)),
        };
        let mut best = None;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            let name = entry.file_name();
            let k = name
                .to_str()
                .and_then(|s| s.strip_prefix("ckpt_"))
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(k) = k {
                best = best.max(Some(k));
            }
        }
        Ok(best)
    }

    pub fn lock(&self) -> Result<RunLock, CliError> {
        RunLock::acquire(&self.root.join("run.lock"))
    }
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: &Path) -> Result<Self, CliError> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self {
                    path: path.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path.to_path_buf())),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    format: String,
    version: u32,
    fingerprint: String,
}

/// An append-only JSON-lines log with a validated header.
#[derive(Debug)]
pub struct JsonLog {
    path: PathBuf,
}

impl JsonLog {
    /// Opens `path`, creating it with a header if absent.
    ///
    /// When `keep` is given, records whose `k` exceeds it are dropped (they
    /// belong to an iteration whose checkpoint never made it to disk).
    pub fn open(
        path: &Path,
        format: &str,
        fp: &Fingerprint,
        keep: Option<usize>,
        allow_mismatch: bool,
    ) -> Result<Self, CliError> {
        let header = LogHeader {
            format: format.to_string(),
            version: FORMAT_VERSION,
            fingerprint: hex(fp),
        };
        match fs::read_to_string(path) {
            Ok(text) => {
                let mut lines = text.lines();
                let found: LogHeader = lines
                    .next()
                    .and_then(|l| serde_json::from_str(l).ok())
                    .ok_or_else(|| CliError::Format(format!("{}: missing log header", path.display())))?;
                if found.format != header.format || found.version != header.version {
                    return Err(CliError::Format(format!("{}: unexpected log header", path.display())));
                }
                if found.fingerprint != header.fingerprint {
                    if allow_mismatch {
                        log::warn!("{}: fingerprint mismatch ignored", path.display());
                    } else {
                        return Err(CliError::Fingerprint(path.display().to_string()));
                    }
                }
                if let Some(keep) = keep {
                    let mut out = String::new();
                    out.push_str(text.lines().next().unwrap_or_default());
                    out.push('\n');
                    for line in lines {
                        let k = serde_json::from_str::<serde_json::Value>(line)
                            .ok()
                            .and_then(|v| v.get("k").and_then(|k| k.as_u64()));
                        if k.is_some_and(|k| k as usize <= keep) {
                            out.push_str(line);
                            out.push('\n');
                        }
                    }
                    if out != text {
                        write_atomic(path, out.as_bytes())?;
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let mut line = serde_json::to_string(&header).expect("header serializes");
                line.push('\n');
                write_atomic(path, line.as_bytes())?;
            }
            Err(e) => return Err(CliError::io(path, e)),
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    /// Appends one record as a single write.
    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), CliError> {
        let mut line = serde_json::to_string(record).map_err(|e| CliError::Format(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| CliError::io(&self.path, e))
    }

    /// Every record after the header.
    pub fn records(&self) -> Result<Vec<serde_json::Value>, CliError> {
        let text = fs::read_to_string(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        text.lines()
            .skip(1)
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Format(e.to_string())))
            .collect()
    }
}
