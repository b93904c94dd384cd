//! Run-directory persistence: outputs are staged in a hidden directory and renamed into
//! place once complete, together with a manifest describing how they were made.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Failure::validation("Io", &format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::validation("Io", &format!("{}: {e}", path.display()))
}

/// Relative paths of every file below `root`, sorted.
fn list_files(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let p = entry.map_err(|e| io_err(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("listed below root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub config: serde_json::Value,
    /// Input path (relative to the run directory) → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Free-form facts about how the outputs were produced.
    pub provenance: BTreeMap<String, serde_json::Value>,
    /// Output path → SHA-256, excluding the manifest itself.
    pub outputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

/// An output directory under construction.
pub struct Staging {
    run_dir: PathBuf,
    target: PathBuf,
    tmp: PathBuf,
    pub manifest: Manifest,
}

impl Staging {
    pub fn new(run_dir: &Path, name: &Path, subcommand: &str, threads: usize, config: serde_json::Value) -> CliResult<Self> {
        if name.as_os_str().is_empty() || name.is_absolute() || name.components().count() != 1 {
            return Err(Failure::validation("OutputName", &format!("output name {:?} must be a single path component", name)));
        }
        fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
        let target = run_dir.join(name);
        let tmp = run_dir.join(format!(".{}.tmp-{}", name.display(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        Ok(Staging {
            run_dir: run_dir.to_path_buf(),
            target,
            tmp,
            manifest: Manifest {
                tool: "tumorcal",
                version: env!("CARGO_PKG_VERSION"),
                subcommand: subcommand.into(),
                argv: std::env::args().skip(1).collect(),
                threads,
                config,
                inputs: BTreeMap::new(),
                seeds: BTreeMap::new(),
                provenance: BTreeMap::new(),
                outputs: BTreeMap::new(),
                created_unix: 0,
            },
        })
    }

    /// Path of an output file inside the staging directory, creating parent directories.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.tmp.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let p = self.path(rel)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    /// Resolve an input path against the run directory and record its digest.
    pub fn input(&mut self, rel: &Path) -> CliResult<PathBuf> {
        let p = self.run_dir.join(rel);
        if !p.is_file() {
            return Err(Failure::validation("MissingInput", &format!("input file {} does not exist", p.display())));
        }
        let d = digest_file(&p)?;
        self.manifest.inputs.insert(rel.display().to_string(), d);
        Ok(p)
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.into(), seed);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("provenance values serialize");
        self.manifest.provenance.insert(key.into(), v);
    }

    /// Write the manifest and move the finished directory into place, replacing any
    /// previous output of the same name.
    pub fn commit(mut self) -> CliResult<PathBuf> {
        for rel in list_files(&self.tmp)? {
            let d = digest_file(&self.tmp.join(&rel))?;
            self.manifest.outputs.insert(rel.display().to_string(), d);
        }
        self.manifest.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.write_json("manifest.json", &self.manifest)?;
        if self.target.exists() {
            let old = self.run_dir.join(format!(".{}.old-{}", self.target.file_name().unwrap().to_string_lossy(), std::process::id()));
            fs::rename(&self.target, &old).map_err(|e| io_err(&self.target, e))?;
            fs::rename(&self.tmp, &self.target).map_err(|e| io_err(&self.tmp, e))?;
            fs::remove_dir_all(&old).map_err(|e| io_err(&old, e))?;
        } else {
            fs::rename(&self.tmp, &self.target).map_err(|e| io_err(&self.tmp, e))?;
        }
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        // abandoned runs leave nothing behind
        if self.tmp.exists() {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
