//! Output directories.
//!
//! A run writes into `<out>.partial` while holding `<out>.lock`, then
//! renames the staging directory to `<out>`. A second writer for the same
//! output fails on the lock; readers never see a half-written run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};
use crate::io::write_json;

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct RunDir {
    out: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    timings: Map<String, Value>,
    released: bool,
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

impl RunDir {
    pub fn create(out: &Path) -> CliResult<Self> {
        if out.file_name().is_none() {
            return Err(CliError::Validation(format!("output path {} has no final component", out.display())));
        }
        if out.exists() && fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some() {
            return Err(CliError::Validation(format!("output directory {} exists and is not empty", out.display())));
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let lock = sibling(out, ".lock");
        fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Validation(format!("{} is locked by another run ({})", out.display(), lock.display()))
            } else {
                CliError::io(&lock, e)
            }
        })?;
        let staging = sibling(out, ".partial");
        let dir = Self {
            out: out.to_path_buf(),
            staging,
            lock,
            timings: Map::new(),
            released: false,
        };
        if dir.staging.exists() {
            fs::remove_dir_all(&dir.staging).map_err(|e| CliError::io(&dir.staging, e))?;
        }
        fs::create_dir_all(&dir.staging).map_err(|e| CliError::io(&dir.staging, e))?;
        Ok(dir)
    }

    /// Path of `name` inside the run directory being written.
    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Run `f` and record its wall time under `label` in the manifest.
    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.timings.insert(label.into(), Value::from(start.elapsed().as_secs_f64()));
        v
    }

    /// Write `manifest.json` (with timings and the output file list added)
    /// and publish the directory.
    pub fn finish<M: Serialize>(mut self, manifest: &M) -> CliResult<()> {
        let mut value = serde_json::to_value(manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut files: Vec<String> = Vec::new();
        collect_files(&self.staging, &self.staging, &mut files)?;
        files.sort();
        if let Value::Object(m) = &mut value {
            m.insert("timings_seconds".into(), Value::Object(std::mem::take(&mut self.timings)));
            m.insert("outputs".into(), files.into());
        }
        write_json(&self.staging.join(MANIFEST_FILE), &value)?;
        if self.out.exists() {
            fs::remove_dir(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        }
        fs::rename(&self.staging, &self.out).map_err(|e| CliError::io(&self.out, e))?;
        self.release();
        Ok(())
    }

    /// Drop everything written so far.
    pub fn abandon(mut self) {
        let _ = fs::remove_dir_all(&self.staging);
        self.release();
    }

    fn release(&mut self) {
        if !self.released {
            let _ = fs::remove_file(&self.lock);
            self.released = true;
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        self.release();
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn publish_and_lock() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let run = RunDir::create(&out).unwrap();
        assert!(matches!(RunDir::create(&out), Err(CliError::Validation(_))));
        fs::write(run.path("a.csv"), "x\n").unwrap();
        run.finish(&serde_json::json!({"command": "test"})).unwrap();
        assert!(out.join("a.csv").exists());
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m["outputs"], serde_json::json!(["a.csv"]));
        assert!(!sibling(&out, ".lock").exists());
        assert!(!sibling(&out, ".partial").exists());
        // Non-empty output is refused.
        assert!(matches!(RunDir::create(&out), Err(CliError::Validation(_))));
    }

    #[test]
    fn abandon_cleans_up() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let run = RunDir::create(&out).unwrap();
        run.abandon();
        assert!(!out.exists() && !sibling(&out, ".partial").exists());
        RunDir::create(&out).unwrap().abandon();
    }
}
