//! Shared plumbing: config resolution, run directories, manifest IO.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use vox4d::config::KvConfig;
use vox4d::error::{Error, Result};
use vox4d::volume::nifti;
use vox4d::volume::synth::SynthManifestRecord;
use vox4d::volume::Volume4D;

use crate::CommonArgs;

pub const RUNS_ROOT_ENV: &str = "VOX4D_RUNS";

pub fn load_config(args: &CommonArgs, known: &[&str]) -> Result<KvConfig> {
    let mut cfg = match &args.config {
        Some(p) => KvConfig::from_file(p)?,
        None => KvConfig::new(),
    };
    cfg.apply_overrides(&args.set)?;
    cfg.validate_keys(known)?;
    Ok(cfg)
}

/// Create (and return) the run directory: explicit --run-dir, or
/// <root>/run-<timestamp>-s<seed> with a numeric suffix on collision.
pub fn make_run_dir(args: &CommonArgs, seed: u64) -> Result<PathBuf> {
    if let Some(d) = &args.run_dir {
        std::fs::create_dir_all(d)?;
        return Ok(d.clone());
    }
    let root = std::env::var(RUNS_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = PathBuf::from(root);
    for attempt in 0..1000 {
        let name = if attempt == 0 {
            format!("run-{secs}-s{seed}")
        } else {
            format!("run-{secs}-s{seed}-{attempt}")
        };
        let dir = base.join(name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
    }
    Err(Error::Io(std::io::Error::other("cannot allocate run dir")))
}

/// Every run emits its fully-resolved config so it can be re-executed.
pub fn write_resolved(dir: &Path, cfg: &KvConfig) -> Result<()> {
    std::fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    Ok(())
}

pub fn info(msg: &str) {
    eprintln!("[vox4d] {msg}");
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(
            &serde_json::to_string(item)
                .map_err(|e| Error::Format(format!("serialize record: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(Vec<SynthManifestRecord>, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SynthManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", path.display())));
    }
    Ok((records, base))
}

pub fn load_volume(base: &Path, rel: &str) -> Result<Volume4D> {
    let p = base.join(rel);
    let bytes = std::fs::read(&p)
        .map_err(|e| Error::Data(format!("cannot read volume {}: {e}", p.display())))?;
    nifti::parse_nifti1(&bytes)
}

pub fn load_volumes(records: &[SynthManifestRecord], base: &Path) -> Result<Vec<Volume4D>> {
    records.iter().map(|r| load_volume(base, &r.path)).collect()
}
