//! Output-root resolution, canonical config hashing, and atomic writes.
//!
//! Every command names its output directory by a content hash of its parsed
//! inputs, so rerunning with identical inputs lands on the same path and is
//! a no-op. Files are written to a temporary sibling first and renamed into
//! place, so a failed command leaves no partial outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Environment variable overriding the default output root.
pub const OUT_ROOT_ENV: &str = "CITL_OUT_ROOT";

/// Resolve the output root: explicit flag, then environment, then
/// `./citl-out`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(path) = flag {
        return path.to_path_buf();
    }
    if let Ok(path) = std::env::var(OUT_ROOT_ENV) {
        if !path.is_empty() {
            return PathBuf::from(path);
        }
    }
    PathBuf::from("citl-out")
}

/// FNV-1a over the bytes.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of a value's canonical JSON form. `serde_json` maps use sorted keys,
/// so the hash is stable under field reordering in the source file.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_string(value).expect("hashable value");
    format!("{:016x}", fnv64(canonical.as_bytes()))
}

/// Write `content` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let parent = path.parent().context("output path has no parent")?;
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, content).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Checksum entry for a manifest.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:016x}", fnv64(&bytes)))
}
