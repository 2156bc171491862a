//! Output directory writer. Every artifact gets a manifest line with its
//! digest, the tool version and the config digest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsbeam_core::io::{bundle_to_bytes, tensor_to_bytes};
use capsbeam_core::{Tensor, WeightBundle};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct OutDir {
    dir: PathBuf,
    command: String,
    config_hash: String,
}

impl OutDir {
    pub fn create(dir: &Path, command: &str, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output dir {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), command: command.to_string(), config_hash: config_hash.to_string() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, bytes)?;
        Ok(path)
    }

    pub fn tensor(&self, name: &str, t: &Tensor) -> Result<PathBuf> {
        self.write(name, &tensor_to_bytes(t))
    }

    pub fn bundle(&self, name: &str, b: &WeightBundle) -> Result<PathBuf> {
        self.write(name, &bundle_to_bytes(b))
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        self.write(name, &w.into_inner().context("flushing csv")?)
    }

    /// Replaces any earlier line for `name`, keeping the rest in order.
    fn record(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(MANIFEST);
        let old = fs::read_to_string(&path).unwrap_or_default();
        let mut lines: Vec<String> =
            old.lines().filter(|l| l.split_whitespace().next() != Some(name)).map(str::to_string).collect();
        lines.push(format!(
            "{name} sha256={} bytes={} tool=capsbeam/{} command={} config={}",
            sha256_hex(bytes),
            bytes.len(),
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.config_hash
        ));
        fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
