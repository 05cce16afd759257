//! `citl generate`: dataset spec file in, dataset directory out.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use citl_core::data::{generate, generate_dense, DatasetSpec};

use crate::dataset_io::{read_manifest, write_dataset, LoadedDataset};
use crate::outputs::{config_hash, out_root};

pub fn run(spec_path: &Path, out: Option<&Path>) -> Result<u8> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec file {}", spec_path.display()))?;
    let spec: DatasetSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing spec file {}", spec_path.display()))?;
    spec.validate()
        .with_context(|| format!("validating spec file {}", spec_path.display()))?;

    let hash = config_hash(&spec);
    let dir = out_root(out).join("datasets").join(&hash);
    if dir.join("manifest.json").exists() {
        let manifest = read_manifest(&dir)?;
        anyhow::ensure!(
            manifest.spec_hash == hash,
            "existing dataset at {} has mismatched spec hash",
            dir.display()
        );
        println!("dataset {hash} already exists at {}", dir.display());
        return Ok(0);
    }

    let dataset = if spec.is_dense() {
        LoadedDataset::Dense(generate_dense(&spec)?)
    } else {
        LoadedDataset::Flat(generate(&spec)?)
    };
    let manifest = write_dataset(&dir, &dataset, &hash)?;
    println!("dataset {hash} written to {}", dir.display());
    for (file, checksum) in &manifest.checksums {
        println!("  {file} {checksum}");
    }
    Ok(0)
}
