//! Dataset directories on disk: one file per split plus a manifest with
//! per-file checksums. Classification splits are line-delimited examples;
//! dense splits are line-delimited grid items. The calibration split is
//! always cell-level examples.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use citl_core::data::{
    read_examples, write_examples, DatasetSpec, DenseDataset, DenseItem, SplitDataset,
    RNG_DECLARATION,
};

use crate::outputs::{file_checksum, write_atomic};

pub const MANIFEST_FORMAT: &str = "citl-dataset-dir";
pub const MANIFEST_VERSION: u32 = 1;
const DENSE_FORMAT: &str = "citl-dense-items";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub rng: String,
    pub spec: DatasetSpec,
    pub spec_hash: String,
    /// File name -> FNV-1a checksum of the file bytes.
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseFileHeader {
    format: String,
    version: u32,
    rng: String,
    split: String,
    count: usize,
}

pub enum LoadedDataset {
    Flat(SplitDataset),
    Dense(DenseDataset),
}

fn write_flat_split(
    dir: &Path,
    name: &str,
    spec: &DatasetSpec,
    examples: &[citl_core::data::LabeledExample],
) -> Result<()> {
    let mut buf = Vec::new();
    write_examples(&mut buf, name, spec, examples)?;
    write_atomic(&dir.join(format!("{name}.jsonl")), &buf)?;
    Ok(())
}

fn write_dense_split(dir: &Path, name: &str, items: &[DenseItem]) -> Result<()> {
    let mut buf = Vec::new();
    let header = DenseFileHeader {
        format: DENSE_FORMAT.into(),
        version: MANIFEST_VERSION,
        rng: RNG_DECLARATION.into(),
        split: name.into(),
        count: items.len(),
    };
    writeln!(buf, "{}", serde_json::to_string(&header)?)?;
    for item in items {
        writeln!(buf, "{}", serde_json::to_string(item)?)?;
    }
    write_atomic(&dir.join(format!("{name}.jsonl")), &buf)?;
    Ok(())
}

fn read_dense_split(path: &Path) -> Result<Vec<DenseItem>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: DenseFileHeader =
        serde_json::from_str(first.trim_end()).context("bad dense split header")?;
    if header.format != DENSE_FORMAT {
        bail!("unexpected dense split format {:?}", header.format);
    }
    let mut items = Vec::with_capacity(header.count);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).context("bad dense item record")?);
    }
    if items.len() != header.count {
        bail!(
            "dense split {} declares {} items, found {}",
            path.display(),
            header.count,
            items.len()
        );
    }
    Ok(items)
}

/// Write a full dataset directory and return its manifest.
pub fn write_dataset(dir: &Path, dataset: &LoadedDataset, spec_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let (kind, spec) = match dataset {
        LoadedDataset::Flat(ds) => {
            write_flat_split(dir, "train", &ds.spec, &ds.train)?;
            write_flat_split(dir, "validation", &ds.spec, &ds.validation)?;
            write_flat_split(dir, "calibration", &ds.spec, &ds.calibration)?;
            write_flat_split(dir, "test", &ds.spec, &ds.test)?;
            ("classification", ds.spec.clone())
        }
        LoadedDataset::Dense(ds) => {
            write_dense_split(dir, "train", &ds.train)?;
            write_dense_split(dir, "validation", &ds.validation)?;
            write_flat_split(dir, "calibration", &ds.spec, &ds.calibration)?;
            write_dense_split(dir, "test", &ds.test)?;
            ("dense", ds.spec.clone())
        }
    };
    let mut checksums = std::collections::BTreeMap::new();
    for name in ["train", "validation", "calibration", "test"] {
        let file = format!("{name}.jsonl");
        checksums.insert(file.clone(), file_checksum(&dir.join(&file))?);
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        kind: kind.into(),
        rng: RNG_DECLARATION.into(),
        spec,
        spec_hash: spec_hash.into(),
        checksums,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading dataset manifest {}", path.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).context("bad dataset manifest")?;
    if manifest.format != MANIFEST_FORMAT {
        bail!("unexpected dataset manifest format {:?}", manifest.format);
    }
    if manifest.version != MANIFEST_VERSION {
        bail!("unsupported dataset manifest version {}", manifest.version);
    }
    Ok(manifest)
}

/// Load a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(dir)?;
    let flat = |name: &str| -> Result<Vec<citl_core::data::LabeledExample>> {
        let path = dir.join(format!("{name}.jsonl"));
        let file =
            fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let (_, examples) = read_examples(&mut BufReader::new(file))?;
        Ok(examples)
    };
    match manifest.kind.as_str() {
        "classification" => Ok(LoadedDataset::Flat(SplitDataset {
            train: flat("train")?,
            validation: flat("validation")?,
            calibration: flat("calibration")?,
            test: flat("test")?,
            spec: manifest.spec,
        })),
        "dense" => Ok(LoadedDataset::Dense(DenseDataset {
            train: read_dense_split(&dir.join("train.jsonl"))?,
            validation: read_dense_split(&dir.join("validation.jsonl"))?,
            calibration: flat("calibration")?,
            test: read_dense_split(&dir.join("test.jsonl"))?,
            spec: manifest.spec,
        })),
        other => bail!("unknown dataset kind {other:?}"),
    }
}
