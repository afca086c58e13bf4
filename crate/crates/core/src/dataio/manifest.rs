use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::Domain;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCENES_FILE: &str = "scenes.json";
pub const MAX_COUNT: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    /// Empty in the CSV for unlabeled images.
    pub count: Option<u32>,
    pub domain: Domain,
    /// Per-image generator seed; empty for external corpora.
    pub seed: Option<u64>,
}

/// A dataset directory: `manifest.csv` plus the PNGs it names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(dir: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Self {
        DatasetManifest { dir: dir.into(), rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.dir.join(&row.filename)
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(self.manifest_path())?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses `manifest.csv` in `dir`. Rows are numbered from 1 (the first
    /// line after the header) in errors. Files are not opened here.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::InvalidInput(format!("no {MANIFEST_FILE} in {}", dir.display())));
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path)?;
        let headers = reader.headers()?.clone();
        let expected = ["filename", "count", "domain", "seed"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest {
                path,
                row: 0,
                message: format!("header must be `{}`", expected.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let fail = |message: String| Error::Manifest {
                path: path.clone(),
                row,
                message,
            };
            let record = record.map_err(|e| fail(e.to_string()))?;
            let parsed: ManifestRow = record.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
            if parsed.filename.is_empty() {
                return Err(fail("empty filename".into()));
            }
            if let Some(c) = parsed.count {
                if !(1..=MAX_COUNT).contains(&c) {
                    return Err(fail(format!("count {c} outside 1..={MAX_COUNT}")));
                }
            }
            rows.push(parsed);
        }
        Ok(DatasetManifest {
            dir: dir.to_path_buf(),
            rows,
        })
    }

    /// SHA-256 over the manifest file followed by every referenced image file
    /// in row order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(fs::read(self.manifest_path())?);
        for row in &self.rows {
            h.update(fs::read(self.image_path(row))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}
