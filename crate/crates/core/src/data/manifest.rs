//! Labeled image lists: `relative/path.png,label` per line, no header.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use texvit_autodiff::Tensor;

use super::image_io::decode_image;
use super::Sample;
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: String,
    /// 0 real, 1 fake.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Option<Split>, entries: Vec<ManifestEntry>) -> Self {
        Self { root: root.into(), split, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Absolute (root-joined) paths of every entry.
    pub fn resolved_paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| self.resolve(e)).collect()
    }

    /// Resolved paths made canonical where the file exists, for comparing
    /// manifests that spell the same file differently.
    pub fn canonical_paths(&self) -> Vec<PathBuf> {
        self.resolved_paths().into_iter().map(|p| std::fs::canonicalize(&p).unwrap_or(p)).collect()
    }

    pub fn to_csv(&self) -> String {
        self.entries.iter().map(|e| format!("{},{}\n", e.path, e.label)).collect()
    }

    /// Writes the CSV. Entry paths stay relative, so the file should sit in
    /// `root` to load back unchanged.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    /// Concatenation of manifests with possibly different roots. Entries
    /// become root-joined paths under an empty root.
    pub fn union(parts: &[&DatasetManifest], split: Option<Split>) -> DatasetManifest {
        let entries = parts
            .iter()
            .flat_map(|m| {
                m.entries.iter().map(|e| ManifestEntry {
                    path: m.resolve(e).to_string_lossy().into_owned(),
                    label: e.label,
                })
            })
            .collect();
        DatasetManifest { root: PathBuf::new(), split, entries }
    }

    /// Decodes every image (in parallel, results in manifest order).
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .par_iter()
            .map(|e| {
                let image = decode_image(&self.resolve(e))?;
                Ok(Sample::hard(image, e.label))
            })
            .collect()
    }

    /// Every decoded image stacked into `N×3×H×W`, with labels.
    pub fn load_batch(&self) -> Result<(Tensor<f32>, Vec<u8>)> {
        let samples = self.load_samples()?;
        let labels = self.entries.iter().map(|e| e.label).collect();
        let imgs: Vec<_> = samples.into_iter().map(|s| s.image).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }
}

/// Parses CSV text; `path` labels errors and `root` anchors entries.
pub fn parse_manifest(text: &str, path: &Path, root: &Path, split: Option<Split>) -> Result<DatasetManifest> {
    let bad = |line: usize, detail: String| Error::Manifest { path: path.to_path_buf(), line, detail };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        if raw.ends_with('\r') {
            return Err(bad(line, "CRLF line ending (manifests use LF)".into()));
        }
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 2 {
            return Err(bad(line, format!("expected 2 columns `path,label`, found {}", cols.len())));
        }
        let label = match cols[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(line, format!("label must be 0 or 1, found `{other}`"))),
        };
        let p = cols[0].trim();
        if p.is_empty() {
            return Err(bad(line, "empty path".into()));
        }
        if !seen.insert(p.to_string()) {
            return Err(bad(line, format!("duplicate path `{p}`")));
        }
        entries.push(ManifestEntry { path: p.to_string(), label });
    }
    Ok(DatasetManifest::new(root, split, entries))
}

/// Reads a manifest, resolving entries against its directory, and decodes
/// every referenced image so that bad files fail here rather than mid-run.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = match path.file_stem().and_then(|s| s.to_str()) {
        Some("train") => Some(Split::Train),
        Some("val") => Some(Split::Val),
        Some("test") => Some(Split::Test),
        _ => None,
    };
    let manifest = parse_manifest(&text, path, &root, split)?;
    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            decode_image(&manifest.resolve(e)).map(|_| ()).map_err(|err| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("cannot load `{}`: {err}", e.path),
            })
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(manifest)
}
