use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    #[serde(default)]
    pub relevance_path: Option<PathBuf>,
}

/// CSV manifest `path,label,relevance_path`. Relative paths resolve against
/// `root` (the manifest's directory); the split tag is the file stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub split: String,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads a manifest. The class count is one more than the largest label.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                path: path.into(),
                reason: format!("{other:?}"),
            },
        })?;
        let mut entries = Vec::new();
        for (row, rec) in rdr.deserialize::<ManifestEntry>().enumerate() {
            let mut e = rec.map_err(|e| Error::data(format!("{}:{}", path.display(), row + 2), e.to_string()))?;
            if e.relevance_path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
                e.relevance_path = None;
            }
            entries.push(e);
        }
        let num_classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
            num_classes,
            split: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                path: path.into(),
                reason: format!("{other:?}"),
            },
        })?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes every sample as a raster (plus its relevance grid) under
/// `dir/<split>/` and the manifest as `dir/<split>.csv`.
pub fn write_dataset(dir: &Path, split: &str, ds: &Dataset) -> Result<DatasetManifest> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = PathBuf::from(split).join(format!("{i:06}.dlim"));
        s.image.to_raster().write(&dir.join(&rel))?;
        let relevance_path = match &s.relevance {
            Some(grid) => {
                let side = (grid.len() as f64).sqrt().round() as usize;
                let rp = PathBuf::from(split).join(format!("{i:06}.rel.dlim"));
                Raster::new(side, side, 1, grid.iter().map(|&b| b as u8).collect())?.write(&dir.join(&rp))?;
                Some(rp)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
            relevance_path,
        });
    }
    let m = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        num_classes: ds.num_classes,
        split: split.into(),
    };
    m.write(&dir.join(format!("{split}.csv")))?;
    Ok(m)
}
