//! Dataset manifests: one `left,right,gt,format` entry per line, `#` starts a
//! comment. Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{parse_kitti_disparity, parse_pfm, read_image, StereoSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtFormat {
    Pfm,
    KittiPng16,
}

impl GtFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            GtFormat::Pfm => "pfm",
            GtFormat::KittiPng16 => "kitti_png16",
        }
    }
}

impl FromStr for GtFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfm" => Ok(GtFormat::Pfm),
            "kitti_png16" => Ok(GtFormat::KittiPng16),
            other => Err(Error::Format(format!(
                "unknown ground-truth format {other:?} (expected pfm or kitti_png16)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: PathBuf,
    pub gt_format: GtFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [left, right, gt, format] = fields.as_slice() else {
            return Err(Error::Format(format!(
                "{}:{}: expected 4 comma-separated fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        };
        let gt_format = format
            .parse()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        entries.push(ManifestEntry {
            left: resolve(left),
            right: resolve(right),
            gt: resolve(gt),
            gt_format,
        });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!(
            "manifest {} has no entries",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(DatasetManifest { name, entries })
}

pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<StereoSample> {
    let entry = manifest.entries.get(index).ok_or(Error::Range {
        index,
        len: manifest.entries.len(),
    })?;
    let left = read_image(&entry.left)?;
    let right = read_image(&entry.right)?;
    let gt_bytes = std::fs::read(&entry.gt).map_err(|e| Error::io(&entry.gt, e))?;
    let gt = match entry.gt_format {
        GtFormat::Pfm => parse_pfm(&gt_bytes)?.into_disparity()?,
        GtFormat::KittiPng16 => parse_kitti_disparity(&gt_bytes)?,
    };
    StereoSample::new(format!("{}/{index}", manifest.name), left, right, gt)
}
