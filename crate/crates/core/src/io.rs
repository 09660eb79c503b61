//! Raw float32 band-sequential files with a TOML sidecar.
//!
//! A dataset `foo` is the pair `foo.raw` (little-endian `f32`, band-major, then
//! row-major pixels) and `foo.meta`. The same layout stores cubes, libraries
//! (bands x signatures, `lines = 1`) and abundance matrices (rows as bands).

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{
    check_finite, AbundanceLevel, AbundanceMatrix, BundleLibrary, GroupStructure, HsiCube,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cube,
    Library,
    Abundance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Bundle,
    Global,
}

/// Contents of a `.meta` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: DatasetKind,
    pub lines: usize,
    pub samples: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
    #[serde(default = "little")]
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
}

fn little() -> String {
    "little".to_string()
}

impl Metadata {
    fn new(kind: DatasetKind, lines: usize, samples: usize, bands: usize) -> Self {
        Metadata {
            kind,
            lines,
            samples,
            bands,
            dtype: "float32".into(),
            interleave: "bsq".into(),
            byte_order: little(),
            level: None,
            groups: None,
            wavelengths: None,
        }
    }

    fn group_ranges(&self) -> Option<Vec<Range<usize>>> {
        self.groups
            .as_ref()
            .map(|g| g.iter().map(|&[a, b]| a..b).collect())
    }
}

/// `foo`, `foo.raw` and `foo.meta` all name the dataset `foo`.
pub fn dataset_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("meta") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let mut raw = stem.clone().into_os_string();
    raw.push(".raw");
    let mut meta = stem.into_os_string();
    meta.push(".meta");
    (raw.into(), meta.into())
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let (_, meta_path) = dataset_paths(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Metadata {
        path: meta_path.clone(),
        message,
    };
    if meta.dtype != "float32" {
        return Err(bad(format!("unsupported dtype `{}`", meta.dtype)));
    }
    if meta.interleave != "bsq" {
        return Err(bad(format!("unsupported interleave `{}`", meta.interleave)));
    }
    if meta.byte_order != "little" {
        return Err(bad(format!("unsupported byte order `{}`", meta.byte_order)));
    }
    if meta.lines == 0 || meta.samples == 0 || meta.bands == 0 {
        return Err(bad("lines, samples and bands must be positive".into()));
    }
    Ok(meta)
}

fn write_dataset(path: &Path, meta: &Metadata, m: &DMatrix<f64>) -> Result<()> {
    let (raw_path, meta_path) = dataset_paths(path);
    let (rows, cols) = m.shape();
    let mut bytes = Vec::with_capacity(rows * cols * 4);
    for b in 0..rows {
        for n in 0..cols {
            bytes.extend_from_slice(&(m[(b, n)] as f32).to_le_bytes());
        }
    }
    let text = toml::to_string(meta).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn read_raw(path: &Path, meta: &Metadata) -> Result<DMatrix<f64>> {
    let (raw_path, _) = dataset_paths(path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let cols = meta.lines * meta.samples;
    let expected = meta.bands * cols;
    if bytes.len() != expected * 4 {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() / 4,
        });
    }
    let mut m = DMatrix::zeros(meta.bands, cols);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        m[(i / cols, i % cols)] = v;
    }
    check_finite(m.as_slice(), "raw data")?;
    Ok(m)
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut meta = Metadata::new(DatasetKind::Cube, cube.height(), cube.width(), cube.bands());
    meta.wavelengths = cube.wavelengths().map(<[f64]>::to_vec);
    write_dataset(path, &meta, cube.data())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let meta = read_metadata(path)?;
    let data = read_raw(path, &meta)?;
    let cube = HsiCube::new(data, meta.lines, meta.samples)?;
    match meta.wavelengths {
        Some(w) => cube.with_wavelengths(w),
        None => Ok(cube),
    }
}

pub fn save_library(library: &BundleLibrary, path: &Path) -> Result<()> {
    let mut meta = Metadata::new(DatasetKind::Library, 1, library.len(), library.bands());
    meta.groups = Some(encode_groups(library.groups()));
    write_dataset(path, &meta, library.signatures())
}

pub fn load_library(path: &Path) -> Result<BundleLibrary> {
    let meta = read_metadata(path)?;
    let signatures = read_raw(path, &meta)?;
    let ranges = meta.group_ranges().ok_or_else(|| Error::Metadata {
        path: dataset_paths(path).1,
        message: "library sidecar lacks `groups`".into(),
    })?;
    BundleLibrary::new(signatures, GroupStructure::new(ranges)?)
}

/// Saves with `lines = 1, samples = N`; see [`save_abundance_shaped`].
pub fn save_abundance(a: &AbundanceMatrix, path: &Path) -> Result<()> {
    save_abundance_shaped(a, path, None)
}

/// Saves with an optional `(height, width)` layout for the pixel axis.
pub fn save_abundance_shaped(
    a: &AbundanceMatrix,
    path: &Path,
    shape: Option<(usize, usize)>,
) -> Result<()> {
    let (lines, samples) = match shape {
        Some((h, w)) => {
            if h * w != a.pixels() {
                return Err(Error::Dimension {
                    context: "abundance shape",
                    expected: a.pixels(),
                    found: h * w,
                });
            }
            (h, w)
        }
        None => (1, a.pixels()),
    };
    let mut meta = Metadata::new(DatasetKind::Abundance, lines, samples, a.rows());
    match a.level() {
        AbundanceLevel::Bundle(groups) => {
            meta.level = Some(Level::Bundle);
            meta.groups = Some(encode_groups(groups));
        }
        AbundanceLevel::Global => meta.level = Some(Level::Global),
    }
    write_dataset(path, &meta, a.coefficients())
}

pub fn load_abundance(path: &Path) -> Result<AbundanceMatrix> {
    let meta = read_metadata(path)?;
    let coefficients = read_raw(path, &meta)?;
    let level = match meta.level {
        Some(Level::Bundle) => {
            let ranges = meta.group_ranges().ok_or_else(|| Error::Metadata {
                path: dataset_paths(path).1,
                message: "bundle abundance sidecar lacks `groups`".into(),
            })?;
            AbundanceLevel::Bundle(GroupStructure::new(ranges)?)
        }
        Some(Level::Global) | None => AbundanceLevel::Global,
    };
    AbundanceMatrix::new(level, coefficients)
}

fn encode_groups(groups: &GroupStructure) -> Vec<[usize; 2]> {
    groups.ranges().iter().map(|r| [r.start, r.end]).collect()
}
