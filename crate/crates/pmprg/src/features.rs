//! Binary feature store: fixed-width f32 rows plus a JSON manifest.

use crate::error::{PipelineError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 4] = b"MRVF";
pub const FEATURE_VERSION: u32 = 1;

/// A dense row-major feature matrix destined for disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: u32,
    pub dim: u32,
    /// Row-major values, `rows × dim`.
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::NonFinite("feature matrix".to_string()));
        }
        Ok(Self {
            rows: a.nrows() as u32,
            dim: a.ncols() as u32,
            values: a.iter().map(|v| *v as f32).collect(),
        })
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.rows as usize, self.dim as usize),
            self.values.iter().map(|v| *v as f64).collect(),
        )
        .expect("row count × dim matches value buffer")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[i * d..(i + 1) * d]
    }
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if m.values.len() != (m.rows as usize) * (m.dim as usize) {
        return Err(PipelineError::shape(format!(
            "feature buffer holds {} values for {}×{}",
            m.values.len(),
            m.rows,
            m.dim
        )));
    }
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite(format!(
            "feature store {}",
            path.display()
        )));
    }
    let mut buf = Vec::with_capacity(16 + m.values.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&m.rows.to_le_bytes());
    buf.extend_from_slice(&m.dim.to_le_bytes());
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(PipelineError::Truncated {
            path: path.display().to_string(),
            needed: 16,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(PipelineError::BadMagic {
            path: path.display().to_string(),
            expected: "MRVF",
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(PipelineError::config(format!(
            "unsupported feature store version {version} in {}",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let needed = 16 + (rows as usize) * (dim as usize) * 4;
    if bytes.len() < needed {
        return Err(PipelineError::Truncated {
            path: path.display().to_string(),
            needed,
            found: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity((rows as usize) * (dim as usize));
    for chunk in bytes[16..needed].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(FeatureMatrix { rows, dim, values })
}

/// Manifest describing every matrix in a feature store directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub model: String,
    pub g: usize,
    pub q: usize,
    pub l: usize,
    /// slide_id → file name (relative to the manifest's directory).
    pub slides: BTreeMap<String, String>,
}

impl StoreManifest {
    pub fn new(model: &str, g: usize, q: usize, l: usize) -> Self {
        Self {
            model: model.to_string(),
            g,
            q,
            l,
            slides: BTreeMap::new(),
        }
    }
}

pub struct FeatureStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

impl FeatureStore {
    pub fn create(dir: &Path, manifest: StoreManifest) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn put(&mut self, slide_id: &str, m: &FeatureMatrix) -> Result<()> {
        let file = format!("{slide_id}.mrvf");
        write_features(&self.dir.join(&file), m)?;
        self.manifest.slides.insert(slide_id.to_string(), file);
        Ok(())
    }

    pub fn get(&self, slide_id: &str) -> Result<FeatureMatrix> {
        let file = self.manifest.slides.get(slide_id).ok_or_else(|| {
            PipelineError::config(format!("slide {slide_id} absent from feature store"))
        })?;
        read_features(&self.dir.join(file))
    }

    pub fn flush_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}
