//! Corpus persistence.
//!
//! Layout under the corpus root:
//!
//! ```text
//! schemas.json                    organ schemas
//! corpus.json                     manifest: seed, geometry, patient list
//! patients/<id>/report.txt
//! patients/<id>/labels.json       organ_id, tag_assignments, dropped_tags
//! patients/<id>/slide_<k>.mrpx    packed pixels (default), or
//! patients/<id>/slide_<k>/level{1,2}/patch_<r>_<c>.png
//! ```
//!
//! The packed binary keeps the f32 pixels bit-exact; the PNG tree is a
//! human-inspectable alternative that quantizes to 8 bits.

use super::render::{render_slide, PatchGrid, SlidePyramid};
use super::{Corpus, OrganSchema, SlideGeometry, SyntheticPatient};
use crate::error::{PipelineError, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const PIXEL_MAGIC: &[u8; 4] = b"MRPX";
const PIXEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PatientEntry {
    patient_id: String,
    organ_id: usize,
    slide_count: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    seed: u64,
    geometry: SlideGeometry,
    png_tree: bool,
    patients: Vec<PatientEntry>,
}

#[derive(Serialize, Deserialize)]
struct Labels {
    organ_id: usize,
    tag_assignments: BTreeMap<String, usize>,
    dropped_tags: BTreeSet<String>,
}

pub fn patient_dir(root: &Path, patient_id: &str) -> PathBuf {
    root.join("patients").join(patient_id)
}

fn write_pixels_packed(path: &Path, s: &SlidePyramid) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PIXEL_MAGIC);
    buf.extend_from_slice(&PIXEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s.patch as u32).to_le_bytes());
    buf.extend_from_slice(&(s.level2.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(s.level2.cols as u32).to_le_bytes());
    buf.extend_from_slice(&((s.level1.rows / s.level2.rows) as u32).to_le_bytes());
    for patch in s.level2.patches.iter().chain(&s.level1.patches) {
        for v in patch.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_pixels_packed(path: &Path, slide_id: &str) -> Result<SlidePyramid> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pathstr = path.display().to_string();
    if bytes.len() < 24 || &bytes[..4] != PIXEL_MAGIC {
        return Err(PipelineError::BadMagic {
            path: pathstr,
            expected: "MRPX",
        });
    }
    let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let patch = rd_u32(8);
    let l2_rows = rd_u32(12);
    let l2_cols = rd_u32(16);
    let g = rd_u32(20);
    let per_patch = patch * patch * 3;
    let n_l2 = l2_rows * l2_cols;
    let n_l1 = n_l2 * g * g;
    let needed = 24 + (n_l2 + n_l1) * per_patch * 4;
    if bytes.len() < needed {
        return Err(PipelineError::Truncated {
            path: pathstr,
            needed,
            found: bytes.len(),
        });
    }
    let mut off = 24;
    let mut read_patch = || {
        let mut a = Array3::<f64>::zeros((patch, patch, 3));
        for v in a.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        a
    };
    let level2 = PatchGrid {
        rows: l2_rows,
        cols: l2_cols,
        patches: (0..n_l2).map(|_| read_patch()).collect(),
    };
    let level1 = PatchGrid {
        rows: l2_rows * g,
        cols: l2_cols * g,
        patches: (0..n_l1).map(|_| read_patch()).collect(),
    };
    Ok(SlidePyramid {
        slide_id: slide_id.to_string(),
        patch,
        level1,
        level2,
    })
}

fn write_pixels_png_tree(dir: &Path, s: &SlidePyramid) -> Result<()> {
    for (level, grid) in [(1usize, &s.level1), (2, &s.level2)] {
        let lvl_dir = dir.join(format!("level{level}"));
        std::fs::create_dir_all(&lvl_dir)?;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let patch = grid.at(r, c);
                let (h, w, _) = patch.dim();
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = [
                            (patch[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                            (patch[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                            (patch[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
                        ];
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(lvl_dir.join(format!("patch_{r}_{c}.png")))
                    .map_err(|e| PipelineError::runtime(format!("png write failed: {e}")))?;
            }
        }
    }
    Ok(())
}

fn read_pixels_png_tree(dir: &Path, geometry: SlideGeometry, slide_id: &str) -> Result<SlidePyramid> {
    let read_grid = |level: usize, rows: usize, cols: usize| -> Result<PatchGrid> {
        let mut patches = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let p = dir.join(format!("level{level}/patch_{r}_{c}.png"));
                let img = image::open(&p)
                    .map_err(|e| PipelineError::runtime(format!("png read failed {p:?}: {e}")))?
                    .to_rgb8();
                let mut a = Array3::<f64>::zeros((img.height() as usize, img.width() as usize, 3));
                for (x, y, px) in img.enumerate_pixels() {
                    for ch in 0..3 {
                        a[[y as usize, x as usize, ch]] = px[ch] as f64 / 255.0;
                    }
                }
                patches.push(a);
            }
        }
        Ok(PatchGrid { rows, cols, patches })
    };
    Ok(SlidePyramid {
        slide_id: slide_id.to_string(),
        patch: geometry.patch,
        level1: read_grid(1, geometry.level1_rows(), geometry.level1_cols())?,
        level2: read_grid(2, geometry.level2_rows, geometry.level2_cols)?,
    })
}

/// Render and write the whole corpus under `root`.
pub fn write_corpus(root: &Path, corpus: &Corpus, noise_sigma: f64, png_tree: bool) -> Result<()> {
    std::fs::create_dir_all(root)?;
    std::fs::write(
        root.join("schemas.json"),
        serde_json::to_string_pretty(&corpus.schemas)?,
    )?;
    let manifest = CorpusManifest {
        seed: corpus.seed,
        geometry: corpus.geometry,
        png_tree,
        patients: corpus
            .patients
            .iter()
            .map(|p| PatientEntry {
                patient_id: p.patient_id.clone(),
                organ_id: p.organ_id,
                slide_count: p.slide_count,
            })
            .collect(),
    };
    std::fs::write(
        root.join("corpus.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for p in &corpus.patients {
        let dir = patient_dir(root, &p.patient_id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.txt"), &p.report)?;
        let labels = Labels {
            organ_id: p.organ_id,
            tag_assignments: p.tag_assignments.clone(),
            dropped_tags: p.dropped_tags.clone(),
        };
        std::fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)?)?;
        for k in 0..p.slide_count {
            let pyramid = render_slide(
                p,
                &corpus.schemas[p.organ_id],
                k,
                corpus.geometry,
                corpus.seed,
                noise_sigma,
            )?;
            if png_tree {
                let sdir = dir.join(format!("slide_{k}"));
                std::fs::create_dir_all(&sdir)?;
                write_pixels_png_tree(&sdir, &pyramid)?;
            } else {
                write_pixels_packed(&dir.join(format!("slide_{k}.mrpx")), &pyramid)?;
            }
        }
    }
    Ok(())
}

/// Load labels, reports, and schemas (not pixels) back from disk.
pub fn read_corpus(root: &Path) -> Result<Corpus> {
    let schemas: Vec<OrganSchema> =
        serde_json::from_str(&std::fs::read_to_string(root.join("schemas.json"))?)?;
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(root.join("corpus.json"))?)?;
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for e in &manifest.patients {
        let dir = patient_dir(root, &e.patient_id);
        let report = std::fs::read_to_string(dir.join("report.txt"))?;
        let labels: Labels =
            serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)?;
        patients.push(SyntheticPatient {
            patient_id: e.patient_id.clone(),
            organ_id: labels.organ_id,
            slide_count: e.slide_count,
            tag_assignments: labels.tag_assignments,
            dropped_tags: labels.dropped_tags,
            report,
        });
    }
    Ok(Corpus {
        seed: manifest.seed,
        schemas,
        geometry: manifest.geometry,
        patients,
    })
}

/// Whether this corpus was written as PNG trees.
pub fn corpus_is_png(root: &Path) -> Result<bool> {
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(root.join("corpus.json"))?)?;
    Ok(manifest.png_tree)
}

/// Load one slide's pixels from a written corpus.
pub fn read_slide(root: &Path, corpus: &Corpus, patient_id: &str, slide_index: usize) -> Result<SlidePyramid> {
    let dir = patient_dir(root, patient_id);
    let slide_id = format!("{patient_id}_s{slide_index}");
    let packed = dir.join(format!("slide_{slide_index}.mrpx"));
    if packed.exists() {
        read_pixels_packed(&packed, &slide_id)
    } else {
        read_pixels_png_tree(
            &dir.join(format!("slide_{slide_index}")),
            corpus.geometry,
            &slide_id,
        )
    }
}
