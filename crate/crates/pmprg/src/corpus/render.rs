//! Procedural slide rendering.
//!
//! Every region of a slide displays the texture of one of the patient's tag
//! classes (region `r` shows the class of tag `r mod K`), so regional visual
//! content is predictive of the tag labels. Each of the 27 inner classes maps
//! to a distinct hue plus a periodic pattern family; the organ adds a global
//! tint; Gaussian pixel noise is layered on top.

use super::{OrganSchema, SlideGeometry, SyntheticPatient, UNCERTAIN_CLASS};
use crate::error::{PipelineError, Result};
use crate::seeds::derive_rng;
use ndarray::Array3;
use rand_distr::{Distribution, Normal};

/// Patches of one magnification level, row-major.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Array3<f64>>,
}

impl PatchGrid {
    pub fn at(&self, r: usize, c: usize) -> &Array3<f64> {
        &self.patches[r * self.cols + c]
    }
}

/// One slide: coarse (level-2) and fine (level-1) patch grids. All pixel
/// values lie in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub patch: usize,
    pub level1: PatchGrid,
    pub level2: PatchGrid,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Noise-free color of one pixel for (class, organ) at global coordinates.
fn texture_pixel(class: usize, organ_id: usize, x: usize, y: usize) -> [f64; 3] {
    let mut rgb = if class == UNCERTAIN_CLASS {
        [0.5, 0.5, 0.5]
    } else {
        let hue = class as f64 / 27.0;
        let period = (8 + (class % 3) * 4) as f64;
        let tau = std::f64::consts::TAU;
        let modulation = match class % 5 {
            0 => (tau * y as f64 / period).sin(),
            1 => (tau * x as f64 / period).sin(),
            2 => ((tau * x as f64 / period).sin() * (tau * y as f64 / period).sin()).signum(),
            3 => (tau * (x + y) as f64 / period).sin(),
            _ => (tau * x as f64 / period).cos() * (tau * y as f64 / period).cos(),
        };
        hsv_to_rgb(hue, 0.75, 0.8 + 0.15 * modulation)
    };
    // Global organ tint.
    match organ_id {
        0 => rgb[0] += 0.08,
        _ => rgb[2] += 0.08,
    }
    rgb
}

/// Render one slide of a patient. Deterministic in
/// `(corpus seed, patient, slide_index, noise_sigma)`.
pub fn render_slide(
    patient: &SyntheticPatient,
    schema: &OrganSchema,
    slide_index: usize,
    geometry: SlideGeometry,
    corpus_seed: u64,
    noise_sigma: f64,
) -> Result<SlidePyramid> {
    if slide_index >= patient.slide_count {
        return Err(PipelineError::config(format!(
            "slide index {slide_index} out of range for {} slides",
            patient.slide_count
        )));
    }
    geometry.validate()?;
    let p = geometry.patch;
    let g = geometry.g;
    let k = schema.k();
    let mut rng = derive_rng(
        corpus_seed,
        &format!("render/{}/{}", patient.patient_id, slide_index),
    );
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| PipelineError::config(format!("bad noise sigma: {e}")))?;

    // Class shown by each region: tag (region mod K)'s assigned class, or
    // the catch-all class where the tag was dropped from the report.
    let region_class = |region: usize| -> usize {
        let tag = &schema.key_tags[region % k];
        patient
            .tag_assignments
            .get(tag)
            .copied()
            .unwrap_or(UNCERTAIN_CLASS)
    };

    // Render the full fine-level image, patch by patch in row-major order so
    // the noise stream is pinned.
    let l1_rows = geometry.level1_rows();
    let l1_cols = geometry.level1_cols();
    let mut level1 = Vec::with_capacity(l1_rows * l1_cols);
    for pr in 0..l1_rows {
        for pc in 0..l1_cols {
            let region = (pr / g) * geometry.level2_cols + (pc / g);
            let class = region_class(region);
            let mut patch = Array3::<f64>::zeros((p, p, 3));
            for y in 0..p {
                for x in 0..p {
                    let base = texture_pixel(class, patient.organ_id, pc * p + x, pr * p + y);
                    for ch in 0..3 {
                        let v = base[ch] + noise.sample(&mut rng);
                        patch[[y, x, ch]] = v.clamp(0.0, 1.0);
                    }
                }
            }
            level1.push(patch);
        }
    }
    let level1 = PatchGrid {
        rows: l1_rows,
        cols: l1_cols,
        patches: level1,
    };

    // Coarse level: each level-2 patch is the g×-downsampled view of the g×g
    // block of fine patches underneath it (block-mean pooling).
    let mut level2 = Vec::with_capacity(geometry.n_regions());
    for r2 in 0..geometry.level2_rows {
        for c2 in 0..geometry.level2_cols {
            let mut patch = Array3::<f64>::zeros((p, p, 3));
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..3 {
                        // Source pixel block in fine-level coordinates.
                        let mut acc = 0.0;
                        for dy in 0..g {
                            for dx in 0..g {
                                let gy = y * g + dy;
                                let gx = x * g + dx;
                                let src = level1.at(r2 * g + gy / p, c2 * g + gx / p);
                                acc += src[[gy % p, gx % p, ch]];
                            }
                        }
                        patch[[y, x, ch]] = acc / (g * g) as f64;
                    }
                }
            }
            level2.push(patch);
        }
    }
    let level2 = PatchGrid {
        rows: geometry.level2_rows,
        cols: geometry.level2_cols,
        patches: level2,
    };

    Ok(SlidePyramid {
        slide_id: format!("{}_s{}", patient.patient_id, slide_index),
        patch: p,
        level1,
        level2,
    })
}
