//! Multi-scale region assembly over slide pyramids.
//!
//! A region is a `G×G` token grid built from the fine patches under one
//! coarse patch, with one randomly chosen fine slot replaced by the coarse
//! patch itself.

use crate::corpus::render::SlidePyramid;
use crate::error::{PipelineError, Result};
use ndarray::Array3;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleTag {
    Level1,
    Level2,
}

/// A region's source patches before slot dropping: one coarse patch and the
/// `G²` fine candidates spatially underneath it, row-major.
#[derive(Debug, Clone)]
pub struct RegionGroup {
    pub region_index: usize,
    /// Coarse patch coordinate in its grid.
    pub coord: (usize, usize),
    pub level2_patch: Array3<f64>,
    pub candidates: Vec<Array3<f64>>,
    /// Fine-grid coordinates of each candidate.
    pub candidate_coords: Vec<(usize, usize)>,
}

/// An assembled multi-scale region: `G²` tokens with per-slot provenance.
#[derive(Debug, Clone)]
pub struct Region {
    pub tokens: Vec<Array3<f64>>,
    pub scale_tags: Vec<ScaleTag>,
    pub source: (String, usize),
}

impl Region {
    pub fn level2_slot(&self) -> usize {
        self.scale_tags
            .iter()
            .position(|t| *t == ScaleTag::Level2)
            .expect("region lacks a coarse slot")
    }
}

/// One candidate group per coarse patch. Errors when the fine grid is not
/// exactly `G×` the coarse grid per axis.
pub fn enumerate_regions(pyramid: &SlidePyramid, g: usize) -> Result<Vec<RegionGroup>> {
    let l2 = &pyramid.level2;
    let l1 = &pyramid.level1;
    if l1.rows != l2.rows * g || l1.cols != l2.cols * g {
        return Err(PipelineError::shape(format!(
            "fine grid {}×{} is not {g}× the coarse grid {}×{}",
            l1.rows, l1.cols, l2.rows, l2.cols
        )));
    }
    let mut groups = Vec::with_capacity(l2.rows * l2.cols);
    for r in 0..l2.rows {
        for c in 0..l2.cols {
            let mut candidates = Vec::with_capacity(g * g);
            let mut candidate_coords = Vec::with_capacity(g * g);
            for dr in 0..g {
                for dc in 0..g {
                    candidates.push(l1.at(r * g + dr, c * g + dc).clone());
                    candidate_coords.push((r * g + dr, c * g + dc));
                }
            }
            groups.push(RegionGroup {
                region_index: r * l2.cols + c,
                coord: (r, c),
                level2_patch: l2.at(r, c).clone(),
                candidates,
                candidate_coords,
            });
        }
    }
    Ok(groups)
}

/// Uniform choice of the fine slot to replace with the coarse patch. Every
/// assembly path draws through this so pixel-space and cached-feature
/// assembly consume the RNG identically.
pub fn pick_drop_slot<R: Rng>(n_slots: usize, rng: &mut R) -> usize {
    rng.random_range(0..n_slots)
}

/// Drop one fine slot uniformly at random and place the coarse patch there.
pub fn assemble_region<R: Rng>(group: &RegionGroup, slide_id: &str, rng: &mut R) -> Region {
    let n = group.candidates.len();
    let drop = pick_drop_slot(n, rng);
    let mut tokens = group.candidates.clone();
    let mut scale_tags = vec![ScaleTag::Level1; n];
    tokens[drop] = group.level2_patch.clone();
    scale_tags[drop] = ScaleTag::Level2;
    Region {
        tokens,
        scale_tags,
        source: (slide_id.to_string(), group.region_index),
    }
}

/// Sample `Q` contiguous `L×L` windows of a slide's region grid and stack
/// their feature rows: output has `Q·L²` rows. Sampling is without
/// replacement while enough distinct windows exist, with replacement
/// otherwise.
pub fn sample_region_windows<R: Rng>(
    f_r: &ndarray::Array2<f64>,
    grid: (usize, usize),
    q: usize,
    l: usize,
    rng: &mut R,
) -> Result<ndarray::Array2<f64>> {
    let (rows, cols) = grid;
    if f_r.nrows() == 0 {
        return Err(PipelineError::shape("empty region feature set".to_string()));
    }
    if rows * cols != f_r.nrows() {
        return Err(PipelineError::shape(format!(
            "grid {rows}×{cols} does not cover {} feature rows",
            f_r.nrows()
        )));
    }
    if q == 0 || l == 0 {
        return Err(PipelineError::config("q and l must be ≥ 1"));
    }
    if l > rows || l > cols {
        return Err(PipelineError::shape(format!(
            "window edge {l} exceeds region grid {rows}×{cols}"
        )));
    }
    let wr = rows - l + 1;
    let wc = cols - l + 1;
    let n_windows = wr * wc;
    let picks: Vec<usize> = if q <= n_windows {
        // Without replacement: a partial Fisher–Yates over window indices.
        let mut idx: Vec<usize> = (0..n_windows).collect();
        for i in 0..q {
            let j = rng.random_range(i..n_windows);
            idx.swap(i, j);
        }
        idx[..q].to_vec()
    } else {
        (0..q).map(|_| rng.random_range(0..n_windows)).collect()
    };
    let d = f_r.ncols();
    let mut out = ndarray::Array2::<f64>::zeros((q * l * l, d));
    for (wi, w) in picks.iter().enumerate() {
        let (w_r, w_c) = (w / wc, w % wc);
        for dr in 0..l {
            for dc in 0..l {
                let src = (w_r + dr) * cols + (w_c + dc);
                let dst = wi * l * l + dr * l + dc;
                out.row_mut(dst).assign(&f_r.row(src));
            }
        }
    }
    Ok(out)
}
