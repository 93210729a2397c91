//! The two visual encoders: a region-level transformer over 16 multi-scale
//! patch embeddings and a slide-level transformer over sampled region
//! features, plus the pluggable patch backbone that turns pixels into
//! embeddings.

use crate::error::{PipelineError, Result};
use crate::features::FeatureMatrix;
use crate::regions::{enumerate_regions, pick_drop_slot, Region, RegionGroup};
use crate::seeds::derive_rng;
use ndarray::{Array2, Array3};
use pmprg_autodiff::nn::{multi_head_attention, ffn_gelu, MhaWeights};
use pmprg_autodiff::params::{glorot_init, uniform_init};
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::Rng;

/// Image-to-vector patch embedder. Implementations must be deterministic and
/// produce a fixed output width; the pipeline never trains through them.
pub trait BackboneC {
    fn dim(&self) -> usize;
    fn extract(&self, patch: &Array3<f64>) -> Vec<f64>;
    fn trainable(&self) -> bool {
        false
    }
}

/// Test backbone: maps every patch to the zero vector.
pub struct ZeroBackbone {
    pub dim: usize,
}

impl BackboneC for ZeroBackbone {
    fn dim(&self) -> usize {
        self.dim
    }
    fn extract(&self, _patch: &Array3<f64>) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

struct ConvStage {
    c_in: usize,
    c_out: usize,
    /// `c_out × (c_in·9)` kernel, row per output channel.
    w: Array2<f64>,
    b: Vec<f64>,
}

impl ConvStage {
    /// 3×3 valid convolution + ReLU + 2×2 average pooling.
    fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let (ch, cw) = (h - 2, w - 2);
        let mut conv = Array3::<f64>::zeros((ch, cw, self.c_out));
        for r in 0..ch {
            for c in 0..cw {
                for o in 0..self.c_out {
                    let mut acc = self.b[o];
                    let mut k = 0;
                    for dr in 0..3 {
                        for dc in 0..3 {
                            for i in 0..self.c_in {
                                acc += self.w[[o, k]] * x[[r + dr, c + dc, i]];
                                k += 1;
                            }
                        }
                    }
                    conv[[r, c, o]] = acc.max(0.0);
                }
            }
        }
        let (ph, pw) = (ch / 2, cw / 2);
        let mut pooled = Array3::<f64>::zeros((ph, pw, self.c_out));
        for r in 0..ph {
            for c in 0..pw {
                for o in 0..self.c_out {
                    pooled[[r, c, o]] = 0.25
                        * (conv[[2 * r, 2 * c, o]]
                            + conv[[2 * r, 2 * c + 1, o]]
                            + conv[[2 * r + 1, 2 * c, o]]
                            + conv[[2 * r + 1, 2 * c + 1, o]]);
                }
            }
        }
        pooled
    }
}

/// Frozen convolutional patch embedder: three conv/pool stages with seeded
/// random weights, then global average pooling to `d_c` features. Stands in
/// for an externally pre-trained extractor; anything implementing
/// [`BackboneC`] can replace it.
pub struct ConvBackbone {
    stages: Vec<ConvStage>,
    d_c: usize,
}

impl ConvBackbone {
    pub fn new(d_c: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "backbone");
        let channels = [3usize, 8, 16, d_c];
        let stages = (0..3)
            .map(|s| {
                let (c_in, c_out) = (channels[s], channels[s + 1]);
                let fan_in = (c_in * 9) as f64;
                let limit = (6.0 / fan_in).sqrt();
                ConvStage {
                    c_in,
                    c_out,
                    w: uniform_init(&mut rng, c_out, c_in * 9, limit),
                    b: vec![0.0; c_out],
                }
            })
            .collect();
        Self { stages, d_c }
    }
}

impl BackboneC for ConvBackbone {
    fn dim(&self) -> usize {
        self.d_c
    }

    fn extract(&self, patch: &Array3<f64>) -> Vec<f64> {
        let mut x = patch.clone();
        for stage in &self.stages {
            assert!(
                x.dim().0 >= 3 && x.dim().1 >= 3,
                "patch too small for the convolutional backbone"
            );
            x = stage.apply(&x);
        }
        let (h, w, c) = x.dim();
        assert!(h >= 1 && w >= 1, "patch too small for the convolutional backbone");
        let norm = 1.0 / (h * w) as f64;
        (0..c)
            .map(|o| {
                let mut acc = 0.0;
                for r in 0..h {
                    for cc in 0..w {
                        acc += x[[r, cc, o]];
                    }
                }
                acc * norm
            })
            .collect()
    }
}

/// Embed every token of an assembled region: row `i` is the backbone output
/// for token `i`, in grid row-major order.
pub fn backbone_extract(region: &Region, backbone: &dyn BackboneC) -> Result<Array2<f64>> {
    let d = backbone.dim();
    let mut out = Array2::<f64>::zeros((region.tokens.len(), d));
    for (i, tok) in region.tokens.iter().enumerate() {
        let v = backbone.extract(tok);
        if v.len() != d {
            return Err(PipelineError::shape(format!(
                "backbone returned {} dims, declared {d}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PipelineError::NonFinite(format!(
                "backbone output for {} region {} slot {i}",
                region.source.0, region.source.1
            )));
        }
        for (j, x) in v.into_iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    Ok(out)
}

/// Per-slide backbone features for every fine and coarse patch, extracted
/// once so repeated region assemblies gather rows instead of re-running the
/// backbone.
pub struct SlidePatchCache {
    /// `(fine_rows·fine_cols) × d_c`, grid row-major.
    pub fine: Array2<f64>,
    /// `(coarse_rows·coarse_cols) × d_c`, grid row-major.
    pub coarse: Array2<f64>,
    pub fine_cols: usize,
}

pub fn extract_slide_cache(
    pyramid: &crate::corpus::render::SlidePyramid,
    backbone: &dyn BackboneC,
) -> Result<SlidePatchCache> {
    let d = backbone.dim();
    let embed_grid = |grid: &crate::corpus::render::PatchGrid| -> Result<Array2<f64>> {
        let mut m = Array2::<f64>::zeros((grid.rows * grid.cols, d));
        for (i, p) in grid.patches.iter().enumerate() {
            let v = backbone.extract(p);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PipelineError::NonFinite(format!(
                    "backbone output on slide {}",
                    pyramid.slide_id
                )));
            }
            for (j, x) in v.into_iter().enumerate() {
                m[[i, j]] = x;
            }
        }
        Ok(m)
    };
    Ok(SlidePatchCache {
        fine: embed_grid(&pyramid.level1)?,
        coarse: embed_grid(&pyramid.level2)?,
        fine_cols: pyramid.level1.cols,
    })
}

/// Gather the token-embedding matrix for one assembled region from cached
/// per-patch features. Bit-identical to running [`backbone_extract`] on the
/// pixels of `assemble_region` with the same drop slot.
pub fn region_tokens_cached(
    group: &RegionGroup,
    drop_slot: usize,
    cache: &SlidePatchCache,
) -> Array2<f64> {
    let n = group.candidate_coords.len();
    let d = cache.fine.ncols();
    let mut out = Array2::<f64>::zeros((n, d));
    for (i, (fr, fc)) in group.candidate_coords.iter().enumerate() {
        if i == drop_slot {
            out.row_mut(i).assign(&cache.coarse.row(group.region_index));
        } else {
            out.row_mut(i).assign(&cache.fine.row(fr * cache.fine_cols + fc));
        }
    }
    out
}

/// Transformer encoder configuration shared by both encoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub input_dim: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cls_token: bool,
    pub output_dim: usize,
    /// Layer norm before the output head; off only in degenerate test
    /// configs that need the raw residual stream.
    pub final_norm: bool,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(PipelineError::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.token_count == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(PipelineError::config("zero-sized encoder dimension"));
        }
        Ok(())
    }
}

/// Register all encoder parameters under `prefix` (e.g. `enc.`).
pub fn init_vit<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ViTConfig, rng: &mut R) {
    let e = cfg.embed_dim;
    store.insert(&format!("{prefix}proj.w"), glorot_init(rng, cfg.input_dim, e));
    store.insert(&format!("{prefix}proj.b"), Array2::zeros((1, e)));
    if cfg.cls_token {
        store.insert(&format!("{prefix}cls"), uniform_init(rng, 1, e, 0.02));
    }
    store.insert(&format!("{prefix}pe"), uniform_init(rng, cfg.token_count, e, 0.02));
    let hidden = e * cfg.mlp_ratio;
    for i in 0..cfg.depth {
        let p = format!("{prefix}blk{i}.");
        store.insert(&format!("{p}ln1.g"), Array2::ones((1, e)));
        store.insert(&format!("{p}ln1.b"), Array2::zeros((1, e)));
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}attn.{n}"), glorot_init(rng, e, e));
        }
        for n in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}attn.{n}"), Array2::zeros((1, e)));
        }
        store.insert(&format!("{p}ln2.g"), Array2::ones((1, e)));
        store.insert(&format!("{p}ln2.b"), Array2::zeros((1, e)));
        store.insert(&format!("{p}ffn.w1"), glorot_init(rng, e, hidden));
        store.insert(&format!("{p}ffn.b1"), Array2::zeros((1, hidden)));
        store.insert(&format!("{p}ffn.w2"), glorot_init(rng, hidden, e));
        store.insert(&format!("{p}ffn.b2"), Array2::zeros((1, e)));
    }
    if cfg.final_norm {
        store.insert(&format!("{prefix}lnf.g"), Array2::ones((1, e)));
        store.insert(&format!("{prefix}lnf.b"), Array2::zeros((1, e)));
    }
    store.insert(&format!("{prefix}head.w"), glorot_init(rng, e, cfg.output_dim));
    store.insert(&format!("{prefix}head.b"), Array2::zeros((1, cfg.output_dim)));
}

pub struct ViTOut {
    /// `1 × output_dim`.
    pub out: Tx,
    /// Attention maps, `depth × heads`, each `n_tok × n_tok`.
    pub attn: Vec<Vec<Tx>>,
}

const LN_EPS: f64 = 1e-5;

fn mha_weights(b: &mut Bindings, store: &ParamStore, tape: &mut Tape, p: &str) -> MhaWeights {
    MhaWeights {
        wq: b.bind(store, tape, &format!("{p}attn.wq")),
        bq: b.bind(store, tape, &format!("{p}attn.bq")),
        wk: b.bind(store, tape, &format!("{p}attn.wk")),
        bk: b.bind(store, tape, &format!("{p}attn.bk")),
        wv: b.bind(store, tape, &format!("{p}attn.wv")),
        bv: b.bind(store, tape, &format!("{p}attn.bv")),
        wo: b.bind(store, tape, &format!("{p}attn.wo")),
        bo: b.bind(store, tape, &format!("{p}attn.bo")),
    }
}

/// Build the encoder forward pass on `tape`. `tokens` is an already-placed
/// tape node (`n × input_dim`) so callers choose leaf vs constant inputs.
/// `slots` gives each row's position in the full token grid for positional
/// embedding lookup; `None` means rows 0..token_count in order.
pub fn vit_forward(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTConfig,
    tokens: Tx,
    slots: Option<&[usize]>,
) -> Result<ViTOut> {
    cfg.validate()?;
    let n = tape.value(tokens).nrows();
    let in_dim = tape.value(tokens).ncols();
    if in_dim != cfg.input_dim {
        return Err(PipelineError::shape(format!(
            "encoder expected input dim {}, got {in_dim}",
            cfg.input_dim
        )));
    }
    if n == 0 {
        return Err(PipelineError::shape("encoder requires at least one token"));
    }
    let owned_slots: Vec<usize>;
    let slot_ids: &[usize] = match slots {
        Some(s) => {
            if s.len() != n {
                return Err(PipelineError::shape(format!(
                    "{} slot ids for {n} tokens",
                    s.len()
                )));
            }
            if s.iter().any(|i| *i >= cfg.token_count) {
                return Err(PipelineError::shape("slot id beyond token grid"));
            }
            s
        }
        None => {
            if n != cfg.token_count {
                return Err(PipelineError::shape(format!(
                    "encoder expected {} tokens, got {n}",
                    cfg.token_count
                )));
            }
            owned_slots = (0..n).collect();
            &owned_slots
        }
    };

    let w = bindings.bind(store, tape, &format!("{prefix}proj.w"));
    let bias = bindings.bind(store, tape, &format!("{prefix}proj.b"));
    let mut x = tape.linear(tokens, w, bias);
    let pe = bindings.bind(store, tape, &format!("{prefix}pe"));
    let pe_sel = tape.select_rows(pe, slot_ids);
    x = tape.add(x, pe_sel);
    if cfg.cls_token {
        let cls = bindings.bind(store, tape, &format!("{prefix}cls"));
        x = tape.concat_rows(&[cls, x]);
    }

    let mut attn_maps = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("{prefix}blk{i}.");
        let g1 = bindings.bind(store, tape, &format!("{p}ln1.g"));
        let b1 = bindings.bind(store, tape, &format!("{p}ln1.b"));
        let normed = tape.layer_norm(x, g1, b1, LN_EPS);
        let w = mha_weights(bindings, store, tape, &p);
        let mha = multi_head_attention(tape, normed, normed, &w, cfg.heads, None);
        attn_maps.push(mha.attn);
        x = tape.add(x, mha.out);

        let g2 = bindings.bind(store, tape, &format!("{p}ln2.g"));
        let b2 = bindings.bind(store, tape, &format!("{p}ln2.b"));
        let normed = tape.layer_norm(x, g2, b2, LN_EPS);
        let w1 = bindings.bind(store, tape, &format!("{p}ffn.w1"));
        let fb1 = bindings.bind(store, tape, &format!("{p}ffn.b1"));
        let w2 = bindings.bind(store, tape, &format!("{p}ffn.w2"));
        let fb2 = bindings.bind(store, tape, &format!("{p}ffn.b2"));
        let f = ffn_gelu(tape, normed, w1, fb1, w2, fb2);
        x = tape.add(x, f);
    }

    if cfg.final_norm {
        let g = bindings.bind(store, tape, &format!("{prefix}lnf.g"));
        let b = bindings.bind(store, tape, &format!("{prefix}lnf.b"));
        x = tape.layer_norm(x, g, b, LN_EPS);
    }
    let pooled = if cfg.cls_token {
        tape.slice_rows(x, 0, 1)
    } else {
        let keep = vec![true; tape.value(x).nrows()];
        tape.mean_rows_masked(x, &keep)
    };
    let hw = bindings.bind(store, tape, &format!("{prefix}head.w"));
    let hb = bindings.bind(store, tape, &format!("{prefix}head.b"));
    let out = tape.linear(pooled, hw, hb);
    Ok(ViTOut { out, attn: attn_maps })
}

/// Value-only forward: returns the output row and per-block per-head
/// attention maps.
pub fn vit_infer(
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTConfig,
    tokens: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<Vec<Array2<f64>>>)> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let t = tape.constant(tokens.clone());
    let out = vit_forward(&mut tape, &mut bindings, store, prefix, cfg, t, None)?;
    let val = tape.value(out.out).clone();
    if val.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite("encoder output".to_string()));
    }
    let attn = out
        .attn
        .iter()
        .map(|heads| heads.iter().map(|a| tape.value(*a).clone()).collect())
        .collect();
    Ok((val, attn))
}

/// Region-encoder forward: token embeddings in, one region feature out.
pub fn mrvit_r_forward(
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTConfig,
    f_c: &Array2<f64>,
) -> Result<Vec<f64>> {
    let (out, _) = vit_infer(store, prefix, cfg, f_c)?;
    Ok(out.row(0).to_vec())
}

/// Slide-encoder forward over sampled region features.
pub fn mrvit_s_forward(
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTConfig,
    f_r_sampled: &Array2<f64>,
) -> Result<Vec<f64>> {
    let (out, _) = vit_infer(store, prefix, cfg, f_r_sampled)?;
    Ok(out.row(0).to_vec())
}

/// Encode every region of a slide: assemble (one random coarse slot each),
/// embed with the backbone, run the region encoder. Row order follows region
/// enumeration order.
pub fn encode_slide<R: Rng>(
    pyramid: &crate::corpus::render::SlidePyramid,
    g: usize,
    backbone: &dyn BackboneC,
    store: &ParamStore,
    prefix: &str,
    cfg: &ViTConfig,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let groups = enumerate_regions(pyramid, g)?;
    let mut out = Array2::<f64>::zeros((groups.len(), cfg.output_dim));
    if groups.is_empty() {
        return FeatureMatrix::from_array(&out);
    }
    let cache = extract_slide_cache(pyramid, backbone)?;
    for (i, group) in groups.iter().enumerate() {
        let drop = pick_drop_slot(group.candidates.len(), rng);
        let tokens = region_tokens_cached(group, drop, &cache);
        let f_r = mrvit_r_forward(store, prefix, cfg, &tokens)?;
        for (j, v) in f_r.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    FeatureMatrix::from_array(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render::{PatchGrid, SlidePyramid};
    use crate::regions::assemble_region;
    use proptest::prelude::*;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            input_dim: 4,
            token_count: 5,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 6,
            final_norm: true,
        }
    }

    fn pyramid(l2_rows: usize, l2_cols: usize, g: usize, patch: usize) -> SlidePyramid {
        let mk = |rows: usize, cols: usize, base: f64| PatchGrid {
            rows,
            cols,
            patches: (0..rows * cols)
                .map(|i| {
                    Array3::from_shape_fn((patch, patch, 3), |(r, c, ch)| {
                        base + i as f64 * 0.01 + (r + c + ch) as f64 * 0.001
                    })
                })
                .collect(),
        };
        SlidePyramid {
            slide_id: "s".into(),
            patch,
            level1: mk(l2_rows * g, l2_cols * g, 0.2),
            level2: mk(l2_rows, l2_cols, 0.7),
        }
    }

    #[test]
    fn zero_backbone_gives_zero_matrix() {
        let p = pyramid(1, 1, 4, 4);
        let group = &enumerate_regions(&p, 4).unwrap()[0];
        let mut rng = derive_rng(0, "t");
        let region = assemble_region(group, "s", &mut rng);
        let f = backbone_extract(&region, &ZeroBackbone { dim: 7 }).unwrap();
        assert_eq!(f.dim(), (16, 7));
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let p = pyramid(1, 1, 2, 24);
        let group = &enumerate_regions(&p, 2).unwrap()[0];
        let mut rng = derive_rng(1, "t");
        let region = assemble_region(group, "s", &mut rng);
        let bb = ConvBackbone::new(5, 3);
        let f = backbone_extract(&region, &bb).unwrap();

        let mut permuted = region.clone();
        permuted.tokens.swap(0, 3);
        permuted.scale_tags.swap(0, 3);
        let g = backbone_extract(&permuted, &bb).unwrap();
        assert_eq!(f.row(0), g.row(3));
        assert_eq!(f.row(3), g.row(0));
        assert_eq!(f.row(1), g.row(1));
    }

    #[test]
    fn backbone_is_deterministic_and_discriminative() {
        let bb = ConvBackbone::new(6, 9);
        let a = Array3::from_shape_fn((32, 32, 3), |(r, c, _)| ((r + c) % 5) as f64 * 0.2);
        let b = Array3::from_shape_fn((32, 32, 3), |(r, _, ch)| (r % 3 + ch) as f64 * 0.15);
        let fa1 = bb.extract(&a);
        let fa2 = bb.extract(&a);
        let fb = bb.extract(&b);
        assert_eq!(fa1, fa2);
        assert_eq!(fa1.len(), 6);
        assert!(fa1.iter().all(|v| v.is_finite()));
        assert_ne!(fa1, fb);
    }

    #[test]
    fn cached_tokens_match_pixel_path_bitwise() {
        let p = pyramid(2, 2, 2, 24);
        let bb = ConvBackbone::new(5, 11);
        let cache = extract_slide_cache(&p, &bb).unwrap();
        for group in &enumerate_regions(&p, 2).unwrap() {
            for drop in 0..4 {
                let mut region_tokens = group.candidates.clone();
                region_tokens[drop] = group.level2_patch.clone();
                let region = Region {
                    tokens: region_tokens,
                    scale_tags: vec![],
                    source: ("s".into(), group.region_index),
                };
                let direct = backbone_extract(&region, &bb).unwrap();
                let cached = region_tokens_cached(group, drop, &cache);
                assert_eq!(direct, cached);
            }
        }
    }

    #[test]
    fn output_dim_follows_config() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        init_vit(&mut store, "enc.", &cfg, &mut derive_rng(2, "init"));
        for seed in 0..3u64 {
            let mut rng = derive_rng(seed, "tok");
            let toks = uniform_init(&mut rng, 5, 4, 1.0);
            let out = mrvit_r_forward(&store, "enc.", &cfg, &toks).unwrap();
            assert_eq!(out.len(), 6);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn depth_zero_identity_head_returns_cls() {
        let cfg = ViTConfig {
            input_dim: 3,
            token_count: 4,
            embed_dim: 3,
            depth: 0,
            heads: 1,
            mlp_ratio: 1,
            cls_token: true,
            output_dim: 3,
            final_norm: false,
        };
        let mut store = ParamStore::new();
        init_vit(&mut store, "v.", &cfg, &mut derive_rng(4, "init"));
        *store.get_mut("v.head.w") = Array2::eye(3);
        *store.get_mut("v.head.b") = Array2::zeros((1, 3));
        let cls = store.get("v.cls").clone();

        let toks = uniform_init(&mut derive_rng(5, "tok"), 4, 3, 2.0);
        let out = mrvit_r_forward(&store, "v.", &cfg, &toks).unwrap();
        let toks2 = uniform_init(&mut derive_rng(6, "tok"), 4, 3, 2.0);
        let out2 = mrvit_r_forward(&store, "v.", &cfg, &toks2).unwrap();
        assert_eq!(out, cls.row(0).to_vec());
        assert_eq!(out, out2, "depth-0 output must ignore the inputs");
    }

    #[test]
    fn token_permutation_changes_output_with_nonzero_pe() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        init_vit(&mut store, "enc.", &cfg, &mut derive_rng(7, "init"));
        let toks = uniform_init(&mut derive_rng(8, "tok"), 5, 4, 1.0);
        let mut permuted = toks.clone();
        for c in 0..4 {
            permuted.swap((0, c), (4, c));
        }
        let a = mrvit_r_forward(&store, "enc.", &cfg, &toks).unwrap();
        let b = mrvit_r_forward(&store, "enc.", &cfg, &permuted).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "positional embedding should break permutation invariance");
    }

    #[test]
    fn duplicate_rows_accepted_by_slide_encoder() {
        let cfg = ViTConfig {
            input_dim: 6,
            token_count: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 5,
            final_norm: true,
        };
        let mut store = ParamStore::new();
        init_vit(&mut store, "s.", &cfg, &mut derive_rng(9, "init"));
        let row = uniform_init(&mut derive_rng(10, "tok"), 1, 6, 1.0);
        let mut toks = Array2::<f64>::zeros((4, 6));
        for i in 0..4 {
            toks.row_mut(i).assign(&row.row(0));
        }
        let out = mrvit_s_forward(&store, "s.", &cfg, &toks).unwrap();
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        init_vit(&mut store, "enc.", &cfg, &mut derive_rng(11, "init"));
        let toks = uniform_init(&mut derive_rng(12, "tok"), 5, 4, 1.0);
        let (_, attn) = vit_infer(&store, "enc.", &cfg, &toks).unwrap();
        assert_eq!(attn.len(), 2);
        for block in &attn {
            assert_eq!(block.len(), 2);
            for map in block {
                assert_eq!(map.nrows(), 6); // CLS + 5 tokens
                for r in map.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = ViTConfig {
            input_dim: 3,
            token_count: 4,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 2,
            final_norm: true,
        };
        let mut store = ParamStore::new();
        init_vit(&mut store, "v.", &cfg, &mut derive_rng(13, "init"));
        let toks = uniform_init(&mut derive_rng(14, "tok"), 4, 3, 1.0);

        let forward = |store: &ParamStore| -> (f64, Option<(Tape, Bindings, Tx)>) {
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let t = tape.constant(toks.clone());
            let out = vit_forward(&mut tape, &mut b, store, "v.", &cfg, t, None).unwrap();
            let loss = tape.sum_all(out.out);
            (tape.value(loss)[[0, 0]], Some((tape, b, loss)))
        };

        let (_, built) = forward(&store);
        let (tape, bindings, loss) = built.unwrap();
        let grads = tape.backward(loss);
        let analytic = bindings.collect_grads(&tape, &grads);
        let worst = pmprg_autodiff::gradcheck::max_fd_error(
            &mut store,
            &analytic,
            |s| forward(s).0,
            1e-5,
            6,
        );
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let cfg = ViTConfig {
            input_dim: 3,
            token_count: 3,
            embed_dim: 4,
            depth: 1,
            heads: 1,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 2,
            final_norm: true,
        };
        let mut store = ParamStore::new();
        init_vit(&mut store, "v.", &cfg, &mut derive_rng(15, "init"));
        let toks = uniform_init(&mut derive_rng(16, "tok"), 3, 3, 1.0);

        let eval = |t: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let tx = tape.constant(t.clone());
            let out = vit_forward(&mut tape, &mut b, &store, "v.", &cfg, tx, None).unwrap();
            let loss = tape.sum_all(out.out);
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let tx = tape.leaf(toks.clone());
        let out = vit_forward(&mut tape, &mut b, &store, "v.", &cfg, tx, None).unwrap();
        let loss = tape.sum_all(out.out);
        let grads = tape.backward(loss);
        let g = grads.of(tx, &tape);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                let mut tp = toks.clone();
                tp[[r, c]] += eps;
                let mut tm = toks.clone();
                tm[[r, c]] -= eps;
                let fd = (eval(&tp) - eval(&tm)) / (2.0 * eps);
                worst = worst.max(pmprg_autodiff::gradcheck::rel_err(fd, g[[r, c]]));
            }
        }
        assert!(worst < 1e-3, "worst input-gradient error {worst}");
    }

    #[test]
    fn encode_slide_row_counts_and_determinism() {
        let cfg = ViTConfig {
            input_dim: 5,
            token_count: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 7,
            final_norm: true,
        };
        let mut store = ParamStore::new();
        init_vit(&mut store, "enc.", &cfg, &mut derive_rng(17, "init"));
        let bb = ConvBackbone::new(5, 18);

        let p = pyramid(2, 3, 2, 24);
        let f1 = encode_slide(&p, 2, &bb, &store, "enc.", &cfg, &mut derive_rng(19, "es")).unwrap();
        assert_eq!((f1.rows, f1.dim), (6, 7));
        let f2 = encode_slide(&p, 2, &bb, &store, "enc.", &cfg, &mut derive_rng(19, "es")).unwrap();
        assert_eq!(f1, f2);
        let f3 = encode_slide(&p, 2, &bb, &store, "enc.", &cfg, &mut derive_rng(20, "es")).unwrap();
        assert!(f1 != f3, "different assembly seed should move features");

        let empty = SlidePyramid {
            slide_id: "e".into(),
            patch: 24,
            level1: PatchGrid { rows: 0, cols: 0, patches: vec![] },
            level2: PatchGrid { rows: 0, cols: 0, patches: vec![] },
        };
        let f0 = encode_slide(&empty, 2, &bb, &store, "enc.", &cfg, &mut derive_rng(21, "es")).unwrap();
        assert_eq!((f0.rows, f0.dim), (0, 7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn shape_contract_over_random_configs(
            input_dim in 1usize..5,
            token_count in 1usize..6,
            heads in 1usize..3,
            depth in 0usize..3,
            dh in 1usize..4,
            output_dim in 1usize..5,
            cls in any::<bool>(),
            seed in 0u64..1000,
        ) {
            let cfg = ViTConfig {
                input_dim,
                token_count,
                embed_dim: heads * dh * 2,
                depth,
                heads,
                mlp_ratio: 2,
                cls_token: cls,
                output_dim,
                final_norm: true,
            };
            let mut store = ParamStore::new();
            init_vit(&mut store, "p.", &cfg, &mut derive_rng(seed, "init"));
            let toks = uniform_init(&mut derive_rng(seed, "tok"), token_count, input_dim, 1.0);
            let (out, attn) = vit_infer(&store, "p.", &cfg, &toks).unwrap();
            prop_assert_eq!(out.dim(), (1, output_dim));
            prop_assert_eq!(attn.len(), depth);
            let n_tok = token_count + usize::from(cls);
            for block in &attn {
                prop_assert_eq!(block.len(), heads);
                for map in block {
                    prop_assert_eq!(map.dim(), (n_tok, n_tok));
                    for r in map.rows() {
                        prop_assert!((r.sum() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
