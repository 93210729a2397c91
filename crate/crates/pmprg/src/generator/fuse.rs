//! Tag-specific feature extraction: project the patient's region features to
//! the tag width, fuse them with the retrieved tag embeddings through a
//! decoder block (visual queries, tag keys/values), then pull one vector per
//! tag with a tag-query cross-attention that has no self-attention layer.

use crate::config::DimsConfig;
use crate::corpus::N_CLASSES;
use crate::error::{PipelineError, Result};
use crate::generator::PatientFeatures;
use ndarray::Array2;
use pmprg_autodiff::nn::{ffn_gelu, key_padding_mask, multi_head_attention, MhaWeights};
use pmprg_autodiff::params::glorot_init;
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

fn init_mha<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) {
    for n in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{n}"), glorot_init(rng, dim, dim));
    }
    for n in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.{n}"), Array2::zeros((1, dim)));
    }
}

fn init_ln(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.g"), Array2::ones((1, dim)));
    store.insert(&format!("{prefix}.b"), Array2::zeros((1, dim)));
}

fn init_ffn<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut R) {
    store.insert(&format!("{prefix}.w1"), glorot_init(rng, dim, hidden));
    store.insert(&format!("{prefix}.b1"), Array2::zeros((1, hidden)));
    store.insert(&format!("{prefix}.w2"), glorot_init(rng, hidden, dim));
    store.insert(&format!("{prefix}.b2"), Array2::zeros((1, dim)));
}

/// Register the visual projection, the decoder block(s), the tag-query
/// extractor, and the tag classifier head.
pub fn init_fuse<R: Rng>(store: &mut ParamStore, dims: &DimsConfig, rng: &mut R) {
    let dp = dims.d_prime;
    let hidden = dp * dims.vit_mlp_ratio;
    store.insert("fstar.w", glorot_init(rng, dims.d_r, dp));
    store.insert("fstar.b", Array2::zeros((1, dp)));
    for i in 0..dims.gd_blocks {
        let p = format!("gd{i}");
        init_ln(store, &format!("{p}.ln1"), dp);
        init_mha(store, &format!("{p}.self"), dp, rng);
        init_ln(store, &format!("{p}.ln2"), dp);
        init_mha(store, &format!("{p}.cross"), dp, rng);
        init_ln(store, &format!("{p}.ln3"), dp);
        init_ffn(store, &format!("{p}.ffn"), dp, hidden, rng);
    }
    init_ln(store, "h.ln1", dp);
    init_mha(store, "h.cross", dp, rng);
    init_ln(store, "h.ln2", dp);
    init_ffn(store, "h.ffn", dp, hidden, rng);
    store.insert("h.out.w", glorot_init(rng, dp, dims.d));
    store.insert("h.out.b", Array2::zeros((1, dims.d)));

    store.insert("tag.w1", glorot_init(rng, dims.d, dims.cls_hidden));
    store.insert("tag.b1", Array2::zeros((1, dims.cls_hidden)));
    store.insert("tag.w2", glorot_init(rng, dims.cls_hidden, N_CLASSES));
    store.insert("tag.b2", Array2::zeros((1, N_CLASSES)));
}

fn bind_mha(b: &mut Bindings, store: &ParamStore, tape: &mut Tape, prefix: &str) -> MhaWeights {
    MhaWeights {
        wq: b.bind(store, tape, &format!("{prefix}.wq")),
        bq: b.bind(store, tape, &format!("{prefix}.bq")),
        wk: b.bind(store, tape, &format!("{prefix}.wk")),
        bk: b.bind(store, tape, &format!("{prefix}.bk")),
        wv: b.bind(store, tape, &format!("{prefix}.wv")),
        bv: b.bind(store, tape, &format!("{prefix}.bv")),
        wo: b.bind(store, tape, &format!("{prefix}.wo")),
        bo: b.bind(store, tape, &format!("{prefix}.bo")),
    }
}

fn ln(tape: &mut Tape, b: &mut Bindings, store: &ParamStore, prefix: &str, x: Tx) -> Tx {
    let g = b.bind(store, tape, &format!("{prefix}.g"));
    let beta = b.bind(store, tape, &format!("{prefix}.b"));
    tape.layer_norm(x, g, beta, LN_EPS)
}

fn ffn(tape: &mut Tape, b: &mut Bindings, store: &ParamStore, prefix: &str, x: Tx) -> Tx {
    let w1 = b.bind(store, tape, &format!("{prefix}.w1"));
    let b1 = b.bind(store, tape, &format!("{prefix}.b1"));
    let w2 = b.bind(store, tape, &format!("{prefix}.w2"));
    let b2 = b.bind(store, tape, &format!("{prefix}.b2"));
    ffn_gelu(tape, x, w1, b1, w2, b2)
}

/// Output of the fusion stack for one patient.
pub struct FuseOutput {
    /// `K' × d`: one feature vector per (padded) tag slot.
    pub f_vt: Tx,
    /// Tag-query attention maps, one `K' × S` matrix per head; padding
    /// columns carry exactly zero weight.
    pub h_attn: Vec<Tx>,
}

/// `f_vt = H(G_d(visual, tags), tags)` with three masks: visual padding is
/// hidden from every attention that reads visual keys, tag padding from the
/// attention that reads tag keys.
pub fn tag_feature_extract(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    pf: &PatientFeatures,
    tags: Tx,
    tag_mask: &[bool],
    dims: &DimsConfig,
) -> Result<FuseOutput> {
    let k_padded = tape.value(tags).nrows();
    if tag_mask.len() != k_padded {
        return Err(PipelineError::shape(format!(
            "tag mask length {} for {k_padded} tag rows",
            tag_mask.len()
        )));
    }
    if !tag_mask.iter().any(|m| *m) {
        return Err(PipelineError::shape("all tag rows are masked".to_string()));
    }
    if pf.n_valid() == 0 {
        return Err(PipelineError::shape("all patient rows are masked".to_string()));
    }
    if tape.value(tags).ncols() != dims.d_prime {
        return Err(PipelineError::shape(format!(
            "tag rows are {} wide, expected {}",
            tape.value(tags).ncols(),
            dims.d_prime
        )));
    }
    if pf.f_r_pat.ncols() != dims.d_r {
        return Err(PipelineError::shape(format!(
            "patient features are {} wide, expected {}",
            pf.f_r_pat.ncols(),
            dims.d_r
        )));
    }
    let s = pf.f_r_pat.nrows();
    let heads = dims.vit_heads;

    // F**: project the visual stream to the tag width.
    let x0 = tape.constant(pf.f_r_pat.clone());
    let fw = bindings.bind(store, tape, "fstar.w");
    let fb = bindings.bind(store, tape, "fstar.b");
    let mut x = tape.linear(x0, fw, fb);

    let visual_keys_for_visual = key_padding_mask(s, &pf.mask);
    let tag_keys_for_visual = key_padding_mask(s, tag_mask);
    for i in 0..dims.gd_blocks {
        let p = format!("gd{i}");
        let normed = ln(tape, bindings, store, &format!("{p}.ln1"), x);
        let w = bind_mha(bindings, store, tape, &format!("{p}.self"));
        let sa = multi_head_attention(tape, normed, normed, &w, heads, Some(&visual_keys_for_visual));
        x = tape.add(x, sa.out);

        let normed = ln(tape, bindings, store, &format!("{p}.ln2"), x);
        let w = bind_mha(bindings, store, tape, &format!("{p}.cross"));
        let ca = multi_head_attention(tape, normed, tags, &w, heads, Some(&tag_keys_for_visual));
        x = tape.add(x, ca.out);

        let normed = ln(tape, bindings, store, &format!("{p}.ln3"), x);
        let f = ffn(tape, bindings, store, &format!("{p}.ffn"), normed);
        x = tape.add(x, f);
    }

    // H: tag queries over the fused visual stream; no self-attention.
    let visual_keys_for_tags = key_padding_mask(k_padded, &pf.mask);
    let q = ln(tape, bindings, store, "h.ln1", tags);
    let w = bind_mha(bindings, store, tape, "h.cross");
    let ca = multi_head_attention(tape, q, x, &w, heads, Some(&visual_keys_for_tags));
    let h_attn = ca.attn.clone();
    let mut t = tape.add(tags, ca.out);

    let normed = ln(tape, bindings, store, "h.ln2", t);
    let f = ffn(tape, bindings, store, "h.ffn", normed);
    t = tape.add(t, f);

    let ow = bindings.bind(store, tape, "h.out.w");
    let ob = bindings.bind(store, tape, "h.out.b");
    let f_vt = tape.linear(t, ow, ob);
    Ok(FuseOutput { f_vt, h_attn })
}

/// Per-tag classifier over `f_vt` plus the masked cross-entropy. Positions
/// are included only where the tag row is real and a ground-truth class is
/// present; with nothing includable the loss is a constant zero.
pub fn classify_tags(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    f_vt: Tx,
    y_tag: &[Option<usize>],
    tag_mask: &[bool],
) -> Result<(Tx, Tx)> {
    let k = tape.value(f_vt).nrows();
    if y_tag.len() != k || tag_mask.len() != k {
        return Err(PipelineError::shape(format!(
            "{} targets and {} mask flags for {k} tag rows",
            y_tag.len(),
            tag_mask.len()
        )));
    }
    let w1 = bindings.bind(store, tape, "tag.w1");
    let b1 = bindings.bind(store, tape, "tag.b1");
    let h = tape.linear(f_vt, w1, b1);
    let h = tape.relu(h);
    let w2 = bindings.bind(store, tape, "tag.w2");
    let b2 = bindings.bind(store, tape, "tag.b2");
    let logits = tape.linear(h, w2, b2);

    let mut targets = Vec::with_capacity(k);
    let mut include = Vec::with_capacity(k);
    for (y, m) in y_tag.iter().zip(tag_mask) {
        match (y, m) {
            (Some(c), true) => {
                targets.push(*c);
                include.push(true);
            }
            _ => {
                targets.push(0);
                include.push(false);
            }
        }
    }
    let loss = if include.iter().any(|i| *i) {
        tape.cross_entropy_rows(logits, &targets, &include)
    } else {
        tape.constant(Array2::zeros((1, 1)))
    };
    Ok((logits, loss))
}

/// Head-averaged tag attention restricted to valid visual rows:
/// `k × S_valid`, rows summing to 1 (padding columns hold exact zeros).
pub fn valid_attention(tape: &Tape, fused: &FuseOutput, visual_mask: &[bool], k: usize) -> Array2<f64> {
    let n_heads = fused.h_attn.len();
    let valid: Vec<usize> = visual_mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    let mut out = Array2::<f64>::zeros((k, valid.len()));
    for h in &fused.h_attn {
        let a = tape.value(*h);
        for r in 0..k {
            for (j, src) in valid.iter().enumerate() {
                out[[r, j]] += a[[r, *src]] / n_heads as f64;
            }
        }
    }
    out
}
