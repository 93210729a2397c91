//! Report generator: organ classifier, tag-selection dictionary,
//! tag-specific feature extraction, tag classifier, and the conditional
//! language model, combined under one weighted objective.

pub mod fuse;
pub mod lm;

use crate::corpus::OrganSchema;
use crate::error::{PipelineError, Result};
use crate::features::FeatureMatrix;
use crate::parsing::vocab::Vocab;
use crate::parsing::OrganLabel;
use ndarray::Array2;
use pmprg_autodiff::params::glorot_init;
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::Rng;

/// Concatenated region features for one patient, with a validity mask that
/// marks padding rows added during batching.
#[derive(Debug, Clone)]
pub struct PatientFeatures {
    /// `S × d_R`; padding rows are zero.
    pub f_r_pat: Array2<f64>,
    /// One flag per row; `false` marks padding.
    pub mask: Vec<bool>,
}

impl PatientFeatures {
    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Row-wise concatenation of per-slide region features, in slide order.
pub fn aggregate_patient(per_slide: &[FeatureMatrix]) -> Result<PatientFeatures> {
    if per_slide.is_empty() {
        return Err(PipelineError::shape("patient has no slides".to_string()));
    }
    let dim = per_slide[0].dim as usize;
    let total: usize = per_slide.iter().map(|m| m.rows as usize).sum();
    if total == 0 {
        return Err(PipelineError::shape("patient has no regions".to_string()));
    }
    let mut f = Array2::<f64>::zeros((total, dim));
    let mut r = 0;
    for m in per_slide {
        if m.dim as usize != dim {
            return Err(PipelineError::shape(format!(
                "slide feature dim {} differs from {}",
                m.dim, dim
            )));
        }
        for i in 0..m.rows as usize {
            for (j, v) in m.row(i).iter().enumerate() {
                f[[r, j]] = *v as f64;
            }
            r += 1;
        }
    }
    Ok(PatientFeatures {
        f_r_pat: f,
        mask: vec![true; total],
    })
}

/// Pad every item to the longest row count in the batch with zero rows and
/// `mask = false`.
pub fn pad_batch(items: &[PatientFeatures]) -> Vec<PatientFeatures> {
    let max_rows = items.iter().map(|p| p.f_r_pat.nrows()).max().unwrap_or(0);
    items
        .iter()
        .map(|p| {
            let (rows, dim) = p.f_r_pat.dim();
            let mut f = Array2::<f64>::zeros((max_rows, dim));
            let mut mask = vec![false; max_rows];
            for r in 0..rows {
                f.row_mut(r).assign(&p.f_r_pat.row(r));
                mask[r] = p.mask[r];
            }
            PatientFeatures { f_r_pat: f, mask }
        })
        .collect()
}

/// Register the organ classifier head: two linear layers around a ReLU.
pub fn init_organ_head<R: Rng>(store: &mut ParamStore, d_r: usize, hidden: usize, n_o: usize, rng: &mut R) {
    store.insert("org.w1", glorot_init(rng, d_r, hidden));
    store.insert("org.b1", Array2::zeros((1, hidden)));
    store.insert("org.w2", glorot_init(rng, hidden, n_o));
    store.insert("org.b2", Array2::zeros((1, n_o)));
}

/// Masked mean over valid rows, then the two-layer head. Returns `1 × n_o`
/// logits on the tape.
pub fn classify_organ(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    pf: &PatientFeatures,
) -> Result<Tx> {
    if pf.n_valid() == 0 {
        return Err(PipelineError::shape("all patient rows are masked".to_string()));
    }
    if pf.mask.len() != pf.f_r_pat.nrows() {
        return Err(PipelineError::shape("mask length differs from row count".to_string()));
    }
    let x = tape.constant(pf.f_r_pat.clone());
    let pooled = tape.mean_rows_masked(x, &pf.mask);
    let w1 = bindings.bind(store, tape, "org.w1");
    let b1 = bindings.bind(store, tape, "org.b1");
    let h = tape.linear(pooled, w1, b1);
    let h = tape.relu(h);
    let w2 = bindings.bind(store, tape, "org.w2");
    let b2 = bindings.bind(store, tape, "org.b2");
    Ok(tape.linear(h, w2, b2))
}

/// Lowest index wins ties, so routing is deterministic.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Learnable per-organ tag embedding tables, stored as `dict.organ<j>`.
#[derive(Debug, Clone)]
pub struct TagDictionary {
    /// Tag count per organ id.
    pub ks: Vec<usize>,
    pub d_prime: usize,
}

pub fn init_tag_dictionary<R: Rng>(
    store: &mut ParamStore,
    schemas: &[OrganSchema],
    d_prime: usize,
    rng: &mut R,
) -> TagDictionary {
    let mut ks = Vec::with_capacity(schemas.len());
    for schema in schemas {
        store.insert(
            &format!("dict.organ{}", schema.organ_id),
            glorot_init(rng, schema.k(), d_prime),
        );
        ks.push(schema.k());
    }
    TagDictionary { ks, d_prime }
}

/// How to turn organ logits into the dictionary index.
#[derive(Debug, Clone, Copy)]
pub enum RoutingMode {
    /// Teacher forcing at the routing level: the ground-truth organ wins
    /// whenever the prediction disagrees with it.
    Training { true_organ: OrganLabel },
    /// Pure argmax.
    Inference,
}

pub fn route_organ(organ_logits: &Array2<f64>, mode: RoutingMode) -> Result<usize> {
    let pred = argmax_row(organ_logits.row(0).as_slice().expect("contiguous row"));
    match mode {
        RoutingMode::Inference => Ok(pred),
        RoutingMode::Training { true_organ } => match true_organ {
            OrganLabel::Organ(j) => Ok(j),
            OrganLabel::Uncertain => Err(PipelineError::runtime(
                "ground-truth organ is undetermined; cannot route tags during training",
            )),
        },
    }
}

/// One batch item's retrieved tag set, padded to the batch-wide `K'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedTags {
    pub organ: usize,
    /// True tag count for this organ.
    pub k: usize,
    /// Padded tag count (batch max).
    pub k_padded: usize,
    /// `k_padded` flags; `false` marks padding rows.
    pub tag_mask: Vec<bool>,
}

/// Retrieve each item's tag table by organ index and pad to the batch max.
pub fn select_tags(pred_organs: &[usize], dict: &TagDictionary) -> Result<Vec<SelectedTags>> {
    for o in pred_organs {
        if *o >= dict.ks.len() {
            return Err(PipelineError::config(format!(
                "organ {o} has no tag dictionary entry"
            )));
        }
    }
    let k_prime = pred_organs.iter().map(|o| dict.ks[*o]).max().unwrap_or(0);
    Ok(pred_organs
        .iter()
        .map(|o| {
            let k = dict.ks[*o];
            let mut tag_mask = vec![true; k];
            tag_mask.resize(k_prime, false);
            SelectedTags {
                organ: *o,
                k,
                k_padded: k_prime,
                tag_mask,
            }
        })
        .collect())
}

/// Place one item's tag rows on the tape, appending zero rows up to `K'`.
pub fn bind_tag_rows(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    sel: &SelectedTags,
    d_prime: usize,
) -> Tx {
    let tags = bindings.bind(store, tape, &format!("dict.organ{}", sel.organ));
    if sel.k_padded == sel.k {
        return tags;
    }
    let pad = tape.constant(Array2::zeros((sel.k_padded - sel.k, d_prime)));
    tape.concat_rows(&[tags, pad])
}

/// `α·L_org + β·L_tag + γ·L_sen` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    l_org: Tx,
    l_tag: Tx,
    l_sen: Tx,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Tx {
    let a = tape.scale(l_org, alpha);
    let b = tape.scale(l_tag, beta);
    let c = tape.scale(l_sen, gamma);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}

pub fn total_loss_value(l_org: f64, l_tag: f64, l_sen: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    alpha * l_org + beta * l_tag + gamma * l_sen
}

/// Everything `generate` produces for one patient.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// `None` when the organ could not be determined.
    pub organ: Option<usize>,
    pub organ_logits: Vec<f64>,
    /// `K × 27`; empty when the organ is undetermined.
    pub tag_logits: Array2<f64>,
    /// Decoded token ids per tag (reserved tokens stripped).
    pub sentences: Vec<Vec<usize>>,
    /// Detokenized sentence per tag.
    pub texts: Vec<String>,
    /// Head-averaged attention from the tag-query cross-attention,
    /// `K × S_valid`; rows sum to 1.
    pub attention: Array2<f64>,
}

/// Render the generated report: organ line, then one `tag: sentence` line
/// per tag in schema order.
pub fn render_report(schema: &OrganSchema, result: &GenerationResult) -> String {
    let mut out = format!("organ: {}\n", schema.organ_name);
    for (tag, text) in schema.key_tags.iter().zip(&result.texts) {
        out.push_str(&format!("{tag}: {text}\n"));
    }
    out
}

pub const UNDETERMINED_REPORT: &str = "organ: undetermined\n";

/// Full inference for one patient: organ → tags → tag features → per-tag
/// decoding. `beam_width` 1 is greedy.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    store: &ParamStore,
    dict: &TagDictionary,
    schemas: &[OrganSchema],
    pf: &PatientFeatures,
    vocab: &Vocab,
    dims: &crate::config::DimsConfig,
    beam_width: usize,
    max_len: usize,
) -> Result<GenerationResult> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let organ_logits_tx = classify_organ(&mut tape, &mut bindings, store, pf)?;
    let organ_logits: Vec<f64> = tape.value(organ_logits_tx).row(0).to_vec();
    let logits_row = Array2::from_shape_vec((1, organ_logits.len()), organ_logits.clone())
        .expect("row shape");
    let organ = route_organ(&logits_row, RoutingMode::Inference)?;
    if organ >= dict.ks.len() || organ >= schemas.len() {
        return Ok(GenerationResult {
            organ: None,
            organ_logits,
            tag_logits: Array2::zeros((0, crate::corpus::N_CLASSES)),
            sentences: vec![],
            texts: vec![],
            attention: Array2::zeros((0, pf.n_valid())),
        });
    }

    let sel = select_tags(&[organ], dict)?.remove(0);
    let tags = bind_tag_rows(&mut tape, &mut bindings, store, &sel, dims.d_prime);
    let fused = fuse::tag_feature_extract(
        &mut tape,
        &mut bindings,
        store,
        pf,
        tags,
        &sel.tag_mask,
        dims,
    )?;
    let (tag_logits_tx, _) = fuse::classify_tags(
        &mut tape,
        &mut bindings,
        store,
        fused.f_vt,
        &vec![None; sel.k_padded],
        &vec![false; sel.k_padded],
    )?;
    let tag_logits_full = tape.value(tag_logits_tx).clone();
    let tag_logits = tag_logits_full.slice(ndarray::s![..sel.k, ..]).to_owned();

    let attention = fuse::valid_attention(&tape, &fused, &pf.mask, sel.k);

    let f_vt = tape.value(fused.f_vt).clone();
    let mut sentences = Vec::with_capacity(sel.k);
    let mut texts = Vec::with_capacity(sel.k);
    for t in 0..sel.k {
        let cond = f_vt.row(t).to_owned().insert_axis(ndarray::Axis(0));
        let ids = lm::decode(store, vocab, &cond, dims, beam_width, max_len)?;
        texts.push(vocab.detokenize(&ids));
        sentences.push(ids);
    }

    Ok(GenerationResult {
        organ: Some(organ),
        organ_logits,
        tag_logits,
        sentences,
        texts,
        attention,
    })
}
