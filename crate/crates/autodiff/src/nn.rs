//! Attention and feed-forward building blocks on top of the tape.

use crate::{Tape, Tx};
use ndarray::Array2;
use std::rc::Rc;

/// Projection weights for one multi-head attention layer, already bound onto
/// a tape. All four projections are `d×d` with `1×d` biases.
#[derive(Clone, Copy)]
pub struct MhaWeights {
    pub wq: Tx,
    pub bq: Tx,
    pub wk: Tx,
    pub bk: Tx,
    pub wv: Tx,
    pub bv: Tx,
    pub wo: Tx,
    pub bo: Tx,
}

/// Attention output plus the per-head probability matrices (`n_q × n_k`),
/// kept so callers can inspect or export attention maps.
pub struct MhaOut {
    pub out: Tx,
    pub attn: Vec<Tx>,
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`
/// (each `…×d`, split into `n_heads` column blocks), followed by the output
/// projection. `mask` is `n_q × n_k`, `true` = allowed; masked scores become
/// `-inf`, so masked keys get exactly zero weight. Every query row must keep
/// at least one allowed key.
pub fn mha_qkv(
    tape: &mut Tape,
    q: Tx,
    k: Tx,
    v: Tx,
    wo: Tx,
    bo: Tx,
    n_heads: usize,
    mask: Option<&Rc<Array2<bool>>>,
) -> MhaOut {
    let d = tape.value(q).ncols();
    assert_eq!(d % n_heads, 0, "model dim {d} not divisible by {n_heads} heads");
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, Rc::clone(m));
        }
        let a = tape.softmax_rows(scores);
        attn.push(a);
        heads.push(tape.matmul(a, vh));
    }
    let cat = tape.concat_cols(&heads);
    let out = tape.linear(cat, wo, bo);
    MhaOut { out, attn }
}

/// Standard multi-head attention: queries from `x_q`, keys and values from
/// `x_kv`. Self-attention is the `x_q == x_kv` case.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Tx,
    x_kv: Tx,
    w: &MhaWeights,
    n_heads: usize,
    mask: Option<&Rc<Array2<bool>>>,
) -> MhaOut {
    let q = tape.linear(x_q, w.wq, w.bq);
    let k = tape.linear(x_kv, w.wk, w.bk);
    let v = tape.linear(x_kv, w.wv, w.bv);
    mha_qkv(tape, q, k, v, w.wo, w.bo, n_heads, mask)
}

/// Two-layer feed-forward with GELU: `gelu(x·w1 + b1)·w2 + b2`.
pub fn ffn_gelu(tape: &mut Tape, x: Tx, w1: Tx, b1: Tx, w2: Tx, b2: Tx) -> Tx {
    let h = tape.linear(x, w1, b1);
    let h = tape.gelu(h);
    tape.linear(h, w2, b2)
}

/// A causal mask extended on the left by unmasked conditioning columns:
/// row `i` (a text position) may attend to all `n_cond` condition keys and to
/// text keys `0..=i`.
pub fn causal_mask_with_prefix(n_text: usize, n_cond: usize) -> Rc<Array2<bool>> {
    let mut m = Array2::from_elem((n_text, n_cond + n_text), false);
    for i in 0..n_text {
        for j in 0..n_cond + i + 1 {
            m[[i, j]] = true;
        }
    }
    Rc::new(m)
}

/// Mask where every query row may attend exactly to the keys flagged in
/// `allowed_keys`.
pub fn key_padding_mask(n_q: usize, allowed_keys: &[bool]) -> Rc<Array2<bool>> {
    let mut m = Array2::from_elem((n_q, allowed_keys.len()), false);
    for i in 0..n_q {
        for (j, a) in allowed_keys.iter().enumerate() {
            m[[i, j]] = *a;
        }
    }
    Rc::new(m)
}
