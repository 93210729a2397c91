//! Conditional sentence decoder. A small causal transformer is first trained
//! unconditionally; afterwards its weights freeze and only two per-block
//! condition projections plus one shared input projection stay trainable.
//! Conditioning enters as pseudo self-attention: the projected condition is
//! prepended as one extra key/value pair that every text position may attend
//! to, while text positions keep the usual causal pattern among themselves.

use crate::config::{DimsConfig, Stage2Config};
use crate::error::{PipelineError, Result};
use crate::parsing::vocab::{Vocab, BOS, EOS, PAD};
use crate::seeds::derive_rng;
use ndarray::Array2;
use pmprg_autodiff::nn::{causal_mask_with_prefix, ffn_gelu, mha_qkv, MhaOut, MhaWeights};
use pmprg_autodiff::optim::AdamW;
use pmprg_autodiff::params::{accumulate_grads, glorot_init, uniform_init};
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::Write as _;
use std::path::Path;

const LN_EPS: f64 = 1e-5;

/// Register every language-model parameter. The condition *value* projection
/// starts at zero, so turning conditioning on adds no value content at first;
/// the condition input and *key* projections start random so gradient can
/// reach the whole conditioning path (an all-zero init would be a saddle
/// point that never trains).
pub fn init_lm<R: Rng>(store: &mut ParamStore, vocab_size: usize, dims: &DimsConfig, rng: &mut R) {
    let w = dims.lm_width;
    store.insert("lm.wte", uniform_init(rng, vocab_size, w, 0.02));
    store.insert("lm.wpe", uniform_init(rng, dims.lm_max_len, w, 0.02));
    for i in 0..dims.lm_blocks {
        let p = format!("lm.b{i}");
        store.insert(&format!("{p}.ln1.g"), Array2::ones((1, w)));
        store.insert(&format!("{p}.ln1.b"), Array2::zeros((1, w)));
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{n}"), glorot_init(rng, w, w));
        }
        for n in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.attn.{n}"), Array2::zeros((1, w)));
        }
        store.insert(&format!("{p}.psa.wk"), glorot_init(rng, w, w));
        store.insert(&format!("{p}.psa.wv"), Array2::zeros((w, w)));
        store.insert(&format!("{p}.ln2.g"), Array2::ones((1, w)));
        store.insert(&format!("{p}.ln2.b"), Array2::zeros((1, w)));
        let hidden = w * dims.lm_mlp_ratio;
        store.insert(&format!("{p}.ffn.w1"), glorot_init(rng, w, hidden));
        store.insert(&format!("{p}.ffn.b1"), Array2::zeros((1, hidden)));
        store.insert(&format!("{p}.ffn.w2"), glorot_init(rng, hidden, w));
        store.insert(&format!("{p}.ffn.b2"), Array2::zeros((1, w)));
    }
    store.insert("lm.lnf.g", Array2::ones((1, w)));
    store.insert("lm.lnf.b", Array2::zeros((1, w)));
    store.insert("lm.head.w", glorot_init(rng, w, vocab_size));
    store.insert("lm.head.b", Array2::zeros((1, vocab_size)));
    store.insert("lm.cond.w", glorot_init(rng, dims.d, w));
    store.insert("lm.cond.b", Array2::zeros((1, w)));
}

/// Attention for one block: queries come from the text stream; with a
/// condition present, its projected key/value pair is prepended so every text
/// row sees `1 + (row index + 1)` keys. Without a condition the op graph is
/// exactly the standard causal attention — no concat nodes are built.
pub fn psa_attention(
    tape: &mut Tape,
    x: Tx,
    cond: Option<(Tx, Tx, Tx)>,
    w: &MhaWeights,
    heads: usize,
) -> MhaOut {
    let t = tape.value(x).nrows();
    let q = tape.linear(x, w.wq, w.bq);
    let k_text = tape.linear(x, w.wk, w.bk);
    let v_text = tape.linear(x, w.wv, w.bv);
    match cond {
        None => {
            let mask = causal_mask_with_prefix(t, 0);
            mha_qkv(tape, q, k_text, v_text, w.wo, w.bo, heads, Some(&mask))
        }
        Some((c, wk_c, wv_c)) => {
            let k_cond = tape.matmul(c, wk_c);
            let v_cond = tape.matmul(c, wv_c);
            let k = tape.concat_rows(&[k_cond, k_text]);
            let v = tape.concat_rows(&[v_cond, v_text]);
            let mask = causal_mask_with_prefix(t, 1);
            mha_qkv(tape, q, k, v, w.wo, w.bo, heads, Some(&mask))
        }
    }
}

fn bind_attn(b: &mut Bindings, store: &ParamStore, tape: &mut Tape, prefix: &str) -> MhaWeights {
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

/// Forward pass over one token sequence: `T × vocab` logits. `cond` is an
/// unprojected `1 × d` condition node, or `None` for the plain language model.
pub fn lm_forward(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    tokens: &[usize],
    cond: Option<Tx>,
    dims: &DimsConfig,
) -> Result<Tx> {
    let t = tokens.len();
    if t == 0 {
        return Err(PipelineError::shape("empty token sequence".to_string()));
    }
    if t > dims.lm_max_len {
        return Err(PipelineError::shape(format!(
            "sequence of {t} tokens exceeds the maximum length {}",
            dims.lm_max_len
        )));
    }
    let vocab_size = store.get("lm.wte").nrows();
    if let Some(bad) = tokens.iter().find(|id| **id >= vocab_size) {
        return Err(PipelineError::shape(format!(
            "token id {bad} outside vocabulary of {vocab_size}"
        )));
    }
    let cond_emb = match cond {
        Some(c) => {
            if tape.value(c).dim() != (1, dims.d) {
                return Err(PipelineError::shape(format!(
                    "condition must be 1x{}, got {:?}",
                    dims.d,
                    tape.value(c).dim()
                )));
            }
            let cw = bindings.bind(store, tape, "lm.cond.w");
            let cb = bindings.bind(store, tape, "lm.cond.b");
            Some(tape.linear(c, cw, cb))
        }
        None => None,
    };

    let wte = bindings.bind(store, tape, "lm.wte");
    let wpe = bindings.bind(store, tape, "lm.wpe");
    let tok = tape.select_rows(wte, tokens);
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.select_rows(wpe, &positions);
    let mut x = tape.add(tok, pos);

    for i in 0..dims.lm_blocks {
        let p = format!("lm.b{i}");
        let h = ln(tape, bindings, store, &format!("{p}.ln1"), x);
        let w = bind_attn(bindings, store, tape, &format!("{p}.attn"));
        let cond_kv = cond_emb.map(|c| {
            let wk = bindings.bind(store, tape, &format!("{p}.psa.wk"));
            let wv = bindings.bind(store, tape, &format!("{p}.psa.wv"));
            (c, wk, wv)
        });
        let att = psa_attention(tape, h, cond_kv, &w, dims.lm_heads);
        x = tape.add(x, att.out);

        let h = ln(tape, bindings, store, &format!("{p}.ln2"), x);
        let w1 = bindings.bind(store, tape, &format!("{p}.ffn.w1"));
        let b1 = bindings.bind(store, tape, &format!("{p}.ffn.b1"));
        let w2 = bindings.bind(store, tape, &format!("{p}.ffn.w2"));
        let b2 = bindings.bind(store, tape, &format!("{p}.ffn.b2"));
        let f = ffn_gelu(tape, h, w1, b1, w2, b2);
        x = tape.add(x, f);
    }
    let x = ln(tape, bindings, store, "lm.lnf", x);
    let hw = bindings.bind(store, tape, "lm.head.w");
    let hb = bindings.bind(store, tape, "lm.head.b");
    Ok(tape.linear(x, hw, hb))
}

/// Clip a raw sentence so the decoder input `[BOS, w…]` fits in the model's
/// window.
pub fn clip_sentence(sentence: &[usize], max_len: usize) -> &[usize] {
    let keep = max_len.saturating_sub(1).min(sentence.len());
    &sentence[..keep]
}

/// Teacher-forced negative log-likelihood of one sentence (mean over its
/// `len + 1` predictions, which include the closing end-of-sequence token).
/// Returns the loss node and the number of predicted tokens for weighting.
pub fn sentence_nll(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    sentence: &[usize],
    cond: Option<Tx>,
    dims: &DimsConfig,
) -> Result<(Tx, usize)> {
    let sentence = clip_sentence(sentence, dims.lm_max_len);
    let mut input = Vec::with_capacity(sentence.len() + 1);
    input.push(BOS);
    input.extend_from_slice(sentence);
    let mut targets = Vec::with_capacity(sentence.len() + 1);
    targets.extend_from_slice(sentence);
    targets.push(EOS);

    let logits = lm_forward(tape, bindings, store, &input, cond, dims)?;
    let include = vec![true; targets.len()];
    let loss = tape.cross_entropy_rows(logits, &targets, &include);
    Ok((loss, targets.len()))
}

/// Unconditional warm-up over a sentence corpus with AdamW. Every `lm.*`
/// parameter trains; the loss per step is the token-weighted mean NLL of the
/// batch. Returns per-step losses and optionally appends a CSV log.
pub fn lm_warmup(
    store: &mut ParamStore,
    sentences: &[Vec<usize>],
    s2: &Stage2Config,
    dims: &DimsConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<Vec<f64>> {
    if sentences.is_empty() {
        return Err(PipelineError::config("no sentences to warm the language model on"));
    }
    let mut opt = AdamW::new(s2.lm_warmup_lr, s2.weight_decay);
    opt.beta1 = s2.beta1;
    opt.beta2 = s2.beta2;
    let mut losses = Vec::new();
    let mut log = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "step,loss")?;
            Some(f)
        }
        None => None,
    };
    let mut step: u64 = 0;
    for epoch in 0..s2.lm_warmup_epochs {
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(&mut derive_rng(seed, &format!("lm/warmup/{epoch}")));
        for chunk in order.chunks(s2.lm_warmup_batch.max(1)) {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let mut total: Option<Tx> = None;
            let mut n_tokens = 0usize;
            for idx in chunk {
                let (nll, t) =
                    sentence_nll(&mut tape, &mut bindings, store, &sentences[*idx], None, dims)?;
                let summed = tape.scale(nll, t as f64);
                n_tokens += t;
                total = Some(match total {
                    None => summed,
                    Some(acc) => tape.add(acc, summed),
                });
            }
            let total = total.expect("chunk is never empty");
            let loss = tape.scale(total, 1.0 / n_tokens as f64);
            let loss_v = tape.value(loss)[[0, 0]];
            if !loss_v.is_finite() {
                return Err(PipelineError::Diverged { step, loss: loss_v });
            }
            let grads = tape.backward(loss);
            let mut batch_grads = std::collections::BTreeMap::new();
            accumulate_grads(&mut batch_grads, bindings.collect_grads(&tape, &grads));
            opt.step(store, &batch_grads);
            losses.push(loss_v);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{step},{loss_v}")?;
            }
            step += 1;
        }
    }
    Ok(losses)
}

/// Freeze the warmed-up language model, leaving exactly the per-block
/// condition key/value projections and the shared condition input projection
/// trainable. Parameters outside `lm.` are untouched.
pub fn apply_freeze_policy(store: &mut ParamStore) {
    store.freeze_prefix("lm.");
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("lm.") && (n.contains(".psa.") || n.starts_with("lm.cond.")))
        .map(str::to_string)
        .collect();
    for n in names {
        store.unfreeze_prefix(&n);
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn next_logprobs(
    store: &ParamStore,
    ids: &[usize],
    cond: &Array2<f64>,
    dims: &DimsConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let c = tape.constant(cond.clone());
    let logits = lm_forward(&mut tape, &mut bindings, store, ids, Some(c), dims)?;
    let v = tape.value(logits);
    let last: Vec<f64> = v.row(v.nrows() - 1).to_vec();
    if last.iter().any(|x| !x.is_finite()) {
        return Err(PipelineError::NonFinite("decoder logits".to_string()));
    }
    Ok(log_softmax_row(&last))
}

/// Decode one sentence for a `1 × d` condition. `beam_width <= 1` is greedy;
/// otherwise a deterministic beam search ranked by mean log-probability.
/// The padding token is never emitted; generation stops at end-of-sequence
/// or after `max_len` words. The returned ids carry no BOS/EOS framing.
pub fn decode(
    store: &ParamStore,
    _vocab: &Vocab,
    cond: &Array2<f64>,
    dims: &DimsConfig,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if cond.dim() != (1, dims.d) {
        return Err(PipelineError::shape(format!(
            "condition must be 1x{}, got {:?}",
            dims.d,
            cond.dim()
        )));
    }
    // The prompt is [BOS, w…]; keep it inside the positional table.
    let word_cap = max_len.min(dims.lm_max_len.saturating_sub(1));
    if beam_width <= 1 {
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        while out.len() < word_cap {
            let lp = next_logprobs(store, &ids, cond, dims)?;
            let next = lp
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD)
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("vocabulary has non-pad entries");
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        return Ok(out);
    }

    struct Beam {
        ids: Vec<usize>,
        logp: f64,
        done: bool,
    }
    let mut beams = vec![Beam { ids: vec![BOS], logp: 0.0, done: false }];
    loop {
        if beams.iter().all(|b| b.done || b.ids.len() - 1 >= word_cap) {
            break;
        }
        let mut cands: Vec<Beam> = Vec::new();
        for b in &beams {
            if b.done || b.ids.len() - 1 >= word_cap {
                cands.push(Beam { ids: b.ids.clone(), logp: b.logp, done: b.done });
                continue;
            }
            let lp = next_logprobs(store, &b.ids, cond, dims)?;
            let mut ranked: Vec<(usize, f64)> =
                lp.iter().enumerate().filter(|(i, _)| *i != PAD).map(|(i, v)| (i, *v)).collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (tok, tok_lp) in ranked.into_iter().take(beam_width) {
                let mut ids = b.ids.clone();
                let done = tok == EOS;
                if !done {
                    ids.push(tok);
                }
                cands.push(Beam { ids, logp: b.logp + tok_lp, done });
            }
        }
        // Mean log-probability per emitted decision; deterministic tiebreak.
        let score = |b: &Beam| {
            let n = (b.ids.len() - 1 + usize::from(b.done)).max(1);
            b.logp / n as f64
        };
        cands.sort_by(|a, b| {
            score(b).partial_cmp(&score(a)).unwrap().then_with(|| a.ids.cmp(&b.ids))
        });
        cands.truncate(beam_width);
        beams = cands;
    }
    let score = |b: &Beam| {
        let n = (b.ids.len() - 1 + usize::from(b.done)).max(1);
        b.logp / n as f64
    };
    beams.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap().then_with(|| a.ids.cmp(&b.ids)));
    Ok(beams[0].ids[1..].to_vec())
}
