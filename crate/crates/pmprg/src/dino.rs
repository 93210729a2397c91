//! Self-distillation trainer: a momentum teacher distilled into a student
//! over multiple augmented views of the same token matrix, with output
//! centering and temperature sharpening. Used once over region token
//! embeddings and once over sampled region features.

use crate::config::Stage1Config;
use crate::error::{PipelineError, Result};
use crate::mrvit::{init_vit, vit_forward, ViTConfig};
use crate::seeds::derive_rng;
use ndarray::Array2;
use pmprg_autodiff::optim::SgdMomentum;
use pmprg_autodiff::params::{accumulate_grads, clip_grad_norm, glorot_init, scale_grads};
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;

/// One augmented view: a row subset of the token matrix with additive noise,
/// remembering which grid slots the rows came from.
#[derive(Debug, Clone)]
pub struct DinoView {
    pub rows: Array2<f64>,
    pub slots: Vec<usize>,
    pub is_global: bool,
}

/// Sample `k` distinct indices from `0..n`, ascending.
fn sample_slots<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    picked
}

fn keep_count<R: Rng>(n: usize, lo_ratio: f64, hi_ratio: f64, rng: &mut R) -> usize {
    let lo = ((lo_ratio * n as f64).ceil() as usize).clamp(1, n);
    let hi = ((hi_ratio * n as f64).floor() as usize).clamp(lo, n);
    rng.random_range(lo..=hi)
}

/// Build the multi-view set for one token matrix: `n_global` wide views
/// first (kept-fraction ≥ `global_keep_min`), then `n_local` narrow views
/// (kept between the local ratio bounds), all with independent additive
/// Gaussian noise.
pub fn make_views<R: Rng>(
    tokens: &Array2<f64>,
    n_global: usize,
    n_local: usize,
    global_keep_min: f64,
    local_keep_min: f64,
    local_keep_max: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<DinoView>> {
    if tokens.nrows() == 0 {
        return Err(PipelineError::shape("cannot augment an empty token matrix".to_string()));
    }
    if n_global < 2 {
        return Err(PipelineError::config(format!(
            "self-distillation needs at least 2 global views, got {n_global}"
        )));
    }
    let n = tokens.nrows();
    let d = tokens.ncols();
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| PipelineError::config(format!("bad view noise sigma: {e}")))?;
    let mut views = Vec::with_capacity(n_global + n_local);
    for vi in 0..n_global + n_local {
        let is_global = vi < n_global;
        let k = if is_global {
            keep_count(n, global_keep_min, 1.0, rng)
        } else {
            keep_count(n, local_keep_min, local_keep_max, rng)
        };
        let slots = sample_slots(n, k, rng);
        let mut rows = Array2::<f64>::zeros((k, d));
        for (i, s) in slots.iter().enumerate() {
            rows.row_mut(i).assign(&tokens.row(*s));
        }
        for v in rows.iter_mut() {
            *v += noise.sample(rng);
        }
        views.push(DinoView { rows, slots, is_global });
    }
    Ok(views)
}

fn softmax_row(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Sharpened, centered teacher distribution for one logit row.
pub fn teacher_probs(teacher_logits: &Array2<f64>, center: &Array2<f64>, tau_t: f64) -> Array2<f64> {
    let shifted = (teacher_logits - center) / tau_t;
    softmax_row(&shifted)
}

/// Cross-entropy between the sharpened teacher distribution and the student
/// distribution for a single view pair.
pub fn dino_pair_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    tau_s: f64,
    tau_t: f64,
    center: &Array2<f64>,
) -> Result<f64> {
    if student_logits.ncols() != teacher_logits.ncols() {
        return Err(PipelineError::shape(format!(
            "projection dims differ: student {} vs teacher {}",
            student_logits.ncols(),
            teacher_logits.ncols()
        )));
    }
    if student_logits.iter().chain(teacher_logits.iter()).any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite("distillation logits".to_string()));
    }
    let p_t = teacher_probs(teacher_logits, center, tau_t);
    let scaled = student_logits / tau_s;
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsum = scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    let mut loss = 0.0;
    for (p, s) in p_t.iter().zip(scaled.iter()) {
        loss -= p * (s - logsum);
    }
    Ok(loss)
}

/// Aggregate distillation loss. `student_logits` holds every view in order
/// (globals first); `teacher_logits` holds the global views only, aligned
/// with the leading student entries. Pairs where teacher and student are the
/// same global view are skipped.
pub fn dino_loss(
    student_logits: &[Array2<f64>],
    teacher_logits: &[Array2<f64>],
    tau_s: f64,
    tau_t: f64,
    center: &Array2<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (ti, t) in teacher_logits.iter().enumerate() {
        for (si, s) in student_logits.iter().enumerate() {
            if si == ti {
                continue;
            }
            total += dino_pair_loss(s, t, tau_s, tau_t, center)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(PipelineError::config("no valid teacher/student view pairs".to_string()));
    }
    Ok(total / pairs as f64)
}

/// Tape version of [`dino_loss`]: teacher distributions enter as constants,
/// so the gradient flows only into the student logits.
pub fn dino_loss_tape(
    tape: &mut Tape,
    student_logits: &[Tx],
    teacher_probs_list: &[Array2<f64>],
    tau_s: f64,
) -> Result<Tx> {
    let mut terms = Vec::new();
    for (ti, p_t) in teacher_probs_list.iter().enumerate() {
        for (si, s) in student_logits.iter().enumerate() {
            if si == ti {
                continue;
            }
            let scaled = tape.scale(*s, 1.0 / tau_s);
            let log_p_s = tape.log_softmax_rows(scaled);
            let p = tape.constant(p_t.clone());
            let prod = tape.mul_elem(p, log_p_s);
            let summed = tape.sum_all(prod);
            terms.push(tape.scale(summed, -1.0));
        }
    }
    if terms.is_empty() {
        return Err(PipelineError::config("no valid teacher/student view pairs".to_string()));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// Momentum update `θ_t ← m·θ_t + (1−m)·θ_s` over every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    let names: Vec<String> = teacher.names().map(str::to_string).collect();
    for name in names {
        if !student.contains(&name) {
            return Err(PipelineError::shape(format!(
                "student store lacks parameter {name}"
            )));
        }
        let s = student.get(&name);
        let t = teacher.get_mut(&name);
        if s.dim() != t.dim() {
            return Err(PipelineError::shape(format!(
                "parameter {name}: teacher {:?} vs student {:?}",
                t.dim(),
                s.dim()
            )));
        }
        t.zip_mut_with(s, |tv, sv| *tv = m * *tv + (1.0 - m) * *sv);
    }
    Ok(())
}

/// `center ← m_c·center + (1−m_c)·mean(batch rows)`.
pub fn update_center(center: &mut Array2<f64>, teacher_logit_batch: &[Array2<f64>], m_c: f64) {
    if teacher_logit_batch.is_empty() {
        return;
    }
    let mut mean = Array2::<f64>::zeros(center.raw_dim());
    for row in teacher_logit_batch {
        mean += row;
    }
    mean /= teacher_logit_batch.len() as f64;
    center.zip_mut_with(&mean, |c, b| *c = m_c * *c + (1.0 - m_c) * *b);
}

/// Student/teacher parameter pair with the running center and step counter.
pub struct DinoState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center: Array2<f64>,
    pub step: u64,
    /// Mean batch loss per optimizer step, for diagnostics.
    pub losses: Vec<f64>,
}

/// Teacher temperature: linear warmup by epoch.
pub fn tau_t_at(s1: &Stage1Config, epoch: usize) -> f64 {
    if s1.tau_t_warmup_epochs == 0 {
        return s1.tau_t_end;
    }
    let f = (epoch as f64 / s1.tau_t_warmup_epochs as f64).min(1.0);
    s1.tau_t_start + (s1.tau_t_end - s1.tau_t_start) * f
}

/// EMA momentum: cosine ramp from the configured start to 1 over training.
pub fn ema_momentum_at(m0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return m0;
    }
    let t = step as f64 / total_steps as f64;
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

const DINO_HEAD_LAYERS: usize = 3;

/// Register the projection head (3 linear layers with GELU between) under
/// `dino.`.
pub fn init_dino_head<R: Rng>(store: &mut ParamStore, in_dim: usize, hidden: usize, out: usize, rng: &mut R) {
    let dims = [in_dim, hidden, hidden, out];
    for i in 0..DINO_HEAD_LAYERS {
        store.insert(&format!("dino.w{}", i + 1), glorot_init(rng, dims[i], dims[i + 1]));
        store.insert(&format!("dino.b{}", i + 1), Array2::zeros((1, dims[i + 1])));
    }
}

fn dino_head_forward(tape: &mut Tape, b: &mut Bindings, store: &ParamStore, x: Tx) -> Tx {
    let mut h = x;
    for i in 0..DINO_HEAD_LAYERS {
        if i + 1 == DINO_HEAD_LAYERS {
            // Normalized bottleneck: the last layer sees unit-norm inputs, so
            // the logits stay bounded no matter how large the encoder output
            // grows — the standard self-distillation stability device.
            h = tape.l2_normalize_rows(h, 1e-12);
        }
        let w = b.bind(store, tape, &format!("dino.w{}", i + 1));
        let bias = b.bind(store, tape, &format!("dino.b{}", i + 1));
        h = tape.linear(h, w, bias);
        if i + 1 < DINO_HEAD_LAYERS {
            h = tape.gelu(h);
        }
    }
    h
}

/// Encoder + projection head for one view; returns the `1 × out` logits.
fn view_logits(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    vit: &ViTConfig,
    view: &DinoView,
) -> Result<Tx> {
    let t = tape.constant(view.rows.clone());
    let enc = vit_forward(tape, bindings, store, "enc.", vit, t, Some(&view.slots))?;
    Ok(dino_head_forward(tape, bindings, store, enc.out))
}

/// Fresh student/teacher pair for an encoder shape. The teacher starts as an
/// exact copy and is frozen: its parameters bind as constants and never
/// receive gradients; only [`ema_update`] moves them.
pub fn init_state(vit: &ViTConfig, dino_hidden: usize, dino_out: usize, seed: u64) -> DinoState {
    let mut rng = derive_rng(seed, "dino/init");
    let mut student = ParamStore::new();
    init_vit(&mut student, "enc.", vit, &mut rng);
    init_dino_head(&mut student, vit.output_dim, dino_hidden, dino_out, &mut rng);
    let mut teacher = student.clone();
    teacher.freeze_prefix("");
    DinoState {
        student,
        teacher,
        center: Array2::zeros((1, dino_out)),
        step: 0,
        losses: Vec::new(),
    }
}

/// Run the self-distillation loop over a dataset of token matrices.
/// Returns the trained state; the teacher encoder is the artifact downstream
/// feature extraction uses.
pub fn train_ssl(
    dataset: &[Array2<f64>],
    vit: &ViTConfig,
    s1: &Stage1Config,
    dino_hidden: usize,
    dino_out: usize,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<DinoState> {
    if dataset.is_empty() {
        return Err(PipelineError::config("empty self-distillation dataset"));
    }
    let mut state = init_state(vit, dino_hidden, dino_out, seed);
    let mut opt = SgdMomentum::new(s1.lr, s1.momentum, s1.weight_decay);
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(s1.batch);
    let total_steps = (steps_per_epoch * s1.epochs) as u64;
    let mut log: Option<std::fs::File> = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "step,loss,tau_t,ema_momentum,center_norm")?;
            Some(f)
        }
        None => None,
    };

    for epoch in 0..s1.epochs {
        let tau_t = tau_t_at(s1, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = derive_rng(seed, &format!("dino/shuffle/{epoch}"));
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch_items in order.chunks(s1.batch) {
            let mut batch_grads = std::collections::BTreeMap::new();
            let mut batch_loss = 0.0;
            let mut teacher_batch_logits: Vec<Array2<f64>> = Vec::new();
            let inv_batch = 1.0 / batch_items.len() as f64;

            for chunk in batch_items.chunks(s1.grad_accum_chunk.max(1)) {
                let mut tape = Tape::new();
                let mut student_b = Bindings::new();
                let mut teacher_b = Bindings::new();
                let mut chunk_terms: Vec<Tx> = Vec::new();
                for item in chunk {
                    let mut view_rng =
                        derive_rng(seed, &format!("dino/views/{}/{item}", state.step));
                    let views = make_views(
                        &dataset[*item],
                        s1.n_global,
                        s1.n_local,
                        s1.global_keep_min,
                        s1.local_keep_min,
                        s1.local_keep_max,
                        s1.view_sigma,
                        &mut view_rng,
                    )?;
                    let mut student_logits = Vec::with_capacity(views.len());
                    for v in &views {
                        student_logits
                            .push(view_logits(&mut tape, &mut student_b, &state.student, vit, v)?);
                    }
                    let mut teacher_probs_list = Vec::with_capacity(s1.n_global);
                    for v in views.iter().filter(|v| v.is_global) {
                        let logits_tx =
                            view_logits(&mut tape, &mut teacher_b, &state.teacher, vit, v)?;
                        let logits = tape.value(logits_tx).clone();
                        if logits.iter().any(|x| !x.is_finite()) {
                            return Err(PipelineError::NonFinite("teacher logits".to_string()));
                        }
                        teacher_probs_list.push(teacher_probs(&logits, &state.center, tau_t));
                        teacher_batch_logits.push(logits);
                    }
                    let item_loss =
                        dino_loss_tape(&mut tape, &student_logits, &teacher_probs_list, s1.tau_s)?;
                    chunk_terms.push(item_loss);
                }
                let mut chunk_total = chunk_terms[0];
                for t in &chunk_terms[1..] {
                    chunk_total = tape.add(chunk_total, *t);
                }
                let scaled = tape.scale(chunk_total, inv_batch);
                let loss_val = tape.value(scaled)[[0, 0]];
                if !loss_val.is_finite() {
                    return Err(PipelineError::Diverged {
                        step: state.step,
                        loss: loss_val,
                    });
                }
                batch_loss += loss_val;
                let grads = tape.backward(scaled);
                assert!(
                    teacher_b.collect_grads(&tape, &grads).is_empty(),
                    "teacher parameters must never receive gradients"
                );
                let student_grads = student_b.collect_grads(&tape, &grads);
                accumulate_grads(&mut batch_grads, student_grads);
            }

            if s1.clip_grad > 0.0 {
                clip_grad_norm(&mut batch_grads, s1.clip_grad);
            }
            opt.step(&mut state.student, &batch_grads);
            let m = ema_momentum_at(s1.ema_momentum_start, state.step, total_steps);
            ema_update(&mut state.teacher, &state.student, m)?;
            update_center(&mut state.center, &teacher_batch_logits, s1.center_momentum);
            state.step += 1;
            state.losses.push(batch_loss);
            if let Some(f) = log.as_mut() {
                let center_norm = state.center.iter().map(|v| v * v).sum::<f64>().sqrt();
                writeln!(f, "{},{batch_loss},{tau_t},{m},{center_norm}", state.step)?;
            }
        }
    }
    let _ = scale_grads; // shared helper exercised elsewhere
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use pmprg_autodiff::params::uniform_init;
    use proptest::prelude::*;

    fn tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
        uniform_init(&mut derive_rng(seed, "tok"), n, d, 1.0)
    }

    #[test]
    fn identity_augmentation_reproduces_input() {
        let t = tokens(16, 4, 1);
        let mut rng = derive_rng(2, "v");
        let views = make_views(&t, 2, 0, 1.0, 0.25, 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(views.len(), 2);
        for v in &views {
            assert!(v.is_global);
            assert_eq!(v.rows, t);
            assert_eq!(v.slots, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn local_views_keep_quarter_to_half() {
        let t = tokens(16, 4, 3);
        for seed in 0..20u64 {
            let mut rng = derive_rng(seed, "v");
            let views = make_views(&t, 2, 3, 0.75, 0.25, 0.5, 0.05, &mut rng).unwrap();
            assert_eq!(views.len(), 5);
            for v in views.iter().skip(2) {
                assert!(!v.is_global);
                assert!(
                    (4..=8).contains(&v.rows.nrows()),
                    "local view kept {} rows",
                    v.rows.nrows()
                );
            }
            for v in views.iter().take(2) {
                assert!(v.rows.nrows() >= 12, "global view kept {} rows", v.rows.nrows());
            }
        }
    }

    #[test]
    fn seeded_views_reproduce_slot_indices() {
        let t = tokens(10, 3, 4);
        let a = make_views(&t, 2, 2, 0.75, 0.25, 0.5, 0.1, &mut derive_rng(9, "v")).unwrap();
        let b = make_views(&t, 2, 2, 0.75, 0.25, 0.5, 0.1, &mut derive_rng(9, "v")).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.slots, y.slots);
            assert_eq!(x.rows, y.rows);
        }
        // Slots are distinct and ascending.
        for v in &a {
            let mut sorted = v.slots.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), v.slots.len());
            assert!(v.slots.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn view_preconditions() {
        let t = tokens(4, 2, 5);
        let mut rng = derive_rng(0, "v");
        assert!(make_views(&t, 1, 2, 0.75, 0.25, 0.5, 0.0, &mut rng).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(make_views(&empty, 2, 2, 0.75, 0.25, 0.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_pair_loss_is_ln_2() {
        let s = ndarray::array![[0.0, 0.0]];
        let t = ndarray::array![[0.0, 0.0]];
        let c = Array2::zeros((1, 2));
        for tau in [0.05, 0.1, 1.0] {
            let l = dino_pair_loss(&s, &t, tau, tau, &c).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "loss {l}");
        }
    }

    #[test]
    fn sharp_matching_distributions_drive_loss_to_zero() {
        let s = ndarray::array![[10.0, 0.0]];
        let t = ndarray::array![[10.0, 0.0]];
        let c = Array2::zeros((1, 2));
        let l = dino_pair_loss(&s, &t, 0.01, 0.01, &c).unwrap();
        assert!(l < 1e-3, "near one-hot matching pair should cost ~0, got {l}");
    }

    #[test]
    fn non_finite_logits_error() {
        let s = ndarray::array![[f64::NAN, 0.0]];
        let t = ndarray::array![[0.0, 0.0]];
        let c = Array2::zeros((1, 2));
        assert!(dino_pair_loss(&s, &t, 0.1, 0.1, &c).is_err());
        assert!(dino_pair_loss(&t, &s, 0.1, 0.1, &c).is_err());
    }

    #[test]
    fn aggregate_skips_same_index_global_pairs() {
        let a = ndarray::array![[1.0, -1.0]];
        let b = ndarray::array![[-0.5, 0.5]];
        let c0 = Array2::zeros((1, 2));
        // Two globals, no locals: only cross pairs (t0,s1) and (t1,s0) count.
        let agg = dino_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()], 0.1, 0.1, &c0).unwrap();
        let expect = (dino_pair_loss(&b, &a, 0.1, 0.1, &c0).unwrap()
            + dino_pair_loss(&a, &b, 0.1, 0.1, &c0).unwrap())
            / 2.0;
        assert!((agg - expect).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        let mut rng = derive_rng(11, "logits");
        for _ in 0..5 {
            let s1 = uniform_init(&mut rng, 1, 6, 2.0);
            let s2 = uniform_init(&mut rng, 1, 6, 2.0);
            let t1 = uniform_init(&mut rng, 1, 6, 2.0);
            let t2 = uniform_init(&mut rng, 1, 6, 2.0);
            let center = uniform_init(&mut rng, 1, 6, 0.5);
            let (tau_s, tau_t) = (0.1, 0.05);
            let pure = dino_loss(
                &[s1.clone(), s2.clone()],
                &[t1.clone(), t2.clone()],
                tau_s,
                tau_t,
                &center,
            )
            .unwrap();

            let mut tape = Tape::new();
            let sx1 = tape.constant(s1.clone());
            let sx2 = tape.constant(s2.clone());
            let probs = vec![
                teacher_probs(&t1, &center, tau_t),
                teacher_probs(&t2, &center, tau_t),
            ];
            let lt = dino_loss_tape(&mut tape, &[sx1, sx2], &probs, tau_s).unwrap();
            assert!((tape.value(lt)[[0, 0]] - pure).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_formula() {
        let mut teacher = ParamStore::new();
        teacher.insert("w", ndarray::array![[1.0]]);
        let mut student = ParamStore::new();
        student.insert("w", ndarray::array![[0.0]]);

        let mut t1 = teacher.clone();
        ema_update(&mut t1, &student, 1.0).unwrap();
        assert_eq!(t1.get("w")[[0, 0]], 1.0);

        let mut t0 = teacher.clone();
        ema_update(&mut t0, &student, 0.0).unwrap();
        assert_eq!(t0.get("w")[[0, 0]], 0.0);

        let mut th = teacher.clone();
        ema_update(&mut th, &student, 0.5).unwrap();
        assert_eq!(th.get("w")[[0, 0]], 0.5);

        let mut bad = ParamStore::new();
        bad.insert("w", Array2::zeros((2, 2)));
        assert!(ema_update(&mut bad, &student, 0.5).is_err());
        let mut missing = ParamStore::new();
        missing.insert("other", Array2::zeros((1, 1)));
        assert!(ema_update(&mut teacher, &missing, 0.5).is_err());
    }

    #[test]
    fn center_update_formula() {
        let batch = vec![ndarray::array![[2.0, 4.0]], ndarray::array![[0.0, 0.0]]];
        let mut c = ndarray::array![[1.0, 1.0]];
        update_center(&mut c, &batch, 1.0);
        assert_eq!(c, ndarray::array![[1.0, 1.0]]);
        update_center(&mut c, &batch, 0.0);
        assert_eq!(c, ndarray::array![[1.0, 2.0]]);
        let mut c2 = ndarray::array![[4.0, 8.0]];
        update_center(&mut c2, &[ndarray::array![[0.0, 0.0]]], 0.9);
        assert!((c2[[0, 0]] - 3.6).abs() < 1e-12);
        assert!((c2[[0, 1]] - 7.2).abs() < 1e-12);
    }

    fn tiny_vit() -> ViTConfig {
        ViTConfig {
            input_dim: 4,
            token_count: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cls_token: true,
            output_dim: 6,
            final_norm: true,
        }
    }

    fn tiny_stage1(epochs: usize, batch: usize, lr: f64) -> Stage1Config {
        let mut s1 = RunConfig::desk().stage1;
        s1.epochs = epochs;
        s1.batch = batch;
        s1.lr = lr;
        s1.grad_accum_chunk = 2;
        s1
    }

    #[test]
    fn one_epoch_four_items_batch_two_is_two_steps() {
        let data: Vec<Array2<f64>> = (0..4).map(|i| tokens(8, 4, 100 + i)).collect();
        let state = train_ssl(&data, &tiny_vit(), &tiny_stage1(1, 2, 0.01), 8, 12, 7, None).unwrap();
        assert_eq!(state.step, 2);
        assert_eq!(state.losses.len(), 2);
    }

    #[test]
    fn loss_trends_down_on_a_fixed_batch() {
        let data: Vec<Array2<f64>> = (0..2).map(|i| tokens(8, 4, 200 + i)).collect();
        let mut s1 = tiny_stage1(10, 2, 0.05);
        s1.view_sigma = 0.01;
        let state = train_ssl(&data, &tiny_vit(), &s1, 8, 12, 9, None).unwrap();
        assert_eq!(state.losses.len(), 10);
        let head: f64 = state.losses[..3].iter().sum::<f64>() / 3.0;
        let tail: f64 = state.losses[7..].iter().sum::<f64>() / 3.0;
        assert!(
            tail < head,
            "distillation loss should fall: first {head}, last {tail}"
        );
    }

    #[test]
    fn training_writes_a_step_log() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("ssl.csv");
        let data: Vec<Array2<f64>> = (0..2).map(|i| tokens(8, 4, 300 + i)).collect();
        train_ssl(&data, &tiny_vit(), &tiny_stage1(2, 2, 0.01), 8, 12, 11, Some(&log)).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,tau_t,ema_momentum,center_norm");
        assert_eq!(lines.len(), 3); // header + 2 steps
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 5);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_ssl(&[], &tiny_vit(), &tiny_stage1(1, 2, 0.01), 8, 12, 0, None).is_err());
    }

    #[test]
    fn schedules_hit_their_endpoints() {
        let s1 = tiny_stage1(1, 2, 0.01);
        assert!((tau_t_at(&s1, 0) - s1.tau_t_start).abs() < 1e-12);
        assert!((tau_t_at(&s1, s1.tau_t_warmup_epochs) - s1.tau_t_end).abs() < 1e-12);
        assert!((tau_t_at(&s1, s1.tau_t_warmup_epochs * 5) - s1.tau_t_end).abs() < 1e-12);
        assert!((ema_momentum_at(0.996, 0, 100) - 0.996).abs() < 1e-12);
        assert!((ema_momentum_at(0.996, 100, 100) - 1.0).abs() < 1e-12);
        let mid = ema_momentum_at(0.996, 50, 100);
        assert!(mid > 0.996 && mid < 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_at_least_teacher_entropy(
            s in proptest::collection::vec(-3.0f64..3.0, 4),
            t in proptest::collection::vec(-3.0f64..3.0, 4),
            c in proptest::collection::vec(-1.0f64..1.0, 4),
            tau_s in 0.05f64..1.0,
            tau_t in 0.05f64..1.0,
        ) {
            let s = Array2::from_shape_vec((1, 4), s).unwrap();
            let t = Array2::from_shape_vec((1, 4), t).unwrap();
            let c = Array2::from_shape_vec((1, 4), c).unwrap();
            let loss = dino_pair_loss(&s, &t, tau_s, tau_t, &c).unwrap();
            let p = teacher_probs(&t, &c, tau_t);
            let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
            prop_assert!(loss >= entropy - 1e-9, "loss {} < teacher entropy {}", loss, entropy);
        }

        #[test]
        fn views_respect_ratio_bounds(n in 2usize..20, seed in 0u64..300) {
            let t = tokens(n, 3, seed);
            let mut rng = derive_rng(seed, "prop-views");
            let views = make_views(&t, 2, 2, 0.75, 0.25, 0.5, 0.02, &mut rng).unwrap();
            for v in &views {
                prop_assert!(v.rows.nrows() >= 1 && v.rows.nrows() <= n);
                if v.is_global {
                    prop_assert!(v.rows.nrows() as f64 >= (0.75 * n as f64).ceil().min(n as f64));
                }
                prop_assert!(v.slots.iter().all(|s| *s < n));
            }
        }
    }
}
