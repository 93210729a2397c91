//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line. Criteria 1, 10 and 11 share a three-seed fixture of full
//! desk-profile pipeline runs driven through the compiled binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use pmprg::config::RunConfig;
use pmprg::dino::{dino_loss, dino_loss_tape, dino_pair_loss, teacher_probs, train_ssl};
use pmprg::eval::ngram::{bleu_n, meteor, rouge_l_beta};
use pmprg::eval::MetricReport;
use pmprg::generator::lm::{apply_freeze_policy, init_lm, psa_attention, sentence_nll};
use pmprg::generator::{total_loss, total_loss_value};
use pmprg::mrvit::ViTConfig;
use pmprg::regions::pick_drop_slot;
use pmprg::seeds::derive_rng;
use pmprg_autodiff::gradcheck::max_fd_error;
use pmprg_autodiff::nn::{causal_mask_with_prefix, multi_head_attention, MhaWeights};
use pmprg_autodiff::optim::AdamW;
use pmprg_autodiff::params::{glorot_init, uniform_init};
use pmprg_autodiff::{Bindings, ParamStore, Tape};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_pmprg");
const SEEDS: [u64; 3] = [17, 18, 19];
const STAGE1_BUDGET: Duration = Duration::from_secs(15 * 60);
const STAGE2_BUDGET: Duration = Duration::from_secs(30 * 60);

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:02} {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- fixture --

struct SeedRun {
    seed: u64,
    dir: PathBuf,
    metrics: MetricReport,
    stage1_wall: Duration,
    stage2_wall: Duration,
    /// CE accuracy of the one-shot (unstructured conditioning) ablation.
    scenario1_ce: f64,
}

struct Fixture {
    _root: tempfile::TempDir,
    runs: Vec<SeedRun>,
}

fn run_bin(args: &[&str]) -> Duration {
    let t0 = Instant::now();
    let out = Command::new(BIN).args(args).output().expect("spawn pipeline binary");
    assert!(
        out.status.success(),
        "`pmprg {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    t0.elapsed()
}

fn read_metrics(dir: &Path) -> MetricReport {
    let text = std::fs::read_to_string(dir.join("metrics.json")).expect("metrics.json");
    serde_json::from_str(&text).expect("parse metrics.json")
}

fn full_run(dir: &Path, seed: u64) -> (Duration, Duration) {
    let seed = seed.to_string();
    let out = dir.to_str().unwrap();
    run_bin(&["synth", "--seed", &seed, "--out", out]);
    run_bin(&["split", "--seed", &seed, "--out", out]);
    let s1 = run_bin(&["train-stage1", "--seed", &seed, "--out", out]);
    let s2 = run_bin(&["train-stage2", "--seed", &seed, "--out", out]);
    run_bin(&["generate", "--seed", &seed, "--out", out]);
    run_bin(&["evaluate", "--seed", &seed, "--out", out]);
    (s1, s2)
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = tempfile::tempdir().expect("fixture tempdir");
        let mut runs = Vec::new();
        for seed in SEEDS {
            let dir = root.path().join(format!("seed{seed}"));
            let (stage1_wall, stage2_wall) = full_run(&dir, seed);
            let metrics = read_metrics(&dir);
            run_bin(&["ablate", "s1", "--seed", &seed.to_string(), "--out", dir.to_str().unwrap()]);
            let ablation: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.join("ablation.json")).expect("ablation.json"),
            )
            .expect("parse ablation.json");
            let scenario1_ce = ablation.as_array().expect("ablation rows")[0]["metrics"]
                ["ce_accuracy"]
                .as_f64()
                .expect("scenario-1 CE accuracy");
            runs.push(SeedRun {
                seed,
                dir,
                metrics,
                stage1_wall,
                stage2_wall,
                scenario1_ce,
            });
        }
        Fixture { _root: root, runs }
    })
}

// -------------------------------------------------------------- criteria --

#[test]
fn criterion_01_desk_quality_and_budget() {
    let fx = fixture();
    let mut good = 0usize;
    let mut details = Vec::new();
    for r in &fx.runs {
        let m = &r.metrics;
        let ok = m.tag_accuracy >= 0.85
            && m.organ_accuracy >= 0.95
            && m.meteor >= 0.60
            && m.rouge_l >= 0.60;
        good += ok as usize;
        details.push(format!(
            "seed {}: tag {:.3} organ {:.3} METEOR {:.3} ROUGE-L {:.3} ({}; stage1 {:.0}s stage2 {:.0}s)",
            r.seed,
            m.tag_accuracy,
            m.organ_accuracy,
            m.meteor,
            m.rouge_l,
            if ok { "ok" } else { "below threshold" },
            r.stage1_wall.as_secs_f64(),
            r.stage2_wall.as_secs_f64(),
        ));
    }
    let budget_ok = fx
        .runs
        .iter()
        .all(|r| r.stage1_wall <= STAGE1_BUDGET && r.stage2_wall <= STAGE2_BUDGET);
    let pass = good >= 2 && budget_ok;
    let detail = format!(
        "{} of {} seeds above thresholds; budgets {}: {}",
        good,
        fx.runs.len(),
        if budget_ok { "kept" } else { "exceeded" },
        details.join(" | ")
    );
    verdict(1, "desk quality and budget", pass, &detail);
}

#[test]
fn criterion_02_loss_weight_arithmetic() {
    let mut rng = derive_rng(2026, "acceptance/loss-weights");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let lo = rng.random_range(0.0..10.0);
        let lt = rng.random_range(0.0..10.0);
        let ls = rng.random_range(0.0..10.0);
        let a = rng.random_range(0.0..2.0);
        let b = rng.random_range(0.0..2.0);
        let g = rng.random_range(0.0..2.0);
        let mut tape = Tape::new();
        let o = tape.constant(Array2::from_elem((1, 1), lo));
        let t = tape.constant(Array2::from_elem((1, 1), lt));
        let s = tape.constant(Array2::from_elem((1, 1), ls));
        let total = total_loss(&mut tape, o, t, s, a, b, g);
        let hand = a * lo + b * lt + g * ls;
        worst = worst.max((tape.value(total)[[0, 0]] - hand).abs());
        worst = worst.max((total_loss_value(lo, lt, ls, a, b, g) - hand).abs());
    }
    verdict(
        2,
        "loss-weight arithmetic",
        worst <= 1e-12,
        &format!("max |tape − hand| = {worst:.2e} over 100 random tuples"),
    );
}

#[test]
fn criterion_03_masking_exactness() {
    let mut rng = derive_rng(2026, "acceptance/masking");
    for batch in 0..50 {
        // Attention-weight side: masked entries are exactly zero.
        let n_q = rng.random_range(1..6);
        let n_k = rng.random_range(1..7);
        let mut allowed = Array2::from_elem((n_q, n_k), false);
        for q in 0..n_q {
            for k in 0..n_k {
                allowed[[q, k]] = rng.random_bool(0.6);
            }
            let any = (0..n_k).any(|k| allowed[[q, k]]);
            if !any {
                allowed[[q, rng.random_range(0..n_k)]] = true;
            }
        }
        let scores = uniform_init(&mut rng, n_q, n_k, 4.0);
        let mut tape = Tape::new();
        let s = tape.leaf(scores);
        let masked = tape.masked_fill(s, std::rc::Rc::new(allowed.clone()));
        let w = tape.softmax_rows(masked);
        for q in 0..n_q {
            let mut row_sum = 0.0;
            for k in 0..n_k {
                let v = tape.value(w)[[q, k]];
                if !allowed[[q, k]] {
                    assert_eq!(v, 0.0, "batch {batch}: masked weight not exactly zero");
                }
                row_sum += v;
            }
            assert!((row_sum - 1.0).abs() < 1e-12, "batch {batch}: row sum {row_sum}");
        }

        // Cross-entropy side: excluded rows contribute nothing to value or
        // gradient; the mean over included rows matches a physically
        // subsetted batch bit for bit.
        let n = rng.random_range(1..6);
        let c = rng.random_range(2..5);
        let logits_val = uniform_init(&mut rng, n, c, 3.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut include: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if !include.iter().any(|i| *i) {
            include[rng.random_range(0..n)] = true;
        }
        let mut tape = Tape::new();
        let logits = tape.leaf(logits_val.clone());
        let ce = tape.cross_entropy_rows(logits, &targets, &include);
        let full_value = tape.value(ce)[[0, 0]];
        let grads = tape.backward(ce);
        let g = grads.of(logits, &tape);
        for (i, inc) in include.iter().enumerate() {
            if !inc {
                assert!(
                    g.row(i).iter().all(|v| *v == 0.0),
                    "batch {batch}: excluded row {i} received gradient"
                );
            }
        }
        let kept: Vec<usize> = (0..n).filter(|i| include[*i]).collect();
        let kept_targets: Vec<usize> = kept.iter().map(|i| targets[*i]).collect();
        let mut tape2 = Tape::new();
        let sub = tape2.leaf(logits_val.select(ndarray::Axis(0), &kept));
        let ce2 = tape2.cross_entropy_rows(sub, &kept_targets, &vec![true; kept.len()]);
        assert_eq!(
            full_value,
            tape2.value(ce2)[[0, 0]],
            "batch {batch}: masked mean differs from subsetted batch"
        );
    }
    verdict(
        3,
        "masking exactness",
        true,
        "50 random batches: masked attention weights exactly 0, excluded CE rows inert",
    );
}

#[test]
fn criterion_04_psa_reduction_bitwise() {
    let mut rng = derive_rng(2026, "acceptance/psa-reduction");
    for case in 0..20 {
        let heads = [1usize, 2, 4][case % 3];
        let d = heads * rng.random_range(2..5);
        let t = rng.random_range(1..7);
        let x_val = uniform_init(&mut rng, t, d, 1.0);
        let mut store = ParamStore::new();
        for n in ["wq", "wk", "wv", "wo"] {
            store.insert(n, glorot_init(&mut rng, d, d));
        }
        for n in ["bq", "bk", "bv", "bo"] {
            store.insert(n, uniform_init(&mut rng, 1, d, 0.1));
        }
        let weights = |tape: &mut Tape, b: &mut Bindings| MhaWeights {
            wq: b.bind(&store, tape, "wq"),
            bq: b.bind(&store, tape, "bq"),
            wk: b.bind(&store, tape, "wk"),
            bk: b.bind(&store, tape, "bk"),
            wv: b.bind(&store, tape, "wv"),
            bv: b.bind(&store, tape, "bv"),
            wo: b.bind(&store, tape, "wo"),
            bo: b.bind(&store, tape, "bo"),
        };

        let mut tape_a = Tape::new();
        let mut bind_a = Bindings::new();
        let xa = tape_a.constant(x_val.clone());
        let wa = weights(&mut tape_a, &mut bind_a);
        let psa = psa_attention(&mut tape_a, xa, None, &wa, heads);

        let mut tape_b = Tape::new();
        let mut bind_b = Bindings::new();
        let xb = tape_b.constant(x_val.clone());
        let wb = weights(&mut tape_b, &mut bind_b);
        let mask = causal_mask_with_prefix(t, 0);
        let plain = multi_head_attention(&mut tape_b, xb, xb, &wb, heads, Some(&mask));

        assert_eq!(
            tape_a.value(psa.out),
            tape_b.value(plain.out),
            "case {case}: condition-free conditional attention diverged from plain causal"
        );
    }
    verdict(
        4,
        "conditional attention reduction",
        true,
        "20 random shapes: no-condition path bitwise equals standard causal attention",
    );
}

#[test]
fn criterion_05_freeze_contract() {
    let mut rng = derive_rng(2026, "acceptance/freeze");
    let mut dims = RunConfig::desk().dims;
    dims.lm_width = 16;
    dims.lm_blocks = 2;
    dims.lm_heads = 2;
    dims.lm_mlp_ratio = 2;
    dims.lm_max_len = 12;
    dims.d = 8;
    let vocab_size = 20;
    let mut store = ParamStore::new();
    init_lm(&mut store, vocab_size, &dims, &mut rng);
    apply_freeze_policy(&mut store);
    let before: BTreeMap<String, Array2<f64>> = store
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();

    let cond_val = uniform_init(&mut rng, 1, dims.d, 1.0);
    let mut opt = AdamW::new(1e-2, 0.01);
    for _ in 0..10 {
        let words: Vec<usize> = (0..6).map(|_| rng.random_range(4..vocab_size)).collect();
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let cond = tape.constant(cond_val.clone());
        let (nll, _) = sentence_nll(&mut tape, &mut bindings, &store, &words, Some(cond), &dims)
            .expect("sentence scoring");
        let grads = tape.backward(nll);
        let by_name = bindings.collect_grads(&tape, &grads);
        opt.step(&mut store, &by_name);
    }

    let mut moved = Vec::new();
    for (name, param) in store.iter() {
        let changed = before[name] != param.value;
        if changed {
            moved.push(name.to_string());
        }
        if !param.trainable {
            assert!(!changed, "frozen parameter {name} moved");
        }
    }
    let moved_ok = moved
        .iter()
        .all(|n| n.contains(".psa.") || n.starts_with("lm.cond."));
    let key_players_moved = moved.iter().any(|n| n == "lm.cond.w")
        && moved.iter().any(|n| n.contains(".psa.wk"))
        && moved.iter().any(|n| n.contains(".psa.wv"));
    verdict(
        5,
        "freeze contract",
        moved_ok && key_players_moved,
        &format!(
            "10 optimizer steps: frozen base bitwise unchanged; movers = {}",
            moved.join(", ")
        ),
    );
}

#[test]
fn criterion_06_distillation_algebra() {
    let mut rng = derive_rng(2026, "acceptance/dino");
    let mut worst_direct = 0.0f64;
    let mut worst_tape = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(2..8);
        let tau_s = rng.random_range(0.05..0.5);
        let tau_t = rng.random_range(0.02..0.2);
        let center = uniform_init(&mut rng, 1, dim, 0.5);
        let s_logits = uniform_init(&mut rng, 1, dim, 2.0);
        let t_logits = uniform_init(&mut rng, 1, dim, 2.0);

        // Direct formula, recomputed from scratch.
        let softmax = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        };
        let p_t = softmax(
            &t_logits
                .iter()
                .zip(center.iter())
                .map(|(t, c)| (t - c) / tau_t)
                .collect::<Vec<_>>(),
        );
        let p_s = softmax(&s_logits.iter().map(|s| s / tau_s).collect::<Vec<_>>());
        let hand: f64 = p_t
            .iter()
            .zip(p_s.iter())
            .map(|(pt, ps)| -pt * ps.ln())
            .sum();
        let lib = dino_pair_loss(&s_logits, &t_logits, tau_s, tau_t, &center).unwrap();
        worst_direct = worst_direct.max((lib - hand).abs());

        // Gibbs: cross-entropy is at least the teacher entropy.
        let entropy: f64 = p_t.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
        assert!(
            lib >= entropy - 1e-12,
            "cross-entropy {lib} below teacher entropy {entropy}"
        );

        // Tape reduction matches the value-level mean over pairs.
        let s2 = uniform_init(&mut rng, 1, dim, 2.0);
        let t2 = uniform_init(&mut rng, 1, dim, 2.0);
        let value = dino_loss(
            &[s_logits.clone(), s2.clone()],
            &[t_logits.clone(), t2.clone()],
            tau_s,
            tau_t,
            &center,
        )
        .unwrap();
        let mut tape = Tape::new();
        let sa = tape.leaf(s_logits.clone());
        let sb = tape.leaf(s2.clone());
        let probs = [
            teacher_probs(&t_logits, &center, tau_t),
            teacher_probs(&t2, &center, tau_t),
        ];
        let node = dino_loss_tape(&mut tape, &[sa, sb], &probs, tau_s).unwrap();
        worst_tape = worst_tape.max((tape.value(node)[[0, 0]] - value).abs());
    }

    // Stop-gradient: the training loop asserts teacher gradients are empty
    // on every step; drive one micro run through it.
    let vit = ViTConfig {
        input_dim: 6,
        token_count: 5,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        cls_token: true,
        output_dim: 8,
        final_norm: true,
    };
    let mut s1 = RunConfig::desk().stage1;
    s1.epochs = 1;
    s1.batch = 4;
    s1.grad_accum_chunk = 2;
    s1.n_global = 2;
    s1.n_local = 1;
    let dataset: Vec<Array2<f64>> = (0..6).map(|_| uniform_init(&mut rng, 5, 6, 1.0)).collect();
    train_ssl(&dataset, &vit, &s1, 10, 7, 99, None).expect("micro distillation run");

    let pass = worst_direct <= 1e-9 && worst_tape <= 1e-9;
    verdict(
        6,
        "distillation algebra",
        pass,
        &format!(
            "50 draws: |pair loss − hand| ≤ {worst_direct:.2e}, |tape − value| ≤ {worst_tape:.2e}, loss ≥ teacher entropy, teacher grads empty"
        ),
    );
}

#[test]
fn criterion_07_finite_difference_gradients() {
    let mut worst_overall = 0.0f64;
    for case in 0..20u64 {
        let mut rng = derive_rng(2026, &format!("acceptance/fd/{case}"));
        let n = rng.random_range(2..5);
        let d_in = rng.random_range(3..7);
        let heads = [1usize, 2][case as usize % 2];
        let d_h = heads * rng.random_range(2..4);
        let classes = rng.random_range(2..5);
        let with_attention = case % 2 == 0;

        let mut store = ParamStore::new();
        store.insert("w1", glorot_init(&mut rng, d_in, d_h));
        store.insert("b1", uniform_init(&mut rng, 1, d_h, 0.1));
        store.insert("g", Array2::ones((1, d_h)));
        store.insert("beta", uniform_init(&mut rng, 1, d_h, 0.1));
        if with_attention {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(w, glorot_init(&mut rng, d_h, d_h));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(b, uniform_init(&mut rng, 1, d_h, 0.1));
            }
        }
        store.insert("w2", glorot_init(&mut rng, d_h, classes));
        store.insert("b2", uniform_init(&mut rng, 1, classes, 0.1));

        let x = uniform_init(&mut rng, n, d_in, 1.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let include = vec![true; n];
        let mask = causal_mask_with_prefix(n, 0);

        let run = |store: &ParamStore| -> (f64, BTreeMap<String, Array2<f64>>) {
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let xi = tape.constant(x.clone());
            let w1 = b.bind(store, &mut tape, "w1");
            let b1 = b.bind(store, &mut tape, "b1");
            let h = tape.linear(xi, w1, b1);
            let h = tape.gelu(h);
            let g = b.bind(store, &mut tape, "g");
            let beta = b.bind(store, &mut tape, "beta");
            let mut h = tape.layer_norm(h, g, beta, 1e-5);
            if with_attention {
                let w = MhaWeights {
                    wq: b.bind(store, &mut tape, "wq"),
                    bq: b.bind(store, &mut tape, "bq"),
                    wk: b.bind(store, &mut tape, "wk"),
                    bk: b.bind(store, &mut tape, "bk"),
                    wv: b.bind(store, &mut tape, "wv"),
                    bv: b.bind(store, &mut tape, "bv"),
                    wo: b.bind(store, &mut tape, "wo"),
                    bo: b.bind(store, &mut tape, "bo"),
                };
                let a = multi_head_attention(&mut tape, h, h, &w, heads, Some(&mask));
                h = a.out;
            }
            let w2 = b.bind(store, &mut tape, "w2");
            let b2 = b.bind(store, &mut tape, "b2");
            let logits = tape.linear(h, w2, b2);
            let loss = tape.cross_entropy_rows(logits, &targets, &include);
            let lv = tape.value(loss)[[0, 0]];
            let grads = tape.backward(loss);
            (lv, b.collect_grads(&tape, &grads))
        };

        let (_, analytic) = run(&store);
        let mut probe = store.clone();
        let worst = max_fd_error(&mut probe, &analytic, |s| run(s).0, 1e-5, 10);
        worst_overall = worst_overall.max(worst);
        assert!(worst < 1e-3, "case {case}: finite-difference error {worst}");
    }
    verdict(
        7,
        "finite-difference gradients",
        true,
        &format!("20 random graphs, worst relative error {worst_overall:.2e} (< 1e-3)"),
    );
}

// Brute-force metric re-implementations, written against the metric
// definitions rather than the library code.
mod oracle {
    pub fn bleu(c: &[u8], r: &[u8], n: usize) -> f64 {
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let grams = |s: &[u8], k: usize| -> Vec<Vec<u8>> {
            if s.len() < k {
                Vec::new()
            } else {
                (0..=s.len() - k).map(|i| s[i..i + k].to_vec()).collect()
            }
        };
        let mut log_sum = 0.0;
        for k in 1..=n {
            let cg = grams(c, k);
            if cg.is_empty() {
                return 0.0;
            }
            let mut pool = grams(r, k);
            let mut matched = 0usize;
            for gram in &cg {
                if let Some(pos) = pool.iter().position(|p| p == gram) {
                    pool.remove(pos);
                    matched += 1;
                }
            }
            let p = matched as f64 / cg.len() as f64;
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        let bp = if c.len() as f64 > r.len() as f64 {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        bp * (log_sum / n as f64).exp()
    }

    fn lcs(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + lcs(a, b, i + 1, j + 1, memo)
        } else {
            lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }

    pub fn rouge(c: &[u8], r: &[u8], beta: f64) -> f64 {
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut memo = vec![vec![None; r.len()]; c.len()];
        let l = lcs(c, r, 0, 0, &mut memo) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let p = l / c.len() as f64;
        let rec = l / r.len() as f64;
        let b2 = beta * beta;
        (1.0 + b2) * p * rec / (rec + b2 * p)
    }

    pub fn meteor(c: &[u8], r: &[u8]) -> f64 {
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut used = vec![false; r.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..c.len() {
            for j in 0..r.len() {
                if !used[j] && r[j] == c[i] {
                    used[j] = true;
                    pairs.push((i, j));
                    break;
                }
            }
        }
        let m = pairs.len() as f64;
        if m == 0.0 {
            return 0.0;
        }
        let mut chunks = 0usize;
        let mut prev: Option<(usize, usize)> = None;
        for p in pairs {
            if prev != Some((p.0.wrapping_sub(1), p.1.wrapping_sub(1))) {
                chunks += 1;
            }
            prev = Some(p);
        }
        let prec = m / c.len() as f64;
        let rec = m / r.len() as f64;
        let f_mean = 10.0 * prec * rec / (rec + 9.0 * prec);
        f_mean * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
    }
}

#[test]
fn criterion_08_metric_oracles() {
    let mut rng = derive_rng(2026, "acceptance/metrics");
    for case in 0..200 {
        let len_c = rng.random_range(0..14);
        let len_r = rng.random_range(0..14);
        let c: Vec<u8> = (0..len_c).map(|_| rng.random_range(0..7u8)).collect();
        let r: Vec<u8> = (0..len_r).map(|_| rng.random_range(0..7u8)).collect();
        for n in 1..=4 {
            assert_eq!(
                bleu_n(&c, &r, n),
                oracle::bleu(&c, &r, n),
                "case {case}: BLEU-{n} on {c:?} vs {r:?}"
            );
        }
        let beta = rng.random_range(0.25..4.0);
        assert_eq!(
            rouge_l_beta(&c, &r, 1.0),
            oracle::rouge(&c, &r, 1.0),
            "case {case}: ROUGE-L"
        );
        assert_eq!(
            rouge_l_beta(&c, &r, beta),
            oracle::rouge(&c, &r, beta),
            "case {case}: ROUGE-L β={beta}"
        );
        assert_eq!(meteor(&c, &r), oracle::meteor(&c, &r), "case {case}: METEOR");
    }
    verdict(
        8,
        "metric oracles",
        true,
        "200 random pairs: BLEU-1..4, ROUGE-L (two β), METEOR exactly match brute force",
    );
}

#[test]
fn criterion_09_drop_slot_uniformity() {
    const N: usize = 10_000;
    const SLOTS: usize = 16;
    // χ²(15) at p = 0.01.
    const THRESHOLD: f64 = 30.577914;
    let mut counts = [0usize; SLOTS];
    for i in 0..N {
        let mut rng = derive_rng(2026, &format!("acceptance/drop/{i}"));
        counts[pick_drop_slot(SLOTS, &mut rng)] += 1;
    }
    let expected = N as f64 / SLOTS as f64;
    let chi2: f64 = counts
        .iter()
        .map(|c| {
            let d = *c as f64 - expected;
            d * d / expected
        })
        .sum();
    verdict(
        9,
        "drop-slot uniformity",
        chi2 < THRESHOLD,
        &format!("χ²(15) = {chi2:.3} over {N} assemblies (threshold {THRESHOLD})"),
    );
}

#[test]
fn criterion_10_run_to_run_determinism() {
    let fx = fixture();
    let run_a = &fx.runs.iter().find(|r| r.seed == 17).expect("seed 17 run").dir;
    let dir_b = tempfile::tempdir().expect("rerun tempdir");
    full_run(dir_b.path(), 17);

    let read = |root: &Path, rel: &str| std::fs::read(root.join(rel)).expect("artifact bytes");
    let mut compared = 0usize;
    assert_eq!(
        read(run_a, "features/manifest.json"),
        read(dir_b.path(), "features/manifest.json"),
        "feature manifests differ"
    );
    let mut names: Vec<String> = std::fs::read_dir(run_a.join("features"))
        .expect("features dir")
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".mrvf"))
        .collect();
    names.sort();
    assert!(!names.is_empty(), "no feature matrices were written");
    for name in &names {
        let rel = format!("features/{name}");
        assert_eq!(read(run_a, &rel), read(dir_b.path(), &rel), "{rel} differs between runs");
        compared += 1;
    }
    assert_eq!(
        read(run_a, "metrics.json"),
        read(dir_b.path(), "metrics.json"),
        "metric reports differ between identical runs"
    );
    verdict(
        10,
        "run-to-run determinism",
        true,
        &format!("{compared} feature matrices + manifest + metrics.json byte-identical across two full runs"),
    );
}

#[test]
fn criterion_11_structured_conditioning_advantage() {
    let fx = fixture();
    let mut good = 0usize;
    let mut details = Vec::new();
    for r in &fx.runs {
        let s3 = r.metrics.ce_accuracy;
        let s1 = r.scenario1_ce;
        let ok = s3 >= s1 + 0.05;
        good += ok as usize;
        details.push(format!(
            "seed {}: full model CE {:.3} vs one-shot CE {:.3} ({})",
            r.seed,
            s3,
            s1,
            if ok { "ok" } else { "margin missed" }
        ));
    }
    verdict(
        11,
        "structured conditioning advantage",
        good >= 2,
        &format!("{good} of {} seeds with ≥ 0.05 CE margin: {}", fx.runs.len(), details.join(" | ")),
    );
}
