//! Stage 2: language-model warm-up, conditional fine-tuning under the
//! weighted three-part objective, validation-driven model selection, and
//! generator checkpointing.

use crate::config::RunConfig;
use crate::corpus::{Corpus, SyntheticPatient};
use crate::error::{PipelineError, Result};
use crate::features::FeatureStore;
use crate::generator::fuse::{classify_tags, init_fuse, tag_feature_extract};
use crate::generator::lm::{apply_freeze_policy, lm_warmup, sentence_nll};
use crate::generator::{
    aggregate_patient, argmax_row, bind_tag_rows, classify_organ, init_organ_head,
    init_tag_dictionary, select_tags, total_loss, PatientFeatures, TagDictionary,
};
use crate::harness::stage1::{load_corpus, load_features};
use crate::harness::{
    config_fingerprint, find_patient, load_splits, save_checkpoint, slide_key, Paths, Splits,
};
use crate::parsing::vocab::Vocab;
use crate::seeds::{derive_rng, derive_seed};
use ndarray::Array2;
use pmprg_autodiff::optim::AdamW;
use pmprg_autodiff::params::accumulate_grads;
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Plain word ids for a sentence: tokenize, then strip the begin/end markers
/// (the loss and the decoder add their own).
pub fn word_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let ids = vocab.tokenize(text);
    ids[1..ids.len() - 1].to_vec()
}

/// Concatenated region features for one patient, in slide order.
pub fn patient_features(store: &FeatureStore, patient: &SyntheticPatient) -> Result<PatientFeatures> {
    let per_slide = (0..patient.slide_count)
        .map(|j| store.get(&slide_key(&patient.patient_id, j)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_patient(&per_slide)
}

/// Feature lookup for every patient of the corpus, keyed by patient id.
pub fn features_by_patient(
    store: &FeatureStore,
    corpus: &Corpus,
) -> Result<BTreeMap<String, PatientFeatures>> {
    corpus
        .patients
        .iter()
        .map(|p| Ok((p.patient_id.clone(), patient_features(store, p)?)))
        .collect()
}

/// One patient's forward pass placed on a (possibly shared) tape.
pub struct PatientPass {
    pub l_tot: Tx,
    pub l_org: f64,
    pub l_tag: f64,
    pub l_sen: f64,
    /// `k × 27` classifier-head logits for the true organ's tags.
    pub tag_logits: Array2<f64>,
}

/// Organ loss, tag loss, and token-weighted sentence loss for one patient,
/// routed through the ground-truth organ (teacher forcing at the routing
/// level). `with_sentences = false` skips the language-model term, leaving a
/// constant zero in its place — used when scoring validation tag accuracy.
#[allow(clippy::too_many_arguments)]
pub fn patient_pass(
    tape: &mut Tape,
    bindings: &mut Bindings,
    store: &ParamStore,
    dict: &TagDictionary,
    corpus: &Corpus,
    patient: &SyntheticPatient,
    pf: &PatientFeatures,
    vocab: &Vocab,
    cfg: &RunConfig,
    with_sentences: bool,
) -> Result<PatientPass> {
    let s2 = &cfg.stage2;
    let organ_logits = classify_organ(tape, bindings, store, pf)?;
    let l_org = tape.cross_entropy_rows(organ_logits, &[patient.organ_id], &[true]);

    let organ = patient.organ_id;
    let schema = corpus.schemas.get(organ).ok_or_else(|| {
        PipelineError::config(format!("patient {} has unknown organ {organ}", patient.patient_id))
    })?;
    let sel = select_tags(&[organ], dict)?.remove(0);
    let tags = bind_tag_rows(tape, bindings, store, &sel, cfg.dims.d_prime);
    let fused = tag_feature_extract(tape, bindings, store, pf, tags, &sel.tag_mask, &cfg.dims)?;

    let mut y_padded = patient.y_tag(schema);
    y_padded.resize(sel.k_padded, None);
    let mut mask_padded = patient.tag_mask(schema);
    mask_padded.resize(sel.k_padded, false);
    let (tag_logits_tx, l_tag) = if s2.no_tag_cls {
        classify_tags(
            tape,
            bindings,
            store,
            fused.f_vt,
            &vec![None; sel.k_padded],
            &vec![false; sel.k_padded],
        )?
    } else {
        classify_tags(tape, bindings, store, fused.f_vt, &y_padded, &mask_padded)?
    };

    let mut sen_sum: Option<Tx> = None;
    let mut sen_tokens = 0usize;
    if with_sentences {
        for (ti, tag) in schema.key_tags.iter().enumerate() {
            let Some(class) = patient.tag_assignments.get(tag) else {
                continue;
            };
            let text = schema.template(ti, *class).ok_or_else(|| {
                PipelineError::config(format!("class {class} outside tag {tag}"))
            })?;
            let ids = word_ids(vocab, text);
            let cond = tape.slice_rows(fused.f_vt, ti, ti + 1);
            let (nll, t) = sentence_nll(tape, bindings, store, &ids, Some(cond), &cfg.dims)?;
            let summed = tape.scale(nll, t as f64);
            sen_tokens += t;
            sen_sum = Some(match sen_sum {
                None => summed,
                Some(acc) => tape.add(acc, summed),
            });
        }
    }
    let l_sen = match sen_sum {
        Some(s) => tape.scale(s, 1.0 / sen_tokens as f64),
        None => tape.constant(Array2::zeros((1, 1))),
    };

    let l_tot = total_loss(tape, l_org, l_tag, l_sen, s2.loss_alpha, s2.loss_beta, s2.loss_gamma);
    let tag_logits_full = tape.value(tag_logits_tx);
    let tag_logits = tag_logits_full.slice(ndarray::s![..sel.k, ..]).to_owned();
    Ok(PatientPass {
        l_tot,
        l_org: tape.value(l_org)[[0, 0]],
        l_tag: tape.value(l_tag)[[0, 0]],
        l_sen: tape.value(l_sen)[[0, 0]],
        tag_logits,
    })
}

/// Validation score under ground-truth organ routing: tag accuracy over
/// assigned tags, or (with the tag classifier ablated) the negative
/// token-weighted sentence loss. Higher is better in both regimes.
pub fn validation_score(
    store: &ParamStore,
    dict: &TagDictionary,
    corpus: &Corpus,
    ids: &[String],
    features: &BTreeMap<String, PatientFeatures>,
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<f64> {
    let by_sentences = cfg.stage2.no_tag_cls;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut sen_loss_sum = 0.0;
    let mut sen_patients = 0usize;
    for pid in ids {
        let patient = find_patient(corpus, pid)?;
        let pf = features
            .get(pid)
            .ok_or_else(|| PipelineError::config(format!("no features for patient {pid}")))?;
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let pass = patient_pass(
            &mut tape,
            &mut bindings,
            store,
            dict,
            corpus,
            patient,
            pf,
            vocab,
            cfg,
            by_sentences,
        )?;
        if by_sentences {
            sen_loss_sum += pass.l_sen;
            sen_patients += 1;
        } else {
            let schema = &corpus.schemas[patient.organ_id];
            for (ti, y) in patient.y_tag(schema).iter().enumerate() {
                let Some(class) = y else { continue };
                let row = pass.tag_logits.row(ti).to_vec();
                if argmax_row(&row) == *class {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if by_sentences {
        if sen_patients == 0 {
            return Err(PipelineError::config("no validation patients to score"));
        }
        Ok(-sen_loss_sum / sen_patients as f64)
    } else {
        if total == 0 {
            return Err(PipelineError::config("no evaluable validation tags"));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// A trained generator plus its selection provenance.
pub struct TrainedGenerator {
    pub store: ParamStore,
    pub dict: TagDictionary,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Initialize, warm the language model on unconditioned sentences, freeze its
/// base, then fine-tune with the composite loss. After every epoch the
/// validation score decides whether this epoch's parameters become the kept
/// model (strictly-better only, so ties keep the earlier epoch); each
/// improvement is also checkpointed immediately, which makes a later
/// divergence abort leave the last good model on disk.
#[allow(clippy::too_many_arguments)]
pub fn train_generator(
    cfg: &RunConfig,
    corpus: &Corpus,
    splits: &Splits,
    features: &BTreeMap<String, PatientFeatures>,
    vocab: &Vocab,
    warmup_log: Option<&Path>,
    train_log: Option<&Path>,
    ckpt_path: Option<&Path>,
    purpose: &str,
) -> Result<TrainedGenerator> {
    let s2 = &cfg.stage2;
    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, &format!("{purpose}/init"));
    init_organ_head(&mut store, cfg.dims.d_r, cfg.dims.cls_hidden, corpus.schemas.len(), &mut rng);
    let dict = init_tag_dictionary(&mut store, &corpus.schemas, cfg.dims.d_prime, &mut rng);
    init_fuse(&mut store, &cfg.dims, &mut rng);
    crate::generator::lm::init_lm(&mut store, vocab.len(), &cfg.dims, &mut rng);

    let mut sentences = Vec::new();
    for pid in &splits.train {
        let patient = find_patient(corpus, pid)?;
        let schema = &corpus.schemas[patient.organ_id];
        for (ti, tag) in schema.key_tags.iter().enumerate() {
            if let Some(class) = patient.tag_assignments.get(tag) {
                let text = schema.template(ti, *class).ok_or_else(|| {
                    PipelineError::config(format!("class {class} outside tag {tag}"))
                })?;
                sentences.push(word_ids(vocab, text));
            }
        }
    }
    eprintln!("stage2: warming language model on {} sentences", sentences.len());
    lm_warmup(
        &mut store,
        &sentences,
        s2,
        &cfg.dims,
        derive_seed(cfg.seed, &format!("{purpose}/warmup")),
        warmup_log,
    )?;
    apply_freeze_policy(&mut store);

    let mut opt = AdamW::new(s2.lr, s2.weight_decay);
    opt.beta1 = s2.beta1;
    opt.beta2 = s2.beta2;
    let fingerprint = config_fingerprint(cfg);

    let mut log = match train_log {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "epoch,train_loss,org_loss,tag_loss,sen_loss,val_score")?;
            Some(f)
        }
        None => None,
    };

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step: u64 = 0;
    for epoch in 0..s2.epochs {
        let mut order = splits.train.clone();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("{purpose}/shuffle/{epoch}")));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut n_items = 0usize;
        for chunk in order.chunks(s2.batch.max(1)) {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let mut total: Option<Tx> = None;
            for pid in chunk {
                let patient = find_patient(corpus, pid)?;
                let pf = features.get(pid).ok_or_else(|| {
                    PipelineError::config(format!("no features for patient {pid}"))
                })?;
                let pass = patient_pass(
                    &mut tape,
                    &mut bindings,
                    &store,
                    &dict,
                    corpus,
                    patient,
                    pf,
                    vocab,
                    cfg,
                    true,
                )?;
                sums.1 += pass.l_org;
                sums.2 += pass.l_tag;
                sums.3 += pass.l_sen;
                n_items += 1;
                total = Some(match total {
                    None => pass.l_tot,
                    Some(acc) => tape.add(acc, pass.l_tot),
                });
            }
            let total = total.expect("chunk is never empty");
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let loss_v = tape.value(loss)[[0, 0]];
            if !loss_v.is_finite() {
                return Err(PipelineError::Diverged { step, loss: loss_v });
            }
            sums.0 += loss_v * chunk.len() as f64;
            let grads = tape.backward(loss);
            let mut batch_grads = BTreeMap::new();
            accumulate_grads(&mut batch_grads, bindings.collect_grads(&tape, &grads));
            opt.step(&mut store, &batch_grads);
            step += 1;
        }
        let train_loss = sums.0 / n_items as f64;
        // Selection: validation score when a validation split exists,
        // otherwise fall back to the (negated) training loss.
        let score = if splits.val.is_empty() {
            -train_loss
        } else {
            validation_score(&store, &dict, corpus, &splits.val, features, vocab, cfg)?
        };
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            best = Some((score, epoch, store.clone()));
            if let Some(p) = ckpt_path {
                save_checkpoint(p, "pmprg", fingerprint, cfg.seed, epoch as u64, &store)?;
            }
        }
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{epoch},{train_loss},{},{},{},{score}",
                sums.1 / n_items as f64,
                sums.2 / n_items as f64,
                sums.3 / n_items as f64
            )?;
        }
        eprintln!(
            "stage2: epoch {epoch} train {train_loss:.4} score {score:.4}{}",
            if improved { " *" } else { "" }
        );
    }
    let (best_score, best_epoch, best_store) =
        best.ok_or_else(|| PipelineError::config("no training epochs ran"))?;
    Ok(TrainedGenerator {
        store: best_store,
        dict,
        best_epoch,
        best_score,
    })
}

/// CLI entry: vocabulary from training reports, then the full stage-2 run
/// against the extracted feature store.
pub fn train_stage2(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    let store = load_features(paths)?;
    std::fs::create_dir_all(paths.stage2_dir())?;

    let train_reports: Vec<&str> = splits
        .train
        .iter()
        .map(|pid| find_patient(&corpus, pid).map(|p| p.report.as_str()))
        .collect::<Result<_>>()?;
    let vocab = Vocab::build(train_reports);
    vocab.save(&paths.vocab())?;
    eprintln!("stage2: vocabulary of {} tokens", vocab.len());

    let features = features_by_patient(&store, &corpus)?;
    let trained = train_generator(
        cfg,
        &corpus,
        &splits,
        &features,
        &vocab,
        Some(&paths.stage2_dir().join("warmup.csv")),
        Some(&paths.stage2_dir().join("train_log.csv")),
        Some(&paths.generator_ckpt()),
        "stage2",
    )?;
    eprintln!(
        "stage2: kept epoch {} (validation score {:.4})",
        trained.best_epoch, trained.best_score
    );
    Ok(())
}
