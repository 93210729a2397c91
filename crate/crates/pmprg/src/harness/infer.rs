//! Inference-side commands: report generation, evaluation against ground
//! truth, attention export, and the three-scenario ablation.

use crate::config::RunConfig;
use crate::corpus::{organ_keywords, Corpus, OrganSchema, SyntheticPatient, UNCERTAIN_CLASS};
use crate::error::{PipelineError, Result};
use crate::eval::{
    evaluate_items, write_metric_json, write_patient_csv, EvalItem, GeneratedTag, MetricReport,
    TruthTag,
};
use crate::features::{write_features, FeatureMatrix};
use crate::generator::lm::{apply_freeze_policy, decode, init_lm, lm_warmup, sentence_nll};
use crate::generator::{
    argmax_row, generate, render_report, GenerationResult, PatientFeatures, TagDictionary,
    UNDETERMINED_REPORT,
};
use crate::harness::stage1::{load_corpus, load_features};
use crate::harness::stage2::{features_by_patient, train_generator, word_ids};
use crate::harness::{
    find_patient, load_checkpoint_for, load_splits, slide_key, slide_vit_config, Paths, Splits,
};
use crate::mrvit::mrvit_s_forward;
use crate::parsing::vocab::Vocab;
use crate::parsing::{assign_organ, extract_tag_sentences};
use crate::regions::sample_region_windows;
use crate::seeds::{derive_rng, derive_seed};
use ndarray::{Array2, Axis};
use pmprg_autodiff::optim::AdamW;
use pmprg_autodiff::params::accumulate_grads;
use pmprg_autodiff::{Bindings, ParamStore, Tape, Tx};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Machine-readable companion to each generated report text file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSidecar {
    pub patient_id: String,
    pub pred_organ: Option<usize>,
    pub tags: Vec<GeneratedTag>,
}

/// The tag dictionary shape is fully determined by schemas + config; only
/// its embeddings live in the checkpoint.
pub fn dictionary_for(corpus: &Corpus, cfg: &RunConfig) -> TagDictionary {
    TagDictionary {
        ks: corpus.schemas.iter().map(|s| s.k()).collect(),
        d_prime: cfg.dims.d_prime,
    }
}

fn load_vocab(paths: &Paths) -> Result<Vocab> {
    Vocab::load(&paths.vocab()).map_err(|e| {
        PipelineError::config(format!(
            "cannot read vocabulary at {} (run `train-stage2` first): {e}",
            paths.vocab().display()
        ))
    })
}

/// Ground-truth tag rows for one patient, in schema order (dropped tags
/// absent).
pub fn truth_tags(patient: &SyntheticPatient, schema: &OrganSchema) -> Result<Vec<TruthTag>> {
    let mut out = Vec::new();
    for (ti, tag) in schema.key_tags.iter().enumerate() {
        if let Some(class) = patient.tag_assignments.get(tag) {
            let text = schema
                .template(ti, *class)
                .ok_or_else(|| PipelineError::config(format!("class {class} outside tag {tag}")))?;
            out.push(TruthTag {
                tag_idx: ti,
                text: text.to_string(),
                class_id: *class,
            });
        }
    }
    Ok(out)
}

fn generated_tags(result: &GenerationResult, schema: &OrganSchema) -> Vec<GeneratedTag> {
    schema
        .key_tags
        .iter()
        .enumerate()
        .map(|(ti, tag)| GeneratedTag {
            tag: tag.clone(),
            text: result.texts[ti].clone(),
            head_class: argmax_row(&result.tag_logits.row(ti).to_vec()),
        })
        .collect()
}

/// Generate a report for every test patient and write text + sidecar files.
pub fn generate_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    let fstore = load_features(paths)?;
    let vocab = load_vocab(paths)?;
    let ck = load_checkpoint_for(&paths.generator_ckpt(), "pmprg", cfg)?;
    let dict = dictionary_for(&corpus, cfg);
    std::fs::create_dir_all(paths.reports_dir())?;
    for pid in &splits.test {
        let patient = find_patient(&corpus, pid)?;
        let pf = crate::harness::stage2::patient_features(&fstore, patient)?;
        let result = generate(
            &ck.store,
            &dict,
            &corpus.schemas,
            &pf,
            &vocab,
            &cfg.dims,
            cfg.eval.beam_width,
            cfg.dims.lm_max_len,
        )?;
        let (text, sidecar) = match result.organ {
            None => (
                UNDETERMINED_REPORT.to_string(),
                ReportSidecar { patient_id: pid.clone(), pred_organ: None, tags: vec![] },
            ),
            Some(o) => {
                let schema = &corpus.schemas[o];
                (
                    render_report(schema, &result),
                    ReportSidecar {
                        patient_id: pid.clone(),
                        pred_organ: Some(o),
                        tags: generated_tags(&result, schema),
                    },
                )
            }
        };
        std::fs::write(paths.reports_dir().join(format!("{pid}.txt")), text)?;
        std::fs::write(
            paths.reports_dir().join(format!("{pid}.json")),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
    }
    eprintln!("generate: {} reports under {}", splits.test.len(), paths.reports_dir().display());
    Ok(())
}

/// Score the generated test reports against ground truth; writes the metric
/// JSON and the per-patient CSV.
pub fn evaluate_cmd(cfg: &RunConfig, paths: &Paths) -> Result<MetricReport> {
    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    let n_generated = match std::fs::read_dir(paths.reports_dir()) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count(),
        Err(_) => 0,
    };
    if n_generated != splits.test.len() {
        return Err(PipelineError::runtime(format!(
            "report count mismatch: {n_generated} generated reports but the test split has {} patients",
            splits.test.len()
        )));
    }
    let mut items = Vec::with_capacity(splits.test.len());
    for pid in &splits.test {
        let patient = find_patient(&corpus, pid)?;
        let text = std::fs::read_to_string(paths.reports_dir().join(format!("{pid}.json")))?;
        let sidecar: ReportSidecar = serde_json::from_str(&text)?;
        let schema = &corpus.schemas[patient.organ_id];
        items.push(EvalItem {
            patient_id: pid.clone(),
            pred_organ: sidecar.pred_organ,
            truth_organ: patient.organ_id,
            generated: sidecar.tags,
            truth: truth_tags(patient, schema)?,
        });
    }
    let (report, rows) = evaluate_items(&items, &corpus.schemas, cfg.eval.rouge_beta)?;
    write_metric_json(&paths.metrics_json(), &report)?;
    write_patient_csv(&paths.per_patient_csv(), &rows)?;
    eprintln!(
        "evaluate: {} patients | organ acc {:.3} | tag acc {:.3} | CE acc {:.3} | METEOR {:.3} | ROUGE-L {:.3}",
        report.n_items,
        report.organ_accuracy,
        report.tag_accuracy,
        report.ce_accuracy,
        report.meteor,
        report.rouge_l
    );
    Ok(report)
}

#[derive(Serialize)]
struct AttentionColumn {
    slide: String,
    region: usize,
}

#[derive(Serialize)]
struct AttentionIndex {
    patient_id: String,
    organ: String,
    tags: Vec<String>,
    columns: Vec<AttentionColumn>,
}

/// Write each determined test patient's tag-to-region attention map plus an
/// index tying its columns back to (slide, region) provenance.
pub fn export_attention(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    let fstore = load_features(paths)?;
    let vocab = load_vocab(paths)?;
    let ck = load_checkpoint_for(&paths.generator_ckpt(), "pmprg", cfg)?;
    let dict = dictionary_for(&corpus, cfg);
    std::fs::create_dir_all(paths.attention_dir())?;
    let mut written = 0usize;
    for pid in &splits.test {
        let patient = find_patient(&corpus, pid)?;
        let pf = crate::harness::stage2::patient_features(&fstore, patient)?;
        let result = generate(
            &ck.store,
            &dict,
            &corpus.schemas,
            &pf,
            &vocab,
            &cfg.dims,
            cfg.eval.beam_width,
            cfg.dims.lm_max_len,
        )?;
        let Some(o) = result.organ else { continue };
        let schema = &corpus.schemas[o];
        let m = FeatureMatrix::from_array(&result.attention)?;
        write_features(&paths.attention_dir().join(format!("{pid}.mrvf")), &m)?;
        let mut columns = Vec::new();
        for j in 0..patient.slide_count {
            let key = slide_key(pid, j);
            let rows = fstore.get(&key)?.rows as usize;
            for r in 0..rows {
                columns.push(AttentionColumn { slide: key.clone(), region: r });
            }
        }
        let index = AttentionIndex {
            patient_id: pid.clone(),
            organ: schema.organ_name.clone(),
            tags: schema.key_tags.clone(),
            columns,
        };
        std::fs::write(
            paths.attention_dir().join(format!("{pid}.json")),
            serde_json::to_string_pretty(&index)? + "\n",
        )?;
        written += 1;
    }
    eprintln!("export-attention: {written} attention maps");
    Ok(())
}

/// Known ablation variants, in report order.
pub const ABLATION_VARIANTS: [&str; 3] = ["s1", "s2", "s3"];

/// Generate + evaluate entirely in memory for a trained generator and a
/// feature map (used by the ablation scenarios that never touch `reports/`).
fn evaluate_in_memory(
    cfg: &RunConfig,
    corpus: &Corpus,
    test_ids: &[String],
    features: &BTreeMap<String, PatientFeatures>,
    store: &ParamStore,
    dict: &TagDictionary,
    vocab: &Vocab,
) -> Result<MetricReport> {
    let mut items = Vec::with_capacity(test_ids.len());
    for pid in test_ids {
        let patient = find_patient(corpus, pid)?;
        let pf = features
            .get(pid)
            .ok_or_else(|| PipelineError::config(format!("no features for patient {pid}")))?;
        let result = generate(
            store,
            dict,
            &corpus.schemas,
            pf,
            vocab,
            &cfg.dims,
            cfg.eval.beam_width,
            cfg.dims.lm_max_len,
        )?;
        let generated = match result.organ {
            None => vec![],
            Some(o) => generated_tags(&result, &corpus.schemas[o]),
        };
        let schema = &corpus.schemas[patient.organ_id];
        items.push(EvalItem {
            patient_id: pid.clone(),
            pred_organ: result.organ,
            truth_organ: patient.organ_id,
            generated,
            truth: truth_tags(patient, schema)?,
        });
    }
    Ok(evaluate_items(&items, &corpus.schemas, cfg.eval.rouge_beta)?.0)
}

/// Scenario 1: one-shot report generation. The condition is the mean-pooled
/// region feature; a fresh language model is warmed on whole reports, its
/// base frozen, and only the condition projections trained; decoding emits
/// one sequence per patient which is then re-parsed into tag sentences.
fn scenario_one(
    cfg: &RunConfig,
    corpus: &Corpus,
    splits: &Splits,
    features: &BTreeMap<String, PatientFeatures>,
    vocab: &Vocab,
) -> Result<MetricReport> {
    let mut dims1 = cfg.dims.clone();
    dims1.d = cfg.dims.d_r;
    let s2 = &cfg.stage2;

    let conds: BTreeMap<String, Array2<f64>> = features
        .iter()
        .map(|(pid, pf)| {
            let mean = pf.f_r_pat.mean_axis(Axis(0)).expect("patient has rows");
            (pid.clone(), mean.insert_axis(Axis(0)))
        })
        .collect();

    let mut store = ParamStore::new();
    let mut rng = derive_rng(cfg.seed, "ablate/s1/init");
    init_lm(&mut store, vocab.len(), &dims1, &mut rng);

    let report_ids: BTreeMap<String, Vec<usize>> = corpus
        .patients
        .iter()
        .map(|p| (p.patient_id.clone(), word_ids(vocab, &p.report)))
        .collect();
    let train_seqs: Vec<Vec<usize>> = splits
        .train
        .iter()
        .map(|pid| report_ids[pid].clone())
        .collect();
    eprintln!("ablate s1: warming one-shot language model on {} reports", train_seqs.len());
    lm_warmup(
        &mut store,
        &train_seqs,
        s2,
        &dims1,
        derive_seed(cfg.seed, "ablate/s1/warmup"),
        None,
    )?;
    apply_freeze_policy(&mut store);

    let mut opt = AdamW::new(s2.lr, s2.weight_decay);
    opt.beta1 = s2.beta1;
    opt.beta2 = s2.beta2;
    let mut step: u64 = 0;
    for epoch in 0..s2.epochs {
        let mut order = splits.train.clone();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("ablate/s1/shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(s2.batch.max(1)) {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let mut total: Option<Tx> = None;
            let mut n_tokens = 0usize;
            for pid in chunk {
                let cond = tape.constant(conds[pid].clone());
                let (nll, t) =
                    sentence_nll(&mut tape, &mut bindings, &store, &report_ids[pid], Some(cond), &dims1)?;
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
            epoch_loss += loss_v * n_tokens as f64;
            epoch_tokens += n_tokens;
            let grads = tape.backward(loss);
            let mut batch_grads = BTreeMap::new();
            accumulate_grads(&mut batch_grads, bindings.collect_grads(&tape, &grads));
            opt.step(&mut store, &batch_grads);
            step += 1;
        }
        eprintln!("ablate s1: epoch {epoch} loss {:.4}", epoch_loss / epoch_tokens as f64);
    }

    let keywords = organ_keywords(&corpus.schemas);
    let mut items = Vec::with_capacity(splits.test.len());
    for pid in &splits.test {
        let patient = find_patient(corpus, pid)?;
        let ids = decode(&store, vocab, &conds[pid], &dims1, cfg.eval.beam_width, dims1.lm_max_len)?;
        let text = vocab.detokenize(&ids);
        let pred_organ = assign_organ(&text, &keywords)?.id();
        let schema = &corpus.schemas[patient.organ_id];
        let generated: Vec<GeneratedTag> = extract_tag_sentences(&text, schema)
            .into_iter()
            .zip(&schema.key_tags)
            .filter_map(|(sentence, tag)| {
                sentence.map(|text| GeneratedTag {
                    tag: tag.clone(),
                    text,
                    head_class: UNCERTAIN_CLASS,
                })
            })
            .collect();
        items.push(EvalItem {
            patient_id: pid.clone(),
            pred_organ,
            truth_organ: patient.organ_id,
            generated,
            truth: truth_tags(patient, schema)?,
        });
    }
    Ok(evaluate_items(&items, &corpus.schemas, cfg.eval.rouge_beta)?.0)
}

/// Scenario 2: slide-level features (one slide-encoder output per slide)
/// through the unchanged tag pipeline.
fn scenario_two(
    cfg: &RunConfig,
    paths: &Paths,
    corpus: &Corpus,
    splits: &Splits,
    vocab: &Vocab,
) -> Result<MetricReport> {
    let fstore = load_features(paths)?;
    let enc_s = load_checkpoint_for(&paths.enc_s(), "mrvit_s", cfg)?;
    let slide_cfg = slide_vit_config(&cfg.dims);
    let grid = (corpus.geometry.level2_rows, corpus.geometry.level2_cols);
    let mut features = BTreeMap::new();
    for patient in &corpus.patients {
        let mut rows = Array2::<f64>::zeros((patient.slide_count, cfg.dims.d_r));
        for j in 0..patient.slide_count {
            let key = slide_key(&patient.patient_id, j);
            let f_r = fstore.get(&key)?.to_array();
            let mut rng = derive_rng(cfg.seed, &format!("ablate/s2/windows/{key}"));
            let windows = sample_region_windows(&f_r, grid, cfg.dims.q, cfg.dims.l, &mut rng)?;
            let f_s = mrvit_s_forward(&enc_s.store, "enc.", &slide_cfg, &windows)?;
            for (c, v) in f_s.into_iter().enumerate() {
                rows[[j, c]] = v;
            }
        }
        features.insert(
            patient.patient_id.clone(),
            PatientFeatures { f_r_pat: rows, mask: vec![true; patient.slide_count] },
        );
    }
    eprintln!("ablate s2: training generator on slide-level features");
    let trained = train_generator(cfg, corpus, splits, &features, vocab, None, None, None, "ablate/s2")?;
    evaluate_in_memory(cfg, corpus, &splits.test, &features, &trained.store, &trained.dict, vocab)
}

/// Scenario 3: the full pipeline — generate (with the trained checkpoint)
/// and evaluate through the standard artifact path.
fn scenario_three(cfg: &RunConfig, paths: &Paths) -> Result<MetricReport> {
    generate_cmd(cfg, paths)?;
    evaluate_cmd(cfg, paths)
}

/// Run the requested scenarios (all three when `variants` is empty) and
/// write the comparison table as JSON + CSV.
pub fn run_ablation(cfg: &RunConfig, paths: &Paths, variants: &[String]) -> Result<Vec<(String, MetricReport)>> {
    for v in variants {
        if !ABLATION_VARIANTS.contains(&v.as_str()) {
            return Err(PipelineError::config(format!(
                "unknown ablation variant: {v} (known: s1, s2, s3)"
            )));
        }
    }
    let chosen: Vec<&str> = if variants.is_empty() {
        ABLATION_VARIANTS.to_vec()
    } else {
        let mut seen = Vec::new();
        for v in variants {
            if !seen.contains(&v.as_str()) {
                seen.push(v.as_str());
            }
        }
        seen
    };

    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    let train_reports: Vec<&str> = splits
        .train
        .iter()
        .map(|pid| find_patient(&corpus, pid).map(|p| p.report.as_str()))
        .collect::<Result<_>>()?;
    let vocab = Vocab::build(train_reports);

    let mut out = Vec::new();
    for v in chosen {
        eprintln!("ablate: scenario {v}");
        let report = match v {
            "s1" => {
                let fstore = load_features(paths)?;
                let features = features_by_patient(&fstore, &corpus)?;
                scenario_one(cfg, &corpus, &splits, &features, &vocab)?
            }
            "s2" => scenario_two(cfg, paths, &corpus, &splits, &vocab)?,
            "s3" => scenario_three(cfg, paths)?,
            _ => unreachable!("variants validated above"),
        };
        out.push((v.to_string(), report));
    }

    #[derive(Serialize)]
    struct Row<'a> {
        variant: &'a str,
        metrics: &'a MetricReport,
    }
    let rows: Vec<Row> = out
        .iter()
        .map(|(v, m)| Row { variant: v, metrics: m })
        .collect();
    std::fs::write(
        paths.ablation_json(),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    let mut csv = std::fs::File::create(paths.ablation_csv())?;
    writeln!(
        csv,
        "variant,ce_accuracy,ce_f1_macro,bleu_1,bleu_2,bleu_3,bleu_4,meteor,rouge_l,organ_accuracy,tag_accuracy,n_items"
    )?;
    for (v, m) in &out {
        writeln!(
            csv,
            "{v},{},{},{},{},{},{},{},{},{},{},{}",
            m.ce_accuracy,
            m.ce_f1_macro,
            m.bleu_1,
            m.bleu_2,
            m.bleu_3,
            m.bleu_4,
            m.meteor,
            m.rouge_l,
            m.organ_accuracy,
            m.tag_accuracy,
            m.n_items
        )?;
    }
    for (v, m) in &out {
        eprintln!(
            "ablate {v}: CE acc {:.3} | METEOR {:.3} | ROUGE-L {:.3}",
            m.ce_accuracy, m.meteor, m.rouge_l
        );
    }
    Ok(out)
}
