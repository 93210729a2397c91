//! Corpus evaluation: text-overlap metrics per report, clinical-efficacy
//! accuracy/F1 over tag classes recovered from the generated text, organ
//! accuracy, and frozen-feature linear probes.

pub mod ngram;

use crate::config::EvalConfig;
use crate::corpus::{OrganSchema, UNCERTAIN_CLASS};
use crate::error::{PipelineError, Result};
use crate::parsing::classify_inner;
use crate::parsing::vocab::split_words;
use crate::seeds::derive_rng;
use ndarray::Array2;
use ngram::{bleu_n, meteor, rouge_l_beta};
use pmprg_autodiff::optim::AdamW;
use pmprg_autodiff::params::glorot_init;
use pmprg_autodiff::{Bindings, ParamStore, Tape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Corpus-level scores. Text metrics are means of per-report scores; the
/// clinical-efficacy pair pools every evaluable tag decision.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// Accuracy of tag classes read back from the generated sentences.
    pub ce_accuracy: f64,
    /// Macro-F1 over classes present in the ground truth.
    pub ce_f1_macro: f64,
    /// Fraction of reports whose organ was predicted correctly.
    pub organ_accuracy: f64,
    /// Accuracy of the tag classifier head's argmax classes.
    pub tag_accuracy: f64,
    pub n_items: usize,
}

impl MetricReport {
    pub fn check(&self) -> Result<()> {
        let scores = [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor,
            self.rouge_l,
            self.ce_accuracy,
            self.ce_f1_macro,
            self.organ_accuracy,
            self.tag_accuracy,
        ];
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(PipelineError::shape(format!("score outside [0,1]: {self:?}")));
        }
        if self.n_items == 0 {
            return Err(PipelineError::shape("metric report over zero items"));
        }
        Ok(())
    }
}

/// One generated tag sentence plus the classifier head's class for it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratedTag {
    pub tag: String,
    pub text: String,
    pub head_class: usize,
}

/// One ground-truth tag sentence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthTag {
    pub tag_idx: usize,
    pub text: String,
    pub class_id: usize,
}

/// Everything needed to score one patient's generated report against truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalItem {
    pub patient_id: String,
    pub pred_organ: Option<usize>,
    pub truth_organ: usize,
    pub generated: Vec<GeneratedTag>,
    pub truth: Vec<TruthTag>,
}

/// Per-patient score row for the CSV side output.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRow {
    pub patient_id: String,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub ce_accuracy: f64,
    pub organ_correct: bool,
}

/// Accuracy and macro-F1 over unmasked tag positions. Macro-F1 averages
/// per-class F1 over the classes that appear in the unmasked ground truth.
pub fn ce_metrics(preds: &[usize], truth: &[usize], masks: &[bool]) -> Result<(f64, f64)> {
    if preds.len() != truth.len() || preds.len() != masks.len() {
        return Err(PipelineError::shape(format!(
            "{} predictions, {} truths, {} masks",
            preds.len(),
            truth.len(),
            masks.len()
        )));
    }
    let idx: Vec<usize> = masks
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(PipelineError::config("no evaluable tags"));
    }
    let correct = idx.iter().filter(|i| preds[**i] == truth[**i]).count();
    let accuracy = correct as f64 / idx.len() as f64;

    let classes: std::collections::BTreeSet<usize> = idx.iter().map(|i| truth[*i]).collect();
    let mut f1_sum = 0.0;
    for c in &classes {
        let tp = idx.iter().filter(|i| preds[**i] == *c && truth[**i] == *c).count() as f64;
        let fp = idx.iter().filter(|i| preds[**i] == *c && truth[**i] != *c).count() as f64;
        let fn_ = idx.iter().filter(|i| preds[**i] != *c && truth[**i] == *c).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = tp / (tp + fn_);
        if p + r > 0.0 {
            f1_sum += 2.0 * p * r / (p + r);
        }
    }
    Ok((accuracy, f1_sum / classes.len() as f64))
}

/// Patient-level class from per-slide classes: the maximum, because the
/// class order encodes severity.
pub fn patient_from_slides(slide_predictions: &[usize]) -> Result<usize> {
    slide_predictions
        .iter()
        .max()
        .copied()
        .ok_or_else(|| PipelineError::config("no slide predictions to aggregate"))
}

/// Score generated reports; schemas supply tag names and the sentence→class
/// rules for reading classes back out of generated text.
pub fn evaluate_items(
    items: &[EvalItem],
    schemas: &[OrganSchema],
    rouge_beta: f64,
) -> Result<(MetricReport, Vec<PatientRow>)> {
    if items.is_empty() {
        return Err(PipelineError::config("no reports to evaluate"));
    }
    let by_id: BTreeMap<usize, &OrganSchema> =
        schemas.iter().map(|s| (s.organ_id, s)).collect();

    let mut rows = Vec::with_capacity(items.len());
    let mut sums = [0.0f64; 6]; // bleu1..4, meteor, rouge
    let mut organ_hits = 0usize;
    let mut ce_preds = Vec::new();
    let mut ce_truth = Vec::new();
    let mut head_hits = 0usize;
    let mut head_total = 0usize;

    for item in items {
        let schema = by_id.get(&item.truth_organ).ok_or_else(|| {
            PipelineError::config(format!(
                "report {} references unknown organ {}",
                item.patient_id, item.truth_organ
            ))
        })?;
        let generated: BTreeMap<&str, &GeneratedTag> =
            item.generated.iter().map(|g| (g.tag.as_str(), g)).collect();

        let mut cand_tokens: Vec<String> = Vec::new();
        let mut ref_tokens: Vec<String> = Vec::new();
        let mut item_correct = 0usize;
        for t in &item.truth {
            let name = schema.key_tags.get(t.tag_idx).ok_or_else(|| {
                PipelineError::shape(format!(
                    "tag index {} outside schema for organ {}",
                    t.tag_idx, item.truth_organ
                ))
            })?;
            ref_tokens.extend(split_words(&t.text));
            let pred_class = match generated.get(name.as_str()) {
                Some(g) => {
                    cand_tokens.extend(split_words(&g.text));
                    head_hits += usize::from(g.head_class == t.class_id);
                    classify_inner(&g.text, t.tag_idx, schema)
                }
                None => UNCERTAIN_CLASS,
            };
            head_total += 1;
            item_correct += usize::from(pred_class == t.class_id);
            ce_preds.push(pred_class);
            ce_truth.push(t.class_id);
        }

        let scores = [
            bleu_n(&cand_tokens, &ref_tokens, 1),
            bleu_n(&cand_tokens, &ref_tokens, 2),
            bleu_n(&cand_tokens, &ref_tokens, 3),
            bleu_n(&cand_tokens, &ref_tokens, 4),
            meteor(&cand_tokens, &ref_tokens),
            rouge_l_beta(&cand_tokens, &ref_tokens, rouge_beta),
        ];
        for (s, acc) in scores.iter().zip(sums.iter_mut()) {
            *acc += s;
        }
        let organ_correct = item.pred_organ == Some(item.truth_organ);
        organ_hits += usize::from(organ_correct);
        rows.push(PatientRow {
            patient_id: item.patient_id.clone(),
            bleu_1: scores[0],
            bleu_2: scores[1],
            bleu_3: scores[2],
            bleu_4: scores[3],
            meteor: scores[4],
            rouge_l: scores[5],
            ce_accuracy: if item.truth.is_empty() {
                0.0
            } else {
                item_correct as f64 / item.truth.len() as f64
            },
            organ_correct,
        });
    }

    let masks = vec![true; ce_preds.len()];
    let (ce_accuracy, ce_f1_macro) = ce_metrics(&ce_preds, &ce_truth, &masks)?;
    let n = items.len() as f64;
    let report = MetricReport {
        bleu_1: sums[0] / n,
        bleu_2: sums[1] / n,
        bleu_3: sums[2] / n,
        bleu_4: sums[3] / n,
        meteor: sums[4] / n,
        rouge_l: sums[5] / n,
        ce_accuracy,
        ce_f1_macro,
        organ_accuracy: organ_hits as f64 / n,
        tag_accuracy: head_hits as f64 / head_total.max(1) as f64,
        n_items: items.len(),
    };
    report.check()?;
    Ok((report, rows))
}

/// Train a two-layer classifier on frozen features and report test accuracy.
/// The feature matrices are read-only; nothing is backpropagated into them.
pub fn linear_probe(
    train_features: &Array2<f64>,
    train_labels: &[usize],
    test_features: &Array2<f64>,
    test_labels: &[usize],
    n_classes: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    if train_features.nrows() != train_labels.len()
        || test_features.nrows() != test_labels.len()
    {
        return Err(PipelineError::shape("probe features and labels disagree in length"));
    }
    if train_features.nrows() == 0 || test_features.nrows() == 0 {
        return Err(PipelineError::shape("probe needs non-empty train and test splits"));
    }
    if train_features.ncols() != test_features.ncols() {
        return Err(PipelineError::shape("probe train and test feature widths differ"));
    }
    if n_classes < 2 {
        return Err(PipelineError::config("probe needs at least two classes"));
    }
    if let Some(bad) = train_labels.iter().chain(test_labels).find(|l| **l >= n_classes) {
        return Err(PipelineError::config(format!(
            "probe label {bad} outside {n_classes} classes"
        )));
    }
    let d = train_features.ncols();
    let mut rng = derive_rng(seed, "probe/init");
    let mut store = ParamStore::new();
    store.insert("probe.w1", glorot_init(&mut rng, d, cfg.probe_hidden));
    store.insert("probe.b1", Array2::zeros((1, cfg.probe_hidden)));
    store.insert("probe.w2", glorot_init(&mut rng, cfg.probe_hidden, n_classes));
    store.insert("probe.b2", Array2::zeros((1, n_classes)));

    let forward = |tape: &mut Tape, bindings: &mut Bindings, store: &ParamStore, x: &Array2<f64>| {
        let xt = tape.constant(x.clone());
        let w1 = bindings.bind(store, tape, "probe.w1");
        let b1 = bindings.bind(store, tape, "probe.b1");
        let h = tape.linear(xt, w1, b1);
        let h = tape.relu(h);
        let w2 = bindings.bind(store, tape, "probe.w2");
        let b2 = bindings.bind(store, tape, "probe.b2");
        tape.linear(h, w2, b2)
    };

    let mut opt = AdamW::new(cfg.probe_lr, 0.0);
    let include = vec![true; train_labels.len()];
    for _ in 0..cfg.probe_epochs {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let logits = forward(&mut tape, &mut bindings, &store, train_features);
        let loss = tape.cross_entropy_rows(logits, train_labels, &include);
        let grads = tape.backward(loss);
        let collected = bindings.collect_grads(&tape, &grads);
        opt.step(&mut store, &collected);
    }

    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let logits = forward(&mut tape, &mut bindings, &store, test_features);
    let values = tape.value(logits);
    let correct = values
        .rows()
        .into_iter()
        .zip(test_labels)
        .filter(|(row, label)| {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            argmax == **label
        })
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Serialize the corpus report as pretty JSON.
pub fn write_metric_json(path: &Path, report: &MetricReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Per-patient scores as CSV.
pub fn write_patient_csv(path: &Path, rows: &[PatientRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "patient_id,bleu_1,bleu_2,bleu_3,bleu_4,meteor,rouge_l,ce_accuracy,organ_correct"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.patient_id,
            r.bleu_1,
            r.bleu_2,
            r.bleu_3,
            r.bleu_4,
            r.meteor,
            r.rouge_l,
            r.ce_accuracy,
            r.organ_correct
        )?;
    }
    Ok(())
}
