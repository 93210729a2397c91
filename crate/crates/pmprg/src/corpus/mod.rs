//! Synthetic multi-organ corpus.
//!
//! Slide textures procedurally encode each patient's tag classes, and reports
//! are built from per-(tag, class) sentence templates, so the parsing,
//! encoding, and generation stages all have verifiable ground truth.

pub mod io;
pub mod render;

use crate::error::{PipelineError, Result};
use crate::seeds::derive_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The global inner-class vocabulary: 26 named classes + "uncertain".
pub const N_CLASSES: usize = 27;
/// Index of the catch-all class.
pub const UNCERTAIN_CLASS: usize = 26;

/// Names of the 27 inner classes, index = position.
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    // colon: histologic type
    "tubular adenocarcinoma",
    "mucinous adenocarcinoma",
    "signet ring cell carcinoma",
    "papillary adenocarcinoma",
    // colon: differentiation
    "well differentiated",
    "moderately differentiated",
    "poorly differentiated",
    // colon: invasion depth
    "confined to mucosa",
    "invades submucosa",
    "invades muscularis propria",
    "invades serosa",
    // colon: lymphatic invasion
    "no lymphatic spread",
    "focal lymphatic spread",
    "extensive lymphatic spread",
    // kidney: tumor subtype
    "clear cell carcinoma",
    "papillary carcinoma",
    "chromophobe carcinoma",
    "oncocytoma",
    // kidney: nuclear grade
    "grade one nuclei",
    "grade two nuclei",
    "grade three nuclei",
    "grade four nuclei",
    // kidney: capsule status
    "capsule intact",
    "focal capsule invasion",
    "capsule invaded",
    "beyond capsule spread",
    "uncertain",
];

const SENTENCE_SUFFIXES: [&str; 4] = [
    "in the sampled tissue",
    "throughout the specimen",
    "in the resected material",
    "on microscopic review",
];

/// One organ's labeling scheme: its key tags, the inner classes each tag can
/// take (as global class indices), and the sentence template for every
/// (tag, class) pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OrganSchema {
    pub organ_id: usize,
    pub organ_name: String,
    pub key_tags: Vec<String>,
    pub inner_classes: Vec<Vec<usize>>,
    pub sentence_templates: Vec<Vec<String>>,
}

impl OrganSchema {
    pub fn k(&self) -> usize {
        self.key_tags.len()
    }

    /// The template sentence for (tag index, global class index).
    pub fn template(&self, tag_idx: usize, class: usize) -> Option<&str> {
        let pos = self.inner_classes[tag_idx].iter().position(|c| *c == class)?;
        Some(&self.sentence_templates[tag_idx][pos])
    }
}

fn make_schema(organ_id: usize, organ_name: &str, tags: &[(&str, &[usize])]) -> OrganSchema {
    let key_tags: Vec<String> = tags.iter().map(|(t, _)| t.to_string()).collect();
    let inner_classes: Vec<Vec<usize>> = tags.iter().map(|(_, cs)| cs.to_vec()).collect();
    let sentence_templates = tags
        .iter()
        .enumerate()
        .map(|(ti, (tag, cs))| {
            cs.iter()
                .map(|c| {
                    let suffix = SENTENCE_SUFFIXES[(c + ti) % SENTENCE_SUFFIXES.len()];
                    format!("{tag} shows {} {suffix}", CLASS_NAMES[*c])
                })
                .collect()
        })
        .collect();
    OrganSchema {
        organ_id,
        organ_name: organ_name.to_string(),
        key_tags,
        inner_classes,
        sentence_templates,
    }
}

/// The two built-in organ schemas (colon: 4 tags, kidney: 3 tags) covering
/// all 26 named classes between them.
pub fn builtin_schemas() -> Vec<OrganSchema> {
    vec![
        make_schema(
            0,
            "colon",
            &[
                ("histologic type", &[0, 1, 2, 3]),
                ("differentiation", &[4, 5, 6]),
                ("invasion depth", &[7, 8, 9, 10]),
                ("lymphatic invasion", &[11, 12, 13]),
            ],
        ),
        make_schema(
            1,
            "kidney",
            &[
                ("tumor subtype", &[14, 15, 16, 17]),
                ("nuclear grade", &[18, 19, 20, 21]),
                ("capsule status", &[22, 23, 24, 25]),
            ],
        ),
    ]
}

/// Keyword lists for organ assignment, indexed by organ id.
pub fn organ_keywords(schemas: &[OrganSchema]) -> Vec<(usize, Vec<String>)> {
    schemas
        .iter()
        .map(|s| (s.organ_id, vec![s.organ_name.clone()]))
        .collect()
}

/// Pixel-level geometry of every slide in a corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SlideGeometry {
    /// Square patch edge in pixels.
    pub patch: usize,
    /// Coarse (level-2) patch grid.
    pub level2_rows: usize,
    pub level2_cols: usize,
    /// Fine-to-coarse magnification ratio; the level-1 grid is `g`× the
    /// level-2 grid per axis, and a region is `g×g` tokens.
    pub g: usize,
}

impl SlideGeometry {
    pub fn level1_rows(&self) -> usize {
        self.level2_rows * self.g
    }

    pub fn level1_cols(&self) -> usize {
        self.level2_cols * self.g
    }

    pub fn n_regions(&self) -> usize {
        self.level2_rows * self.level2_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.level2_rows == 0 || self.level2_cols == 0 || self.g == 0 {
            return Err(PipelineError::config("slide geometry must be positive"));
        }
        Ok(())
    }
}

/// One synthetic patient: the generating labels plus the templated report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub organ_id: usize,
    pub slide_count: usize,
    /// tag name → global inner-class index, for every non-dropped tag.
    pub tag_assignments: BTreeMap<String, usize>,
    pub dropped_tags: BTreeSet<String>,
    pub report: String,
}

impl SyntheticPatient {
    /// Ground-truth class per tag in schema order; `None` for dropped tags.
    pub fn y_tag(&self, schema: &OrganSchema) -> Vec<Option<usize>> {
        schema
            .key_tags
            .iter()
            .map(|t| self.tag_assignments.get(t).copied())
            .collect()
    }

    pub fn tag_mask(&self, schema: &OrganSchema) -> Vec<bool> {
        schema
            .key_tags
            .iter()
            .map(|t| self.tag_assignments.contains_key(t))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub schemas: Vec<OrganSchema>,
    pub geometry: SlideGeometry,
    pub patients: Vec<SyntheticPatient>,
}

fn build_report(schema: &OrganSchema, patient: &SyntheticPatient) -> String {
    let mut lines = vec![format!("specimen organ {}", schema.organ_name)];
    for (ti, tag) in schema.key_tags.iter().enumerate() {
        if let Some(class) = patient.tag_assignments.get(tag) {
            lines.push(
                schema
                    .template(ti, *class)
                    .expect("assignment outside schema classes")
                    .to_string(),
            );
        }
    }
    lines.join("\n")
}

/// Probability that any one tag is dropped from a report.
const DROP_PROB: f64 = 0.15;

/// Deterministically generate a corpus of labeled patients with templated
/// reports. Slides are rendered separately (and lazily) by
/// [`render::render_slide`].
pub fn generate_corpus(
    schemas: &[OrganSchema],
    n_patients: usize,
    seed: u64,
    geometry: SlideGeometry,
    min_slides: usize,
    max_slides: usize,
) -> Result<Corpus> {
    if schemas.is_empty() {
        return Err(PipelineError::config("schema set is empty"));
    }
    if n_patients == 0 {
        return Err(PipelineError::config("n_patients must be ≥ 1"));
    }
    geometry.validate()?;
    if min_slides == 0 || min_slides > max_slides {
        return Err(PipelineError::config("invalid slide count range"));
    }
    let mut rng = derive_rng(seed, "corpus");
    let mut patients = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let organ_id = rng.random_range(0..schemas.len());
        let schema = &schemas[organ_id];
        let slide_count = rng.random_range(min_slides..=max_slides);
        let mut tag_assignments = BTreeMap::new();
        let mut dropped_tags = BTreeSet::new();
        for (ti, tag) in schema.key_tags.iter().enumerate() {
            let class = schema.inner_classes[ti][rng.random_range(0..schema.inner_classes[ti].len())];
            if rng.random_range(0.0..1.0) < DROP_PROB {
                dropped_tags.insert(tag.clone());
            } else {
                tag_assignments.insert(tag.clone(), class);
            }
        }
        if tag_assignments.is_empty() {
            // Every report keeps at least one tag sentence.
            let tag = schema.key_tags[0].clone();
            dropped_tags.remove(&tag);
            let class = schema.inner_classes[0][rng.random_range(0..schema.inner_classes[0].len())];
            tag_assignments.insert(tag, class);
        }
        let mut patient = SyntheticPatient {
            patient_id: format!("p{i:04}"),
            organ_id,
            slide_count,
            tag_assignments,
            dropped_tags,
            report: String::new(),
        };
        patient.report = build_report(schema, &patient);
        patients.push(patient);
    }
    Ok(Corpus {
        seed,
        schemas: schemas.to_vec(),
        geometry,
        patients,
    })
}

/// Patient-level split indices: shuffle, take floors of the fractions, and
/// give the rounding remainder to the training split.
pub fn split_corpus(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(PipelineError::config("split fractions must sum to 1"));
    }
    let n = corpus.patients.len();
    if n < 3 {
        return Err(PipelineError::config(
            "corpus must have at least 3 patients to split",
        ));
    }
    let mut ids: Vec<String> = corpus.patients.iter().map(|p| p.patient_id.clone()).collect();
    let mut rng = derive_rng(seed, "split");
    // Fisher–Yates, explicit so the draw order is pinned.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fe * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = ids[..n_train].to_vec();
    let val = ids[n_train..n_train + n_val].to_vec();
    let test = ids[n_train + n_val..].to_vec();
    Ok((train, val, test))
}
