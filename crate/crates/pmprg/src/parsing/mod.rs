//! Rule-based report structuring: per-tag sentences, inner-class labels,
//! organ label, and the tag-presence mask.

pub mod vocab;

use crate::corpus::{OrganSchema, CLASS_NAMES, UNCERTAIN_CLASS};
use crate::error::{PipelineError, Result};
use serde::{Deserialize, Serialize};

/// Organ label: a concrete schema id, or the parse-time sentinel when no
/// organ keyword appears in the report. Serialized as the id, with -1 for
/// the sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrganLabel {
    Organ(usize),
    Uncertain,
}

impl OrganLabel {
    pub fn id(&self) -> Option<usize> {
        match self {
            OrganLabel::Organ(i) => Some(*i),
            OrganLabel::Uncertain => None,
        }
    }
}

impl Serialize for OrganLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OrganLabel::Organ(i) => s.serialize_i64(*i as i64),
            OrganLabel::Uncertain => s.serialize_i64(-1),
        }
    }
}

impl<'de> Deserialize<'de> for OrganLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Ok(if v < 0 {
            OrganLabel::Uncertain
        } else {
            OrganLabel::Organ(v as usize)
        })
    }
}

/// Structured form of one report against one organ schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParsedReport {
    pub organ_label: OrganLabel,
    pub tag_sentences: Vec<Option<String>>,
    pub tag_classes: Vec<Option<usize>>,
    pub tag_mask: Vec<bool>,
}

impl ParsedReport {
    /// The invariant tying mask and labels together.
    pub fn check_consistency(&self) -> bool {
        self.tag_mask.len() == self.tag_sentences.len()
            && self.tag_mask.len() == self.tag_classes.len()
            && self
                .tag_mask
                .iter()
                .zip(&self.tag_sentences)
                .zip(&self.tag_classes)
                .all(|((m, s), c)| *m == s.is_some() && *m == c.is_some())
    }
}

/// Split a report into sentences on '.' and newline, dropping empties.
fn sentences(report: &str) -> Vec<&str> {
    report
        .split(['.', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// For each key tag, the first sentence containing the tag name
/// (case-insensitive). Unmatched tags yield `None`.
pub fn extract_tag_sentences(report: &str, schema: &OrganSchema) -> Vec<Option<String>> {
    let sents = sentences(report);
    let lowered: Vec<String> = sents.iter().map(|s| s.to_lowercase()).collect();
    schema
        .key_tags
        .iter()
        .map(|tag| {
            let needle = tag.to_lowercase();
            lowered
                .iter()
                .position(|s| s.contains(&needle))
                .map(|i| sents[i].to_string())
        })
        .collect()
}

/// The organ whose keyword appears earliest in the report;
/// [`OrganLabel::Uncertain`] when none appears. Two distinct organs tied at
/// the same earliest offset is an error.
pub fn assign_organ(report: &str, organ_keywords: &[(usize, Vec<String>)]) -> Result<OrganLabel> {
    if organ_keywords.is_empty() {
        return Err(PipelineError::config("organ keyword map is empty"));
    }
    let lower = report.to_lowercase();
    let mut best: Option<(usize, usize)> = None; // (offset, organ)
    let mut tie = false;
    for (organ, keywords) in organ_keywords {
        for kw in keywords {
            if let Some(off) = lower.find(&kw.to_lowercase()) {
                match best {
                    None => best = Some((off, *organ)),
                    Some((boff, borgan)) => {
                        if off < boff {
                            best = Some((off, *organ));
                            tie = false;
                        } else if off == boff && *organ != borgan {
                            tie = true;
                        }
                    }
                }
            }
        }
    }
    if tie {
        let off = best.unwrap().0;
        return Err(PipelineError::AmbiguousOrgan(format!(
            "two organ keywords at offset {off}"
        )));
    }
    Ok(match best {
        Some((_, organ)) => OrganLabel::Organ(organ),
        None => OrganLabel::Uncertain,
    })
}

/// Inner class of a tag sentence: the tag's class whose name
/// substring-matches the sentence. Longest match wins; ties break to the
/// lowest global index; no match yields the catch-all class.
pub fn classify_inner(sentence: &str, tag_idx: usize, schema: &OrganSchema) -> usize {
    let lower = sentence.to_lowercase();
    let mut best: Option<(usize, usize)> = None; // (name length, class)
    let mut classes = schema.inner_classes[tag_idx].clone();
    classes.sort_unstable();
    for class in classes {
        let name = CLASS_NAMES[class];
        if lower.contains(&name.to_lowercase()) {
            let len = name.len();
            match best {
                None => best = Some((len, class)),
                Some((blen, _)) if len > blen => best = Some((len, class)),
                _ => {}
            }
        }
    }
    best.map(|(_, c)| c).unwrap_or(UNCERTAIN_CLASS)
}

/// Full rule-based parse of a report against one schema, with the organ
/// decided over the given keyword map.
pub fn parse_report(
    report: &str,
    schema: &OrganSchema,
    organ_keywords: &[(usize, Vec<String>)],
) -> Result<ParsedReport> {
    let organ_label = assign_organ(report, organ_keywords)?;
    let tag_sentences = extract_tag_sentences(report, schema);
    let tag_classes: Vec<Option<usize>> = tag_sentences
        .iter()
        .enumerate()
        .map(|(ti, s)| s.as_ref().map(|sent| classify_inner(sent, ti, schema)))
        .collect();
    let tag_mask = tag_sentences.iter().map(Option::is_some).collect();
    Ok(ParsedReport {
        organ_label,
        tag_sentences,
        tag_classes,
        tag_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{builtin_schemas, generate_corpus, organ_keywords, SlideGeometry};

    fn colon() -> OrganSchema {
        builtin_schemas().remove(0)
    }

    #[test]
    fn both_tags_matched() {
        let schema = OrganSchema {
            organ_id: 0,
            organ_name: "colon".into(),
            key_tags: vec!["histologic type".into(), "differentiation".into()],
            inner_classes: vec![vec![0], vec![5]],
            sentence_templates: vec![vec![String::new()], vec![String::new()]],
        };
        let report = "Histologic type: tubular adenocarcinoma. Differentiation: moderate.";
        let got = extract_tag_sentences(report, &schema);
        assert_eq!(
            got,
            vec![
                Some("Histologic type: tubular adenocarcinoma".to_string()),
                Some("Differentiation: moderate".to_string()),
            ]
        );
    }

    #[test]
    fn missing_tag_yields_none() {
        let schema = colon();
        let report = "histologic type shows tubular adenocarcinoma in the sampled tissue";
        let got = extract_tag_sentences(report, &schema);
        assert!(got[0].is_some());
        assert!(got[1].is_none(), "differentiation should be absent");
    }

    #[test]
    fn empty_report_all_absent() {
        let got = extract_tag_sentences("", &colon());
        assert!(got.iter().all(Option::is_none));
    }

    #[test]
    fn organ_by_earliest_keyword() {
        let schemas = builtin_schemas();
        let kw = organ_keywords(&schemas);
        assert_eq!(
            assign_organ("kidney, partial nephrectomy:", &kw).unwrap(),
            OrganLabel::Organ(1)
        );
        assert_eq!(
            assign_organ("total colectomy, colon then kidney mentioned", &kw).unwrap(),
            OrganLabel::Organ(0)
        );
        assert_eq!(
            assign_organ("no anatomic site given", &kw).unwrap(),
            OrganLabel::Uncertain
        );
        assert!(assign_organ("x", &[]).is_err());
    }

    #[test]
    fn organ_tie_is_ambiguous() {
        let kw = vec![(0usize, vec!["ab".to_string()]), (1usize, vec!["abx".to_string()])];
        // Both keywords first match at offset 0.
        assert!(matches!(
            assign_organ("abx", &kw),
            Err(PipelineError::AmbiguousOrgan(_))
        ));
    }

    #[test]
    fn inner_class_longest_match() {
        let schema = colon();
        // "moderately differentiated" also contains no other class; check the
        // plain path and the no-match fallback.
        let c = classify_inner(
            "differentiation shows moderately differentiated throughout the specimen",
            1,
            &schema,
        );
        assert_eq!(CLASS_NAMES[c], "moderately differentiated");
        assert_eq!(
            classify_inner("differentiation is unusual", 1, &schema),
            UNCERTAIN_CLASS
        );
    }

    #[test]
    fn inner_class_all_27_roundtrip() {
        // Every template sentence classifies back to its generating class.
        for schema in builtin_schemas() {
            for (ti, classes) in schema.inner_classes.iter().enumerate() {
                for (pos, class) in classes.iter().enumerate() {
                    let sent = &schema.sentence_templates[ti][pos];
                    assert_eq!(classify_inner(sent, ti, &schema), *class, "{sent}");
                }
            }
        }
    }

    #[test]
    fn corpus_wide_roundtrip() {
        let schemas = builtin_schemas();
        let kw = organ_keywords(&schemas);
        let geom = SlideGeometry {
            patch: 8,
            level2_rows: 2,
            level2_cols: 2,
            g: 4,
        };
        let corpus = generate_corpus(&schemas, 120, 21, geom, 1, 3).unwrap();
        for p in &corpus.patients {
            let schema = &schemas[p.organ_id];
            let parsed = parse_report(&p.report, schema, &kw).unwrap();
            assert!(parsed.check_consistency());
            assert_eq!(parsed.organ_label, OrganLabel::Organ(p.organ_id));
            assert_eq!(parsed.tag_mask, p.tag_mask(schema));
            assert_eq!(parsed.tag_classes, p.y_tag(schema));
        }
    }

    #[test]
    fn organ_label_json_sentinel() {
        let j = serde_json::to_string(&OrganLabel::Uncertain).unwrap();
        assert_eq!(j, "-1");
        let back: OrganLabel = serde_json::from_str("-1").unwrap();
        assert_eq!(back, OrganLabel::Uncertain);
        let back: OrganLabel = serde_json::from_str("1").unwrap();
        assert_eq!(back, OrganLabel::Organ(1));
    }
}
