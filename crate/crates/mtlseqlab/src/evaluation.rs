//! Concept-level scoring, boundary-inconsistency measurement, and
//! OOV-stratified reporting.
//!
//! Matching is exact: a predicted span counts as a true positive only when a
//! gold span agrees in sentence, start, end, and payload. That strictest
//! reading is stated in every rendered report header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{tag_kind, OovClass, OovPartition, Sentence, TagKind, TagSet};
use crate::error::{Error, Result};
use crate::multitask::TaskId;

/// One labeled mention: `[start, end)` token indices within a sentence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EntitySpan {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub payload: String,
}

impl EntitySpan {
    pub fn new(sentence: usize, start: usize, end: usize, payload: impl Into<String>) -> Self {
        let payload = payload.into();
        debug_assert!(start < end);
        Self {
            sentence,
            start,
            end,
            payload,
        }
    }

    fn key(&self) -> (usize, usize, usize, &str) {
        (self.sentence, self.start, self.end, &self.payload)
    }

    fn boundary(&self) -> (usize, usize, usize) {
        (self.sentence, self.start, self.end)
    }
}

/// Decode one BIO stream into `(start, end, payload)` runs: `B-x` opens a
/// span, `I-x` extends it, `O` or a payload change closes it.
pub fn decode_entity_runs<S: AsRef<str>>(tags: &[S]) -> Result<Vec<(usize, usize, String)>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        match tag_kind(tag) {
            Some(TagKind::Outside) => {
                if let Some((start, payload)) = open.take() {
                    spans.push((start, i, payload));
                }
            }
            Some(TagKind::Begin(payload)) => {
                if let Some((start, payload)) = open.take() {
                    spans.push((start, i, payload));
                }
                open = Some((i, payload.to_string()));
            }
            Some(TagKind::Inside(payload)) => match &open {
                Some((_, p)) if p == payload => {}
                _ => {
                    return Err(Error::BioViolation {
                        token: i + 1,
                        msg: format!("orphan {tag} during decoding"),
                    })
                }
            },
            None => {
                return Err(Error::BioViolation {
                    token: i + 1,
                    msg: format!("malformed tag `{tag}`"),
                })
            }
        }
    }
    if let Some((start, payload)) = open {
        spans.push((start, tags.len(), payload));
    }
    Ok(spans)
}

/// Decode a tag-id sequence against its tag set.
pub fn decode_entities(sentence: usize, tags: &[usize], tagset: &TagSet) -> Result<Vec<EntitySpan>> {
    let labels: Vec<&str> = tags.iter().map(|&t| tagset.label(t)).collect();
    Ok(decode_entity_runs(&labels)?
        .into_iter()
        .map(|(start, end, payload)| EntitySpan::new(sentence, start, end, payload))
        .collect())
}

/// All spans of one task's tag stream across a corpus (sentences without
/// that stream contribute nothing).
pub fn corpus_spans(sentences: &[Sentence], task: TaskId) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    for s in sentences {
        let Some(tags) = s.tags(task) else { continue };
        for (start, end, payload) in decode_entity_runs(tags)? {
            spans.push(EntitySpan::new(s.id, start, end, payload));
        }
    }
    Ok(spans)
}

/// Exact-match concept-level counts and metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        // conventions: P = 1 with no predictions and no gold, 0 with no
        // predictions but gold present; R undefined (no gold) → 0
        let precision = if tp + fp == 0 {
            if fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

fn dedup(spans: &[EntitySpan]) -> BTreeSet<(usize, usize, usize, &str)> {
    spans.iter().map(EntitySpan::key).collect()
}

/// Concept-level precision/recall/F1 under exact (sentence, start, end,
/// payload) matching, after deduplication.
pub fn concept_prf(gold: &[EntitySpan], pred: &[EntitySpan]) -> EvalReport {
    let gold = dedup(gold);
    let pred = dedup(pred);
    let tp = gold.intersection(&pred).count();
    EvalReport::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// `|symmetric difference| / |union|` of the two boundary sets (payloads
/// ignored); 0 when both are empty.
pub fn boundary_inconsistency(mer_spans: &[EntitySpan], men_spans: &[EntitySpan]) -> f64 {
    let a: BTreeSet<_> = mer_spans.iter().map(EntitySpan::boundary).collect();
    let b: BTreeSet<_> = men_spans.iter().map(EntitySpan::boundary).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    let sym = a.symmetric_difference(&b).count();
    sym as f64 / union as f64
}

fn overlap(a: &EntitySpan, b: &EntitySpan) -> usize {
    if a.sentence != b.sentence {
        return 0;
    }
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

/// Per-OOV-class [`concept_prf`]. True positives land in the class of the
/// gold span they match; an unmatched prediction counts as a false positive
/// in the class of the gold span it overlaps most (ties: earliest gold span;
/// no overlap at all: IV). All four classes are always present.
pub fn stratified_report(
    gold: &[EntitySpan],
    pred: &[EntitySpan],
    partition: &OovPartition,
) -> Result<BTreeMap<OovClass, EvalReport>> {
    let gold_set: BTreeSet<&EntitySpan> = gold.iter().collect();
    let pred_set: BTreeSet<&EntitySpan> = pred.iter().collect();
    let class_of = |span: &EntitySpan| -> Result<OovClass> {
        partition
            .class_of(span.sentence, span.start, span.end)
            .ok_or_else(|| {
                Error::Config(format!(
                    "OOV partition does not cover gold entity at sentence {} [{}, {})",
                    span.sentence, span.start, span.end
                ))
            })
    };
    let mut counts: BTreeMap<OovClass, (usize, usize, usize)> = OovClass::ALL
        .iter()
        .map(|&c| (c, (0, 0, 0)))
        .collect();
    let gold_keys: BTreeSet<(usize, usize, usize, &str)> =
        gold_set.iter().map(|s| s.key()).collect();
    for g in &gold_set {
        let class = class_of(g)?;
        let entry = counts.get_mut(&class).expect("all classes present");
        if pred_set.iter().any(|p| p.key() == g.key()) {
            entry.0 += 1; // tp
        } else {
            entry.2 += 1; // fn
        }
    }
    for p in &pred_set {
        if gold_keys.contains(&p.key()) {
            continue; // counted as tp above
        }
        let mut best: Option<(usize, &EntitySpan)> = None;
        for g in &gold_set {
            let ov = overlap(p, g);
            if ov > 0 {
                let better = match best {
                    None => true,
                    Some((bo, bg)) => ov > bo || (ov == bo && g < &bg),
                };
                if better {
                    best = Some((ov, g));
                }
            }
        }
        let class = match best {
            Some((_, g)) => class_of(g)?,
            None => OovClass::Iv,
        };
        counts.get_mut(&class).expect("all classes present").1 += 1; // fp
    }
    Ok(counts
        .into_iter()
        .map(|(c, (tp, fp, fn_))| (c, EvalReport::from_counts(tp, fp, fn_)))
        .collect())
}

fn kv_line(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key}={value}");
}

/// Machine-readable `key=value` block for one task's report. Values use full
/// `f64` round-trip precision.
pub fn report_kv(r: &EvalReport, boundary: Option<f64>) -> String {
    let mut out = String::new();
    kv_line(&mut out, "tp", r.tp);
    kv_line(&mut out, "fp", r.fp);
    kv_line(&mut out, "fn", r.fn_);
    kv_line(&mut out, "precision", r.precision);
    kv_line(&mut out, "recall", r.recall);
    kv_line(&mut out, "f1", r.f1);
    if let Some(b) = boundary {
        kv_line(&mut out, "boundary_inconsistency", b);
    }
    out
}

/// Human-readable aligned report for one task.
pub fn report_text(
    task: &str,
    r: &EvalReport,
    boundary: Option<f64>,
    by_class: Option<&BTreeMap<OovClass, EvalReport>>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{task} concept-level scores (exact span + payload match)");
    let _ = writeln!(out, "  {:<10} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}",
        "subset", "tp", "fp", "fn", "precision", "recall", "f1");
    let mut row = |name: &str, r: &EvalReport| {
        let _ = writeln!(
            out,
            "  {:<10} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4}",
            name, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
        );
    };
    row("all", r);
    if let Some(by_class) = by_class {
        for (class, cr) in by_class {
            row(class.name(), cr);
        }
    }
    if let Some(b) = boundary {
        let _ = writeln!(out, "  boundary inconsistency: {b:.4}");
    }
    out
}
