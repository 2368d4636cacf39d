//! Intent accuracy, span-level slot F1, sentence-level overall accuracy
//! and per-language reports.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codeswitch::PositivePair;
use crate::corpus::{Corpus, SluExample};
use crate::encoder::SluModel;
use crate::error::{Error, Result};
use crate::numcore::l2_norm;
use crate::seeding::stream_rng;

fn check_lengths(preds: usize, golds: usize) -> Result<()> {
    if preds != golds {
        return Err(Error::contract(format!(
            "{preds} predictions for {golds} gold items"
        )));
    }
    if golds == 0 {
        return Err(Error::contract("metrics need at least one item"));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn intent_accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// A labelled chunk covering tokens `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

fn split_tag(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => ('B', t),
        Some(("I", t)) if !t.is_empty() => ('I', t),
        _ => ('O', ""),
    }
}

/// Chunks of a BIO sequence. An `I-X` that does not continue an open `X`
/// chunk starts a new one; anything other than `B-*`/`I-*` reads as `O`.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, label) = split_tag(tag.as_ref());
        let continues = kind == 'I' && open.is_some_and(|(_, l)| l == label);
        if continues {
            continue;
        }
        if let Some((start, l)) = open.take() {
            spans.push(Span {
                start,
                end: i - 1,
                label: l.to_owned(),
            });
        }
        if kind != 'O' {
            open = Some((i, label));
        }
    }
    if let Some((start, l)) = open {
        spans.push(Span {
            start,
            end: tags.len() - 1,
            label: l.to_owned(),
        });
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged exact-match span scores. With no spans on either side
/// anywhere, every score is 1.
pub fn span_scores<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<SpanScores> {
    check_lengths(preds.len(), golds.len())?;
    let (mut correct, mut predicted, mut gold) = (0, 0, 0);
    for (k, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(format!(
                "example {k}: {} predicted tags for {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let ps = extract_spans(p);
        let gs = extract_spans(g);
        correct += ps.iter().filter(|s| gs.contains(s)).count();
        predicted += ps.len();
        gold += gs.len();
    }
    if predicted == 0 && gold == 0 {
        return Ok(SpanScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            ..SpanScores::default()
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanScores {
        correct,
        predicted,
        gold,
        precision,
        recall,
        f1,
    })
}

pub fn slot_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<f64> {
    Ok(span_scores(preds, golds)?.f1)
}

/// Fraction of utterances whose intent and every tag are right.
pub fn overall_accuracy<I: PartialEq, T: PartialEq>(
    preds: &[(I, Vec<T>)],
    golds: &[(I, Vec<T>)],
) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LangMetrics {
    pub intent_acc: f64,
    pub slot_f1: f64,
    pub overall_acc: f64,
}

/// Labels predicted by `model` for every example of `corpus`.
pub fn predict_labels(model: &SluModel, corpus: &Corpus) -> Result<Vec<(String, Vec<String>)>> {
    let intents = model.labels.intents();
    let tags = model.labels.slot_tags();
    corpus
        .iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            Ok((
                intents[p.intent].clone(),
                p.tags.iter().map(|&t| tags[t].clone()).collect(),
            ))
        })
        .collect()
}

fn gold_labels(ex: &SluExample) -> (String, Vec<String>) {
    (ex.intent.clone(), ex.slot_tags.clone())
}

/// Metrics of `model` on one corpus. Gold labels the model has never seen
/// can only be predicted wrongly; they are reported with a warning.
pub fn evaluate(model: &SluModel, corpus: &Corpus) -> Result<LangMetrics> {
    let preds = predict_labels(model, corpus)?;
    let golds: Vec<_> = corpus.iter().map(gold_labels).collect();
    let unseen_intents = corpus
        .iter()
        .filter(|ex| model.labels.intent_id(&ex.intent).is_none())
        .count();
    let unseen_tags = corpus
        .iter()
        .flat_map(|ex| &ex.slot_tags)
        .filter(|t| model.labels.tag_id(t).is_none())
        .count();
    if unseen_intents + unseen_tags > 0 {
        let lang = corpus.examples().first().map_or("", |e| e.lang.as_str());
        log::warn!(
            "{lang}: {unseen_intents} utterances with unseen intents and {unseen_tags} tokens with unseen tags are scored as wrong"
        );
    }
    let pred_intents: Vec<&String> = preds.iter().map(|p| &p.0).collect();
    let gold_intents: Vec<&String> = golds.iter().map(|g| &g.0).collect();
    let pred_tags: Vec<Vec<String>> = preds.iter().map(|p| p.1.clone()).collect();
    let gold_tags: Vec<Vec<String>> = golds.iter().map(|g| g.1.clone()).collect();
    Ok(LangMetrics {
        intent_acc: intent_accuracy(&pred_intents, &gold_intents)?,
        slot_f1: slot_f1(&pred_tags, &gold_tags)?,
        overall_acc: overall_accuracy(&preds, &golds)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangRecord {
    pub lang: String,
    #[serde(flatten)]
    pub metrics: LangMetrics,
}

/// Per-language metrics plus their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub languages: Vec<LangRecord>,
    pub avg: LangMetrics,
}

impl MetricsReport {
    pub fn new(languages: Vec<LangRecord>) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::contract("a report needs at least one language"));
        }
        let n = languages.len() as f64;
        let mean =
            |f: fn(&LangMetrics) -> f64| languages.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let avg = LangMetrics {
            intent_acc: mean(|m| m.intent_acc),
            slot_f1: mean(|m| m.slot_f1),
            overall_acc: mean(|m| m.overall_acc),
        };
        Ok(MetricsReport { languages, avg })
    }

    pub fn get(&self, lang: &str) -> Option<&LangMetrics> {
        self.languages
            .iter()
            .find(|r| r.lang == lang)
            .map(|r| &r.metrics)
    }

    /// Aligned table, one column per language and `AVG` last, values in
    /// percent.
    pub fn to_table(&self) -> String {
        let mut headers: Vec<&str> = self.languages.iter().map(|r| r.lang.as_str()).collect();
        headers.push("AVG");
        let mut cols: Vec<&LangMetrics> = self.languages.iter().map(|r| &r.metrics).collect();
        cols.push(&self.avg);
        let width = headers.iter().map(|h| h.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<12}", "metric");
        for h in &headers {
            write!(out, " {h:>width$}").unwrap();
        }
        out.push('\n');
        type Getter = fn(&LangMetrics) -> f64;
        let rows: [(&str, Getter); 3] = [
            ("intent_acc", |m| m.intent_acc),
            ("slot_f1", |m| m.slot_f1),
            ("overall_acc", |m| m.overall_acc),
        ];
        for (name, f) in rows {
            write!(out, "{name:<12}").unwrap();
            for m in &cols {
                write!(out, " {:>width$.2}", 100.0 * f(m)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates `model` unchanged on each language's test corpus.
pub fn zero_shot_report(model: &SluModel, tests: &[(String, Corpus)]) -> Result<MetricsReport> {
    let mut languages = Vec::with_capacity(tests.len());
    for (lang, corpus) in tests {
        if corpus.is_empty() {
            return Err(Error::contract(format!("test corpus for {lang} is empty")));
        }
        languages.push(LangRecord {
            lang: lang.clone(),
            metrics: evaluate(model, corpus)?,
        });
    }
    MetricsReport::new(languages)
}

pub fn cosine(p: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    dot / (l2_norm(p) * l2_norm(q))
}

/// Sentence-vector cosine between each anchor and its own positive versus
/// the positive of a randomly chosen other pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub positive_cos: f64,
    pub random_cos: f64,
    pub gap: f64,
}

pub fn cls_alignment(
    model: &SluModel,
    pairs: &[PositivePair],
    seed: u64,
) -> Result<AlignmentStats> {
    if pairs.len() < 2 {
        return Err(Error::contract("alignment needs at least two pairs"));
    }
    let encode = |ex: &SluExample| model.encode_example(ex).map(|e| e.h_cls);
    let anchors: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| encode(&p.anchor))
        .collect::<Result<_>>()?;
    let positives: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| encode(&p.positive))
        .collect::<Result<_>>()?;
    let n = pairs.len();
    let mut rng = stream_rng(seed, 0);
    let (mut pos, mut rand) = (0.0, 0.0);
    for i in 0..n {
        let other = (i + rng.gen_range(1..n)) % n;
        pos += cosine(&anchors[i], &positives[i]);
        rand += cosine(&anchors[i], &positives[other]);
    }
    let (positive_cos, random_cos) = (pos / n as f64, rand / n as f64);
    Ok(AlignmentStats {
        positive_cos,
        random_cos,
        gap: positive_cos - random_cos,
    })
}
