//! Evaluation metrics: binary F1, class-wise and macro F1, and BLEU.
//!
//! Degenerate ratios (empty denominators, `p + r = 0`) evaluate to 0 so every
//! metric is total and lies in `[0, 1]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {predictions} predictions vs {golds} golds")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("no examples to score")]
    Empty,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("max_n must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("BLEU needs at least one reference")]
    NoReferences,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64) -> Self {
        Self {
            true_pos,
            false_pos,
            false_neg,
        }
    }

    pub fn observe(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => {}
        }
    }

    pub fn score(&self) -> BinaryScore {
        BinaryScore::from_counts(*self)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryScore {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
        let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Precision, recall and F1 of the positive class.
pub fn binary_f1(predictions: &[bool], golds: &[bool]) -> Result<BinaryScore, MetricError> {
    Ok(binary_counts(predictions, golds)?.score())
}

pub fn binary_counts(predictions: &[bool], golds: &[bool]) -> Result<ConfusionCounts, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(golds) {
        c.observe(p, g);
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub counts: ConfusionCounts,
    pub score: BinaryScore,
    /// The class occurs in neither predictions nor golds; its F1 is 0.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScore {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
}

impl MacroScore {
    pub fn class(&self, code: &str) -> Option<&ClassScore> {
        self.per_class.iter().find(|c| c.class == code)
    }
}

/// One-vs-rest F1 for every class, then their unweighted mean.
pub fn macro_f1<C>(
    pred_sets: &[BTreeSet<C>],
    gold_sets: &[BTreeSet<C>],
    classes: &[C],
) -> Result<MacroScore, MetricError>
where
    C: Ord + Clone + fmt::Display,
{
    if pred_sets.len() != gold_sets.len() {
        return Err(MetricError::LengthMismatch {
            predictions: pred_sets.len(),
            golds: gold_sets.len(),
        });
    }
    if gold_sets.is_empty() || classes.is_empty() {
        return Err(MetricError::Empty);
    }
    for set in pred_sets.iter().chain(gold_sets) {
        if let Some(bad) = set.iter().find(|l| !classes.contains(l)) {
            return Err(MetricError::UnknownLabel(bad.to_string()));
        }
    }
    let per_class: Vec<ClassScore> = classes
        .iter()
        .map(|class| {
            let mut counts = ConfusionCounts::default();
            let mut seen = false;
            for (p, g) in pred_sets.iter().zip(gold_sets) {
                let (pp, gg) = (p.contains(class), g.contains(class));
                seen |= pp || gg;
                counts.observe(pp, gg);
            }
            ClassScore {
                class: class.to_string(),
                counts,
                score: counts.score(),
                absent: !seen,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.score.f1).sum::<f64>() / per_class.len() as f64;
    Ok(MacroScore {
        per_class,
        macro_f1,
    })
}

/// How zero or undefined higher-order n-gram precisions are handled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "epsilon")]
pub enum Smoothing {
    /// Raw clipped precisions; any zero precision makes the score 0.
    None,
    /// Add one to numerator and denominator for every order above 1
    /// (Lin and Och 2004).
    #[default]
    AddOne,
    /// Replace a zero numerator with `epsilon` for every order above 1
    /// (denominator floored at 1).
    Epsilon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    /// One token per non-whitespace character (the usual choice for Chinese).
    #[default]
    Char,
    /// Split on Unicode whitespace.
    Whitespace,
}

impl Tokenization {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenization::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
            Tokenization::Whitespace => text.split_whitespace().map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub tokenization: Tokenization,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::AddOne,
            tokenization: Tokenization::Char,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Smoothed precisions for n = 1..=max_n.
    pub ngram_precisions: Vec<f64>,
    /// 1 when the hypothesis is at least as long as the closest reference;
    /// 0 for an empty hypothesis.
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and total hypothesis n-gram count for one order.
fn clipped_matches<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (u64, u64) {
    let hyp_counts = ngram_counts(hyp, n);
    let total: u64 = hyp_counts.values().sum();
    let mut max_ref: HashMap<&[T], u64> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Closest reference length; ties go to the shorter reference.
fn closest_ref_len(ref_lens: impl Iterator<Item = usize>, hyp_len: usize) -> usize {
    ref_lens
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn combine(
    matched: &[u64],
    totals: &[u64],
    smoothing: Smoothing,
    hyp_len: usize,
    ref_len: usize,
) -> BleuScore {
    let precisions: Vec<f64> = matched
        .iter()
        .zip(totals)
        .enumerate()
        .map(|(i, (&m, &t))| match smoothing {
            Smoothing::AddOne if i > 0 => (m + 1) as f64 / (t + 1) as f64,
            Smoothing::Epsilon(eps) if i > 0 && m == 0 => eps / t.max(1) as f64,
            _ => ratio(m, t),
        })
        .collect();
    let bp = brevity_penalty(hyp_len, ref_len);
    let score = if hyp_len == 0 || precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        (bp * log_mean.exp()).min(1.0)
    };
    BleuScore {
        score,
        ngram_precisions: precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    }
}

/// Sentence-level BLEU over pre-tokenized input.
pub fn bleu<T: Eq + Hash>(
    hypothesis: &[T],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore, MetricError> {
    corpus_bleu(&[(hypothesis, references)], max_n, smoothing)
}

/// Corpus-level BLEU: clipped counts and lengths are summed over all segments
/// before precisions and the brevity penalty are computed.
pub fn corpus_bleu<T: Eq + Hash, H: AsRef<[T]>>(
    segments: &[(H, &[Vec<T>])],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore, MetricError> {
    if max_n < 1 {
        return Err(MetricError::InvalidOrder(max_n));
    }
    let mut matched = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in segments {
        let hyp = hyp.as_ref();
        if refs.is_empty() {
            return Err(MetricError::NoReferences);
        }
        let ref_slices: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
        hyp_len += hyp.len();
        ref_len += closest_ref_len(ref_slices.iter().map(|r| r.len()), hyp.len());
        for n in 1..=max_n {
            let (m, t) = clipped_matches(hyp, &ref_slices, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    Ok(combine(&matched, &totals, smoothing, hyp_len, ref_len))
}

/// Corpus BLEU over raw strings with the configured tokenization.
pub fn corpus_bleu_text(
    pairs: &[(&str, Vec<&str>)],
    config: &BleuConfig,
) -> Result<BleuScore, MetricError> {
    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> = pairs
        .iter()
        .map(|(h, refs)| {
            (
                config.tokenization.tokenize(h),
                refs.iter()
                    .map(|r| config.tokenization.tokenize(r))
                    .collect(),
            )
        })
        .collect();
    let segments: Vec<(&[String], &[Vec<String>])> = tokenized
        .iter()
        .map(|(h, r)| (h.as_slice(), r.as_slice()))
        .collect();
    corpus_bleu(&segments, config.max_n, config.smoothing)
}
