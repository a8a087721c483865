//! Evaluation of prediction files against gold splits, and report merging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use debias_core::corpus::{
    is_meta_line, load_split, BiasLabel, ClassificationRecord, DatasetSplit, DetectionRecord,
    MitigationRecord, SplitName, TaskKind, TaskRecord,
};
use debias_core::cot::{ClassificationOutput, DetectionOutput, MitigationOutput, Prediction};
use debias_core::lmclient::canonical_string;
use debias_core::metrics::{
    binary_counts, corpus_bleu_text, macro_f1, BinaryScore, BleuConfig, BleuScore, ConfusionCounts,
    MacroScore,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("prediction id `{id}` appears twice")]
    DuplicatePrediction { id: String },
    #[error("predictions missing for gold ids: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("predictions for ids not in the gold split: {}", .0.join(", "))]
    UnknownPredictions(Vec<String>),
    #[error("metric: {0}")]
    Metric(#[from] debias_core::metrics::MetricError),
    #[error("cannot merge: {0}")]
    Merge(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryBlock {
    pub counts: ConfusionCounts,
    pub true_neg: u64,
    #[serde(flatten)]
    pub score: BinaryScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricBlock {
    Binary(BinaryBlock),
    Macro(MacroScore),
    Bleu(BleuScore),
}

impl MetricBlock {
    pub fn headline(&self) -> f64 {
        match self {
            MetricBlock::Binary(b) => b.score.f1,
            MetricBlock::Macro(m) => m.macro_f1,
            MetricBlock::Bleu(b) => b.score,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            MetricBlock::Binary(_) => "F1",
            MetricBlock::Macro(_) => "Macro-F1",
            MetricBlock::Bleu(_) => "BLEU",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub false_pos: u64,
    pub false_neg: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    /// Over every record, defaulted ones included.
    pub metric: MetricBlock,
    /// Over unflagged records only; absent when every record is flagged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_excluding_flagged: Option<MetricBlock>,
    /// Per-class false positives and false negatives; empty for rewriting.
    pub per_class_errors: BTreeMap<String, ErrorCounts>,
    pub records: usize,
    pub flagged: usize,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    /// Canonical JSON: sorted keys, no whitespace, trailing newline.
    pub fn to_json(&self) -> String {
        format!(
            "{}\n",
            canonical_string(&serde_json::to_value(self).expect("serializable"))
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}", self.task);
        let _ = writeln!(out, "records: {} (flagged {})", self.records, self.flagged);
        let _ = writeln!(out, "{}: {:.6}", self.metric.name(), self.metric.headline());
        if let Some(m) = &self.metric_excluding_flagged {
            let _ = writeln!(out, "{} excluding flagged: {:.6}", m.name(), m.headline());
        }
        match &self.metric {
            MetricBlock::Binary(b) => {
                let c = b.counts;
                let _ = writeln!(
                    out,
                    "precision {:.6} recall {:.6} (tp {} fp {} fn {} tn {})",
                    b.score.precision,
                    b.score.recall,
                    c.true_pos,
                    c.false_pos,
                    c.false_neg,
                    b.true_neg
                );
            }
            MetricBlock::Macro(m) => {
                for c in &m.per_class {
                    let absent = if c.absent { " (absent)" } else { "" };
                    let _ = writeln!(
                        out,
                        "  {}: F1 {:.6} P {:.6} R {:.6}{absent}",
                        c.class, c.score.f1, c.score.precision, c.score.recall
                    );
                }
            }
            MetricBlock::Bleu(b) => {
                let ps: Vec<String> = b
                    .ngram_precisions
                    .iter()
                    .map(|p| format!("{p:.6}"))
                    .collect();
                let _ = writeln!(
                    out,
                    "precisions [{}] BP {:.6} hyp_len {} ref_len {}",
                    ps.join(", "),
                    b.brevity_penalty,
                    b.hyp_len,
                    b.ref_len
                );
            }
        }
        for (class, e) in &self.per_class_errors {
            let _ = writeln!(
                out,
                "  errors {class}: fp {} fn {}",
                e.false_pos, e.false_neg
            );
        }
        let _ = writeln!(out, "fingerprint: {}", self.fingerprint);
        let _ = writeln!(out, "seed: {}", self.seed);
        out
    }
}

/// Prediction lines, skipping a leading `_meta` line.
pub fn read_predictions<O: DeserializeOwned>(path: &Path) -> Result<Vec<Prediction<O>>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if (i == 0 && is_meta_line(line)) || line.trim().is_empty() {
            continue;
        }
        let p: Prediction<O> = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_gold<R: TaskRecord>(path: &Path) -> Result<DatasetSplit<R>, EvalError> {
    let split = SplitName::infer(path).unwrap_or(SplitName::Test);
    load_split(path, Some(split)).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Pair each gold record with its prediction. Every gold id needs exactly one
/// prediction and vice versa.
pub fn align<'a, R: TaskRecord, O>(
    gold: &'a DatasetSplit<R>,
    preds: &'a [Prediction<O>],
) -> Result<Vec<(&'a R, &'a Prediction<O>)>, EvalError> {
    let mut by_id: HashMap<&str, &Prediction<O>> = HashMap::new();
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction { id: p.id.clone() });
        }
    }
    let missing: Vec<String> = gold
        .records()
        .iter()
        .filter(|r| !by_id.contains_key(r.id()))
        .map(|r| r.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    let gold_ids: BTreeSet<&str> = gold.records().iter().map(|r| r.id()).collect();
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !gold_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownPredictions(unknown));
    }
    Ok(gold.records().iter().map(|r| (r, by_id[r.id()])).collect())
}

/// Provenance stamped on every report.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub fingerprint: String,
    pub seed: u64,
}

fn binary_block(pairs: &[(bool, bool)]) -> Result<BinaryBlock, EvalError> {
    let (p, g): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
    let counts = binary_counts(&p, &g)?;
    let true_neg = pairs.iter().filter(|(p, g)| !p && !g).count() as u64;
    Ok(BinaryBlock {
        counts,
        true_neg,
        score: counts.score(),
    })
}

pub fn eval_detect(
    preds: &[Prediction<DetectionOutput>],
    gold: &DatasetSplit<DetectionRecord>,
    stamp: &Stamp,
) -> Result<EvalReport, EvalError> {
    let aligned = align(gold, preds)?;
    let all: Vec<(bool, bool)> = aligned
        .iter()
        .map(|(r, p)| (p.output.label, r.label))
        .collect();
    let kept: Vec<(bool, bool)> = aligned
        .iter()
        .filter(|(_, p)| !p.flagged)
        .map(|(r, p)| (p.output.label, r.label))
        .collect();
    let metric = binary_block(&all)?;
    let errors = ErrorCounts {
        false_pos: metric.counts.false_pos,
        false_neg: metric.counts.false_neg,
    };
    Ok(EvalReport {
        task: TaskKind::Detect,
        metric_excluding_flagged: if kept.is_empty() {
            None
        } else {
            Some(MetricBlock::Binary(binary_block(&kept)?))
        },
        metric: MetricBlock::Binary(metric),
        per_class_errors: BTreeMap::from([("biased".to_string(), errors)]),
        records: aligned.len(),
        flagged: aligned.iter().filter(|(_, p)| p.flagged).count(),
        fingerprint: stamp.fingerprint.clone(),
        seed: stamp.seed,
    })
}

pub fn eval_classify(
    preds: &[Prediction<ClassificationOutput>],
    gold: &DatasetSplit<ClassificationRecord>,
    stamp: &Stamp,
) -> Result<EvalReport, EvalError> {
    let aligned = align(gold, preds)?;
    let score = |rows: &[&(&ClassificationRecord, &Prediction<ClassificationOutput>)]| {
        let p: Vec<BTreeSet<BiasLabel>> =
            rows.iter().map(|(_, p)| p.output.labels.clone()).collect();
        let g: Vec<BTreeSet<BiasLabel>> = rows.iter().map(|(r, _)| r.labels.clone()).collect();
        macro_f1(&p, &g, &BiasLabel::ALL)
    };
    let all: Vec<_> = aligned.iter().collect();
    let kept: Vec<_> = aligned.iter().filter(|(_, p)| !p.flagged).collect();
    let metric = score(&all)?;
    let per_class_errors = metric
        .per_class
        .iter()
        .map(|c| {
            (
                c.class.clone(),
                ErrorCounts {
                    false_pos: c.counts.false_pos,
                    false_neg: c.counts.false_neg,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        task: TaskKind::Classify,
        metric: MetricBlock::Macro(metric),
        metric_excluding_flagged: if kept.is_empty() {
            None
        } else {
            Some(MetricBlock::Macro(score(&kept)?))
        },
        per_class_errors,
        records: aligned.len(),
        flagged: aligned.iter().filter(|(_, p)| p.flagged).count(),
        fingerprint: stamp.fingerprint.clone(),
        seed: stamp.seed,
    })
}

pub fn eval_mitigate(
    preds: &[Prediction<MitigationOutput>],
    gold: &DatasetSplit<MitigationRecord>,
    bleu: &BleuConfig,
    stamp: &Stamp,
) -> Result<EvalReport, EvalError> {
    let aligned = align(gold, preds)?;
    let score = |rows: Vec<&(&MitigationRecord, &Prediction<MitigationOutput>)>| {
        let segs: Vec<(&str, Vec<&str>)> = rows
            .iter()
            .map(|(r, p)| (p.output.rewrite.as_str(), vec![r.edited_text.as_str()]))
            .collect();
        corpus_bleu_text(&segs, bleu)
    };
    let metric = score(aligned.iter().collect())?;
    let kept: Vec<_> = aligned.iter().filter(|(_, p)| !p.flagged).collect();
    Ok(EvalReport {
        task: TaskKind::Mitigate,
        metric: MetricBlock::Bleu(metric),
        metric_excluding_flagged: if kept.is_empty() {
            None
        } else {
            Some(MetricBlock::Bleu(score(kept)?))
        },
        per_class_errors: BTreeMap::new(),
        records: aligned.len(),
        flagged: aligned.iter().filter(|(_, p)| p.flagged).count(),
        fingerprint: stamp.fingerprint.clone(),
        seed: stamp.seed,
    })
}

/// Several task reports merged into one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fingerprint: String,
    pub seed: u64,
    /// Ordered by task.
    pub reports: Vec<EvalReport>,
}

impl Summary {
    pub fn merge(reports: Vec<EvalReport>, stamp: &Stamp) -> Result<Self, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Merge("no reports given".into()));
        }
        let mut reports = reports;
        reports.sort_by_key(|r| r.task);
        if let Some(w) = reports.windows(2).find(|w| w[0].task == w[1].task) {
            return Err(EvalError::Merge(format!(
                "two reports for task {}",
                w[0].task
            )));
        }
        Ok(Self {
            fingerprint: stamp.fingerprint.clone(),
            seed: stamp.seed,
            reports,
        })
    }

    pub fn to_json(&self) -> String {
        format!(
            "{}\n",
            canonical_string(&serde_json::to_value(self).expect("serializable"))
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "summary fingerprint: {}", self.fingerprint);
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{:<10} {:<9} {:.6}",
                r.task.as_str(),
                r.metric.name(),
                r.metric.headline()
            );
        }
        for r in &self.reports {
            out.push('\n');
            out.push_str(&r.to_text());
        }
        out
    }
}
