//! Staged-reasoning prompts, strict response parsers and the batch pipeline
//! for detection, classification and rewriting.
//!
//! Responses follow a line grammar with fixed ASCII markers:
//!
//! ```text
//! Step1: Group: <text>; Attribute: <text>
//! Step2: Biased: True|False[; Reason: <text>]
//! Step3: Agrees: True|False[; Reason: <text>]
//! Label: True|False
//! ```
//!
//! and for classification
//!
//! ```text
//! Step1: Label: AC; Justification: <text>; Applies: True|False
//! Step2: Label: DI; Justification: <text>; Applies: True|False
//! Step3: Label: ANB; Justification: <text>; Applies: True|False
//! Final: AC, DI | None
//! ```
//!
//! Field values escape `\` as `\\`, a line break as `\n` and `;` as `\;`.
//! Blank lines are ignored; any other line outside the grammar is an error.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    AnySplit, BiasLabel, ClassificationRecord, DatasetSplit, DetectionRecord, MitigationRecord,
    TaskKind, TaskRecord,
};
use crate::lmclient::{ChatBackend, ChatMessage, ChatRequest, FinishReason};
use crate::par::{self, Exec};
use crate::template::{TemplateError, TemplateSet};

pub const DETECTION_STEPS: [&str; 3] = [
    "Groups and Attribute Identification",
    "Bias Judgment",
    "Agreement Analysis and Label Assignment",
];

pub const CLASSIFICATION_STEPS: [&str; 4] =
    ["AC judgment", "DI judgment", "ANB judgment", "Synthesis"];

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            ';' => out.push_str("\\;"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_field`]. Unknown escapes are kept literally.
pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some(';') => out.push(';'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Split on `;` not preceded by an escaping backslash. Segments stay escaped.
fn split_fields(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == ';' {
            parts.push(&s[start..i]);
            start = i + 1;
        }
    }
    parts.push(&s[start..]);
    parts
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CotParseError {
    #[error("line {line}: {message}: `{content}`")]
    Grammar {
        line: usize,
        content: String,
        message: String,
    },
    #[error("missing step \"{step}\"")]
    MissingStep { step: &'static str },
    #[error("label {label} contradicts biased={biased} and agrees={agrees}")]
    InconsistentLabel {
        label: bool,
        biased: bool,
        agrees: bool,
    },
    #[error("final labels {} differ from the per-label decisions {}", fmt_set(.stated), fmt_set(.applies))]
    InconsistentSynthesis {
        judgments: Vec<LabelJudgment>,
        applies: BTreeSet<BiasLabel>,
        stated: BTreeSet<BiasLabel>,
    },
    #[error("empty rewrite")]
    EmptyRewrite,
}

fn fmt_set(s: &BTreeSet<BiasLabel>) -> String {
    if s.is_empty() {
        "None".to_string()
    } else {
        s.iter().map(|l| l.code()).collect::<Vec<_>>().join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub group: String,
    pub attribute: String,
    pub statement_is_biased: bool,
    pub sentence_agrees: bool,
    pub label: bool,
}

impl DetectionResult {
    /// Unbiased statements are labelled negative by construction; they are
    /// worth a human look because the sentence may be hostile some other way.
    pub fn needs_audit(&self) -> bool {
        !self.statement_is_biased
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelJudgment {
    pub label: BiasLabel,
    pub justification: String,
    pub applies: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationResult {
    /// One per label, in AC, DI, ANB order.
    pub judgments: Vec<LabelJudgment>,
    pub final_labels: BTreeSet<BiasLabel>,
}

fn parse_bool(v: &str) -> Option<bool> {
    if v.eq_ignore_ascii_case("true") {
        Some(true)
    } else if v.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// One nonblank response line, with its 1-based line number.
struct Line<'a> {
    no: usize,
    text: &'a str,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> CotParseError {
        CotParseError::Grammar {
            line: self.no,
            content: self.text.to_string(),
            message: message.into(),
        }
    }
}

/// Parse `Key: value; Key: value` with the keys required in order. Keys in
/// `optional` may follow the required ones. Values are unescaped and trimmed.
fn parse_kv(
    line: &Line<'_>,
    body: &str,
    required: &[&str],
    optional: &[&str],
) -> Result<Vec<String>, CotParseError> {
    let segments = split_fields(body);
    let mut values = Vec::with_capacity(required.len());
    let mut opt_seen = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        let seg = seg.trim();
        let (key, value) = seg
            .split_once(':')
            .ok_or_else(|| line.err(format!("field {} is not `Key: value`", i + 1)))?;
        let key = key.trim();
        let value = unescape_field(value.trim());
        if i < required.len() {
            if key != required[i] {
                return Err(line.err(format!("expected field `{}`, found `{key}`", required[i])));
            }
            values.push(value.trim().to_string());
        } else {
            match optional[opt_seen.min(optional.len())..]
                .iter()
                .position(|k| *k == key)
            {
                Some(p) => opt_seen += p + 1,
                None => return Err(line.err(format!("unexpected field `{key}`"))),
            }
        }
    }
    if values.len() < required.len() {
        return Err(line.err(format!("missing field `{}`", required[values.len()])));
    }
    Ok(values)
}

fn require_bool(line: &Line<'_>, field: &str, v: &str) -> Result<bool, CotParseError> {
    parse_bool(v).ok_or_else(|| line.err(format!("`{field}` must be True or False, found `{v}`")))
}

fn require_nonempty(line: &Line<'_>, field: &str, v: String) -> Result<String, CotParseError> {
    if v.is_empty() {
        Err(line.err(format!("`{field}` is empty")))
    } else {
        Ok(v)
    }
}

/// Assign each nonblank line to a marker, enforcing order and uniqueness.
/// Returns, per marker, the line and the text after the marker.
fn scan<'a>(
    text: &'a str,
    markers: &[&str],
) -> Result<Vec<Option<(Line<'a>, &'a str)>>, CotParseError> {
    let mut slots: Vec<Option<(Line<'a>, &'a str)>> = markers.iter().map(|_| None).collect();
    let mut next = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let line = Line {
            no: i + 1,
            text: trimmed,
        };
        let Some(m) = markers.iter().position(|m| trimmed.starts_with(m)) else {
            return Err(line.err("not a recognised answer line"));
        };
        if slots[m].is_some() {
            return Err(line.err(format!("duplicate `{}` line", markers[m])));
        }
        if m < next {
            return Err(line.err(format!("`{}` out of order", markers[m])));
        }
        next = m + 1;
        let rest = &trimmed[markers[m].len()..];
        slots[m] = Some((line, rest));
    }
    Ok(slots)
}

pub fn parse_detection_response(text: &str) -> Result<DetectionResult, CotParseError> {
    let slots = scan(text, &["Step1:", "Step2:", "Step3:", "Label:"])?;
    let step_for_slot = [
        DETECTION_STEPS[0],
        DETECTION_STEPS[1],
        DETECTION_STEPS[2],
        DETECTION_STEPS[2],
    ];
    for (slot, step) in slots.iter().zip(step_for_slot) {
        if slot.is_none() {
            return Err(CotParseError::MissingStep { step });
        }
    }
    let get = |i: usize| slots[i].as_ref().expect("checked above");

    let (l1, b1) = get(0);
    let mut v = parse_kv(l1, b1, &["Group", "Attribute"], &[])?.into_iter();
    let group = require_nonempty(l1, "Group", v.next().unwrap_or_default())?;
    let attribute = require_nonempty(l1, "Attribute", v.next().unwrap_or_default())?;

    let (l2, b2) = get(1);
    let v = parse_kv(l2, b2, &["Biased"], &["Reason"])?;
    let biased = require_bool(l2, "Biased", &v[0])?;

    let (l3, b3) = get(2);
    let v = parse_kv(l3, b3, &["Agrees"], &["Reason"])?;
    let agrees = require_bool(l3, "Agrees", &v[0])?;

    let (l4, b4) = get(3);
    let label = require_bool(l4, "Label", b4.trim())?;
    if label != (biased && agrees) {
        return Err(CotParseError::InconsistentLabel {
            label,
            biased,
            agrees,
        });
    }
    Ok(DetectionResult {
        group,
        attribute,
        statement_is_biased: biased,
        sentence_agrees: agrees,
        label,
    })
}

fn parse_final(line: &Line<'_>, body: &str) -> Result<BTreeSet<BiasLabel>, CotParseError> {
    let body = body.trim();
    let mut out = BTreeSet::new();
    if body.eq_ignore_ascii_case("none") {
        return Ok(out);
    }
    if body.is_empty() {
        return Err(line.err("empty final answer; write None for no labels"));
    }
    for code in body.split(',') {
        let code = code.trim();
        let label: BiasLabel = code
            .to_ascii_uppercase()
            .parse()
            .map_err(|_| line.err(format!("unknown label `{code}`")))?;
        if !out.insert(label) {
            return Err(line.err(format!("label `{code}` repeated")));
        }
    }
    Ok(out)
}

pub fn parse_classification_response(text: &str) -> Result<ClassificationResult, CotParseError> {
    let slots = scan(text, &["Step1:", "Step2:", "Step3:", "Final:"])?;
    for (slot, step) in slots.iter().zip(CLASSIFICATION_STEPS) {
        if slot.is_none() {
            return Err(CotParseError::MissingStep { step });
        }
    }
    let mut judgments = Vec::with_capacity(3);
    for (i, expected) in BiasLabel::ALL.iter().enumerate() {
        let (line, body) = slots[i].as_ref().expect("checked above");
        let v = parse_kv(line, body, &["Label", "Justification", "Applies"], &[])?;
        if !v[0].eq_ignore_ascii_case(expected.code()) {
            return Err(line.err(format!("expected label {expected}, found `{}`", v[0])));
        }
        let justification = require_nonempty(line, "Justification", v[1].clone())?;
        let applies = require_bool(line, "Applies", &v[2])?;
        judgments.push(LabelJudgment {
            label: *expected,
            justification,
            applies,
        });
    }
    let (line, body) = slots[3].as_ref().expect("checked above");
    let stated = parse_final(line, body)?;
    let applies: BTreeSet<BiasLabel> = judgments
        .iter()
        .filter(|j| j.applies)
        .map(|j| j.label)
        .collect();
    if stated != applies {
        return Err(CotParseError::InconsistentSynthesis {
            judgments,
            applies,
            stated,
        });
    }
    Ok(ClassificationResult {
        judgments,
        final_labels: stated,
    })
}

/// A compliant rewrite is the sentence alone; only surrounding whitespace is
/// removed.
pub fn parse_rewrite_response(text: &str) -> Result<String, CotParseError> {
    let t = text.trim();
    if t.is_empty() {
        Err(CotParseError::EmptyRewrite)
    } else {
        Ok(t.to_string())
    }
}

/// The response a perfectly compliant model would give for `r`.
pub fn render_detection_response(r: &DetectionResult) -> String {
    format!(
        "Step1: Group: {}; Attribute: {}\nStep2: Biased: {}\nStep3: Agrees: {}\nLabel: {}\n",
        escape_field(&r.group),
        escape_field(&r.attribute),
        fmt_bool(r.statement_is_biased),
        fmt_bool(r.sentence_agrees),
        fmt_bool(r.label)
    )
}

pub fn render_classification_response(r: &ClassificationResult) -> String {
    let mut out = String::new();
    for (i, j) in r.judgments.iter().enumerate() {
        out.push_str(&format!(
            "Step{}: Label: {}; Justification: {}; Applies: {}\n",
            i + 1,
            j.label,
            escape_field(&j.justification),
            fmt_bool(j.applies)
        ));
    }
    out.push_str(&format!("Final: {}\n", fmt_set(&r.final_labels)));
    out
}

fn grammar(templates: &TemplateSet, name: &str) -> String {
    templates.get(name).body().trim_end().to_string()
}

pub fn render_detection_prompt(
    templates: &TemplateSet,
    record: &DetectionRecord,
) -> Result<String, TemplateError> {
    templates.get("detection.txt").render(&[
        ("sentence", &escape_field(&record.text)),
        ("grammar", &grammar(templates, "detection_grammar.txt")),
    ])
}

pub fn render_classification_prompt(
    templates: &TemplateSet,
    record: &ClassificationRecord,
) -> Result<String, TemplateError> {
    templates.get("classification.txt").render(&[
        ("sentence", &escape_field(&record.text)),
        ("grammar", &grammar(templates, "classification_grammar.txt")),
    ])
}

pub fn render_rewrite_prompt(
    templates: &TemplateSet,
    biased_text: &str,
) -> Result<String, TemplateError> {
    templates.get("rewrite.txt").render(&[
        ("sentence", biased_text),
        ("grammar", &grammar(templates, "rewrite_grammar.txt")),
    ])
}

pub fn render_corrective(
    templates: &TemplateSet,
    grammar_name: &str,
    error: &str,
) -> Result<String, TemplateError> {
    templates.get("corrective.txt").render(&[
        ("error", error),
        ("grammar", &grammar(templates, grammar_name)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Extra attempts after the first when a response fails to parse.
    pub retry_budget: u32,
    pub max_inflight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_name: "generator".to_string(),
            temperature: 0.0,
            max_tokens: 512,
            retry_budget: 2,
            max_inflight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    ParseFailure,
    BackendError,
    InconsistentSynthesis,
}

impl fmt::Display for FlagReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlagReason::ParseFailure => "parse_failure",
            FlagReason::BackendError => "backend_error",
            FlagReason::InconsistentSynthesis => "inconsistent_synthesis",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<DetectionResult>,
    #[serde(default)]
    pub audit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationOutput {
    pub labels: BTreeSet<BiasLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judgments: Vec<LabelJudgment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationOutput {
    pub rewrite: String,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction<O> {
    pub id: String,
    #[serde(flatten)]
    pub output: O,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_reason: Option<FlagReason>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    pub attempts: u32,
    pub reason: FlagReason,
    pub last_error: String,
}

/// Task-specific rendering, parsing and fallback.
pub trait CotTask {
    type Record: TaskRecord;
    type Output: Clone + Serialize + Send;
    const GRAMMAR: &'static str;

    fn render(templates: &TemplateSet, record: &Self::Record) -> Result<String, TemplateError>;
    fn parse(text: &str, truncated: bool) -> Result<Self::Output, CotParseError>;
    /// Output used when every attempt failed.
    fn fallback(record: &Self::Record) -> Self::Output;
    /// An output recoverable from a parse error without retrying.
    fn resolve(_err: &CotParseError) -> Option<Self::Output> {
        None
    }
}

pub struct Detect;
pub struct Classify;
pub struct Rewrite;

impl CotTask for Detect {
    type Record = DetectionRecord;
    type Output = DetectionOutput;
    const GRAMMAR: &'static str = "detection_grammar.txt";

    fn render(templates: &TemplateSet, record: &DetectionRecord) -> Result<String, TemplateError> {
        render_detection_prompt(templates, record)
    }
    fn parse(text: &str, _truncated: bool) -> Result<DetectionOutput, CotParseError> {
        let r = parse_detection_response(text)?;
        Ok(DetectionOutput {
            label: r.label,
            audit: r.needs_audit(),
            detail: Some(r),
        })
    }
    fn fallback(_record: &DetectionRecord) -> DetectionOutput {
        DetectionOutput {
            label: false,
            detail: None,
            audit: false,
        }
    }
}

impl CotTask for Classify {
    type Record = ClassificationRecord;
    type Output = ClassificationOutput;
    const GRAMMAR: &'static str = "classification_grammar.txt";

    fn render(
        templates: &TemplateSet,
        record: &ClassificationRecord,
    ) -> Result<String, TemplateError> {
        render_classification_prompt(templates, record)
    }
    fn parse(text: &str, _truncated: bool) -> Result<ClassificationOutput, CotParseError> {
        let r = parse_classification_response(text)?;
        Ok(ClassificationOutput {
            labels: r.final_labels,
            judgments: r.judgments,
        })
    }
    fn fallback(_record: &ClassificationRecord) -> ClassificationOutput {
        ClassificationOutput {
            labels: BTreeSet::new(),
            judgments: Vec::new(),
        }
    }
    fn resolve(err: &CotParseError) -> Option<ClassificationOutput> {
        match err {
            CotParseError::InconsistentSynthesis {
                judgments, applies, ..
            } => Some(ClassificationOutput {
                labels: applies.clone(),
                judgments: judgments.clone(),
            }),
            _ => None,
        }
    }
}

impl CotTask for Rewrite {
    type Record = MitigationRecord;
    type Output = MitigationOutput;
    const GRAMMAR: &'static str = "rewrite_grammar.txt";

    fn render(templates: &TemplateSet, record: &MitigationRecord) -> Result<String, TemplateError> {
        render_rewrite_prompt(templates, &record.biased_text)
    }
    fn parse(text: &str, truncated: bool) -> Result<MitigationOutput, CotParseError> {
        let rewrite = parse_rewrite_response(text)?;
        if truncated {
            return Err(CotParseError::Grammar {
                line: text.lines().count(),
                content: text.lines().last().unwrap_or("").to_string(),
                message: "response was cut off at the token limit".into(),
            });
        }
        Ok(MitigationOutput { rewrite })
    }
    fn fallback(record: &MitigationRecord) -> MitigationOutput {
        MitigationOutput {
            rewrite: record.biased_text.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("split holds {found} records but the pipeline runs {expected}")]
    KindMismatch { expected: TaskKind, found: TaskKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineRun<O> {
    pub predictions: Vec<Prediction<O>>,
    pub failures: Vec<FailureEntry>,
}

impl<O: Serialize> PipelineRun<O> {
    pub fn predictions_jsonl(&self) -> String {
        to_jsonl(&self.predictions)
    }

    pub fn failures_jsonl(&self) -> String {
        to_jsonl(&self.failures)
    }

    pub fn flagged(&self) -> usize {
        self.predictions.iter().filter(|p| p.flagged).count()
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn run_one<T: CotTask>(
    record: &T::Record,
    prompt: String,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    config: &PipelineConfig,
) -> (Prediction<T::Output>, Option<FailureEntry>) {
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut attempts = 0u32;
    let finish = |output, attempts, failure: Option<(FlagReason, String)>| {
        let pred = Prediction {
            id: record.id().to_string(),
            output,
            flagged: failure.is_some(),
            flag_reason: failure.as_ref().map(|f| f.0),
            attempts,
        };
        let entry = failure.map(|(reason, last_error)| FailureEntry {
            id: record.id().to_string(),
            attempts,
            reason,
            last_error,
        });
        (pred, entry)
    };
    loop {
        attempts += 1;
        let request = ChatRequest {
            model_name: config.model_name.clone(),
            messages: messages.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            seed: None,
        };
        let response = match backend.complete(&request) {
            Ok(r) if r.finish_reason == FinishReason::Error => {
                let msg = "backend reported an error finish".to_string();
                return finish(
                    T::fallback(record),
                    attempts,
                    Some((FlagReason::BackendError, msg)),
                );
            }
            Ok(r) => r,
            Err(e) => {
                return finish(
                    T::fallback(record),
                    attempts,
                    Some((FlagReason::BackendError, e.to_string())),
                );
            }
        };
        let text = response.text().to_string();
        match T::parse(&text, response.finish_reason == FinishReason::Length) {
            Ok(out) => return finish(out, attempts, None),
            Err(err) => {
                if let Some(out) = T::resolve(&err) {
                    return finish(
                        out,
                        attempts,
                        Some((FlagReason::InconsistentSynthesis, err.to_string())),
                    );
                }
                if attempts > config.retry_budget {
                    return finish(
                        T::fallback(record),
                        attempts,
                        Some((FlagReason::ParseFailure, err.to_string())),
                    );
                }
                let corrective = match render_corrective(templates, T::GRAMMAR, &err.to_string()) {
                    Ok(c) => c,
                    Err(e) => {
                        return finish(
                            T::fallback(record),
                            attempts,
                            Some((FlagReason::ParseFailure, e.to_string())),
                        )
                    }
                };
                messages.push(ChatMessage::assistant(text));
                messages.push(ChatMessage::user(corrective));
            }
        }
    }
}

/// Render, complete and parse every record, retrying unparsable responses.
/// Output order follows input order regardless of fan-out.
pub fn run_task<T: CotTask>(
    split: &DatasetSplit<T::Record>,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<PipelineRun<T::Output>, PipelineError> {
    let prompts: Vec<(&T::Record, String)> = split
        .records()
        .iter()
        .map(|r| T::render(templates, r).map(|p| (r, p)))
        .collect::<Result<_, _>>()?;
    let results = par::map_bounded(exec, config.max_inflight, &prompts, |(rec, prompt)| {
        run_one::<T>(rec, prompt.clone(), backend, templates, config)
    });
    let mut predictions = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (p, f) in results {
        predictions.push(p);
        failures.extend(f);
    }
    Ok(PipelineRun {
        predictions,
        failures,
    })
}

/// Predictions and failure log of any task, already serialized as JSONL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutput {
    pub task: TaskKind,
    pub predictions_jsonl: String,
    pub failures_jsonl: String,
    pub records: usize,
    pub flagged: usize,
}

/// Dispatch on the split's task kind.
pub fn run_pipeline(
    split: &AnySplit,
    task: TaskKind,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    config: &PipelineConfig,
    exec: Exec,
) -> Result<PipelineOutput, PipelineError> {
    if split.task() != task {
        return Err(PipelineError::KindMismatch {
            expected: task,
            found: split.task(),
        });
    }
    fn pack<O: Serialize>(task: TaskKind, run: PipelineRun<O>) -> PipelineOutput {
        PipelineOutput {
            task,
            predictions_jsonl: run.predictions_jsonl(),
            failures_jsonl: run.failures_jsonl(),
            records: run.predictions.len(),
            flagged: run.flagged(),
        }
    }
    Ok(match split {
        AnySplit::Detect(s) => pack(
            task,
            run_task::<Detect>(s, backend, templates, config, exec)?,
        ),
        AnySplit::Classify(s) => pack(
            task,
            run_task::<Classify>(s, backend, templates, config, exec)?,
        ),
        AnySplit::Mitigate(s) => pack(
            task,
            run_task::<Rewrite>(s, backend, templates, config, exec)?,
        ),
    })
}
