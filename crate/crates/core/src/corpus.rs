//! Task records, JSONL ingestion and split validation.
//!
//! One JSON object per line, UTF-8, with fixed field names:
//!
//! | task       | fields                                 |
//! |------------|----------------------------------------|
//! | `detect`   | `id`, `text`, `label` (bool)           |
//! | `classify` | `id`, `text`, `labels` (`AC`/`DI`/`ANB`) |
//! | `mitigate` | `id`, `biased_text`, `edited_text`     |
//!
//! Unknown fields are rejected so schema drift surfaces at ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Prefix applied to supplement ids by default when merging external data.
pub const DEFAULT_SUPPLEMENT_PREFIX: &str = "ext:";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("cannot infer split (train/valid/test) from file name {path}")]
    UnknownSplit { path: String },
    #[error("record kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: TaskKind, found: TaskKind },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detect,
    Classify,
    Mitigate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Detect, TaskKind::Classify, TaskKind::Mitigate];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Detect => "detect",
            TaskKind::Classify => "classify",
            TaskKind::Mitigate => "mitigate",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect" => Ok(TaskKind::Detect),
            "classify" => Ok(TaskKind::Classify),
            "mitigate" => Ok(TaskKind::Mitigate),
            other => Err(format!(
                "unknown task `{other}` (expected detect|classify|mitigate)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }

    /// Infer the split from a file name such as `task1_train.jsonl` or `dev.jsonl`.
    pub fn infer(path: &Path) -> Option<SplitName> {
        let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
        let tokens: Vec<&str> = stem
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let has = |names: &[&str]| tokens.iter().any(|t| names.contains(t));
        if has(&["train"]) {
            Some(SplitName::Train)
        } else if has(&["valid", "val", "dev", "validation"]) {
            Some(SplitName::Valid)
        } else if has(&["test"]) {
            Some(SplitName::Test)
        } else {
            None
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "dev" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!(
                "unknown split `{other}` (expected train|valid|test)"
            )),
        }
    }
}

/// Gender-bias category for the classification subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BiasLabel {
    /// Activity and career choices.
    AC,
    /// Gender-stereotyped descriptions and inductions.
    DI,
    /// Expressed gender-stereotyped attitudes, norms and beliefs.
    ANB,
}

impl BiasLabel {
    pub const ALL: [BiasLabel; 3] = [BiasLabel::AC, BiasLabel::DI, BiasLabel::ANB];

    pub fn code(self) -> &'static str {
        match self {
            BiasLabel::AC => "AC",
            BiasLabel::DI => "DI",
            BiasLabel::ANB => "ANB",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            BiasLabel::AC => "Activity and Career Choices",
            BiasLabel::DI => "Gender Stereotyped Descriptions and Inductions",
            BiasLabel::ANB => "Expressed Gender-stereotyped Attitudes, Norms and Beliefs",
        }
    }
}

impl fmt::Display for BiasLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for BiasLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AC" => Ok(BiasLabel::AC),
            "DI" => Ok(BiasLabel::DI),
            "ANB" => Ok(BiasLabel::ANB),
            other => Err(format!("unknown label code `{other}`")),
        }
    }
}

/// A field-level schema violation, before the line number is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Behaviour shared by the three record kinds.
pub trait TaskRecord: Clone + Serialize + Send + Sync + Sized {
    const TASK: TaskKind;
    const FIELDS: &'static [&'static str];

    fn id(&self) -> &str;
    fn set_id(&mut self, id: String);
    fn from_object(obj: &Map<String, Value>) -> Result<Self, FieldError>;
    fn validate(&self) -> Result<(), FieldError>;
}

fn get_str<'a>(obj: &'a Map<String, Value>, field: &str) -> Result<&'a str, FieldError> {
    match obj.get(field) {
        None => Err(FieldError::new(field, "missing")),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(FieldError::new(
            field,
            format!("expected string, found {}", json_type(other)),
        )),
    }
}

fn nonempty(field: &str, s: &str) -> Result<(), FieldError> {
    if s.trim().is_empty() {
        Err(FieldError::new(field, "must be nonempty"))
    } else {
        Ok(())
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str]) -> Result<(), FieldError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(FieldError::new(k, "unknown field")),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub text: String,
    /// True when the sentence contains gender bias.
    pub label: bool,
}

impl TaskRecord for DetectionRecord {
    const TASK: TaskKind = TaskKind::Detect;
    const FIELDS: &'static [&'static str] = &["id", "text", "label"];

    fn id(&self) -> &str {
        &self.id
    }
    fn set_id(&mut self, id: String) {
        self.id = id;
    }
    fn from_object(obj: &Map<String, Value>) -> Result<Self, FieldError> {
        reject_unknown(obj, Self::FIELDS)?;
        let id = get_str(obj, "id")?.to_string();
        let text = get_str(obj, "text")?.to_string();
        let label = match obj.get("label") {
            None => return Err(FieldError::new("label", "missing")),
            Some(Value::Bool(b)) => *b,
            Some(other) => {
                return Err(FieldError::new(
                    "label",
                    format!("expected bool, found {}", json_type(other)),
                ))
            }
        };
        let rec = Self { id, text, label };
        rec.validate()?;
        Ok(rec)
    }
    fn validate(&self) -> Result<(), FieldError> {
        nonempty("id", &self.id)?;
        nonempty("text", &self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub id: String,
    pub text: String,
    /// Possibly empty; kept in canonical AC, DI, ANB order.
    pub labels: BTreeSet<BiasLabel>,
}

impl TaskRecord for ClassificationRecord {
    const TASK: TaskKind = TaskKind::Classify;
    const FIELDS: &'static [&'static str] = &["id", "text", "labels"];

    fn id(&self) -> &str {
        &self.id
    }
    fn set_id(&mut self, id: String) {
        self.id = id;
    }
    fn from_object(obj: &Map<String, Value>) -> Result<Self, FieldError> {
        reject_unknown(obj, Self::FIELDS)?;
        let id = get_str(obj, "id")?.to_string();
        let text = get_str(obj, "text")?.to_string();
        let raw = match obj.get("labels") {
            None => return Err(FieldError::new("labels", "missing")),
            Some(Value::Array(items)) => items,
            Some(other) => {
                return Err(FieldError::new(
                    "labels",
                    format!("expected array, found {}", json_type(other)),
                ))
            }
        };
        let mut labels = BTreeSet::new();
        for item in raw {
            let code = item
                .as_str()
                .ok_or_else(|| FieldError::new("labels", "label codes must be strings"))?;
            let label: BiasLabel = code.parse().map_err(|e| FieldError::new("labels", e))?;
            if !labels.insert(label) {
                return Err(FieldError::new(
                    "labels",
                    format!("duplicate label `{code}`"),
                ));
            }
        }
        let rec = Self { id, text, labels };
        rec.validate()?;
        Ok(rec)
    }
    fn validate(&self) -> Result<(), FieldError> {
        nonempty("id", &self.id)?;
        nonempty("text", &self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationRecord {
    pub id: String,
    pub biased_text: String,
    pub edited_text: String,
}

impl TaskRecord for MitigationRecord {
    const TASK: TaskKind = TaskKind::Mitigate;
    const FIELDS: &'static [&'static str] = &["id", "biased_text", "edited_text"];

    fn id(&self) -> &str {
        &self.id
    }
    fn set_id(&mut self, id: String) {
        self.id = id;
    }
    fn from_object(obj: &Map<String, Value>) -> Result<Self, FieldError> {
        reject_unknown(obj, Self::FIELDS)?;
        let rec = Self {
            id: get_str(obj, "id")?.to_string(),
            biased_text: get_str(obj, "biased_text")?.to_string(),
            edited_text: get_str(obj, "edited_text")?.to_string(),
        };
        rec.validate()?;
        Ok(rec)
    }
    fn validate(&self) -> Result<(), FieldError> {
        nonempty("id", &self.id)?;
        nonempty("biased_text", &self.biased_text)?;
        nonempty("edited_text", &self.edited_text)?;
        if self.biased_text == self.edited_text {
            return Err(FieldError::new(
                "edited_text",
                "must differ from biased_text",
            ));
        }
        Ok(())
    }
}

/// An ordered list of records of one kind with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit<R> {
    split_name: SplitName,
    records: Vec<R>,
}

impl<R: TaskRecord> DatasetSplit<R> {
    /// Build a split, checking every record and id uniqueness. Line numbers in
    /// errors are 1-based positions in `records`.
    pub fn new(split_name: SplitName, records: Vec<R>) -> Result<Self, CorpusError> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate().map_err(|e| CorpusError::Malformed {
                line: i + 1,
                field: e.field,
                message: e.message,
            })?;
            if let Some(first) = seen.insert(rec.id(), i + 1) {
                return Err(CorpusError::DuplicateId {
                    id: rec.id().to_string(),
                    first_line: first,
                    second_line: i + 1,
                });
            }
        }
        Ok(Self {
            split_name,
            records,
        })
    }

    pub fn split_name(&self) -> SplitName {
        self.split_name
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        R::TASK
    }

    pub fn get(&self, id: &str) -> Option<&R> {
        self.records.iter().find(|r| r.id() == id)
    }

    /// Parse JSONL text. Blank lines are malformed records, except for the
    /// empty input. A first line of the form `{"_meta": ...}` is skipped.
    pub fn parse_jsonl(split_name: SplitName, text: &str) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if i == 0 && is_meta_line(line) {
                continue;
            }
            let rec = parse_record::<R>(line, line_no)?;
            if let Some(first) = seen.insert(rec.id().to_string(), line_no) {
                return Err(CorpusError::DuplicateId {
                    id: rec.id().to_string(),
                    first_line: first,
                    second_line: line_no,
                });
            }
            records.push(rec);
        }
        Ok(Self {
            split_name,
            records,
        })
    }

    /// Canonical JSONL: one object per line in schema field order, `\n` terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            // Serializing plain strings/bools/sets cannot fail.
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(|source| io_err(path, source))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|source| io_err(path, source))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_record<R: TaskRecord>(line: &str, line_no: usize) -> Result<R, CorpusError> {
    let malformed = |field: &str, message: String| CorpusError::Malformed {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed("<json>", e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| {
        malformed(
            "<json>",
            format!("expected object, found {}", json_type(&value)),
        )
    })?;
    R::from_object(obj).map_err(|e| malformed(&e.field, e.message))
}

/// True for a provenance line holding only a `_meta` object.
pub fn is_meta_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"_meta\"")
        && serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| {
                v.as_object()
                    .map(|o| o.len() == 1 && o.contains_key("_meta"))
            })
            .unwrap_or(false)
}

/// Load one JSONL split. The split name is inferred from the file name when
/// `split` is `None`.
pub fn load_split<R: TaskRecord>(
    path: &Path,
    split: Option<SplitName>,
) -> Result<DatasetSplit<R>, CorpusError> {
    let split = match split.or_else(|| SplitName::infer(path)) {
        Some(s) => s,
        None => {
            return Err(CorpusError::UnknownSplit {
                path: path.display().to_string(),
            })
        }
    };
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    DatasetSplit::parse_jsonl(split, &text)
}

/// A split of any record kind, for callers that pick the task at run time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnySplit {
    Detect(DatasetSplit<DetectionRecord>),
    Classify(DatasetSplit<ClassificationRecord>),
    Mitigate(DatasetSplit<MitigationRecord>),
}

impl AnySplit {
    pub fn task(&self) -> TaskKind {
        match self {
            AnySplit::Detect(_) => TaskKind::Detect,
            AnySplit::Classify(_) => TaskKind::Classify,
            AnySplit::Mitigate(_) => TaskKind::Mitigate,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnySplit::Detect(s) => s.len(),
            AnySplit::Classify(s) => s.len(),
            AnySplit::Mitigate(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_name(&self) -> SplitName {
        match self {
            AnySplit::Detect(s) => s.split_name(),
            AnySplit::Classify(s) => s.split_name(),
            AnySplit::Mitigate(s) => s.split_name(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        match self {
            AnySplit::Detect(s) => s.to_jsonl(),
            AnySplit::Classify(s) => s.to_jsonl(),
            AnySplit::Mitigate(s) => s.to_jsonl(),
        }
    }

    /// Runtime-typed [`merge_supplement`].
    pub fn merge(&self, supplement: &AnySplit, prefix: &str) -> Result<AnySplit, CorpusError> {
        match (self, supplement) {
            (AnySplit::Detect(a), AnySplit::Detect(b)) => {
                merge_supplement(a, b, prefix).map(AnySplit::Detect)
            }
            (AnySplit::Classify(a), AnySplit::Classify(b)) => {
                merge_supplement(a, b, prefix).map(AnySplit::Classify)
            }
            (AnySplit::Mitigate(a), AnySplit::Mitigate(b)) => {
                merge_supplement(a, b, prefix).map(AnySplit::Mitigate)
            }
            (a, b) => Err(CorpusError::KindMismatch {
                expected: a.task(),
                found: b.task(),
            }),
        }
    }
}

/// Load a dataset file for `task`. Count equals the file's line count.
pub fn load_dataset(
    path: &Path,
    task: TaskKind,
    split: Option<SplitName>,
) -> Result<AnySplit, CorpusError> {
    Ok(match task {
        TaskKind::Detect => AnySplit::Detect(load_split(path, split)?),
        TaskKind::Classify => AnySplit::Classify(load_split(path, split)?),
        TaskKind::Mitigate => AnySplit::Mitigate(load_split(path, split)?),
    })
}

/// Append `supplement` to `base`, namespacing supplement ids with `prefix`.
pub fn merge_supplement<R: TaskRecord>(
    base: &DatasetSplit<R>,
    supplement: &DatasetSplit<R>,
    prefix: &str,
) -> Result<DatasetSplit<R>, CorpusError> {
    let mut records = Vec::with_capacity(base.len() + supplement.len());
    records.extend(base.records.iter().cloned());
    records.extend(supplement.records.iter().map(|r| {
        let mut r = r.clone();
        let id = format!("{prefix}{}", r.id());
        r.set_id(id);
        r
    }));
    DatasetSplit::new(base.split_name, records)
}

/// Record counts for the three splits of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, valid: usize, test: usize) -> Self {
        Self { train, valid, test }
    }

    pub fn get(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Valid => self.valid,
            SplitName::Test => self.test,
        }
    }

    pub fn set(&mut self, split: SplitName, n: usize) {
        match split {
            SplitName::Train => self.train = n,
            SplitName::Valid => self.valid = n,
            SplitName::Test => self.test = n,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

/// Expected record counts per (task, split), stored as TOML:
///
/// ```toml
/// [detect]
/// train = 12224
/// valid = 1032
/// test = 200
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(flatten)]
    pub tasks: BTreeMap<TaskKind, SplitSizes>,
}

impl SplitManifest {
    /// Official shared-task split sizes for the three subtasks.
    pub fn official() -> Self {
        let tasks = BTreeMap::from([
            (TaskKind::Detect, SplitSizes::new(12224, 1032, 200)),
            (TaskKind::Classify, SplitSizes::new(4872, 516, 200)),
            (TaskKind::Mitigate, SplitSizes::new(3672, 516, 200)),
        ]);
        Self { tasks }
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        toml::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        Self::from_toml(&text)
    }

    pub fn expected(&self, task: TaskKind) -> Option<SplitSizes> {
        self.tasks.get(&task).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Match,
    Mismatch,
    /// No manifest entry to compare against.
    Unchecked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub split: SplitName,
    pub expected: Option<usize>,
    pub actual: usize,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub task: TaskKind,
    pub entries: Vec<SplitCheck>,
}

impl SplitReport {
    pub fn all_match(&self) -> bool {
        self.entries.iter().all(|e| e.status == CheckStatus::Match)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &SplitCheck> {
        self.entries
            .iter()
            .filter(|e| e.status == CheckStatus::Mismatch)
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let expected = e
                .expected
                .map(|n| n.to_string())
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                f,
                "{:<9} {:<5} expected={:<6} actual={:<6} {:?}",
                self.task, e.split, expected, e.actual, e.status
            )?;
        }
        Ok(())
    }
}

/// Compare observed split sizes with a manifest (if any).
pub fn validate_split_counts(
    sizes: SplitSizes,
    task: TaskKind,
    manifest: Option<&SplitManifest>,
) -> SplitReport {
    let expected = manifest.and_then(|m| m.expected(task));
    let entries = SplitName::ALL
        .iter()
        .map(|&split| {
            let actual = sizes.get(split);
            let exp = expected.map(|e| e.get(split));
            let status = match exp {
                None => CheckStatus::Unchecked,
                Some(n) if n == actual => CheckStatus::Match,
                Some(_) => CheckStatus::Mismatch,
            };
            SplitCheck {
                split,
                expected: exp,
                actual,
                status,
            }
        })
        .collect();
    SplitReport { task, entries }
}
