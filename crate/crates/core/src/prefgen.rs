//! Preference-pair construction from mitigation records.
//!
//! Each record is rewritten by a generator under three counterfactual
//! instructions. A generation that passes [`validate_pair`] becomes the
//! dispreferred completion, paired with the record's human edit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::PreferencePair;
use crate::corpus::{DatasetSplit, MitigationRecord};
use crate::cot::render_rewrite_prompt;
use crate::lmclient::{ChatBackend, ChatMessage, ChatRequest, FinishReason};
use crate::par::{self, Exec};
use crate::template::{TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualKind {
    /// (i) bias kept, meaning distorted.
    BiasKeptMeaningDistorted,
    /// (ii) bias replaced, meaning still distorted.
    BiasRemovedMeaningDistorted,
    /// (iii) bias kept, meaning preserved.
    BiasKeptMeaningPreserved,
}

impl CounterfactualKind {
    pub const ALL: [CounterfactualKind; 3] = [
        CounterfactualKind::BiasKeptMeaningDistorted,
        CounterfactualKind::BiasRemovedMeaningDistorted,
        CounterfactualKind::BiasKeptMeaningPreserved,
    ];

    pub fn code(self) -> &'static str {
        match self {
            CounterfactualKind::BiasKeptMeaningDistorted => "i",
            CounterfactualKind::BiasRemovedMeaningDistorted => "ii",
            CounterfactualKind::BiasKeptMeaningPreserved => "iii",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CounterfactualKind::BiasKeptMeaningDistorted => "bias_kept_meaning_distorted",
            CounterfactualKind::BiasRemovedMeaningDistorted => "bias_removed_meaning_distorted",
            CounterfactualKind::BiasKeptMeaningPreserved => "bias_kept_meaning_preserved",
        }
    }

    pub fn template_name(self) -> String {
        format!("counterfactual_{}.txt", self.as_str())
    }

    /// Kinds whose rewrite must differ from the biased source sentence.
    pub fn requires_modification(self) -> bool {
        matches!(
            self,
            CounterfactualKind::BiasKeptMeaningDistorted
                | CounterfactualKind::BiasRemovedMeaningDistorted
        )
    }
}

impl fmt::Display for CounterfactualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounterfactualKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.code() == s)
            .ok_or_else(|| format!("unknown counterfactual kind `{s}`"))
    }
}

pub fn render_counterfactual_prompt(
    templates: &TemplateSet,
    record: &MitigationRecord,
    kind: CounterfactualKind,
) -> Result<String, TemplateError> {
    templates
        .get(&kind.template_name())
        .render(&[("sentence", &record.biased_text)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyGeneration,
    EmptyField,
    DegenerateEqual,
    UnmodifiedBias,
    LengthOutlier,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyGeneration => "empty_generation",
            RejectReason::EmptyField => "empty_field",
            RejectReason::DegenerateEqual => "degenerate_equal",
            RejectReason::UnmodifiedBias => "unmodified_bias",
            RejectReason::LengthOutlier => "length_outlier",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_LENGTH_RATIO_CAP: f64 = 5.0;

/// Accept or reject a candidate pair. `biased_text` is the source sentence
/// the rejected completion was generated from.
pub fn validate_pair(
    pair: &PreferencePair,
    biased_text: &str,
    length_ratio_cap: f64,
) -> Result<(), RejectReason> {
    if pair.rejected.trim().is_empty() {
        return Err(RejectReason::EmptyGeneration);
    }
    if pair.prompt.trim().is_empty() || pair.chosen.trim().is_empty() {
        return Err(RejectReason::EmptyField);
    }
    if pair.chosen == pair.rejected {
        return Err(RejectReason::DegenerateEqual);
    }
    if pair
        .kind
        .is_some_and(CounterfactualKind::requires_modification)
        && pair.rejected == biased_text
    {
        return Err(RejectReason::UnmodifiedBias);
    }
    let c = pair.chosen.chars().count() as f64;
    let r = pair.rejected.chars().count() as f64;
    if r / c > length_ratio_cap || c / r > length_ratio_cap {
        return Err(RejectReason::LengthOutlier);
    }
    Ok(())
}

/// What the pair's prompt field holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// The rendered rewrite instruction over the biased sentence.
    #[default]
    Instruction,
    /// The biased sentence alone.
    Raw,
}

pub fn pair_prompt(
    templates: &TemplateSet,
    biased_text: &str,
    style: PromptStyle,
) -> Result<String, TemplateError> {
    match style {
        PromptStyle::Instruction => render_rewrite_prompt(templates, biased_text),
        PromptStyle::Raw => Ok(biased_text.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefgenConfig {
    pub kinds: Vec<CounterfactualKind>,
    pub samples_per_kind: u32,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub length_ratio_cap: f64,
    pub prompt_style: PromptStyle,
    pub max_inflight: usize,
}

impl Default for PrefgenConfig {
    fn default() -> Self {
        Self {
            kinds: CounterfactualKind::ALL.to_vec(),
            samples_per_kind: 1,
            model_name: "generator".to_string(),
            temperature: 0.7,
            max_tokens: 256,
            seed: 42,
            length_ratio_cap: DEFAULT_LENGTH_RATIO_CAP,
            prompt_style: PromptStyle::Instruction,
            max_inflight: 4,
        }
    }
}

impl PrefgenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.kinds.is_empty() {
            return Err("at least one counterfactual kind is required".into());
        }
        if self.samples_per_kind == 0 {
            return Err("samples_per_kind must be positive".into());
        }
        if self.length_ratio_cap.is_nan() || self.length_ratio_cap < 1.0 {
            return Err("length_ratio_cap must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 || self.max_tokens == 0 {
            return Err("temperature must be nonnegative and max_tokens positive".into());
        }
        Ok(())
    }

    /// The generation request for one (record, kind, sample).
    pub fn request(&self, prompt: String, sample: u32) -> ChatRequest {
        ChatRequest {
            model_name: self.model_name.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: Some(self.seed.wrapping_add(u64::from(sample))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationEntry {
    pub record_id: String,
    pub kind: CounterfactualKind,
    pub sample: u32,
    /// Raw generator output; absent when the backend failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub generator: String,
    pub config: PrefgenConfig,
    pub entries: Vec<GenerationEntry>,
    pub counts: BTreeMap<CounterfactualKind, KindCounts>,
    pub rejections: BTreeMap<RejectReason, usize>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestLine<'a> {
    Header {
        generator: &'a str,
        config: &'a PrefgenConfig,
        #[serde(skip_serializing_if = "Option::is_none")]
        fingerprint: Option<&'a str>,
    },
    Entry(&'a GenerationEntry),
    Summary {
        counts: &'a BTreeMap<CounterfactualKind, KindCounts>,
        rejections: &'a BTreeMap<RejectReason, usize>,
        pairs: usize,
    },
}

impl GenerationManifest {
    fn tally(generator: String, config: PrefgenConfig, entries: Vec<GenerationEntry>) -> Self {
        let mut counts: BTreeMap<CounterfactualKind, KindCounts> = config
            .kinds
            .iter()
            .map(|k| (*k, KindCounts::default()))
            .collect();
        let mut rejections = BTreeMap::new();
        for e in &entries {
            let c = counts.entry(e.kind).or_default();
            if e.raw.is_none() {
                c.failed += 1;
                continue;
            }
            c.generated += 1;
            if e.accepted {
                c.accepted += 1;
            } else {
                c.rejected += 1;
                if let Some(r) = e.reason {
                    *rejections.entry(r).or_insert(0) += 1;
                }
            }
        }
        Self {
            generator,
            config,
            entries,
            counts,
            rejections,
        }
    }

    pub fn total(&self) -> KindCounts {
        self.counts
            .values()
            .fold(KindCounts::default(), |a, c| KindCounts {
                generated: a.generated + c.generated,
                accepted: a.accepted + c.accepted,
                rejected: a.rejected + c.rejected,
                failed: a.failed + c.failed,
            })
    }

    /// Check that the summary agrees with the entries and `pairs`.
    pub fn reconcile(&self, pairs: &[PreferencePair]) -> Result<(), String> {
        let recount = Self::tally(
            self.generator.clone(),
            self.config.clone(),
            self.entries.clone(),
        );
        if recount.counts != self.counts || recount.rejections != self.rejections {
            return Err("summary counts disagree with entries".into());
        }
        for (kind, c) in &self.counts {
            if c.accepted + c.rejected != c.generated {
                return Err(format!("{kind}: accepted + rejected != generated"));
            }
            let n = pairs.iter().filter(|p| p.kind == Some(*kind)).count();
            if n != c.accepted {
                return Err(format!("{kind}: {n} pairs but {} accepted", c.accepted));
            }
        }
        if pairs.len() != self.total().accepted {
            return Err("pair count differs from accepted total".into());
        }
        Ok(())
    }

    /// Header line, one line per entry, then a summary line.
    pub fn to_jsonl(&self, fingerprint: Option<&str>) -> String {
        let mut lines = vec![ManifestLine::Header {
            generator: &self.generator,
            config: &self.config,
            fingerprint,
        }];
        lines.extend(self.entries.iter().map(ManifestLine::Entry));
        lines.push(ManifestLine::Summary {
            counts: &self.counts,
            rejections: &self.rejections,
            pairs: self.total().accepted,
        });
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Pairs as JSONL, optionally preceded by a `{"_meta": ...}` line.
pub fn pairs_to_jsonl(pairs: &[PreferencePair], meta: Option<&serde_json::Value>) -> String {
    let mut out = String::new();
    if let Some(m) = meta {
        out.push_str(&serde_json::json!({ "_meta": m }).to_string());
        out.push('\n');
    }
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Generate, validate and pair counterfactual rewrites for every record and
/// configured kind. Backend failures are recorded and skipped.
pub fn build_preference_pairs(
    split: &DatasetSplit<MitigationRecord>,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    config: &PrefgenConfig,
    exec: Exec,
) -> Result<(Vec<PreferencePair>, GenerationManifest), TemplateError> {
    struct Job<'a> {
        record: &'a MitigationRecord,
        kind: CounterfactualKind,
        sample: u32,
        request: ChatRequest,
        prompt: &'a str,
    }
    let prompts: Vec<String> = split
        .records()
        .iter()
        .map(|r| pair_prompt(templates, &r.biased_text, config.prompt_style))
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for (record, prompt) in split.records().iter().zip(&prompts) {
        for &kind in &config.kinds {
            let gen_prompt = render_counterfactual_prompt(templates, record, kind)?;
            for sample in 0..config.samples_per_kind {
                jobs.push(Job {
                    record,
                    kind,
                    sample,
                    request: config.request(gen_prompt.clone(), sample),
                    prompt,
                });
            }
        }
    }
    let results = par::map_bounded(exec, config.max_inflight, &jobs, |job| {
        let response = backend.complete(&job.request);
        let mut entry = GenerationEntry {
            record_id: job.record.id.clone(),
            kind: job.kind,
            sample: job.sample,
            raw: None,
            accepted: false,
            reason: None,
            error: None,
        };
        let text = match response {
            Ok(r) if r.finish_reason != FinishReason::Error => r.text().to_string(),
            Ok(_) => {
                entry.error = Some("backend reported an error finish".into());
                return (entry, None);
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                return (entry, None);
            }
        };
        entry.raw = Some(text.clone());
        let pair = PreferencePair {
            prompt: job.prompt.to_string(),
            chosen: job.record.edited_text.clone(),
            rejected: text.trim().to_string(),
            kind: Some(job.kind),
            source_id: Some(job.record.id.clone()),
        };
        match validate_pair(&pair, &job.record.biased_text, config.length_ratio_cap) {
            Ok(()) => {
                entry.accepted = true;
                (entry, Some(pair))
            }
            Err(reason) => {
                entry.reason = Some(reason);
                (entry, None)
            }
        }
    });
    let mut pairs = Vec::new();
    let mut entries = Vec::with_capacity(results.len());
    for (e, p) in results {
        entries.push(e);
        pairs.extend(p);
    }
    let manifest = GenerationManifest::tally(backend.identity(), config.clone(), entries);
    Ok((pairs, manifest))
}
