//! Reward-guided decoding.
//!
//! At each step every candidate token `v` is scored as
//! `total = base(v) + w * reward(v)`, where `base` is the language model's
//! log-likelihood of `v` given the context (or its probability under
//! [`BaseScale::Prob`]) and `reward` is the reward model's score of the
//! partial completion extended by `v`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::RewardModel;
use crate::par::{self, Exec};
use crate::toylm::{argmax, sample_index, GenerateMode, LanguageModel, LmError, TokenId, TokenSeq};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("language model and reward model vocabularies differ")]
    VocabMismatch,
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaseScale {
    #[default]
    Log,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedDecodeConfig {
    /// Reward weight; 0 reduces to plain decoding.
    pub w: f64,
    /// Restrict candidates to the k most likely tokens; `None` scores the
    /// whole vocabulary. Serialized as 0 when `None`.
    #[serde(with = "topk_serde")]
    pub candidate_topk: Option<usize>,
    pub max_len: usize,
    pub mode: GenerateMode,
    pub base_scale: BaseScale,
}

impl Default for GuidedDecodeConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            candidate_topk: Some(10),
            max_len: 64,
            mode: GenerateMode::Greedy,
            base_scale: BaseScale::Log,
        }
    }
}

impl GuidedDecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(DecodeError::Config(
                "w must be nonnegative and finite".into(),
            ));
        }
        if self.candidate_topk == Some(0) {
            return Err(DecodeError::Config(
                "candidate_topk must be at least 1".into(),
            ));
        }
        if self.max_len < 1 {
            return Err(DecodeError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedScore {
    pub token: TokenId,
    pub base: f64,
    pub reward: f64,
    /// `base + w * reward`.
    pub total: f64,
}

/// Candidate token ids for one step: all non-BOS tokens, or the top-k of them
/// by base log-probability (ties to the lower id), returned in id order.
fn candidates(logprobs: &[f64], bos: TokenId, topk: Option<usize>) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..logprobs.len() as u32)
        .map(TokenId)
        .filter(|&t| t != bos)
        .collect();
    if let Some(k) = topk {
        if k < ids.len() {
            ids.sort_by(|a, b| {
                logprobs[b.index()]
                    .total_cmp(&logprobs[a.index()])
                    .then(a.cmp(b))
            });
            ids.truncate(k);
            ids.sort();
        }
    }
    ids
}

/// Score every candidate continuation of `prompt ++ generated`.
pub fn score_candidates<M: LanguageModel + ?Sized>(
    lm: &M,
    rm: &RewardModel,
    prompt: &[TokenId],
    generated: &[TokenId],
    config: &GuidedDecodeConfig,
) -> Result<Vec<GuidedScore>, DecodeError> {
    score_candidates_with(lm, rm, prompt, generated, config, Exec::default())
}

pub fn score_candidates_with<M: LanguageModel + ?Sized>(
    lm: &M,
    rm: &RewardModel,
    prompt: &[TokenId],
    generated: &[TokenId],
    config: &GuidedDecodeConfig,
    exec: Exec,
) -> Result<Vec<GuidedScore>, DecodeError> {
    if lm.vocab() != rm.vocab() {
        return Err(DecodeError::VocabMismatch);
    }
    let vocab = lm.vocab();
    for &t in prompt.iter().chain(generated) {
        vocab.check(t)?;
    }
    let mut context = Vec::with_capacity(prompt.len() + generated.len() + 1);
    context.push(vocab.bos());
    context.extend_from_slice(prompt);
    context.extend_from_slice(generated);
    let logprobs = lm.next_logprobs(&context);
    let cands = candidates(&logprobs, vocab.bos(), config.candidate_topk);
    let w = config.w;
    let scale = config.base_scale;
    Ok(par::map(exec, &cands, |&v| {
        let mut completion = generated.to_vec();
        completion.push(v);
        // The reward model is never consulted when its weight is zero.
        let reward = if w == 0.0 {
            0.0
        } else {
            rm.reward(prompt, &completion)
        };
        let base = match scale {
            BaseScale::Log => logprobs[v.index()],
            BaseScale::Prob => logprobs[v.index()].exp(),
        };
        GuidedScore {
            token: v,
            base,
            reward,
            total: base + w * reward,
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub scores: Vec<GuidedScore>,
    pub chosen: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedOutput {
    pub tokens: TokenSeq,
    pub trace: Vec<StepTrace>,
}

impl GuidedOutput {
    /// `step,token,symbol,base,reward,total,chosen` rows.
    pub fn trace_csv(&self, vocab: &crate::toylm::Vocab) -> String {
        let mut out = String::from("step,token,symbol,base,reward,total,chosen\n");
        for st in &self.trace {
            for s in &st.scores {
                let sym = vocab.symbol(s.token).unwrap_or("?");
                let _ = writeln!(
                    out,
                    "{},{},{},{:?},{:?},{:?},{}",
                    st.step,
                    s.token,
                    csv_field(sym),
                    s.base,
                    s.reward,
                    s.total,
                    u8::from(s.token == st.chosen)
                );
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Generate a completion token by token, choosing by guided score.
/// Greedy ties go to the lower token id.
pub fn guided_generate<M: LanguageModel + ?Sized>(
    lm: &M,
    rm: &RewardModel,
    prompt: &[TokenId],
    config: &GuidedDecodeConfig,
) -> Result<GuidedOutput, DecodeError> {
    guided_generate_with(lm, rm, prompt, config, Exec::default())
}

pub fn guided_generate_with<M: LanguageModel + ?Sized>(
    lm: &M,
    rm: &RewardModel,
    prompt: &[TokenId],
    config: &GuidedDecodeConfig,
    exec: Exec,
) -> Result<GuidedOutput, DecodeError> {
    config.validate()?;
    let eos = lm.vocab().eos();
    let mut rng = match config.mode {
        GenerateMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        GenerateMode::Greedy => None,
    };
    let mut generated = Vec::new();
    let mut trace = Vec::new();
    while generated.len() < config.max_len {
        let scores = score_candidates_with(lm, rm, prompt, &generated, config, exec)?;
        let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
        let pick = match rng.as_mut() {
            None => argmax(&totals),
            Some(rng) => Some(sample_index(&totals, rng)),
        };
        let chosen = scores[pick.expect("at least one candidate")].token;
        trace.push(StepTrace {
            step: generated.len(),
            scores,
            chosen,
        });
        generated.push(chosen);
        if chosen == eos {
            break;
        }
    }
    Ok(GuidedOutput {
        tokens: TokenSeq(generated),
        trace,
    })
}

mod topk_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let k = usize::deserialize(d)?;
        Ok((k > 0).then_some(k))
    }
}
