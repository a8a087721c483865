//! Preference optimisation on the toy model.
//!
//! DPO loss for one pair, with `d(y) = log pi(y|x) - log pi_ref(y|x)`:
//!
//! ```text
//! loss = -log sigmoid(beta * (d(y_w) - d(y_l)))
//! ```
//!
//! Pairwise reward-model loss: `-log sigmoid(r([x, y_w]) - r([x, y_l]))`.
//!
//! Both are averaged over a batch. Gradients are analytic and are checked
//! against central finite differences in the tests. Training is plain
//! gradient descent with global-norm clipping and linear learning-rate
//! warmup, shuffled per epoch from an explicit seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::prefgen::CounterfactualKind;
use crate::toylm::{checkpoint, softmax, LanguageModel, LmError, TokenId, TokenSeq, ToyLm, Vocab};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("policy and reference (or reward model) vocabularies differ")]
    VocabMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid preference pair `{id}`: {reason}")]
    InvalidPair { id: String, reason: String },
    #[error("non-finite loss {loss} at step {step} (pair `{pair_id}`)")]
    NonFiniteLoss {
        step: usize,
        pair_id: String,
        loss: f64,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `-log sigmoid(z)`, computed without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// DPO loss of a single pair as a function of its log-ratio margin.
pub fn dpo_pair_loss(margin: f64, beta: f64) -> f64 {
    neg_log_sigmoid(beta * margin)
}

/// `d dpo_pair_loss / d margin`.
pub fn dpo_pair_dloss(margin: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * margin)
}

/// A prompt with a preferred and a dispreferred completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CounterfactualKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl PreferencePair {
    pub fn new(
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Self {
        Self {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            kind: None,
            source_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err("prompt, chosen and rejected must be nonempty".into());
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected are identical".into());
        }
        Ok(())
    }

    pub fn texts(&self) -> [&str; 3] {
        [&self.prompt, &self.chosen, &self.rejected]
    }
}

/// Read a preference JSONL file (`prompt`, `chosen`, `rejected`, `kind`,
/// `source_id`). Lines holding a `_meta` object are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, AlignError> {
    let io = |source| AlignError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| AlignError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if value.get("_meta").is_some() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_value(value).map_err(|e| AlignError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        pair.validate().map_err(|message| AlignError::Parse {
            line: i + 1,
            message,
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// A pair tokenized for training. Completions carry a trailing EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub id: String,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

impl EncodedPair {
    pub fn new(
        id: impl Into<String>,
        prompt: TokenSeq,
        chosen: TokenSeq,
        rejected: TokenSeq,
    ) -> Self {
        Self {
            id: id.into(),
            prompt,
            chosen,
            rejected,
        }
    }
}

/// Tokenize pairs; ids are `source_id` when present, else `#<index>`.
pub fn encode_pairs(
    pairs: &[PreferencePair],
    vocab: &Vocab,
) -> Result<Vec<EncodedPair>, AlignError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let id = match (&p.source_id, p.kind) {
                (Some(s), Some(k)) => format!("{s}/{}", k.code()),
                (Some(s), None) => s.clone(),
                _ => format!("#{i}"),
            };
            p.validate().map_err(|reason| AlignError::InvalidPair {
                id: id.clone(),
                reason,
            })?;
            Ok(EncodedPair {
                prompt: vocab.encode(&p.prompt)?,
                chosen: vocab.encode(&p.chosen)?.with_eos(vocab),
                rejected: vocab.encode(&p.rejected)?.with_eos(vocab),
                id,
            })
        })
        .collect()
}

fn check_tokens(vocab: &Vocab, batch: &[EncodedPair]) -> Result<(), AlignError> {
    for p in batch {
        for t in p
            .prompt
            .iter()
            .chain(p.chosen.iter())
            .chain(p.rejected.iter())
        {
            vocab.check(*t)?;
        }
    }
    Ok(())
}

fn check_batch<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    batch: &[EncodedPair],
) -> Result<(), AlignError> {
    if policy.vocab() != reference.vocab() {
        return Err(AlignError::VocabMismatch);
    }
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    check_tokens(policy.vocab(), batch)
}

/// `(log pi(y_w|x) - log pi_ref(y_w|x)) - (log pi(y_l|x) - log pi_ref(y_l|x))`.
pub fn log_ratio_margin<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    pair: &EncodedPair,
) -> f64 {
    let dw = policy.seq_logprob(&pair.prompt, &pair.chosen)
        - reference.seq_logprob(&pair.prompt, &pair.chosen);
    let dl = policy.seq_logprob(&pair.prompt, &pair.rejected)
        - reference.seq_logprob(&pair.prompt, &pair.rejected);
    dw - dl
}

/// `log pi(y_w|x) - log pi(y_l|x)` for each pair.
pub fn preference_margins<M: LanguageModel + ?Sized>(model: &M, pairs: &[EncodedPair]) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| {
            model.seq_logprob(&p.prompt, &p.chosen) - model.seq_logprob(&p.prompt, &p.rejected)
        })
        .collect()
}

pub fn dpo_loss<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    batch: &[EncodedPair],
    beta: f64,
) -> Result<f64, AlignError> {
    check_batch(policy, reference, batch)?;
    let losses = par::map(Exec::default(), batch, |p| {
        dpo_pair_loss(log_ratio_margin(policy, reference, p), beta)
    });
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Per-pair DPO losses, in batch order.
pub fn dpo_pair_losses<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    batch: &[EncodedPair],
    beta: f64,
) -> Result<Vec<f64>, AlignError> {
    check_batch(policy, reference, batch)?;
    Ok(par::map(Exec::default(), batch, |p| {
        dpo_pair_loss(log_ratio_margin(policy, reference, p), beta)
    }))
}

/// Mean DPO loss and its gradient with respect to the policy parameters.
/// The reference model receives no gradient.
pub fn dpo_loss_and_grad<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    batch: &[EncodedPair],
    beta: f64,
    exec: Exec,
) -> Result<(f64, Vec<f64>), AlignError> {
    check_batch(policy, reference, batch)?;
    let n = batch.len() as f64;
    let per_pair = par::map(exec, batch, |p| {
        let margin = log_ratio_margin(policy, reference, p);
        let coeff = dpo_pair_dloss(margin, beta) / n;
        let mut g = vec![0.0; policy.num_params()];
        policy.accumulate_logprob_grad(&p.prompt, &p.chosen, coeff, &mut g);
        policy.accumulate_logprob_grad(&p.prompt, &p.rejected, -coeff, &mut g);
        (dpo_pair_loss(margin, beta), g)
    });
    Ok(reduce(per_pair, policy.num_params(), n))
}

pub fn dpo_grad<M: LanguageModel + ?Sized>(
    policy: &M,
    reference: &M,
    batch: &[EncodedPair],
    beta: f64,
) -> Result<Vec<f64>, AlignError> {
    dpo_loss_and_grad(policy, reference, batch, beta, Exec::default()).map(|(_, g)| g)
}

/// Ordered sum of per-item (loss, grad) contributions. Losses are averaged;
/// gradients are already scaled by the caller.
fn reduce(per_item: Vec<(f64, Vec<f64>)>, dim: usize, n: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in per_item {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss / n, grad)
}

/// Negative mean log-likelihood of the chosen completions and its gradient.
pub fn sft_loss_and_grad<M: LanguageModel + ?Sized>(
    model: &M,
    batch: &[EncodedPair],
    exec: Exec,
) -> Result<(f64, Vec<f64>), AlignError> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    check_tokens(model.vocab(), batch)?;
    let n = batch.len() as f64;
    let per_pair = par::map(exec, batch, |p| {
        let mut g = vec![0.0; model.num_params()];
        let lp = model.accumulate_logprob_grad(&p.prompt, &p.chosen, -1.0 / n, &mut g);
        (-lp, g)
    });
    Ok(reduce(per_pair, model.num_params(), n))
}

/// Optimiser settings shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global L2 norm cap; `f64::INFINITY` disables clipping.
    pub max_grad_norm: f64,
    /// Fraction of total steps over which the learning rate ramps linearly.
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    /// DPO/RM column of the published hyperparameters, at batch size 1.
    fn default() -> Self {
        Self {
            learning_rate: 8e-6,
            epochs: 2,
            batch_size: 1,
            max_grad_norm: 0.3,
            warmup_ratio: 0.03,
            seed: 42,
        }
    }
}

impl OptimConfig {
    /// SFT column of the published hyperparameters.
    pub fn sft_default() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: &str| Err(AlignError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_items)
    }

    pub fn warmup_steps(&self, n_items: usize) -> usize {
        (self.warmup_ratio * self.total_steps(n_items) as f64).ceil() as usize
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize, warmup_steps: usize) -> f64 {
        if warmup_steps == 0 || step >= warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    #[serde(flatten)]
    pub optim: OptimConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            optim: OptimConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(AlignError::Config(
                "beta must be positive and finite".into(),
            ));
        }
        self.optim.validate()
    }
}

pub type RmConfig = OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Mean loss over all items before the first update.
    pub initial_loss: f64,
    /// Mean loss over all items after the last update.
    pub final_loss: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub points: Vec<CurvePoint>,
    pub summary: TrainSummary,
}

impl TrainCurve {
    /// `step,loss,grad_norm` rows after an optional `# ...` comment header.
    pub fn to_csv(&self, header_comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = header_comment {
            for line in c.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        out.push_str("step,loss,grad_norm\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:?},{:?}", p.step, p.loss, p.grad_norm);
        }
        out
    }
}

fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clipped gradient descent over `n_items` training items.
///
/// `loss_grad(params, idx)` returns the mean loss of the batch `idx` and its
/// gradient; `full_loss(params)` evaluates the whole set for the summary.
/// On a non-finite batch loss, `culprit(params, idx)` names the offending item.
fn gradient_descent<P, LG, FL, CU>(
    params: &mut P,
    n_items: usize,
    config: &OptimConfig,
    loss_grad: LG,
    full_loss: FL,
    culprit: CU,
    get: fn(&mut P) -> &mut [f64],
) -> Result<TrainCurve, AlignError>
where
    LG: Fn(&P, &[usize]) -> Result<(f64, Vec<f64>), AlignError>,
    FL: Fn(&P) -> Result<f64, AlignError>,
    CU: Fn(&P, &[usize]) -> String,
{
    config.validate()?;
    if n_items == 0 {
        return Err(AlignError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let warmup = config.warmup_steps(n_items);
    let initial_loss = full_loss(params)?;
    let mut points = Vec::with_capacity(config.total_steps(n_items));
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grad) = loss_grad(params, batch)?;
            if !loss.is_finite() {
                return Err(AlignError::NonFiniteLoss {
                    step,
                    pair_id: culprit(params, batch),
                    loss,
                });
            }
            let norm = global_norm(&grad);
            if norm > config.max_grad_norm {
                let s = config.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            let lr = config.lr_at(step, warmup);
            for (p, g) in get(params).iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            points.push(CurvePoint {
                step,
                loss,
                grad_norm: norm,
            });
            step += 1;
        }
    }
    let final_loss = full_loss(params)?;
    Ok(TrainCurve {
        points,
        summary: TrainSummary {
            initial_loss,
            final_loss,
            steps: step,
            seed: config.seed,
        },
    })
}

fn gather(pairs: &[EncodedPair], idx: &[usize]) -> Vec<EncodedPair> {
    idx.iter().map(|&i| pairs[i].clone()).collect()
}

fn lm_params<M: LanguageModel>(m: &mut M) -> &mut [f64] {
    m.params_mut()
}

/// DPO training. The reference model is a snapshot of `policy` taken before
/// the first step.
pub fn train_dpo<M: LanguageModel + Clone>(
    policy: M,
    pairs: &[EncodedPair],
    config: &DpoConfig,
) -> Result<(M, TrainCurve), AlignError> {
    train_dpo_with(policy, pairs, config, Exec::default())
}

pub fn train_dpo_with<M: LanguageModel + Clone>(
    policy: M,
    pairs: &[EncodedPair],
    config: &DpoConfig,
    exec: Exec,
) -> Result<(M, TrainCurve), AlignError> {
    config.validate()?;
    let reference = policy.clone();
    check_batch(&policy, &reference, pairs)?;
    let beta = config.beta;
    let mut policy = policy;
    let curve = gradient_descent(
        &mut policy,
        pairs.len(),
        &config.optim,
        |m, idx| dpo_loss_and_grad(m, &reference, &gather(pairs, idx), beta, exec),
        |m| dpo_loss(m, &reference, pairs, beta),
        |m, idx| {
            first_non_finite(idx, pairs, |p| {
                dpo_pair_loss(log_ratio_margin(m, &reference, p), beta)
            })
        },
        lm_params::<M>,
    )?;
    Ok((policy, curve))
}

/// Maximum-likelihood warm start on the chosen completions.
pub fn train_sft<M: LanguageModel + Clone>(
    model: M,
    pairs: &[EncodedPair],
    config: &OptimConfig,
) -> Result<(M, TrainCurve), AlignError> {
    let mut model = model;
    let curve = gradient_descent(
        &mut model,
        pairs.len(),
        config,
        |m, idx| sft_loss_and_grad(m, &gather(pairs, idx), Exec::default()),
        |m| sft_loss_and_grad(m, pairs, Exec::default()).map(|(l, _)| l),
        |m, idx| first_non_finite(idx, pairs, |p| -m.seq_logprob(&p.prompt, &p.chosen)),
        lm_params::<M>,
    )?;
    Ok((model, curve))
}

fn first_non_finite(
    idx: &[usize],
    pairs: &[EncodedPair],
    loss: impl Fn(&EncodedPair) -> f64,
) -> String {
    idx.iter()
        .map(|&i| &pairs[i])
        .find(|p| !loss(p).is_finite())
        .or_else(|| idx.first().map(|&i| &pairs[i]))
        .map(|p| p.id.clone())
        .unwrap_or_default()
}

/// Scalar reward over a (prompt, completion) pair.
///
/// Parameters, flattened in this order:
/// - `backbone`: a `V x V` table shaped like [`ToyLm`]; `softmax(row(prev))`
///   is the feature vector `h_t` at each completion position;
/// - `context_head` (`V`): linear projection of `h_t`;
/// - `token_head` (`V`): per-token weight of the emitted token.
///
/// `r = mean_t (context_head . h_t + token_head[y_t])` over completion
/// positions, and 0 for an empty completion. With both heads at zero every
/// reward is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    vocab: Vocab,
    params: Vec<f64>,
}

impl RewardModel {
    /// Uniform backbone and zero head.
    pub fn zeroed(vocab: Vocab) -> Self {
        let v = vocab.len();
        Self {
            vocab,
            params: vec![0.0; v * v + 2 * v],
        }
    }

    /// Backbone copied from a language model, zero head.
    pub fn from_backbone(lm: &ToyLm) -> Self {
        let mut rm = Self::zeroed(lm.vocab().clone());
        let n = lm.params().len();
        rm.params[..n].copy_from_slice(lm.params());
        rm
    }

    pub fn from_params(vocab: Vocab, params: Vec<f64>) -> Result<Self, AlignError> {
        let v = vocab.len();
        let expected = v * v + 2 * v;
        if params.len() != expected {
            return Err(LmError::ParamCount {
                expected,
                found: params.len(),
            }
            .into());
        }
        if let Some(i) = params.iter().position(|x| !x.is_finite()) {
            return Err(LmError::NonFinite(i).into());
        }
        Ok(Self { vocab, params })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn v(&self) -> usize {
        self.vocab.len()
    }

    fn backbone_row(&self, prev: TokenId) -> &[f64] {
        let v = self.v();
        &self.params[prev.index() * v..(prev.index() + 1) * v]
    }

    pub fn context_head(&self) -> &[f64] {
        let v = self.v();
        &self.params[v * v..v * v + v]
    }

    pub fn token_head(&self) -> &[f64] {
        let v = self.v();
        &self.params[v * v + v..]
    }

    pub fn reward(&self, prompt: &[TokenId], completion: &[TokenId]) -> f64 {
        if completion.is_empty() {
            return 0.0;
        }
        let (ctx, tok) = (self.context_head(), self.token_head());
        let mut prev = prompt.last().copied().unwrap_or(self.vocab.bos());
        let mut total = 0.0;
        for &t in completion {
            let h = softmax(self.backbone_row(prev));
            total += dot(ctx, &h) + tok[t.index()];
            prev = t;
        }
        total / completion.len() as f64
    }

    /// Adds `scale * dr/dparams` into `grad`; returns `r`.
    pub fn accumulate_reward_grad(
        &self,
        prompt: &[TokenId],
        completion: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        if completion.is_empty() {
            return 0.0;
        }
        let v = self.v();
        let w = scale / completion.len() as f64;
        let ctx = self.context_head().to_vec();
        let tok = self.token_head();
        let mut prev = prompt.last().copied().unwrap_or(self.vocab.bos());
        let mut total = 0.0;
        for &t in completion {
            let h = softmax(self.backbone_row(prev));
            let ch = dot(&ctx, &h);
            total += ch + tok[t.index()];
            // d(ctx . h)/d logit_k = h_k (ctx_k - ctx . h)
            let row = &mut grad[prev.index() * v..(prev.index() + 1) * v];
            for k in 0..v {
                row[k] += w * h[k] * (ctx[k] - ch);
            }
            for k in 0..v {
                grad[v * v + k] += w * h[k];
            }
            grad[v * v + v + t.index()] += w;
            prev = t;
        }
        total / completion.len() as f64
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<(), AlignError> {
        checkpoint::write(
            path,
            checkpoint::Kind::RewardModel,
            meta,
            &self.vocab,
            &self.params,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), AlignError> {
        let ck = checkpoint::read(path, checkpoint::Kind::RewardModel)?;
        Ok((Self::from_params(ck.vocab, ck.params)?, ck.meta))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rm_margin(rm: &RewardModel, pair: &EncodedPair) -> f64 {
    rm.reward(&pair.prompt, &pair.chosen) - rm.reward(&pair.prompt, &pair.rejected)
}

/// `-log sigmoid(r([x, y_w]) - r([x, y_l]))`.
pub fn rm_loss(rm: &RewardModel, pair: &EncodedPair) -> Result<f64, AlignError> {
    check_tokens(rm.vocab(), std::slice::from_ref(pair))?;
    Ok(neg_log_sigmoid(rm_margin(rm, pair)))
}

pub fn rm_loss_and_grad(
    rm: &RewardModel,
    batch: &[EncodedPair],
    exec: Exec,
) -> Result<(f64, Vec<f64>), AlignError> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    check_tokens(rm.vocab(), batch)?;
    let n = batch.len() as f64;
    let dim = rm.params().len();
    let per_pair = par::map(exec, batch, |p| {
        let margin = rm_margin(rm, p);
        let coeff = -sigmoid(-margin) / n;
        let mut g = vec![0.0; dim];
        rm.accumulate_reward_grad(&p.prompt, &p.chosen, coeff, &mut g);
        rm.accumulate_reward_grad(&p.prompt, &p.rejected, -coeff, &mut g);
        (neg_log_sigmoid(margin), g)
    });
    Ok(reduce(per_pair, dim, n))
}

/// Fraction of pairs with `r(y_w) > r(y_l)`.
pub fn ranking_accuracy(rm: &RewardModel, pairs: &[EncodedPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs.iter().filter(|p| rm_margin(rm, p) > 0.0).count();
    correct as f64 / pairs.len() as f64
}

fn rm_params(rm: &mut RewardModel) -> &mut [f64] {
    rm.params_mut()
}

pub fn train_rm(
    init: RewardModel,
    pairs: &[EncodedPair],
    config: &RmConfig,
) -> Result<(RewardModel, TrainCurve), AlignError> {
    train_rm_with(init, pairs, config, Exec::default())
}

pub fn train_rm_with(
    init: RewardModel,
    pairs: &[EncodedPair],
    config: &RmConfig,
    exec: Exec,
) -> Result<(RewardModel, TrainCurve), AlignError> {
    check_tokens(init.vocab(), pairs)?;
    let mut rm = init;
    let curve = gradient_descent(
        &mut rm,
        pairs.len(),
        config,
        |m, idx| rm_loss_and_grad(m, &gather(pairs, idx), exec),
        |m| rm_loss_and_grad(m, pairs, exec).map(|(l, _)| l),
        |m, idx| first_non_finite(idx, pairs, |p| neg_log_sigmoid(rm_margin(m, p))),
        rm_params,
    )?;
    Ok((rm, curve))
}

/// Denominator floor for [`finite_diff_check`]'s relative error, so
/// coordinates whose true gradient is ~0 are compared absolutely.
pub const FD_REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare `analytic` with central differences of `loss` at `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn finite_diff_check<F>(loss: F, params: &[f64], analytic: &[f64], step: f64) -> FdReport
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let numeric = par::map_range(Exec::default(), params.len(), |i| {
        let mut p = params.to_vec();
        p[i] = params[i] + step;
        let up = loss(&p);
        p[i] = params[i] - step;
        let down = loss(&p);
        (up - down) / (2.0 * step)
    });
    let mut worst = FdReport {
        max_rel_error: 0.0,
        coord: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FD_REL_FLOOR);
        if rel > worst.max_rel_error {
            worst = FdReport {
                max_rel_error: rel,
                coord: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn vocab() -> Vocab {
        Vocab::from_texts(["abcde"])
    }

    fn pair(v: &Vocab, x: &str, w: &str, l: &str) -> EncodedPair {
        EncodedPair::new(
            format!("{x}|{w}|{l}"),
            v.encode(x).unwrap(),
            v.encode(w).unwrap().with_eos(v),
            v.encode(l).unwrap().with_eos(v),
        )
    }

    fn batch(v: &Vocab) -> Vec<EncodedPair> {
        vec![
            pair(v, "ab", "cd", "ee"),
            pair(v, "", "a", "b"),
            pair(v, "e", "abc", "cba"),
        ]
    }

    #[test]
    fn scalar_loss_values() {
        assert!((neg_log_sigmoid(0.0) - LN_2).abs() < 1e-15);
        assert!((dpo_pair_loss(1.0, 1.0) - 0.313262).abs() < 1e-6);
        assert!((dpo_pair_loss(1.0, 2.0) - 0.126928).abs() < 1e-6);
        assert!((neg_log_sigmoid(-2.0) - 2.126928).abs() < 1e-6);
        assert!(neg_log_sigmoid(-800.0).is_finite());
        assert!(neg_log_sigmoid(800.0) >= 0.0);
    }

    #[test]
    fn slope_at_zero_is_half_beta() {
        for beta in [0.05, 0.1, 1.0, 3.0] {
            assert!((dpo_pair_dloss(0.0, beta).abs() - beta / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_policy_and_reference_give_ln2() {
        let v = vocab();
        let m = ToyLm::random(v.clone(), 1, 2.0);
        for beta in [0.01, 0.1, 5.0] {
            assert_eq!(dpo_loss(&m, &m, &batch(&v), beta).unwrap(), LN_2);
        }
    }

    #[test]
    fn designed_margin_of_one() {
        // Policy differs from the uniform reference only in the BOS row, so
        // only the first completion token moves. Choose logits so the
        // log-ratio margin is exactly 1.
        let v = Vocab::from_texts(["ab"]);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let reference = ToyLm::uniform(v.clone());
        let mut policy = reference.clone();
        policy.set_logit(v.bos(), a, 0.5);
        policy.set_logit(v.bos(), b, -0.5);
        let p = EncodedPair::new(
            "p",
            TokenSeq::default(),
            TokenSeq(vec![a]),
            TokenSeq(vec![b]),
        );
        let margin = log_ratio_margin(&policy, &reference, &p);
        assert!((margin - 1.0).abs() < 1e-12);
        let l1 = dpo_loss(&policy, &reference, std::slice::from_ref(&p), 1.0).unwrap();
        let l2 = dpo_loss(&policy, &reference, &[p], 2.0).unwrap();
        assert!((l1 - 0.313262).abs() < 1e-6);
        assert!((l2 - 0.126928).abs() < 1e-6);
        assert!(l2 < l1);
    }

    #[test]
    fn vocab_mismatch_and_empty_batch() {
        let v = vocab();
        let m = ToyLm::uniform(v.clone());
        let other = ToyLm::uniform(Vocab::from_texts(["xyz"]));
        assert!(matches!(
            dpo_loss(&m, &other, &batch(&v), 0.1),
            Err(AlignError::VocabMismatch)
        ));
        assert!(matches!(
            dpo_loss(&m, &m, &[], 0.1),
            Err(AlignError::EmptyBatch)
        ));
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let v = vocab();
        let reference = ToyLm::random(v.clone(), 2, 1.0);
        let policy = ToyLm::random(v.clone(), 3, 1.0);
        let b = batch(&v);
        let beta = 0.7;
        let (_, g) = dpo_loss_and_grad(&policy, &reference, &b, beta, Exec::Sequential).unwrap();
        let report = finite_diff_check(
            |p| {
                let m = ToyLm::from_logits(v.clone(), p.to_vec()).unwrap();
                dpo_loss(&m, &reference, &b, beta).unwrap()
            },
            policy.params(),
            &g,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dpo_gradient_sign_at_reference() {
        let v = vocab();
        let m = ToyLm::random(v.clone(), 4, 1.0);
        let b = vec![pair(&v, "a", "bc", "de")];
        let g = dpo_grad(&m, &m, &b, 0.5).unwrap();
        // A small step against the gradient raises log pi(y_w) and lowers log pi(y_l).
        let mut stepped = m.clone();
        for (p, gi) in stepped.params_mut().iter_mut().zip(&g) {
            *p -= 1e-3 * gi;
        }
        let p = &b[0];
        assert!(stepped.seq_logprob(&p.prompt, &p.chosen) > m.seq_logprob(&p.prompt, &p.chosen));
        assert!(
            stepped.seq_logprob(&p.prompt, &p.rejected) < m.seq_logprob(&p.prompt, &p.rejected)
        );
    }

    #[test]
    fn dpo_loss_invariant_to_shared_row_shift() {
        let v = vocab();
        let mut policy = ToyLm::random(v.clone(), 5, 1.0);
        let mut reference = ToyLm::random(v.clone(), 6, 1.0);
        let b = batch(&v);
        let before = dpo_loss(&policy, &reference, &b, 0.3).unwrap();
        for r in 0..v.len() {
            let c = r as f64 * 1.7 - 2.0;
            policy
                .row_mut(TokenId(r as u32))
                .iter_mut()
                .for_each(|x| *x += c);
            reference
                .row_mut(TokenId(r as u32))
                .iter_mut()
                .for_each(|x| *x -= 2.0 * c);
        }
        let after = dpo_loss(&policy, &reference, &b, 0.3).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn sequential_and_parallel_gradients_are_bit_identical() {
        let v = vocab();
        let reference = ToyLm::random(v.clone(), 8, 1.0);
        let policy = ToyLm::random(v.clone(), 9, 1.0);
        let b: Vec<_> = (0..40).flat_map(|_| batch(&v)).collect();
        let s = dpo_loss_and_grad(&policy, &reference, &b, 0.2, Exec::Sequential).unwrap();
        let p = dpo_loss_and_grad(&policy, &reference, &b, 0.2, Exec::Parallel).unwrap();
        assert_eq!(s.0.to_bits(), p.0.to_bits());
        assert!(s
            .1
            .iter()
            .zip(&p.1)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_head_reward_model_is_indifferent() {
        let v = vocab();
        let lm = ToyLm::random(v.clone(), 3, 2.0);
        let rm = RewardModel::from_backbone(&lm);
        for p in batch(&v) {
            assert_eq!(rm_loss(&rm, &p).unwrap(), LN_2);
        }
    }

    #[test]
    fn rm_loss_values_and_shift_invariance() {
        let v = Vocab::from_texts(["ab"]);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let mut rm = RewardModel::zeroed(v.clone());
        let n = v.len();
        rm.params_mut()[n * n + n + a.index()] = 2.0;
        let p = EncodedPair::new(
            "p",
            TokenSeq::default(),
            TokenSeq(vec![a]),
            TokenSeq(vec![b]),
        );
        assert!((rm_loss(&rm, &p).unwrap() - 0.126928).abs() < 1e-6);
        let swapped = EncodedPair::new(
            "q",
            TokenSeq::default(),
            TokenSeq(vec![b]),
            TokenSeq(vec![a]),
        );
        assert!((rm_loss(&rm, &swapped).unwrap() - 2.126928).abs() < 1e-6);
        // Adding a constant to every token weight shifts every reward equally.
        let before = rm_loss(&rm, &p).unwrap();
        for k in 0..n {
            rm.params_mut()[n * n + n + k] += 3.25;
        }
        assert!((rm_loss(&rm, &p).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn rm_gradient_matches_finite_differences() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = RewardModel::zeroed(v.clone()).params().len();
        let params: Vec<f64> = (0..n)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let rm = RewardModel::from_params(v.clone(), params.clone()).unwrap();
        let b = batch(&v);
        let (_, g) = rm_loss_and_grad(&rm, &b, Exec::Sequential).unwrap();
        let report = finite_diff_check(
            |p| {
                let m = RewardModel::from_params(v.clone(), p.to_vec()).unwrap();
                rm_loss_and_grad(&m, &b, Exec::Sequential).unwrap().0
            },
            &params,
            &g,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn finite_diff_exact_for_quadratic() {
        let params = vec![0.3, -1.2, 2.5];
        let f = |p: &[f64]| 3.0 * p[0] * p[0] - p[0] * p[1] + 0.5 * p[2] * p[2] + p[1];
        let grad = vec![6.0 * 0.3 + 1.2, -0.3 + 1.0, 2.5];
        let r = finite_diff_check(f, &params, &grad, 1e-3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn warmup_schedule() {
        let c = OptimConfig {
            learning_rate: 1.0,
            epochs: 1,
            batch_size: 1,
            warmup_ratio: 0.25,
            ..OptimConfig::default()
        };
        let w = c.warmup_steps(8);
        assert_eq!(w, 2);
        assert_eq!(c.lr_at(0, w), 0.5);
        assert_eq!(c.lr_at(1, w), 1.0);
        assert_eq!(c.lr_at(5, w), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = DpoConfig::default();
        assert!(c.validate().is_ok());
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = DpoConfig::default();
        c.optim.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_pair_id() {
        let v = vocab();
        let m = ToyLm::uniform(v.clone());
        let b = batch(&v);
        let c = DpoConfig {
            beta: f64::MAX,
            optim: OptimConfig {
                learning_rate: 1e300,
                max_grad_norm: f64::INFINITY,
                epochs: 3,
                ..OptimConfig::default()
            },
        };
        match train_dpo(m, &b, &c) {
            Err(AlignError::NonFiniteLoss { pair_id, .. }) => {
                assert!(b.iter().any(|p| p.id == pair_id), "{pair_id}");
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn training_is_seed_deterministic_and_descends() {
        let v = vocab();
        let b = batch(&v);
        let c = DpoConfig {
            beta: 0.5,
            optim: OptimConfig {
                learning_rate: 0.5,
                epochs: 20,
                max_grad_norm: 1.0,
                ..OptimConfig::default()
            },
        };
        let (m1, c1) = train_dpo(ToyLm::uniform(v.clone()), &b, &c).unwrap();
        let (m2, c2) = train_dpo(ToyLm::uniform(v.clone()), &b, &c).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        assert_eq!(c1.summary.initial_loss, LN_2);
        assert!(c1.summary.final_loss < LN_2);
        let csv = c1.to_csv(Some("fingerprint=abc"));
        assert!(csv.starts_with("# fingerprint=abc\nstep,loss,grad_norm\n0,"));
        assert_eq!(csv.lines().count(), 2 + c1.points.len());
    }

    #[test]
    fn pairs_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let mut p = PreferencePair::new("x", "good", "bad");
        p.kind = Some(CounterfactualKind::BiasRemovedMeaningDistorted);
        p.source_id = Some("r1".into());
        let text = format!(
            "{{\"_meta\":{{\"seed\":1}}}}\n{}\n{}\n",
            serde_json::to_string(&p).unwrap(),
            serde_json::to_string(&PreferencePair::new("y", "a", "b")).unwrap()
        );
        std::fs::write(&path, text).unwrap();
        let pairs = load_pairs(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], p);
        let enc = encode_pairs(
            &pairs,
            &Vocab::from_texts(pairs.iter().flat_map(|p| p.texts())),
        )
        .unwrap();
        assert_eq!(enc[0].id, "r1/ii");
        assert_eq!(enc[1].id, "#1");
    }
}
