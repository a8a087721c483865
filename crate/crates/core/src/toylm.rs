//! A small differentiable autoregressive language model.
//!
//! [`ToyLm`] is a bigram model: a `V x V` logit table whose row `p` holds the
//! next-token logits after token `p`. Sequences are scored in the context
//! `[BOS] ++ prompt ++ completion`, so the first completion token is
//! conditioned on the last prompt token (or on BOS for an empty prompt).
//!
//! Training and decoding code is written against [`LanguageModel`], which only
//! asks for next-token log-probabilities, sequence log-probabilities and their
//! gradient with respect to a flat parameter vector.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    OutOfVocab { ch: char, offset: usize },
    #[error("token id {0} is outside the vocabulary")]
    BadToken(u32),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("vocabulary mismatch between models")]
    VocabMismatch,
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered, duplicate-free token symbols with reserved BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, LmError> {
        if tokens.len() < 2 {
            return Err(LmError::InvalidVocab("need at least BOS and EOS".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(LmError::InvalidVocab(format!("duplicate symbol {t:?}")));
            }
        }
        let bos = *index
            .get(BOS)
            .ok_or_else(|| LmError::InvalidVocab("missing BOS".into()))?;
        let eos = *index
            .get(EOS)
            .ok_or_else(|| LmError::InvalidVocab("missing EOS".into()))?;
        Ok(Self {
            tokens,
            index,
            bos,
            eos,
        })
    }

    /// BOS, EOS, then every distinct character of `texts` in code-point order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let tokens = [BOS.to_string(), EOS.to_string()]
            .into_iter()
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::new(tokens).expect("characters are distinct from the reserved symbols")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t == self.bos || t == self.eos
    }

    pub fn symbol(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t.index()).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn check(&self, t: TokenId) -> Result<(), LmError> {
        if t.index() < self.len() {
            Ok(())
        } else {
            Err(LmError::BadToken(t.0))
        }
    }

    /// Character-level encoding; out-of-vocabulary characters are errors.
    pub fn encode(&self, text: &str) -> Result<TokenSeq, LmError> {
        let mut buf = [0u8; 4];
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.index
                    .get(&*ch.encode_utf8(&mut buf))
                    .copied()
                    .ok_or(LmError::OutOfVocab { ch, offset })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSeq)
    }

    /// Inverse of [`Vocab::encode`]. BOS and EOS render as nothing.
    pub fn decode(&self, seq: &[TokenId]) -> Result<String, LmError> {
        let mut out = String::new();
        for &t in seq {
            self.check(t)?;
            if !self.is_special(t) {
                out.push_str(&self.tokens[t.index()]);
            }
        }
        Ok(out)
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn concat(&self, other: &[TokenId]) -> TokenSeq {
        let mut v = self.0.clone();
        v.extend_from_slice(other);
        TokenSeq(v)
    }

    pub fn with_eos(mut self, vocab: &Vocab) -> TokenSeq {
        self.0.push(vocab.eos());
        self
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(xs);
    xs.iter().map(|x| x - z).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some(b) if xs[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// The contract training and decoding code relies on.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocab;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Log-probabilities of every vocabulary token following `context`.
    /// `context` is the full history, starting with BOS.
    fn next_logprobs(&self, context: &[TokenId]) -> Vec<f64>;

    /// Adds `scale * d log p(completion | prompt) / d params` into `grad` and
    /// returns `log p(completion | prompt)`.
    fn accumulate_logprob_grad(
        &self,
        prompt: &[TokenId],
        completion: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `sum_t log p(completion[t] | BOS, prompt, completion[..t])`.
    fn seq_logprob(&self, prompt: &[TokenId], completion: &[TokenId]) -> f64 {
        let mut context = Vec::with_capacity(prompt.len() + completion.len() + 1);
        context.push(self.vocab().bos());
        context.extend_from_slice(prompt);
        let mut total = 0.0;
        for &t in completion {
            total += self.next_logprobs(&context)[t.index()];
            context.push(t);
        }
        total
    }

    /// Exact gradient of [`LanguageModel::seq_logprob`].
    fn seq_logprob_grad(&self, prompt: &[TokenId], completion: &[TokenId]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_logprob_grad(prompt, completion, 1.0, &mut g);
        g
    }

    fn same_vocab(&self, other: &dyn LanguageModel) -> bool {
        self.vocab() == other.vocab()
    }
}

/// Bigram logit table over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    vocab: Vocab,
    /// Row-major `V x V`; row = previous token, column = next token.
    logits: Vec<f64>,
}

impl ToyLm {
    /// All-zero logits: every conditional is uniform.
    pub fn uniform(vocab: Vocab) -> Self {
        let v = vocab.len();
        Self {
            vocab,
            logits: vec![0.0; v * v],
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocab, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let logits = (0..v * v).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { vocab, logits }
    }

    pub fn from_logits(vocab: Vocab, logits: Vec<f64>) -> Result<Self, LmError> {
        let expected = vocab.len() * vocab.len();
        if logits.len() != expected {
            return Err(LmError::ParamCount {
                expected,
                found: logits.len(),
            });
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(LmError::NonFinite(i));
        }
        Ok(Self { vocab, logits })
    }

    pub fn row(&self, prev: TokenId) -> &[f64] {
        let v = self.vocab.len();
        &self.logits[prev.index() * v..(prev.index() + 1) * v]
    }

    pub fn row_mut(&mut self, prev: TokenId) -> &mut [f64] {
        let v = self.vocab.len();
        &mut self.logits[prev.index() * v..(prev.index() + 1) * v]
    }

    pub fn set_logit(&mut self, prev: TokenId, next: TokenId, value: f64) {
        let v = self.vocab.len();
        self.logits[prev.index() * v + next.index()] = value;
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<(), LmError> {
        checkpoint::write(
            path,
            checkpoint::Kind::LanguageModel,
            meta,
            &self.vocab,
            &self.logits,
        )
    }

    /// Load a checkpoint written by [`ToyLm::save`]; returns the model and
    /// its metadata string.
    pub fn load(path: &Path) -> Result<(Self, String), LmError> {
        let ck = checkpoint::read(path, checkpoint::Kind::LanguageModel)?;
        Ok((Self::from_logits(ck.vocab, ck.params)?, ck.meta))
    }
}

impl LanguageModel for ToyLm {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        let prev = context.last().copied().unwrap_or(self.vocab.bos());
        log_softmax(self.row(prev))
    }

    fn seq_logprob(&self, prompt: &[TokenId], completion: &[TokenId]) -> f64 {
        let mut prev = prompt.last().copied().unwrap_or(self.vocab.bos());
        let mut total = 0.0;
        for &t in completion {
            let row = self.row(prev);
            total += row[t.index()] - log_sum_exp(row);
            prev = t;
        }
        total
    }

    fn accumulate_logprob_grad(
        &self,
        prompt: &[TokenId],
        completion: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let v = self.vocab.len();
        let mut prev = prompt.last().copied().unwrap_or(self.vocab.bos());
        let mut total = 0.0;
        for &t in completion {
            let lp = log_softmax(self.row(prev));
            total += lp[t.index()];
            let g = &mut grad[prev.index() * v..(prev.index() + 1) * v];
            // d/dlogit_j log softmax_t = [j == t] - softmax_j
            for (j, (gj, lpj)) in g.iter_mut().zip(&lp).enumerate() {
                let indicator = if j == t.index() { 1.0 } else { 0.0 };
                *gj += scale * (indicator - lpj.exp());
            }
            prev = t;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum GenerateMode {
    Greedy,
    Sample { seed: u64 },
}

/// Autoregressive generation from `prompt`. BOS is never emitted. The
/// returned completion ends with EOS unless `max_len` tokens were produced
/// first. Sampling draws from the conditional renormalised without BOS.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    mode: GenerateMode,
    max_len: usize,
) -> TokenSeq {
    let vocab = model.vocab();
    let mut rng = match mode {
        GenerateMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        GenerateMode::Greedy => None,
    };
    let mut context = Vec::with_capacity(prompt.len() + max_len + 1);
    context.push(vocab.bos());
    context.extend_from_slice(prompt);
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut lp = model.next_logprobs(&context);
        lp[vocab.bos().index()] = f64::NEG_INFINITY;
        let next = match rng.as_mut() {
            None => argmax(&lp).expect("vocabulary is nonempty"),
            Some(rng) => sample_index(&lp, rng),
        };
        let t = TokenId(next as u32);
        out.push(t);
        context.push(t);
        if t == vocab.eos() {
            break;
        }
    }
    TokenSeq(out)
}

/// Draw an index from the softmax of `scores` (entries of -inf have weight 0).
pub fn sample_index(scores: &[f64], rng: &mut impl Rng) -> usize {
    let probs = softmax(scores);
    match WeightedIndex::new(&probs) {
        Ok(dist) => dist.sample(rng),
        // All weights zero or invalid; fall back to the deterministic choice.
        Err(_) => argmax(scores).unwrap_or(0),
    }
}

pub mod checkpoint {
    //! Binary checkpoint layout (all integers little-endian):
    //!
    //! ```text
    //! magic        8 bytes  "TOYLMCK\0"
    //! version      u32      1
    //! kind         u32      1 = language model, 2 = reward model
    //! meta_len     u32      then meta_len bytes of UTF-8 metadata
    //! vocab_size   u32      then per token: u32 byte length + UTF-8 bytes
    //! param_count  u64      then param_count f64 values (IEEE-754 LE)
    //! ```
    //!
    //! Parameters are stored as raw IEEE bits, so save/load is bit-exact.

    use super::*;

    pub const MAGIC: &[u8; 8] = b"TOYLMCK\0";
    pub const VERSION: u32 = 1;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Kind {
        LanguageModel = 1,
        RewardModel = 2,
    }

    pub struct Checkpoint {
        pub kind: Kind,
        pub meta: String,
        pub vocab: Vocab,
        pub params: Vec<f64>,
    }

    pub fn encode(kind: Kind, meta: &str, vocab: &Vocab, params: &[f64]) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + meta.len() + params.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(kind as u32).to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
        for t in vocab.tokens() {
            buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.as_bytes());
        }
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], LmError> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or_else(|| LmError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32, LmError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64, LmError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn string(&mut self, n: usize) -> Result<String, LmError> {
            String::from_utf8(self.take(n)?.to_vec())
                .map_err(|e| LmError::Checkpoint(format!("invalid UTF-8: {e}")))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, LmError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(LmError::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(LmError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let kind = match c.u32()? {
            1 => Kind::LanguageModel,
            2 => Kind::RewardModel,
            k => return Err(LmError::Checkpoint(format!("unknown kind {k}"))),
        };
        let meta_len = c.u32()? as usize;
        let meta = c.string(meta_len)?;
        let v = c.u32()? as usize;
        let mut tokens = Vec::with_capacity(v.min(1 << 16));
        for _ in 0..v {
            let n = c.u32()? as usize;
            tokens.push(c.string(n)?);
        }
        let vocab = Vocab::new(tokens)?;
        let count = c.u64()? as usize;
        if count.checked_mul(8) != Some(bytes.len() - c.pos) {
            return Err(LmError::Checkpoint(format!(
                "expected {count} parameters, found {} trailing bytes",
                bytes.len() - c.pos
            )));
        }
        let params = (0..count)
            .map(|_| Ok(f64::from_le_bytes(c.take(8)?.try_into().unwrap())))
            .collect::<Result<Vec<_>, LmError>>()?;
        Ok(Checkpoint {
            kind,
            meta,
            vocab,
            params,
        })
    }

    pub fn write(
        path: &Path,
        kind: Kind,
        meta: &str,
        vocab: &Vocab,
        params: &[f64],
    ) -> Result<(), LmError> {
        let io = |source| LmError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&encode(kind, meta, vocab, params)).map_err(io)
    }

    pub fn read(path: &Path, expected: Kind) -> Result<Checkpoint, LmError> {
        let io = |source| LmError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io)?;
        let ck = decode(&bytes)?;
        if ck.kind != expected {
            return Err(LmError::Checkpoint(format!(
                "expected a {expected:?} checkpoint, found {:?}",
                ck.kind
            )));
        }
        Ok(ck)
    }
}
