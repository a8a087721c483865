//! Acceptance criteria 1-10. Each test prints one `[PASS]`/`[FAIL]` line;
//! run with `--nocapture --test-threads=1` to see them in order.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use debias_cli::config::RunConfig;
use debias_cli::report::{EvalReport, MetricBlock};
use debias_cli::toy;
use debias_core::align::{
    dpo_loss, dpo_loss_and_grad, dpo_pair_losses, encode_pairs, log_ratio_margin, ranking_accuracy,
    rm_loss, rm_loss_and_grad, train_dpo_with, train_rm, EncodedPair, OptimConfig, PreferencePair,
    RewardModel,
};
use debias_core::corpus::{
    validate_split_counts, BiasLabel, CheckStatus, DatasetSplit, MitigationRecord, SplitManifest,
    SplitName, SplitSizes, TaskKind,
};
use debias_core::cot::{
    parse_classification_response, parse_detection_response, parse_rewrite_response, CotParseError,
};
use debias_core::decode::{guided_generate, GuidedDecodeConfig};
use debias_core::lmclient::{ChatBackend, RecordingBackend, ReplayBackend, ReplayStore};
use debias_core::lmclient::{ChatRequest, ChatResponse, ClientError, FnBackend};
use debias_core::metrics::{binary_f1, corpus_bleu, macro_f1, Smoothing};
use debias_core::par::Exec;
use debias_core::prefgen::{
    build_preference_pairs, CounterfactualKind, PrefgenConfig, PromptStyle,
};
use debias_core::template::TemplateSet;
use debias_core::toylm::{generate, GenerateMode, LanguageModel, TokenId, TokenSeq, ToyLm, Vocab};

type Outcome = Result<String, String>;

fn report(n: u32, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("[PASS] criterion {n:>2}: {name}: {detail}"),
        Err(detail) => {
            println!("[FAIL] criterion {n:>2}: {name}: {detail}");
            panic!("criterion {n} failed: {detail}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

/// A vocabulary of BOS, EOS and `n_chars` letters.
fn letters_vocab(n_chars: usize) -> Vocab {
    Vocab::from_texts([&LETTERS[..n_chars]])
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: &Vocab, min: usize, max: usize) -> Vec<TokenId> {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| TokenId(rng.gen_range(2..vocab.len() as u32)))
        .collect()
}

/// A random encoded pair; completions end in EOS like encoded training data.
fn random_pair(rng: &mut ChaCha8Rng, vocab: &Vocab, max_len: usize, id: usize) -> EncodedPair {
    let prompt = random_tokens(rng, vocab, 1, max_len);
    let chosen = random_tokens(rng, vocab, 0, max_len - 1);
    let mut rejected = random_tokens(rng, vocab, 0, max_len - 1);
    if rejected == chosen {
        rejected.push(TokenId(2));
    }
    EncodedPair::new(
        format!("p{id}"),
        TokenSeq(prompt),
        TokenSeq(chosen).with_eos(vocab),
        TokenSeq(rejected).with_eos(vocab),
    )
}

// ---------------------------------------------------------------------------
// 1. DPO analytic anchor

#[test]
fn criterion_01_dpo_ln2_anchor() {
    let outcome = (|| {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let vocab = letters_vocab(rng.gen_range(1..=20));
            let model = ToyLm::random(vocab.clone(), i, rng.gen_range(0.0..3.0));
            let n = rng.gen_range(1..=16);
            let batch: Vec<_> = (0..n)
                .map(|j| random_pair(&mut rng, &vocab, 8, j))
                .collect();
            let beta = 10f64.powf(rng.gen_range(-3.0..1.0));
            let loss = dpo_loss(&model, &model, &batch, beta).map_err(|e| e.to_string())?;
            worst = worst.max((loss - LN_2).abs());
            for l in
                dpo_pair_losses(&model, &model.clone(), &batch, beta).map_err(|e| e.to_string())?
            {
                worst = worst.max((l - LN_2).abs());
            }
        }
        let elapsed = start.elapsed();
        ensure(worst <= 1e-9, || format!("max |loss - ln 2| = {worst:e}"))?;
        ensure(elapsed < Duration::from_secs(1), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!(
            "100 instances, max |loss - ln 2| = {worst:.1e}, {elapsed:.2?}"
        ))
    })();
    report(1, "DPO loss of a model against itself is ln 2", outcome);
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness against central differences

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely. Parameters a loss
/// does not touch have an exact zero gradient, where central differences
/// return roundoff of order 1e-10.
const FD_FLOOR: f64 = 1e-6;

fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let outcome = (|| {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut worst_seq, mut worst_dpo, mut worst_rm) = (0.0f64, 0.0f64, 0.0f64);
        let models = 24;
        for i in 0..models {
            // V counts BOS and EOS.
            let vocab = letters_vocab(rng.gen_range(1..=6));
            let lm = ToyLm::random(vocab.clone(), 100 + i, 1.0);
            let reference = ToyLm::random(vocab.clone(), 200 + i, 1.0);
            let batch: Vec<_> = (0..3)
                .map(|j| random_pair(&mut rng, &vocab, 6, j as usize))
                .collect();
            let rebuild = |p: &[f64]| ToyLm::from_logits(vocab.clone(), p.to_vec()).unwrap();

            let p = &batch[0];
            let analytic = lm.seq_logprob_grad(&p.prompt, &p.chosen);
            let numeric = central_differences(
                |x| rebuild(x).seq_logprob(&p.prompt, &p.chosen),
                lm.params(),
            );
            worst_seq = worst_seq.max(max_rel_error(&analytic, &numeric));

            let beta = rng.gen_range(0.05..2.0);
            let (_, analytic) = dpo_loss_and_grad(&lm, &reference, &batch, beta, Exec::Sequential)
                .map_err(|e| e.to_string())?;
            let numeric = central_differences(
                |x| dpo_loss(&rebuild(x), &reference, &batch, beta).unwrap(),
                lm.params(),
            );
            worst_dpo = worst_dpo.max(max_rel_error(&analytic, &numeric));

            let mut rm = RewardModel::from_backbone(&lm);
            for w in rm.params_mut()[vocab.len() * vocab.len()..].iter_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            let (_, analytic) =
                rm_loss_and_grad(&rm, &batch, Exec::Sequential).map_err(|e| e.to_string())?;
            let rm_mean = |x: &[f64]| {
                let m = RewardModel::from_params(vocab.clone(), x.to_vec()).unwrap();
                batch.iter().map(|p| rm_loss(&m, p).unwrap()).sum::<f64>() / batch.len() as f64
            };
            let numeric = central_differences(rm_mean, rm.params());
            worst_rm = worst_rm.max(max_rel_error(&analytic, &numeric));
        }
        let elapsed = start.elapsed();
        let worst = worst_seq.max(worst_dpo).max(worst_rm);
        ensure(worst <= FD_TOL, || {
            format!("max relative error seq {worst_seq:e}, dpo {worst_dpo:e}, rm {worst_rm:e}")
        })?;
        ensure(elapsed < Duration::from_secs(30), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!(
            "{models} models, max rel error seq_logprob {worst_seq:.1e}, dpo {worst_dpo:.1e}, rm {worst_rm:.1e}, {elapsed:.2?}"
        ))
    })();
    report(2, "analytic gradients match central differences", outcome);
}

// ---------------------------------------------------------------------------
// 3. DPO training efficacy

fn toy_config() -> RunConfig {
    RunConfig::from_toml_with(toy::TOY_CONFIG, &[]).unwrap()
}

fn toy_pairs() -> Vec<PreferencePair> {
    let (train, _) = toy::mitigation_records();
    let split = DatasetSplit::new(SplitName::Train, train).unwrap();
    let backend = toy::scripted_generator();
    let (pairs, _) = build_preference_pairs(
        &split,
        &backend,
        &TemplateSet::builtin(),
        &toy_config().prefgen_config(),
        Exec::Sequential,
    )
    .unwrap();
    pairs
}

#[test]
fn criterion_03_dpo_training_efficacy() {
    let outcome = (|| {
        let start = Instant::now();
        let pairs = toy_pairs();
        let vocab = Vocab::from_texts(pairs.iter().flat_map(|p| p.texts()));
        let encoded = encode_pairs(&pairs, &vocab).map_err(|e| e.to_string())?;
        ensure(encoded.len() >= 50, || {
            format!("only {} pairs", encoded.len())
        })?;
        let symbols = vocab.len() - 2;
        ensure(symbols <= 30, || format!("{symbols} symbols"))?;

        let cfg = toy_config();
        let init = ToyLm::random(vocab, cfg.dpo.optim.seed, cfg.toy.init_scale);
        let run = |exec| {
            train_dpo_with(init.clone(), &encoded, &cfg.dpo, exec).map_err(|e| e.to_string())
        };
        let (policy, curve) = run(Exec::Parallel)?;
        let (again, curve_again) = run(Exec::Parallel)?;
        let (seq, curve_seq) = run(Exec::Sequential)?;
        let bits = |m: &ToyLm| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(&policy) == bits(&again) && curve == curve_again,
            || "rerun differs".into(),
        )?;
        ensure(bits(&policy) == bits(&seq) && curve == curve_seq, || {
            "sequential run differs".into()
        })?;

        let final_loss = curve.summary.final_loss;
        ensure(final_loss < LN_2, || format!("final loss {final_loss}"))?;
        // The reference is the initial model, so the starting margin is 0.
        let increased = encoded
            .iter()
            .filter(|p| log_ratio_margin(&policy, &init, p) > 0.0)
            .count();
        let share = increased as f64 / encoded.len() as f64;
        ensure(share >= 0.95, || format!("margin increased on {share:.3}"))?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(60), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!(
            "{} pairs, {symbols} symbols, loss {:.4} -> {final_loss:.4}, margin up on {:.1}%, bit-identical reruns, {elapsed:.2?}",
            encoded.len(),
            curve.summary.initial_loss,
            share * 100.0
        ))
    })();
    report(
        3,
        "DPO training raises preferred log-ratio margins",
        outcome,
    );
}

// ---------------------------------------------------------------------------
// 4. Reward model efficacy

/// Chosen completions use letters a-e, rejected ones f-j.
fn separable_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<PreferencePair> {
    let word = |rng: &mut ChaCha8Rng, pool: &[u8]| -> String {
        let len = rng.gen_range(1..=6);
        (0..len)
            .map(|_| pool[rng.gen_range(0..pool.len())] as char)
            .collect()
    };
    (0..n)
        .map(|_| {
            let prompt = word(rng, b"abcdefghij");
            PreferencePair::new(prompt, word(rng, b"abcde"), word(rng, b"fghij"))
        })
        .collect()
}

#[test]
fn criterion_04_reward_model_efficacy() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = separable_pairs(&mut rng, 80);
        let vocab = letters_vocab(10);
        let encoded = encode_pairs(&pairs, &vocab).map_err(|e| e.to_string())?;
        let init = RewardModel::from_backbone(&ToyLm::random(vocab, 4, 0.5));
        let mut worst = 0.0f64;
        for p in &encoded {
            worst = worst.max((rm_loss(&init, p).map_err(|e| e.to_string())? - LN_2).abs());
        }
        ensure(worst <= 1e-9, || {
            format!("zero-head loss off ln 2 by {worst:e}")
        })?;
        let config = OptimConfig {
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 8,
            max_grad_norm: 5.0,
            ..OptimConfig::default()
        };
        let (rm, curve) = train_rm(init, &encoded, &config).map_err(|e| e.to_string())?;
        let acc = ranking_accuracy(&rm, &encoded);
        ensure(acc >= 0.95, || format!("ranking accuracy {acc}"))?;
        Ok(format!(
            "zero head: max |loss - ln 2| = {worst:.1e}; trained accuracy {:.1}% on {} pairs, loss {:.4} -> {:.4}",
            acc * 100.0,
            encoded.len(),
            curve.summary.initial_loss,
            curve.summary.final_loss
        ))
    })();
    report(4, "reward model ranks separable pairs", outcome);
}

// ---------------------------------------------------------------------------
// 5. Guided decoding

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Reward recomputed from the parameter layout: backbone table, context
/// head, token head.
fn oracle_reward(
    params: &[f64],
    v: usize,
    prompt: &[usize],
    completion: &[usize],
    bos: usize,
) -> f64 {
    if completion.is_empty() {
        return 0.0;
    }
    let ctx = &params[v * v..v * v + v];
    let tok = &params[v * v + v..];
    let mut prev = prompt.last().copied().unwrap_or(bos);
    let mut total = 0.0;
    for &t in completion {
        let row = &params[prev * v..prev * v + v];
        let h: Vec<f64> = log_softmax(row).iter().map(|x| x.exp()).collect();
        total += ctx.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + tok[t];
        prev = t;
    }
    total / completion.len() as f64
}

/// Step-by-step argmax over every candidate with its full score computed
/// from scratch; ties go to the lower id.
fn oracle_decode(
    lm: &ToyLm,
    rm: &RewardModel,
    prompt: &[usize],
    w: f64,
    topk: Option<usize>,
    max_len: usize,
) -> Vec<usize> {
    let vocab = lm.vocab();
    let (v, bos, eos) = (vocab.len(), vocab.bos().index(), vocab.eos().index());
    let mut out: Vec<usize> = Vec::new();
    while out.len() < max_len {
        let prev = out.last().or(prompt.last()).copied().unwrap_or(bos);
        let lp = log_softmax(&lm.params()[prev * v..prev * v + v]);
        let mut cands: Vec<usize> = (0..v).filter(|&t| t != bos).collect();
        if let Some(k) = topk {
            cands.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            cands.truncate(k);
        }
        let mut best: Option<(usize, f64)> = None;
        // ascending ids so ties resolve to the lower one
        cands.sort_unstable();
        for &t in &cands {
            let mut completion = out.clone();
            completion.push(t);
            let r = if w == 0.0 {
                0.0
            } else {
                oracle_reward(rm.params(), v, prompt, &completion, bos)
            };
            let s = lp[t] + w * r;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t, s));
            }
        }
        let t = best.expect("nonempty candidates").0;
        out.push(t);
        if t == eos {
            break;
        }
    }
    out
}

fn random_rm(rng: &mut ChaCha8Rng, lm: &ToyLm) -> RewardModel {
    let mut rm = RewardModel::from_backbone(&ToyLm::random(lm.vocab().clone(), rng.gen(), 1.0));
    for w in rm.params_mut().iter_mut().skip(lm.params().len()) {
        *w = rng.gen_range(-2.0..2.0);
    }
    rm
}

fn ids(seq: &[TokenId]) -> Vec<usize> {
    seq.iter().map(|t| t.index()).collect()
}

#[test]
fn criterion_05_guided_decoding() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        // (a) w = 0 is plain greedy decoding.
        for i in 0..100 {
            let vocab = letters_vocab(rng.gen_range(1..=12));
            let lm = ToyLm::random(vocab.clone(), 500 + i, 2.0);
            let rm = random_rm(&mut rng, &lm);
            let prompt = random_tokens(&mut rng, &vocab, 0, 5);
            let max_len = rng.gen_range(1..=12);
            let greedy = generate(&lm, &prompt, GenerateMode::Greedy, max_len);
            for topk in [None, Some(1), Some(3)] {
                let cfg = GuidedDecodeConfig {
                    w: 0.0,
                    candidate_topk: topk,
                    max_len,
                    ..GuidedDecodeConfig::default()
                };
                let out = guided_generate(&lm, &rm, &prompt, &cfg).map_err(|e| e.to_string())?;
                ensure(out.tokens == greedy, || {
                    format!(
                        "(a) model {i}, topk {topk:?}: {:?} vs {:?}",
                        out.tokens, greedy
                    )
                })?;
            }
        }

        // (b) Exhaustive oracle on every small configuration.
        let mut cases = 0usize;
        for n_chars in 1..=3 {
            let vocab = letters_vocab(n_chars);
            let v = vocab.len();
            for m in 0..6u64 {
                let lm = ToyLm::random(vocab.clone(), 900 + m * 7 + n_chars as u64, 1.5);
                let rm = random_rm(&mut rng, &lm);
                let mut prompts: Vec<Vec<usize>> = vec![vec![]];
                for a in 2..v {
                    prompts.push(vec![a]);
                    for b in 2..v {
                        prompts.push(vec![a, b]);
                    }
                }
                for prompt in &prompts {
                    let p: Vec<TokenId> = prompt.iter().map(|&t| TokenId(t as u32)).collect();
                    for max_len in 1..=4 {
                        for w in [0.0, 0.5, 1.0, 3.0] {
                            let topks = std::iter::once(None).chain((1..v).map(Some));
                            for topk in topks {
                                let cfg = GuidedDecodeConfig {
                                    w,
                                    candidate_topk: topk,
                                    max_len,
                                    ..GuidedDecodeConfig::default()
                                };
                                let got = ids(&guided_generate(&lm, &rm, &p, &cfg)
                                    .map_err(|e| e.to_string())?
                                    .tokens);
                                let want = oracle_decode(&lm, &rm, prompt, w, topk, max_len);
                                ensure(got == want, || {
                                    format!("(b) V={v} prompt {prompt:?} len {max_len} w {w} topk {topk:?}: {got:?} vs {want:?}")
                                })?;
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }

        // (c) Shifting every reward by a constant leaves the output alone.
        for i in 0..20 {
            let vocab = letters_vocab(rng.gen_range(2..=8));
            let lm = ToyLm::random(vocab.clone(), 1300 + i, 1.0);
            let rm = random_rm(&mut rng, &lm);
            let mut shifted = rm.clone();
            let c = rng.gen_range(-5.0..5.0);
            let v = vocab.len();
            for w in shifted.params_mut()[v * v + v..].iter_mut() {
                *w += c;
            }
            let prompt = random_tokens(&mut rng, &vocab, 1, 4);
            let cfg = GuidedDecodeConfig {
                w: rng.gen_range(0.1..3.0),
                candidate_topk: None,
                max_len: 10,
                ..GuidedDecodeConfig::default()
            };
            let a = guided_generate(&lm, &rm, &prompt, &cfg).map_err(|e| e.to_string())?;
            let b = guided_generate(&lm, &shifted, &prompt, &cfg).map_err(|e| e.to_string())?;
            ensure(a.tokens == b.tokens, || {
                format!("(c) instance {i}: shift {c} changed the output")
            })?;
        }
        Ok(format!("(a) 100 models, (b) {cases} exhaustive cases with V <= 5 and max_len <= 4, (c) 20 shifted instances"))
    })();
    report(5, "reward-guided decoding", outcome);
}

// ---------------------------------------------------------------------------
// 6. Metric oracles

/// F1 straight from the confusion matrix: 2tp / (2tp + fp + fn).
fn brute_f1(pred: &[bool], gold: &[bool]) -> (f64, f64, f64) {
    let mut m = [[0u64; 2]; 2];
    for (&p, &g) in pred.iter().zip(gold) {
        m[p as usize][g as usize] += 1;
    }
    let (tp, fp, fne) = (m[1][1] as f64, m[1][0] as f64, m[0][1] as f64);
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    (
        div(tp, tp + fp),
        div(tp, tp + fne),
        div(2.0 * tp, 2.0 * tp + fp + fne),
    )
}

#[derive(serde::Deserialize)]
struct BleuSegment {
    hyp: Vec<String>,
    refs: Vec<Vec<String>>,
}

#[derive(serde::Deserialize)]
struct BleuCase {
    name: String,
    max_n: usize,
    smoothing: Smoothing,
    segments: Vec<BleuSegment>,
    expected: f64,
}

fn bleu_fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/bleu_nltk.json")
}

#[test]
fn criterion_06_metric_oracles() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=40);
            let bias = rng.gen_range(0.0..1.0);
            let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(bias)).collect();
            let gold: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let got = binary_f1(&pred, &gold).map_err(|e| e.to_string())?;
            let (p, r, f) = brute_f1(&pred, &gold);
            worst = worst
                .max((got.precision - p).abs())
                .max((got.recall - r).abs())
                .max((got.f1 - f).abs());
        }
        let mut worst_macro = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=30);
            let set = |rng: &mut ChaCha8Rng| -> BTreeSet<BiasLabel> {
                BiasLabel::ALL
                    .iter()
                    .copied()
                    .filter(|_| rng.gen_bool(0.4))
                    .collect()
            };
            let pred: Vec<_> = (0..n).map(|_| set(&mut rng)).collect();
            let gold: Vec<_> = (0..n).map(|_| set(&mut rng)).collect();
            let got = macro_f1(&pred, &gold, &BiasLabel::ALL).map_err(|e| e.to_string())?;
            let per_class: Vec<f64> = BiasLabel::ALL
                .iter()
                .map(|c| {
                    let p: Vec<bool> = pred.iter().map(|s| s.contains(c)).collect();
                    let g: Vec<bool> = gold.iter().map(|s| s.contains(c)).collect();
                    brute_f1(&p, &g).2
                })
                .collect();
            let want = per_class.iter().sum::<f64>() / 3.0;
            worst_macro = worst_macro.max((got.macro_f1 - want).abs());
        }
        ensure(worst <= 1e-12 && worst_macro <= 1e-12, || {
            format!("binary off by {worst:e}, macro off by {worst_macro:e}")
        })?;

        // Per-class F1 of 1, 0.5 and 0 average to 0.5.
        use BiasLabel::*;
        let s = |xs: &[BiasLabel]| xs.iter().copied().collect::<BTreeSet<_>>();
        let pred = [s(&[AC, DI]), s(&[AC, DI, ANB]), s(&[])];
        let gold = [s(&[AC, DI]), s(&[AC]), s(&[DI])];
        // AC perfect; DI tp 1, fp 1, fn 1; ANB only a false positive.
        let m = macro_f1(&pred, &gold, &BiasLabel::ALL).map_err(|e| e.to_string())?;
        ensure((m.macro_f1 - 0.5).abs() <= 1e-12, || {
            format!("(1, 0.5, 0) fixture gave {}", m.macro_f1)
        })?;

        let text = std::fs::read_to_string(bleu_fixture_path()).map_err(|e| e.to_string())?;
        let cases: Vec<BleuCase> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        ensure(cases.len() == 50, || {
            format!("{} BLEU fixtures", cases.len())
        })?;
        for needed in ["clipping_four_the", "brevity_short_hyp"] {
            ensure(cases.iter().any(|c| c.name == needed), || {
                format!("fixture {needed} missing")
            })?;
        }
        let mut worst_bleu = 0.0f64;
        for c in &cases {
            let segs: Vec<(&[String], &[Vec<String>])> = c
                .segments
                .iter()
                .map(|s| (s.hyp.as_slice(), s.refs.as_slice()))
                .collect();
            let got = corpus_bleu(&segs, c.max_n, c.smoothing)
                .map_err(|e| e.to_string())?
                .score;
            let err = (got - c.expected).abs();
            ensure(err <= 1e-9, || {
                format!("BLEU {}: {got} vs {}", c.name, c.expected)
            })?;
            worst_bleu = worst_bleu.max(err);
        }
        Ok(format!(
            "1000 binary and 1000 macro fixtures (max error {:.1e}); 50 reference BLEU fixtures (max error {worst_bleu:.1e})",
            worst.max(worst_macro)
        ))
    })();
    report(6, "metrics agree with independent oracles", outcome);
}

// ---------------------------------------------------------------------------
// CLI helpers

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn debias_ok(args: &[&str]) -> Result<Output, String> {
    let out = debias(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`debias {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

// ---------------------------------------------------------------------------
// 7. CoT pipeline determinism and parser totality

fn cot_run(dir: &Path, tag: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let config = dir.join(toy::CONFIG_FILE);
    let mut files = Vec::new();
    for (task, input, gold) in [
        ("detect", toy::DETECT_TEST, toy::DETECT_TEST),
        ("classify", toy::CLASSIFY_TEST, toy::CLASSIFY_TEST),
        ("mitigate", toy::MITIGATE_TRAIN, toy::MITIGATE_TRAIN),
    ] {
        let pred = dir.join(format!("{tag}_{task}_pred.jsonl"));
        let fails = dir.join(format!("{tag}_{task}_failures.jsonl"));
        let eval = dir.join(format!("{tag}_{task}_eval.json"));
        debias_ok(&[
            "-q",
            "--config",
            s(&config),
            "run-cot",
            "--task",
            task,
            "--input",
            s(&dir.join(input)),
            "--output",
            s(&pred),
            "--failures",
            s(&fails),
        ])?;
        debias_ok(&[
            "-q",
            "--config",
            s(&config),
            &format!("eval-{task}"),
            "--pred",
            s(&pred),
            "--gold",
            s(&dir.join(gold)),
            "--output",
            s(&eval),
        ])?;
        for p in [pred, fails, eval] {
            let name = p
                .file_name()
                .unwrap()
                .to_string_lossy()
                .replacen(tag, "", 1);
            files.push((name, read(&p)?));
        }
    }
    Ok(files)
}

/// Strings built from grammar fragments, stray markers and random bytes.
fn fuzz_strings(n: usize) -> Vec<String> {
    const PIECES: &[&str] = &[
        "Step1:",
        "Step2:",
        "Step3:",
        "Label:",
        "Final:",
        "Group:",
        "Attribute:",
        "Biased:",
        "Agrees:",
        "Reason:",
        "Justification:",
        "Applies:",
        "True",
        "False",
        "true",
        "None",
        "AC",
        "DI",
        "ANB",
        "AC, DI",
        "AC,AC",
        ";",
        "\\;",
        "\\",
        "\\n",
        "\n",
        "\r\n",
        " ",
        "  ",
        "\t",
        "女生",
        "性别",
        ":",
        "Label: AC",
        "X",
        "Step4:",
        "step1:",
        "Final: ANB",
        "Biased: maybe",
        "",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            let mut out = String::new();
            for _ in 0..rng.gen_range(0..40) {
                if rng.gen_bool(0.1) {
                    out.push(char::from_u32(rng.gen_range(0..0x3000)).unwrap_or('?'));
                } else {
                    out.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
                }
            }
            out
        })
        .chain(well_formed_variants(&mut ChaCha8Rng::seed_from_u64(8), 200))
        .collect()
}

/// Grammatical classification answers with random decisions, so the
/// synthesis check sees both consistent and inconsistent finals.
fn well_formed_variants(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let b = |x: bool| if x { "True" } else { "False" };
    (0..n)
        .map(|_| {
            let applies: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.5)).collect();
            let stated: Vec<&str> = ["AC", "DI", "ANB"].into_iter().filter(|_| rng.gen_bool(0.5)).collect();
            let fin = if stated.is_empty() { "None".to_string() } else { stated.join(", ") };
            format!(
                "Step1: Label: AC; Justification: j; Applies: {}\nStep2: Label: DI; Justification: j; Applies: {}\nStep3: Label: ANB; Justification: j; Applies: {}\nFinal: {fin}\n",
                b(applies[0]),
                b(applies[1]),
                b(applies[2])
            )
        })
        .collect()
}

#[test]
fn criterion_07_cot_determinism_and_parser_totality() {
    let outcome = (|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        debias_ok(&["-q", "toy-data", "--out", s(dir)])?;
        for f in [toy::DETECT_TEST, toy::CLASSIFY_TEST, toy::MITIGATE_TRAIN] {
            let n = std::fs::read_to_string(dir.join(f))
                .map_err(|e| e.to_string())?
                .lines()
                .count();
            ensure(n >= 20, || format!("{f} has {n} records"))?;
        }
        let first = cot_run(dir, "a")?;
        let second = cot_run(dir, "b")?;
        for ((name, x), (_, y)) in first.iter().zip(&second) {
            ensure(x == y, || format!("{name} differs between runs"))?;
        }
        let flagged: usize = first
            .iter()
            .filter(|(n, _)| n.ends_with("_pred.jsonl"))
            .map(|(_, b)| {
                String::from_utf8_lossy(b)
                    .matches("\"flagged\":true")
                    .count()
            })
            .sum();

        let inputs = fuzz_strings(1200);
        let (mut ok, mut inconsistent) = (0usize, 0usize);
        for text in &inputs {
            let parsed = std::panic::catch_unwind(|| {
                (
                    parse_detection_response(text),
                    parse_classification_response(text),
                    parse_rewrite_response(text),
                )
            })
            .map_err(|_| format!("parser panicked on {text:?}"))?;
            match parsed.1 {
                Ok(r) => {
                    let applies: BTreeSet<_> = r
                        .judgments
                        .iter()
                        .filter(|j| j.applies)
                        .map(|j| j.label)
                        .collect();
                    ensure(applies == r.final_labels, || {
                        format!("accepted inconsistent synthesis {text:?}")
                    })?;
                    ok += 1;
                }
                Err(CotParseError::InconsistentSynthesis {
                    applies, stated, ..
                }) => {
                    ensure(applies != stated, || {
                        format!("spurious inconsistency on {text:?}")
                    })?;
                    inconsistent += 1;
                }
                Err(_) => {}
            }
            if let Ok(d) = parsed.0 {
                ensure(
                    d.label == (d.statement_is_biased && d.sentence_agrees),
                    || format!("accepted inconsistent detection {text:?}"),
                )?;
            }
        }
        Ok(format!(
            "{} artifacts byte-identical across two runs ({flagged} flagged records); {} fuzzed strings, {ok} valid and {inconsistent} inconsistent syntheses, no panics",
            first.len(),
            inputs.len()
        ))
    })();
    report(7, "CoT pipeline determinism and parser totality", outcome);
}

// ---------------------------------------------------------------------------
// 8. Preference builder accounting

/// Counterfactual answers for ten records, with four invalid generations.
fn planted_generator(
) -> FnBackend<impl Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync> {
    FnBackend::new("planted", |req: &ChatRequest| {
        let prompt = &req.messages[0].content;
        let first = prompt.lines().next().unwrap_or("");
        let sentence = prompt.lines().nth(3).unwrap_or("");
        let n: usize = sentence
            .rsplit(' ')
            .next()
            .and_then(|x| x.parse().ok())
            .unwrap_or(0);
        let kind = if first.contains("Keep its gender-biased wording") {
            "i"
        } else if first.contains("Replace its gender-biased wording") {
            "ii"
        } else {
            "iii"
        };
        let text = match (n, kind) {
            (1, "i") => String::new(),
            (3, "ii") => sentence.to_string(),
            (5, "iii") => format!("anyone can cook {n}"),
            (7, "i") => "x".repeat(400),
            _ => format!("{sentence} ({kind})"),
        };
        Ok(ChatResponse::stop(text))
    })
}

#[test]
fn criterion_08_preference_builder_accounting() {
    let outcome = (|| {
        let records: Vec<MitigationRecord> = (0..10)
            .map(|i| MitigationRecord {
                id: format!("r{i}"),
                biased_text: format!("girls can not cook {i}"),
                edited_text: format!("anyone can cook {i}"),
            })
            .collect();
        let split =
            DatasetSplit::new(SplitName::Train, records.clone()).map_err(|e| e.to_string())?;
        let templates = TemplateSet::builtin();
        let config = PrefgenConfig {
            prompt_style: PromptStyle::Raw,
            ..PrefgenConfig::default()
        };
        // Record once, then answer only from the replay store.
        let store = Arc::new(ReplayStore::in_memory());
        let recorder = RecordingBackend::new(planted_generator(), store.clone(), false);
        build_preference_pairs(&split, &recorder, &templates, &config, Exec::Sequential)
            .map_err(|e| e.to_string())?;
        let replay: Box<dyn ChatBackend> = Box::new(ReplayBackend::new(store));
        let (pairs, manifest) =
            build_preference_pairs(&split, replay.as_ref(), &templates, &config, Exec::Parallel)
                .map_err(|e| e.to_string())?;

        ensure(pairs.len() == 26, || format!("{} pairs", pairs.len()))?;
        manifest.reconcile(&pairs)?;
        let t = manifest.total();
        ensure(
            t.generated == 30 && t.accepted == 26 && t.rejected == 4 && t.failed == 0,
            || format!("{t:?}"),
        )?;
        ensure(manifest.rejections.values().sum::<usize>() == 4, || {
            format!("{:?}", manifest.rejections)
        })?;
        for kind in CounterfactualKind::ALL {
            let c = manifest.counts.get(&kind).copied().unwrap_or_default();
            ensure(c.accepted + c.rejected + c.failed == 10, || {
                format!("{kind}: {c:?}")
            })?;
        }
        for p in &pairs {
            let rec = records
                .iter()
                .find(|r| Some(&r.id) == p.source_id.as_ref())
                .ok_or_else(|| format!("pair without source {p:?}"))?;
            ensure(p.chosen == rec.edited_text, || {
                format!("chosen {:?} for {}", p.chosen, rec.id)
            })?;
        }
        Ok(format!(
            "30 generations, 4 rejected {:?}, 26 pairs, counts reconcile",
            manifest.rejections
        ))
    })();
    report(8, "preference builder accounting", outcome);
}

// ---------------------------------------------------------------------------
// 9. Dataset fidelity

fn write_detection_split(path: &Path, n: usize) -> Result<(), String> {
    let mut text = String::with_capacity(n * 48);
    for i in 0..n {
        text.push_str(&format!(
            "{{\"id\":\"s{i}\",\"text\":\"句子{i}\",\"label\":{}}}\n",
            i % 3 == 0
        ));
    }
    std::fs::write(path, text).map_err(|e| e.to_string())
}

#[test]
fn criterion_09_dataset_fidelity() {
    let outcome = (|| {
        let manifest = SplitManifest::official();
        let table = [
            (TaskKind::Detect, [12224, 1032, 200]),
            (TaskKind::Classify, [4872, 516, 200]),
            (TaskKind::Mitigate, [3672, 516, 200]),
        ];
        for (task, [train, valid, test]) in table {
            let r =
                validate_split_counts(SplitSizes::new(train, valid, test), task, Some(&manifest));
            ensure(r.all_match(), || {
                format!("{task} conforming sizes reported {r}")
            })?;
            for (k, split) in SplitName::ALL.iter().enumerate() {
                let mut sizes = [train, valid, test];
                sizes[k] += 1;
                let r = validate_split_counts(
                    SplitSizes::new(sizes[0], sizes[1], sizes[2]),
                    task,
                    Some(&manifest),
                );
                let bad: Vec<_> = r.mismatches().map(|m| m.split).collect();
                ensure(bad == vec![*split], || {
                    format!("{task}: injected {split} mismatch reported as {bad:?}")
                })?;
            }
        }

        // Through the CLI on real files.
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        let paths: Vec<PathBuf> = ["train", "valid", "test"]
            .iter()
            .map(|n| dir.join(format!("{n}.jsonl")))
            .collect();
        for (p, n) in paths.iter().zip([12224, 1032, 200]) {
            write_detection_split(p, n)?;
        }
        let mut args = vec!["-q", "ingest", "--task", "detect", "--strict-counts"];
        for p in &paths {
            args.extend(["--input", s(p)]);
        }
        let out = debias_ok(&args)?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure(stdout.matches("Match").count() == 3, || {
            format!("conforming files: {stdout}")
        })?;

        write_detection_split(&paths[1], 1031)?;
        let out = debias(&args);
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure(out.status.code() == Some(1), || {
            format!("mismatch exited {:?}", out.status.code())
        })?;
        let line = stdout
            .lines()
            .find(|l| l.contains("Mismatch"))
            .unwrap_or("");
        ensure(
            stdout.matches("Mismatch").count() == 1
                && line.contains("valid")
                && line.contains("1031"),
            || format!("injected mismatch report: {stdout}"),
        )?;
        let status = validate_split_counts(
            SplitSizes::new(12224, 1031, 200),
            TaskKind::Detect,
            Some(&manifest),
        );
        ensure(status.entries[1].status == CheckStatus::Mismatch, || {
            "valid split not flagged".into()
        })?;
        Ok("published sizes match for all tasks; each injected mismatch pinpointed, also through `ingest --strict-counts`".into())
    })();
    report(
        9,
        "split sizes checked against the published manifest",
        outcome,
    );
}

// ---------------------------------------------------------------------------
// 10. End-to-end toy mitigation

fn bleu_of(report_path: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(report_path).map_err(|e| e.to_string())?;
    let r: EvalReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    match r.metric {
        MetricBlock::Bleu(b) => Ok(b.score),
        other => Err(format!("not a BLEU report: {other:?}")),
    }
}

#[test]
fn criterion_10_toy_mitigation_chain() {
    let outcome = (|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        let p = |name: &str| dir.join(name);
        debias_ok(&["-q", "toy-data", "--out", s(dir)])?;
        let config = p(toy::CONFIG_FILE);
        let c = ["-q", "--config", s(&config)];
        let run = |rest: &[&str]| debias_ok(&[&c[..], rest].concat());
        run(&[
            "build-prefs",
            "--input",
            s(&p(toy::MITIGATE_TRAIN)),
            "--output",
            s(&p("pairs.jsonl")),
        ])?;
        run(&[
            "train-dpo",
            "--pairs",
            s(&p("pairs.jsonl")),
            "--out-dir",
            s(&p("run")),
        ])?;
        let mut scores = Vec::new();
        for model in ["base", "policy"] {
            let pred = p(&format!("{model}_pred.jsonl"));
            let eval = p(&format!("{model}_eval.json"));
            run(&[
                "decode",
                "--model",
                s(&p(&format!("run/{model}.ckpt"))),
                "--input",
                s(&p(toy::MITIGATE_TEST)),
                "--output",
                s(&pred),
            ])?;
            run(&[
                "eval-mitigate",
                "--pred",
                s(&pred),
                "--gold",
                s(&p(toy::MITIGATE_TEST)),
                "--output",
                s(&eval),
            ])?;
            scores.push(bleu_of(&eval)?);
        }
        let (base, dpo) = (scores[0], scores[1]);
        ensure(dpo > base, || format!("BLEU base {base:.6}, DPO {dpo:.6}"))?;
        Ok(format!("BLEU base {base:.6} < DPO {dpo:.6}"))
    })();
    report(
        10,
        "toy train-dpo -> decode -> eval-mitigate beats the base model",
        outcome,
    );
}
