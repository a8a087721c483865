//! Sequential vs parallel evaluation of the batch losses and candidate scoring.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use debias_core::align::{
    dpo_loss_and_grad, encode_pairs, rm_loss_and_grad, PreferencePair, RewardModel,
};
use debias_core::decode::{score_candidates_with, GuidedDecodeConfig};
use debias_core::par::Exec;
use debias_core::toylm::{LanguageModel, ToyLm, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| ALPHABET.as_bytes()[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

fn pairs(n: usize) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            let chosen = random_text(&mut rng, 32);
            let mut rejected = random_text(&mut rng, 32);
            if rejected == chosen {
                rejected.push('a');
            }
            PreferencePair::new(random_text(&mut rng, 16), chosen, rejected)
        })
        .collect()
}

const EXECS: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bench_losses(c: &mut Criterion) {
    let vocab = Vocab::from_texts([ALPHABET]);
    let policy = ToyLm::random(vocab.clone(), 1, 1.0);
    let reference = ToyLm::random(vocab.clone(), 2, 1.0);
    let rm = RewardModel::from_backbone(&reference);
    let mut group = c.benchmark_group("batch_loss");
    for n in [64usize, 512] {
        let batch = encode_pairs(&pairs(n), &vocab).unwrap();
        for (name, exec) in EXECS {
            group.bench_with_input(
                BenchmarkId::new(format!("dpo/{name}"), n),
                &batch,
                |b, batch| {
                    b.iter(|| {
                        dpo_loss_and_grad(&policy, &reference, black_box(batch), 0.1, exec).unwrap()
                    })
                },
            );
            group.bench_with_input(
                BenchmarkId::new(format!("rm/{name}"), n),
                &batch,
                |b, batch| b.iter(|| rm_loss_and_grad(&rm, black_box(batch), exec).unwrap()),
            );
        }
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let vocab = Vocab::from_texts([ALPHABET]);
    let lm = ToyLm::random(vocab.clone(), 3, 1.0);
    let rm = RewardModel::from_backbone(&lm);
    let prompt = vocab.encode("thequickbrownfox").unwrap();
    let generated = vocab.encode(&"jumpsoverthelazydog".repeat(8)).unwrap();
    let config = GuidedDecodeConfig {
        candidate_topk: None,
        ..GuidedDecodeConfig::default()
    };
    let mut group = c.benchmark_group("score_candidates");
    for (name, exec) in EXECS {
        group.bench_function(name, |b| {
            b.iter(|| {
                score_candidates_with(
                    &lm,
                    &rm,
                    black_box(&prompt),
                    black_box(&generated),
                    &config,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
    black_box(lm.num_params());
}

criterion_group!(benches, bench_losses, bench_scoring);
criterion_main!(benches);
