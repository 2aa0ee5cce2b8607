use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lea_core::backbone::BackboneKind;
use lea_core::metrics::{evaluate, DEFAULT_KS};
use lea_core::policy::{
    Branch, Mode, PolicyConfig, PolicyNet, Prepared, TrainSettings, Trainer, TwinPolicy,
};
use lea_core::{InteractionSequence, ItemId, Parallelism};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_ITEMS: usize = 300;
const SEQ: usize = 10;

fn config() -> PolicyConfig {
    PolicyConfig {
        backbone: BackboneKind::Recurrent,
        n_items: N_ITEMS,
        emb_dim: 64,
        hidden_dim: 64,
        seq_len: SEQ,
        state: Mode::Base.state_source(),
        d_lm: 0,
        d_proj: 0,
    }
}

fn contexts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<ItemId>> {
    (0..n)
        .map(|_| {
            (0..SEQ)
                .map(|_| ItemId(rng.random_range(0..N_ITEMS as u32)))
                .collect()
        })
        .collect()
}

fn batch(rng: &mut ChaCha8Rng) -> Prepared {
    let contexts = contexts(rng, 100);
    let targets: Vec<ItemId> = (0..100)
        .map(|_| ItemId(rng.random_range(0..N_ITEMS as u32)))
        .collect();
    let next_contexts = contexts
        .iter()
        .zip(&targets)
        .map(|(c, &t)| {
            let mut n = c[1..].to_vec();
            n.push(t);
            n
        })
        .collect();
    Prepared {
        contexts,
        next_contexts,
        negatives: targets
            .iter()
            .map(|t| ItemId((t.0 + 1) % N_ITEMS as u32))
            .collect(),
        targets,
        le: None,
        le_next: None,
        r_pos: vec![1.0; 100],
        r_neg: vec![0.0; 100],
        aug: None,
    }
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = batch(&mut rng);
    let mut group = c.benchmark_group("snqn_losses");
    for par in [Parallelism::Sequential, Parallelism::Rayon] {
        let settings = TrainSettings {
            mode: Mode::Base,
            parallelism: par,
            ..TrainSettings::default()
        };
        let trainer = Trainer::new(TwinPolicy::new(config(), 1).unwrap(), settings, 1).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{par:?}")),
            &p,
            |b, p| b.iter(|| black_box(trainer.losses(p, Branch::Main).unwrap())),
        );
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = PolicyNet::new(config(), 2).unwrap();
    let seqs: Vec<InteractionSequence> = (0..200)
        .map(|s| {
            let items: Vec<ItemId> = contexts(&mut rng, 1).remove(0);
            InteractionSequence {
                session_id: format!("s{s}"),
                timestamps: (0..items.len() as i64).collect(),
                items,
            }
        })
        .collect();
    let mut group = c.benchmark_group("evaluate");
    for par in [Parallelism::Sequential, Parallelism::Rayon] {
        group.bench_function(format!("{par:?}"), |b| {
            b.iter(|| black_box(evaluate(&net, &seqs, SEQ, &DEFAULT_KS, par).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = losses, evaluation
}
criterion_main!(benches);
