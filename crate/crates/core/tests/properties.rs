use std::collections::HashSet;

use lea_core::autodiff::Mat;
use lea_core::backbone::BackboneKind;
use lea_core::env::{CachedEnv, CountingEnv, Environment};
use lea_core::ingest::{self, RawEvent};
use lea_core::metrics::{evaluate, hr_at_k, ndcg_at_k, Scorer};
use lea_core::policy::{
    rank, Branch, Mode, PolicyConfig, PolicyNet, Prepared, TrainSettings, Trainer, TwinPolicy,
};
use lea_core::prompt::PromptTemplate;
use lea_core::{AugmentedAction, InteractionSequence, ItemId, Parallelism, Result, RewardValue};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn events_strategy() -> impl Strategy<Value = Vec<RawEvent>> {
    prop::collection::vec((0u8..12, 0u8..15, 0i64..50), 1..120).prop_map(|v| {
        v.into_iter()
            .map(|(s, i, ts)| RawEvent {
                session_id: format!("s{s}"),
                item_key: format!("i{i}"),
                ts,
            })
            .collect()
    })
}

fn as_events(log: &ingest::FilteredLog) -> Vec<RawEvent> {
    log.sequences
        .iter()
        .flat_map(|s| {
            s.items.iter().zip(&s.timestamps).map(|(i, &ts)| RawEvent {
                session_id: s.session_id.clone(),
                item_key: log.item_keys[i.index()].clone(),
                ts,
            })
        })
        .collect()
}

fn sequences(n_items: u32, n: usize, seed: u64) -> Vec<InteractionSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let len = rng.random_range(3..12);
            InteractionSequence {
                session_id: format!("u{k:03}"),
                items: (0..len)
                    .map(|_| ItemId(rng.random_range(0..n_items)))
                    .collect(),
                timestamps: (0..len as i64).collect(),
            }
        })
        .collect()
}

/// Scores are a fixed pseudo-random function of the context.
struct Hashed(usize);

impl Scorer for Hashed {
    fn n_items(&self) -> usize {
        self.0
    }
    fn scores(&self, contexts: &[&[ItemId]]) -> Result<Mat> {
        Ok(Mat::from_shape_fn((contexts.len(), self.0), |(r, c)| {
            let h = contexts[r].iter().fold(c as u64 + 1, |a, i| {
                a.wrapping_mul(31).wrapping_add(i.0 as u64)
            });
            (h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40) as f64
        }))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_is_a_fixed_point(events in events_strategy(), min_len in 1usize..4, min_freq in 1usize..4) {
        if let Ok(once) = ingest::filter(&events, min_len, min_freq) {
            let twice = ingest::filter(&as_events(&once), min_len, min_freq).unwrap();
            prop_assert_eq!(&once, &twice);
            for s in &once.sequences {
                prop_assert!(s.items.len() >= min_len);
                prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(s.items.iter().all(|i| i.index() < once.n_items()));
            }
        }
    }

    #[test]
    fn windows_follow_their_sequence(seed in any::<u64>(), seq_len in 1usize..8) {
        let n = 20;
        let seqs = sequences(n as u32, 6, seed);
        let ex = ingest::window_all(&seqs, seq_len, n, seed).unwrap();
        let mut k = 0;
        for s in &seqs {
            let session: HashSet<ItemId> = s.items.iter().copied().collect();
            for t in 1..s.items.len() {
                let w = &ex[k];
                k += 1;
                prop_assert_eq!(w.context.len(), seq_len);
                prop_assert_eq!(w.target, s.items[t]);
                prop_assert_eq!(*w.context.last().unwrap(), s.items[t - 1]);
                prop_assert!(w.target.index() < n);
                prop_assert!(!session.contains(&w.negative));
                let real: Vec<ItemId> = w.context.iter().copied().filter(|i| i.index() < n).collect();
                prop_assert_eq!(real.as_slice(), &s.items[t.saturating_sub(seq_len)..t]);
                // Padding only on the left.
                let first_real = w.context.iter().position(|i| i.index() < n).unwrap();
                prop_assert!(w.context[..first_real].iter().all(|&i| i == ItemId::padding(n)));
            }
        }
        prop_assert_eq!(k, ex.len());
    }

    #[test]
    fn splits_are_disjoint_and_reproducible(seed in any::<u64>(), n in 1usize..60, le in 0.0f64..1.0) {
        let seqs = sequences(10, n, seed);
        let a = ingest::split(&seqs, (0.8, 0.1, 0.1), le, seed).unwrap();
        let b = ingest::split(&seqs, (0.8, 0.1, 0.1), le, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let ids = |v: &[InteractionSequence]| v.iter().map(|s| s.session_id.clone()).collect::<HashSet<_>>();
        let (tr, va, te) = (ids(&a.train), ids(&a.validation), ids(&a.test));
        prop_assert_eq!(tr.len() + va.len() + te.len(), n);
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert!(ids(&a.le_subset).is_subset(&tr));
        prop_assert!((a.le_subset.len() as f64 - le * a.train.len() as f64).abs() <= 1.0);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(perm_seed in any::<u64>(), truth in 0u32..30) {
        let mut ranked: Vec<ItemId> = (0..30).map(ItemId).collect();
        ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let truth = ItemId(truth);
        let mut prev = (0.0, 0.0);
        for k in 1..=30 {
            let hr = hr_at_k(&ranked, truth, k).unwrap();
            let ndcg = ndcg_at_k(&ranked, truth, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&hr) && (0.0..=1.0).contains(&ndcg));
            prop_assert!(ndcg <= hr);
            prop_assert!(hr >= prev.0 && ndcg >= prev.1);
            prev = (hr, ndcg);
        }
    }

    #[test]
    fn evaluation_ignores_sequence_order(seed in any::<u64>()) {
        let seqs = sequences(25, 12, seed);
        let mut shuffled = seqs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let a = evaluate(&Hashed(25), &seqs, 5, &[5, 10], Parallelism::Sequential).unwrap();
        let b = evaluate(&Hashed(25), &shuffled, 5, &[5, 10], Parallelism::Rayon).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rewards_lie_in_the_unit_interval(raw in -1e6f64..1e6) {
        let r = RewardValue::from_raw(raw);
        prop_assert!(r.value.is_finite() && (0.0..=1.0).contains(&r.value));
    }

    #[test]
    fn augmented_item_is_the_selected_entry(ids in prop::sample::subsequence((0u32..40).collect::<Vec<_>>(), 5), pick in 0usize..5) {
        let list: [ItemId; 5] = ids.iter().map(|&i| ItemId(i)).collect::<Vec<_>>().try_into().unwrap();
        let a = AugmentedAction::new(list, pick).unwrap();
        prop_assert_eq!(a.item, list[pick]);
    }

    #[test]
    fn prompts_are_injective(
        h1 in prop::collection::vec(0u32..6, 1..4),
        h2 in prop::collection::vec(0u32..6, 1..4),
        a1 in 0u32..6,
        a2 in 0u32..6,
    ) {
        let t = PromptTemplate::lfm();
        let ids = |v: &[u32]| v.iter().map(|&i| ItemId(i)).collect::<Vec<_>>();
        let p1 = t.reward_prompt(&ids(&h1), ItemId(a1), 6).unwrap();
        let p2 = t.reward_prompt(&ids(&h2), ItemId(a2), 6).unwrap();
        prop_assert_eq!(p1 == p2, h1 == h2 && a1 == a2);
    }
}

fn small_config(backbone: BackboneKind) -> PolicyConfig {
    PolicyConfig {
        backbone,
        n_items: 12,
        emb_dim: 8,
        hidden_dim: 8,
        seq_len: 4,
        state: Mode::Base.state_source(),
        d_lm: 0,
        d_proj: 0,
    }
}

fn random_contexts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<ItemId>> {
    (0..n)
        .map(|_| (0..4).map(|_| ItemId(rng.random_range(0..12))).collect())
        .collect()
}

fn head_bias(net: &mut PolicyNet) -> &mut Mat {
    let at = net
        .params
        .names()
        .iter()
        .position(|n| n == "head.b_q")
        .unwrap();
    &mut net.params.tensors_mut()[at]
}

#[test]
fn q_argmax_ignores_a_uniform_bias_shift() {
    for seed in 0..10 {
        let mut net = PolicyNet::new(small_config(BackboneKind::Recurrent), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_contexts(&mut rng, 6);
        let refs: Vec<&[ItemId]> = ctx.iter().map(Vec::as_slice).collect();
        let before = net.q_values(&refs, None).unwrap();
        head_bias(&mut net).mapv_inplace(|b| b + 3.25);
        let after = net.q_values(&refs, None).unwrap();
        for (r0, r1) in before.rows().into_iter().zip(after.rows()) {
            assert_eq!(
                rank(r0.as_slice().unwrap())[0],
                rank(r1.as_slice().unwrap())[0]
            );
        }
    }
}

#[test]
fn swapping_context_items_changes_the_state() {
    for backbone in [BackboneKind::Recurrent, BackboneKind::Attention] {
        for seed in 0..10 {
            let net = PolicyNet::new(small_config(backbone), seed).unwrap();
            let a = [ItemId(1), ItemId(2), ItemId(3), ItemId(4)];
            let b = [ItemId(1), ItemId(3), ItemId(2), ItemId(4)];
            let la = net.logits(&[&a]).unwrap();
            let lb = net.logits(&[&b]).unwrap();
            let diff = (&la - &lb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                diff > 1e-9,
                "{backbone:?} seed {seed}: swap left outputs unchanged"
            );
        }
    }
}

#[test]
fn loss_identities_hold_for_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [Mode::Base, Mode::Lea] {
        let settings = TrainSettings {
            mode,
            w_ah: 0.37,
            w_aq: 0.013,
            ..TrainSettings::default()
        };
        let twin = TwinPolicy::new(small_config(BackboneKind::Recurrent), 5).unwrap();
        let trainer = Trainer::new(twin, settings, 5).unwrap();
        for _ in 0..20 {
            let contexts = random_contexts(&mut rng, 8);
            let targets: Vec<ItemId> = (0..8).map(|_| ItemId(rng.random_range(0..12))).collect();
            let aug = (mode == Mode::Lea).then(|| {
                (0..8)
                    .map(|_| {
                        let mut ids: Vec<u32> = (0..12).collect();
                        ids.shuffle(&mut rng);
                        let list = [0, 1, 2, 3, 4].map(|k| ItemId(ids[k]));
                        let a = AugmentedAction::new(list, rng.random_range(0..5)).unwrap();
                        (a, rng.random_range(0.0..1.0))
                    })
                    .collect()
            });
            let p = Prepared {
                next_contexts: contexts
                    .iter()
                    .zip(&targets)
                    .map(|(c, &t)| [&c[1..], &[t]].concat())
                    .collect(),
                contexts,
                negatives: targets.iter().map(|t| ItemId((t.0 + 1) % 12)).collect(),
                targets,
                le: None,
                le_next: None,
                r_pos: (0..8).map(|_| rng.random_range(0.0..1.0)).collect(),
                r_neg: (0..8).map(|_| rng.random_range(0.0..1.0)).collect(),
                aug,
            };
            for branch in [Branch::Main, Branch::Alt] {
                let (rec, _) = trainer.losses(&p, branch).unwrap();
                assert!(rec.losses.identity_error() <= 1e-9, "{:?}", rec.losses);
            }
        }
    }
}

/// An environment whose answers are cheap deterministic functions of the query.
struct Toy;

impl Environment for Toy {
    fn state_dim(&self) -> usize {
        3
    }
    fn capabilities(&self) -> lea_core::env::Capabilities {
        lea_core::env::Capabilities {
            state: true,
            reward: true,
            augment: true,
        }
    }
    fn state_of(&self, h: &[ItemId]) -> Result<Vec<f64>> {
        Ok(vec![h.len() as f64, h[0].0 as f64, 1.0])
    }
    fn reward_of(&self, h: &[ItemId], a: ItemId) -> Result<RewardValue> {
        Ok(RewardValue::from_raw((a.0 as f64 - h.len() as f64) / 10.0))
    }
    fn label_scores(&self, h: &[ItemId], l: &[ItemId; 5]) -> Result<[f64; 5]> {
        Ok(l.map(|i| ((i.0 as usize + h.len()) % 5) as f64))
    }
}

#[test]
fn cache_hit_rate_matches_a_duplicate_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let env = CachedEnv::new(CountingEnv::new(Toy));
    let queries: Vec<(Vec<ItemId>, ItemId)> = (0..1000)
        .map(|_| {
            let len = rng.random_range(1..3);
            let h = (0..len).map(|_| ItemId(rng.random_range(0..4))).collect();
            (h, ItemId(rng.random_range(0..5)))
        })
        .collect();
    let mut fresh = HashSet::new();
    let distinct = queries
        .iter()
        .filter(|q| fresh.insert((*q).clone()))
        .count();
    for chunk in queries.chunks(37) {
        let q: Vec<(&[ItemId], ItemId)> = chunk.iter().map(|(h, a)| (h.as_slice(), *a)).collect();
        let got = env.rewards(&q).unwrap();
        let direct: Vec<RewardValue> = q
            .iter()
            .map(|(h, a)| Toy.reward_of(h, *a).unwrap())
            .collect();
        assert_eq!(got, direct);
    }
    let stats = env.stats();
    assert_eq!(stats.misses as usize, distinct);
    assert_eq!(stats.hits as usize, 1000 - distinct);
    assert_eq!(env.inner.counts.total() as usize, distinct);
}
