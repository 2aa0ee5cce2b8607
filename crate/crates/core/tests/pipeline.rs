use std::collections::BTreeMap;

use lea_core::autodiff::Mat;
use lea_core::config::ExperimentConfig;
use lea_core::env::{Capabilities, CountingEnv, Environment};
use lea_core::experiment::{
    ablate_with, finetune_stage, prepare_from, tokenize_stage, train_policy, Inputs,
};
use lea_core::ingest::NegativeSampler;
use lea_core::metrics::{evaluate, Scorer};
use lea_core::policy::Mode;
use lea_core::prompt::PromptTemplate;
use lea_core::surrogate::finetune::{finetune, FinetuneConfig, LeExample};
use lea_core::surrogate::lm::{LmConfig, TinyLm};
use lea_core::surrogate::synthetic::{SyntheticWorld, WorldConfig, TEMPLATE};
use lea_core::surrogate::token_matrix;
use lea_core::surrogate::vocab::Vocab;
use lea_core::surrogate::SurrogateEnv;
use lea_core::{InteractionSequence, ItemId, Parallelism, Result, RewardValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic environment with every capability and trivial cost.
struct Toy;

impl Environment for Toy {
    fn state_dim(&self) -> usize {
        3
    }
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            state: true,
            reward: true,
            augment: true,
        }
    }
    fn state_of(&self, h: &[ItemId]) -> Result<Vec<f64>> {
        Ok(vec![
            h.len() as f64 / 10.0,
            h[h.len() - 1].0 as f64 / 40.0,
            1.0,
        ])
    }
    fn reward_of(&self, h: &[ItemId], a: ItemId) -> Result<RewardValue> {
        Ok(RewardValue::from_raw((a.0 as f64 - h[0].0 as f64) / 20.0))
    }
    fn label_scores(&self, h: &[ItemId], l: &[ItemId; 5]) -> Result<[f64; 5]> {
        Ok(l.map(|i| ((i.0 as usize + h.len()) % 5) as f64))
    }
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic = WorldConfig {
        n_items: 40,
        n_users: 200,
        max_len: 10,
        ..WorldConfig::default()
    };
    cfg.hyper.emb_dim = 16;
    cfg.hyper.hidden_dim = 16;
    cfg.hyper.max_epochs = 2;
    cfg.hyper.eval_every_steps = 5;
    cfg.model.d_proj = 4;
    cfg
}

fn small_inputs(cfg: &ExperimentConfig) -> Inputs {
    let world = SyntheticWorld::new(cfg.synthetic.clone()).unwrap();
    prepare_from(
        cfg,
        &world.events(),
        Some(&world.catalog()),
        BTreeMap::new(),
    )
    .unwrap()
}

#[test]
fn each_mode_queries_exactly_its_capabilities() {
    let cfg = small_config();
    let inputs = small_inputs(&cfg);
    let expected = [
        (Mode::Normal, [false, false, false]),
        (Mode::Base, [false, false, false]),
        (Mode::Ler, [false, true, false]),
        (Mode::Les, [true, false, false]),
        (Mode::LesPrime, [true, false, false]),
        (Mode::Lea, [false, false, true]),
        (Mode::Lear, [false, true, true]),
        (Mode::Leas, [true, false, true]),
        (Mode::Leasr, [true, true, true]),
        (Mode::LeasPrimeR, [true, true, true]),
    ];
    for (mode, want) in expected {
        let mut c = cfg.clone();
        c.model.mode = mode;
        let env = CountingEnv::new(Toy);
        train_policy(&c, &inputs, &env).unwrap();
        let got = env.counts.snapshot().map(|n| n > 0);
        assert_eq!(got, want, "{mode}: calls {:?}", env.counts.snapshot());
    }
}

#[test]
fn normal_mode_never_calls_the_environment() {
    let mut cfg = small_config();
    cfg.model.mode = Mode::Normal;
    let inputs = small_inputs(&cfg);
    let env = CountingEnv::new(Toy);
    let out = train_policy(&cfg, &inputs, &env).unwrap();
    assert!(out.steps > 0);
    assert_eq!(env.counts.total(), 0);
}

#[test]
fn zero_weight_grid_reduces_to_the_run_without_augmentation() {
    let mut cfg = small_config();
    cfg.model.mode = Mode::Lea;
    cfg.hyper.w_aq = 0.0;
    cfg.ablate.param = "w_ah".into();
    cfg.ablate.grid = vec![0.0];
    cfg.ablate.seeds = vec![0, 1];
    let inputs = small_inputs(&cfg);
    let rows = ablate_with(&cfg, &inputs, &Toy).unwrap();
    for row in rows {
        let mut base = cfg.clone();
        base.model.mode = Mode::Base;
        base.hyper.seed = row.seed;
        let plain = train_policy(&base, &inputs, &Toy).unwrap();
        assert_eq!(row.metrics, plain.report.metrics, "seed {}", row.seed);
        assert_eq!(row.steps, plain.steps);
    }
}

#[test]
fn ablation_grid_runs_every_point_deterministically() {
    let mut cfg = small_config();
    cfg.hyper.max_epochs = 1;
    cfg.model.mode = Mode::Lea;
    cfg.ablate.grid = vec![0.01, 0.1, 1.0];
    cfg.ablate.seeds = vec![0, 1, 2];
    let inputs = small_inputs(&cfg);
    let a = ablate_with(&cfg, &inputs, &Toy).unwrap();
    let b = ablate_with(&cfg, &inputs, &Toy).unwrap();
    assert_eq!(a.len(), 9);
    assert_eq!(a, b);
}

#[test]
fn uniform_next_item_draws_pass_a_chi_square_test() {
    let world = SyntheticWorld::new(WorldConfig {
        n_items: 50,
        n_users: 800,
        temperature: f64::INFINITY,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut counts = [0.0f64; 50];
    for e in world.events() {
        counts[SyntheticWorld::item_index(&e.item_key).unwrap()] += 1.0;
    }
    let n: f64 = counts.iter().sum();
    let expect = n / 50.0;
    let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
    // 49 degrees of freedom; mean 49, sd ~9.9. Five sd above the mean.
    assert!(chi2 < 49.0 + 5.0 * 98f64.sqrt(), "chi2 = {chi2}");
    for c in counts {
        assert!((c - expect).abs() <= 5.0 * (expect * (1.0 - 1.0 / 50.0)).sqrt());
    }
}

#[test]
fn negatives_are_uniform_over_unseen_items() {
    let sampler = NegativeSampler { n_items: 50 };
    let exclude = [3, 17, 41].map(ItemId).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0.0f64; 50];
    for _ in 0..10_000 {
        counts[sampler.sample(&exclude, &mut rng).unwrap().index()] += 1.0;
    }
    let p: f64 = 1.0 / 47.0;
    let (mean, sd) = (10_000.0 * p, (10_000.0 * p * (1.0 - p)).sqrt());
    for (i, c) in counts.iter().enumerate() {
        if [3, 17, 41].contains(&i) {
            assert_eq!(*c, 0.0);
        } else {
            assert!((c - mean).abs() <= 3.5 * sd, "item {i}: {c}");
        }
    }
}

/// Scores items with fresh random noise on every call.
struct Noise(std::sync::Mutex<ChaCha8Rng>);

impl Scorer for Noise {
    fn n_items(&self) -> usize {
        100
    }
    fn scores(&self, contexts: &[&[ItemId]]) -> Result<Mat> {
        let mut rng = self.0.lock().unwrap();
        Ok(Mat::from_shape_fn((contexts.len(), 100), |_| rng.random()))
    }
}

#[test]
fn random_ranking_hits_top_five_one_time_in_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<InteractionSequence> = (0..2000)
        .map(|k| InteractionSequence {
            session_id: format!("s{k:04}"),
            items: vec![
                ItemId(rng.random_range(0..100)),
                ItemId(rng.random_range(0..100)),
            ],
            timestamps: vec![0, 1],
        })
        .collect();
    let scorer = Noise(std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(5)));
    let r = evaluate(&scorer, &seqs, 10, &[5], Parallelism::Sequential).unwrap();
    let sd = (0.05 * 0.95 / 2000.0f64).sqrt();
    assert!(
        (r.metrics[0].hr - 0.05).abs() <= 3.0 * sd,
        "HR@5 = {}",
        r.metrics[0].hr
    );
}

fn tiny_lm(seed: u64) -> (TinyLm, PromptTemplate) {
    let template = PromptTemplate::parse(TEMPLATE).unwrap();
    let lines = template.corpus_lines();
    let vocab = Vocab::build(lines.iter().map(Vec::as_slice), 100);
    let cfg = LmConfig {
        d_model: 16,
        n_blocks: 1,
        ff_dim: 16,
        max_positions: 32,
        max_words: 100,
    };
    (TinyLm::new(cfg, vocab, seed).unwrap(), template)
}

const PLANT_ITEMS: u32 = 8;

fn planted(h: ItemId) -> ItemId {
    ItemId((h.0 + 3) % PLANT_ITEMS)
}

fn planted_examples(rng: &mut ChaCha8Rng, n: usize) -> Vec<LeExample> {
    (0..n)
        .map(|_| {
            let h = ItemId(rng.random_range(0..PLANT_ITEMS));
            let len = rng.random_range(1..=3);
            let positive = planted(h);
            let mut negative = positive;
            while negative == positive || negative == h {
                negative = ItemId(rng.random_range(0..PLANT_ITEMS));
            }
            LeExample {
                history: vec![h; len],
                positive,
                negative,
            }
        })
        .collect()
}

fn planted_env() -> SurrogateEnv {
    let (lm, template) = tiny_lm(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = Mat::from_shape_fn((PLANT_ITEMS as usize, 16), |_| rng.random_range(-1.0..1.0));
    let examples = planted_examples(&mut rng, 400);
    let cfg = FinetuneConfig {
        epochs: 30,
        lr: 1e-2,
        ..FinetuneConfig::default()
    };
    let (adapter, _) = finetune(&lm, &tokens, &template, &examples, &cfg).unwrap();
    let keys = (0..PLANT_ITEMS).map(|i| format!("i{i}")).collect();
    SurrogateEnv::new(lm, adapter, tokens, keys, template).unwrap()
}

#[test]
fn selection_follows_a_planted_preference() {
    let env = planted_env();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut hits = 0;
    for _ in 0..200 {
        let h = ItemId(rng.random_range(0..PLANT_ITEMS));
        let want = planted(h);
        let mut others: Vec<ItemId> = (0..PLANT_ITEMS)
            .map(ItemId)
            .filter(|&i| i != want)
            .collect();
        let mut list = Vec::with_capacity(5);
        list.push(want);
        while list.len() < 5 {
            list.push(others.swap_remove(rng.random_range(0..others.len())));
        }
        let at = rng.random_range(0..5);
        list.swap(0, at);
        let list: [ItemId; 5] = list.try_into().unwrap();
        let history = vec![h; rng.random_range(1..=3)];
        hits += usize::from(list[env.select(&history, &list).unwrap()] == want);
    }
    assert!(hits >= 190, "planted item chosen {hits}/200 times");
}

#[test]
fn finetuning_trains_only_the_adapter_and_is_reproducible() {
    let (lm, template) = tiny_lm(3);
    let before = lm.base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = Mat::from_shape_fn((PLANT_ITEMS as usize, 16), |_| rng.random_range(-1.0..1.0));
    let examples = planted_examples(&mut rng, 60);
    let cfg = FinetuneConfig {
        epochs: 2,
        ..FinetuneConfig::default()
    };
    let (a, la) = finetune(&lm, &tokens, &template, &examples, &cfg).unwrap();
    let (b, lb) = finetune(&lm, &tokens, &template, &examples, &cfg).unwrap();
    assert_eq!(lm.base.tensors(), before.tensors());
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_eq!(la, lb);
    let fresh = lm.new_adapter(cfg.rank, 0);
    assert_ne!(a.params.tensors(), fresh.params.tensors());

    let idle = FinetuneConfig { epochs: 0, ..cfg };
    let (z, _) = finetune(&lm, &tokens, &template, &examples, &idle).unwrap();
    for (name, t) in z.params.names().iter().zip(z.params.tensors()) {
        if name.ends_with(".b") && name.contains("lora") {
            assert!(t.iter().all(|&v| v == 0.0), "{name} moved without training");
        }
    }
}

#[test]
fn environment_quality_on_the_synthetic_world() {
    let mut cfg = ExperimentConfig::default();
    cfg.lm.template = "compact".into();
    let world = SyntheticWorld::new(cfg.synthetic.clone()).unwrap();
    let inputs = prepare_from(
        &cfg,
        &world.events(),
        Some(&world.catalog()),
        BTreeMap::new(),
    )
    .unwrap();
    let st = tokenize_stage(&cfg, &inputs).unwrap();
    let base = st.lm.base.clone();
    let tokens = token_matrix(&st.tokens).unwrap();
    let mut report = Vec::new();
    for seed in 0..3 {
        let mut c = cfg.clone();
        c.finetune.seed = seed;
        let ft = finetune_stage(
            &c,
            &inputs,
            st.lm.clone(),
            tokens.clone(),
            st.template.clone(),
        )
        .unwrap();
        assert_eq!(ft.env.lm.base.tensors(), base.tensors());
        report.push(ft.quality.unwrap());
    }
    for q in &report {
        assert!(q.reward_accuracy >= 0.9, "{report:?}");
        assert!(q.state_accuracy >= 0.8, "{report:?}");
    }
}
