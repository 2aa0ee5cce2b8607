//! Supervised and Q heads on top of a sequence encoder, the twin-copy
//! double Q-learning trainer, and ranking.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_init, Gradients, Mat, ParamId, ParamSet, Tape, Var};
use crate::backbone::{BackboneKind, Encoder};
use crate::data::{AugmentedAction, ItemId, LossBreakdown, WindowedExample, AUGMENT_CANDIDATES};
use crate::env::{fuse_on_tape, select_augmentations, Capabilities, Environment, StateSource};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    #[default]
    Snqn,
    Sa2c,
}

impl FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snqn" => Ok(Framework::Snqn),
            "sa2c" => Ok(Framework::Sa2c),
            _ => Err(Error::Config(format!("unknown framework {s:?}"))),
        }
    }
}

/// Training variants. `Normal` is the purely supervised model and `Base` the
/// plain RL framework with fixed rewards; the rest replace rewards (R),
/// states (S, or S' for environment-only states) and add augmentation (A).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Normal,
    #[default]
    Base,
    Lea,
    Ler,
    Les,
    LesPrime,
    Lear,
    Leas,
    LeasPrimeR,
    Leasr,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Normal,
        Mode::Base,
        Mode::Lea,
        Mode::Ler,
        Mode::Les,
        Mode::LesPrime,
        Mode::Lear,
        Mode::Leas,
        Mode::LeasPrimeR,
        Mode::Leasr,
    ];

    pub fn uses_rl(self) -> bool {
        self != Mode::Normal
    }

    pub fn env_rewards(self) -> bool {
        matches!(
            self,
            Mode::Ler | Mode::Lear | Mode::LeasPrimeR | Mode::Leasr
        )
    }

    pub fn state_source(self) -> StateSource {
        match self {
            Mode::Les | Mode::Leas | Mode::Leasr => StateSource::Fused,
            Mode::LesPrime | Mode::LeasPrimeR => StateSource::LeOnly,
            _ => StateSource::Hidden,
        }
    }

    pub fn augments(self) -> bool {
        matches!(
            self,
            Mode::Lea | Mode::Lear | Mode::Leas | Mode::LeasPrimeR | Mode::Leasr
        )
    }

    /// Environment capabilities this mode queries.
    pub fn required(self) -> Capabilities {
        Capabilities {
            state: self.state_source().uses_env(),
            reward: self.env_rewards(),
            augment: self.augments(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Base => "base",
            Mode::Lea => "lea",
            Mode::Ler => "ler",
            Mode::Les => "les",
            Mode::LesPrime => "les-prime",
            Mode::Lear => "lear",
            Mode::Leas => "leas",
            Mode::LeasPrimeR => "leas-prime-r",
            Mode::Leasr => "leasr",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    /// Accepts the kebab-case names as well as forms like `LEAS'R`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .to_ascii_lowercase()
            .replace('\'', "-prime-")
            .replace('_', "-");
        let norm = norm.trim_end_matches('-').replace("--", "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub backbone: BackboneKind,
    pub n_items: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub state: StateSource,
    /// Width of environment states; ignored when `state` is `Hidden`.
    pub d_lm: usize,
    /// Width of the projected environment state.
    pub d_proj: usize,
}

#[derive(Clone, Debug)]
struct HeadIds {
    w_u: ParamId,
    b_u: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    proj: Option<ParamId>,
}

/// One copy of the trainable network: encoder, supervised head, Q head and
/// the environment-state projection.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub encoder: Encoder,
    pub params: ParamSet,
    ids: HeadIds,
    q_evals: Arc<AtomicU64>,
}

pub struct Heads {
    pub hidden: Var,
    pub logits: Var,
    pub q: Option<Var>,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut rng = exec::rng(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let encoder = Encoder::new(
            c.backbone,
            c.n_items,
            c.emb_dim,
            c.hidden_dim,
            c.seq_len,
            &mut params,
            &mut rng,
        )?;
        let d_s = c.state.dim(c.d_proj, c.hidden_dim);
        let w_u = params.push(
            "head.w_u",
            uniform_init(c.hidden_dim, c.n_items, c.hidden_dim, &mut rng),
        );
        let b_u = params.push("head.b_u", Mat::zeros((1, c.n_items)));
        let w_q = params.push("head.w_q", uniform_init(d_s, c.n_items, d_s, &mut rng));
        let b_q = params.push("head.b_q", Mat::zeros((1, c.n_items)));
        let proj = if c.state.uses_env() {
            if c.d_lm == 0 || c.d_proj == 0 {
                return Err(Error::Config(
                    "environment state width must be positive".into(),
                ));
            }
            Some(params.push(
                "fuse.proj",
                uniform_init(c.d_lm, c.d_proj, c.d_lm, &mut rng),
            ))
        } else {
            None
        };
        Ok(PolicyNet {
            config,
            encoder,
            params,
            ids: HeadIds {
                w_u,
                b_u,
                w_q,
                b_q,
                proj,
            },
            q_evals: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    /// Number of Q-head evaluations (rows) performed by this copy and any
    /// clone of it.
    pub fn q_evaluations(&self) -> u64 {
        self.q_evals.load(Ordering::Relaxed)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.id_of(name).map(|id| self.params.get(id))
    }

    /// Builds the forward graph. `le` holds one environment state per row
    /// and is required when the Q head reads it.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trainable: bool,
        contexts: &[&[ItemId]],
        le: Option<Mat>,
        with_q: bool,
    ) -> Result<Heads> {
        let p = self.params.bind(tape, trainable, 0);
        let hidden = self.encoder.forward(tape, &p, contexts)?;
        let lu = tape.matmul(hidden, p[self.ids.w_u]);
        let logits = tape.add_row(lu, p[self.ids.b_u]);
        let q = if with_q {
            let le = match le {
                Some(m) => {
                    if m.dim() != (contexts.len(), self.config.d_lm) {
                        return Err(Error::dim(format!(
                            "environment states {:?}, expected ({}, {})",
                            m.dim(),
                            contexts.len(),
                            self.config.d_lm
                        )));
                    }
                    Some(tape.constant(m))
                }
                None => None,
            };
            let proj = self.ids.proj.map(|id| p[id]);
            let state = fuse_on_tape(tape, self.config.state, le, proj, hidden)?;
            let lq = tape.matmul(state, p[self.ids.w_q]);
            self.q_evals
                .fetch_add(contexts.len() as u64, Ordering::Relaxed);
            Some(tape.add_row(lq, p[self.ids.b_q]))
        } else {
            None
        };
        Ok(Heads { hidden, logits, q })
    }

    /// Hidden states without recording gradients.
    pub fn hidden(&self, contexts: &[&[ItemId]]) -> Result<Mat> {
        let mut tape = Tape::new();
        let h = self
            .forward(&mut tape, false, contexts, None, false)?
            .hidden;
        Ok(tape.value(h).clone())
    }

    /// Supervised scores (B × n). Never touches the Q head.
    pub fn logits(&self, contexts: &[&[ItemId]]) -> Result<Mat> {
        let mut tape = Tape::new();
        let l = self
            .forward(&mut tape, false, contexts, None, false)?
            .logits;
        Ok(tape.value(l).clone())
    }

    /// Q values (B × n).
    pub fn q_values(&self, contexts: &[&[ItemId]], le: Option<Mat>) -> Result<Mat> {
        let mut tape = Tape::new();
        let q = self
            .forward(&mut tape, false, contexts, le, true)?
            .q
            .expect("requested");
        Ok(tape.value(q).clone())
    }

    /// Items ranked by supervised score, best first; ties by ascending id.
    pub fn recommend(&self, context: &[ItemId]) -> Result<Vec<ItemId>> {
        let l = self.logits(&[context])?;
        Ok(rank(l.row(0).as_slice().expect("contiguous")))
    }
}

/// Indices sorted by descending score, ascending index on ties.
pub fn rank(scores: &[f64]) -> Vec<ItemId> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    idx.into_iter().map(ItemId).collect()
}

/// The first `k` of [`rank`], without sorting the whole list.
pub fn top_k(scores: &[f64], k: usize) -> Vec<ItemId> {
    let mut best: Vec<u32> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        let pos = best.partition_point(|&j| {
            let sj = scores[j as usize];
            sj > s || (sj == s && (j as usize) < i)
        });
        if pos < k {
            best.insert(pos, i as u32);
            best.truncate(k);
        }
    }
    best.into_iter().map(ItemId).collect()
}

/// Which copy a step updates. `Main` means the main copy learns and the alt
/// copy supplies bootstrap targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Main,
    Alt,
}

#[derive(Clone, Debug)]
pub struct TwinPolicy {
    pub main: PolicyNet,
    pub alt: PolicyNet,
}

impl TwinPolicy {
    /// The alt copy starts as a deep copy of main.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let main = PolicyNet::new(config, seed)?;
        let alt = main.clone();
        Ok(TwinPolicy { main, alt })
    }

    pub fn q_evaluations(&self) -> u64 {
        self.main.q_evaluations()
    }

    fn split(&mut self, branch: Branch) -> (&mut PolicyNet, &PolicyNet) {
        match branch {
            Branch::Main => (&mut self.main, &self.alt),
            Branch::Alt => (&mut self.alt, &self.main),
        }
    }
}

/// Rewards used when the environment does not supply them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedRewards {
    pub positive: f64,
    pub negative: f64,
    pub augmented: f64,
}

impl Default for FixedRewards {
    fn default() -> Self {
        FixedRewards {
            positive: 1.0,
            negative: 0.0,
            augmented: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub framework: Framework,
    pub mode: Mode,
    pub gamma: f64,
    pub w_ah: f64,
    pub w_aq: f64,
    pub lr: f64,
    pub fixed: FixedRewards,
    /// Draw the five augmentation candidates from the supervised softmax
    /// instead of taking the top five.
    pub sample_candidates: bool,
    /// Rows per gradient chunk; fixed so results do not depend on threads.
    pub chunk: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            framework: Framework::Snqn,
            mode: Mode::Base,
            gamma: 0.5,
            w_ah: 0.1,
            w_aq: 0.01,
            lr: 1e-3,
            fixed: FixedRewards::default(),
            sample_candidates: false,
            chunk: 25,
            parallelism: Parallelism::default(),
        }
    }
}

/// Environment-derived inputs for one batch.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub contexts: Vec<Vec<ItemId>>,
    pub next_contexts: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
    pub negatives: Vec<ItemId>,
    pub le: Option<Mat>,
    pub le_next: Option<Mat>,
    pub r_pos: Vec<f64>,
    pub r_neg: Vec<f64>,
    pub aug: Option<Vec<(AugmentedAction, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub branch: Option<Branch>,
    pub z: Option<f64>,
    pub td_pos: f64,
    pub td_neg: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Default)]
struct Sums {
    h: f64,
    pos: f64,
    neg: f64,
    ah: f64,
    aq: f64,
}

pub struct Trainer {
    pub twin: TwinPolicy,
    pub settings: TrainSettings,
    adam_main: Adam,
    adam_alt: Adam,
    rng: ChaCha8Rng,
    augment_active: bool,
    step: u64,
}

fn mat_rows(rows: &[Vec<f64>], width: usize) -> Result<Mat> {
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::dim(format!(
            "environment state of width {}, expected {width}",
            bad.len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Mat::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::dim(e.to_string()))
}

fn row_max(m: &Mat) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect()
}

fn slice_rows(m: &Option<Mat>, start: usize, end: usize) -> Option<Mat> {
    m.as_ref().map(|m| m.slice(s![start..end, ..]).to_owned())
}

impl Trainer {
    pub fn new(twin: TwinPolicy, settings: TrainSettings, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&settings.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                settings.gamma
            )));
        }
        if twin.main.config.state != settings.mode.state_source() {
            return Err(Error::Config(format!(
                "policy built for {:?} states but mode {} uses {:?}",
                twin.main.config.state,
                settings.mode,
                settings.mode.state_source()
            )));
        }
        let cfg = AdamConfig::new(settings.lr);
        Ok(Trainer {
            adam_main: Adam::new(cfg.clone(), &twin.main.params),
            adam_alt: Adam::new(cfg, &twin.alt.params),
            twin,
            settings,
            rng: exec::rng(exec::derive_seed(seed, 0xC01)),
            augment_active: false,
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Turns augmentation on (for modes that use it).
    pub fn activate_augmentation(&mut self) {
        self.augment_active = true;
    }

    pub fn augmentation_active(&self) -> bool {
        self.augment_active && self.settings.mode.augments()
    }

    /// One step of Algorithm 1 with a coin flip from the seeded stream.
    pub fn train_step<E: Environment + ?Sized>(
        &mut self,
        batch: &[WindowedExample],
        env: &E,
    ) -> Result<StepRecord> {
        let (branch, z) = if self.settings.mode.uses_rl() {
            let z: f64 = self.rng.random();
            (if z <= 0.5 { Branch::Main } else { Branch::Alt }, Some(z))
        } else {
            (Branch::Main, None)
        };
        self.step_with(batch, env, branch, z)
    }

    /// One step with the branch fixed by the caller.
    pub fn train_step_forced<E: Environment + ?Sized>(
        &mut self,
        batch: &[WindowedExample],
        env: &E,
        branch: Branch,
    ) -> Result<StepRecord> {
        self.step_with(batch, env, branch, None)
    }

    fn step_with<E: Environment + ?Sized>(
        &mut self,
        batch: &[WindowedExample],
        env: &E,
        branch: Branch,
        z: Option<f64>,
    ) -> Result<StepRecord> {
        let prepared = self.prepare(batch, env, branch)?;
        let (mut rec, grads) = self.losses(&prepared, branch)?;
        rec.z = z;
        rec.branch = self.settings.mode.uses_rl().then_some(branch);
        let (online, _) = self.twin.split(branch);
        let adam = match branch {
            Branch::Main => &mut self.adam_main,
            Branch::Alt => &mut self.adam_alt,
        };
        adam.step(&mut online.params, &grads, 0);
        self.step += 1;
        rec.step = self.step;
        Ok(rec)
    }

    /// Queries the environment for everything the batch needs.
    pub fn prepare<E: Environment + ?Sized>(
        &mut self,
        batch: &[WindowedExample],
        env: &E,
        branch: Branch,
    ) -> Result<Prepared> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mode = self.settings.mode;
        let n = self.twin.main.n_items();
        for ex in batch {
            if ex.target.index() >= n || ex.negative.index() >= n {
                return Err(Error::invalid("target or negative outside catalog"));
            }
        }
        let contexts: Vec<Vec<ItemId>> = batch.iter().map(|e| e.context.clone()).collect();
        let next_contexts: Vec<Vec<ItemId>> = batch.iter().map(|e| e.next_context().0).collect();
        let histories: Vec<Vec<ItemId>> = batch.iter().map(|e| e.history()).collect();
        let hist: Vec<&[ItemId]> = histories.iter().map(Vec::as_slice).collect();

        let (le, le_next) = if mode.state_source().uses_env() {
            let next: Vec<Vec<ItemId>> = batch.iter().map(|e| e.next_history()).collect();
            let next_refs: Vec<&[ItemId]> = next.iter().map(Vec::as_slice).collect();
            let d = self.twin.main.config.d_lm;
            (
                Some(mat_rows(&env.states(&hist)?, d)?),
                Some(mat_rows(&env.states(&next_refs)?, d)?),
            )
        } else {
            (None, None)
        };

        let fixed = self.settings.fixed;
        let (r_pos, r_neg) = if mode.env_rewards() {
            let q: Vec<(&[ItemId], ItemId)> = hist
                .iter()
                .zip(batch)
                .flat_map(|(h, e)| [(*h, e.target), (*h, e.negative)])
                .collect();
            let r = env.rewards(&q)?;
            (
                r.iter().step_by(2).map(|v| v.value).collect(),
                r.iter().skip(1).step_by(2).map(|v| v.value).collect(),
            )
        } else if mode.uses_rl() {
            (
                vec![fixed.positive; batch.len()],
                vec![fixed.negative; batch.len()],
            )
        } else {
            (vec![0.0; batch.len()], vec![0.0; batch.len()])
        };

        let aug = if self.augmentation_active() {
            let online = match branch {
                Branch::Main => &self.twin.main,
                Branch::Alt => &self.twin.alt,
            };
            let ctx: Vec<&[ItemId]> = contexts.iter().map(Vec::as_slice).collect();
            let logits = online.logits(&ctx)?;
            let lists: Vec<Vec<ItemId>> = logits
                .rows()
                .into_iter()
                .map(|r| {
                    let r = r.as_slice().expect("contiguous");
                    if self.settings.sample_candidates {
                        sample_candidates(r, &mut self.rng)
                    } else {
                        top_k(r, AUGMENT_CANDIDATES)
                    }
                })
                .collect();
            if lists.iter().any(|l| l.len() < AUGMENT_CANDIDATES) {
                return Err(Error::invalid("catalog smaller than the candidate list"));
            }
            let queries: Vec<(&[ItemId], Vec<ItemId>)> = hist.iter().copied().zip(lists).collect();
            let picks = select_augmentations(env, &queries)?;
            let rewards = if mode.env_rewards() {
                let q: Vec<(&[ItemId], ItemId)> =
                    hist.iter().zip(&picks).map(|(h, a)| (*h, a.item)).collect();
                env.rewards(&q)?.into_iter().map(|r| r.value).collect()
            } else {
                vec![fixed.augmented; batch.len()]
            };
            Some(picks.into_iter().zip(rewards).collect())
        } else {
            None
        };

        Ok(Prepared {
            contexts,
            next_contexts,
            targets: batch.iter().map(|e| e.target).collect(),
            negatives: batch.iter().map(|e| e.negative).collect(),
            le,
            le_next,
            r_pos,
            r_neg,
            aug,
        })
    }

    /// Losses and gradients for the online copy of `branch`, from
    /// pre-update parameters.
    pub fn losses(&self, p: &Prepared, branch: Branch) -> Result<(StepRecord, Gradients)> {
        let st = &self.settings;
        let (online, target) = match branch {
            Branch::Main => (&self.twin.main, &self.twin.alt),
            Branch::Alt => (&self.twin.alt, &self.twin.main),
        };
        let b = p.contexts.len();
        let ranges: Vec<(usize, usize)> = (0..b)
            .step_by(st.chunk.max(1))
            .map(|s| (s, (s + st.chunk.max(1)).min(b)))
            .collect();
        let rl = st.mode.uses_rl();

        // Bootstrap maxima from the target copy; the negative branch reads s_t only.
        let (max_next, max_cur) = if rl {
            let parts = st
                .parallelism
                .map(&ranges, |&(s0, s1)| -> Result<(Vec<f64>, Vec<f64>)> {
                    let nc: Vec<&[ItemId]> =
                        p.next_contexts[s0..s1].iter().map(Vec::as_slice).collect();
                    let cc: Vec<&[ItemId]> = p.contexts[s0..s1].iter().map(Vec::as_slice).collect();
                    let qn = target.q_values(&nc, slice_rows(&p.le_next, s0, s1))?;
                    let qc = target.q_values(&cc, slice_rows(&p.le, s0, s1))?;
                    Ok((row_max(&qn), row_max(&qc)))
                });
            let (mut mn, mut mc) = (Vec::with_capacity(b), Vec::with_capacity(b));
            for part in parts {
                let (n, c) = part?;
                mn.extend(n);
                mc.extend(c);
            }
            (mn, mc)
        } else {
            (vec![0.0; b], vec![0.0; b])
        };

        let results = st.parallelism.map(&ranges, |&(s0, s1)| {
            self.chunk_losses(online, p, s0, s1, b, &max_next, &max_cur)
        });
        let mut sums = Sums::default();
        let mut grads = Gradients::default();
        for r in results {
            let (s, g) = r?;
            sums.h += s.h;
            sums.pos += s.pos;
            sums.neg += s.neg;
            sums.ah += s.ah;
            sums.aq += s.aq;
            grads.accumulate(g);
        }
        let bf = b as f64;
        let (td_pos, td_neg) = (sums.pos / bf, sums.neg / bf);
        let losses = LossBreakdown::compose(
            sums.h / bf,
            td_pos + td_neg,
            sums.ah / bf,
            sums.aq / bf,
            st.w_ah,
            st.w_aq,
        );
        Ok((
            StepRecord {
                step: self.step,
                branch: None,
                z: None,
                td_pos,
                td_neg,
                losses,
            },
            grads,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn chunk_losses(
        &self,
        online: &PolicyNet,
        p: &Prepared,
        s0: usize,
        s1: usize,
        total: usize,
        max_next: &[f64],
        max_cur: &[f64],
    ) -> Result<(Sums, Gradients)> {
        let st = &self.settings;
        let rl = st.mode.uses_rl();
        let m = s1 - s0;
        let col = |f: &dyn Fn(usize) -> f64| Mat::from_shape_fn((m, 1), |(i, _)| f(s0 + i));
        let ctx: Vec<&[ItemId]> = p.contexts[s0..s1].iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let heads = online.forward(&mut tape, true, &ctx, slice_rows(&p.le, s0, s1), rl)?;
        let logp = tape.log_softmax(heads.logits);
        let targets: Vec<usize> = p.targets[s0..s1].iter().map(|i| i.index()).collect();
        let lp = tape.pick_per_row(logp, targets.clone());
        let mut ce = tape.scale(lp, -1.0);
        let mut sums = Sums::default();
        let mut terms: Vec<(Var, f64)> = Vec::new();

        if let Some(q) = heads.q {
            let negatives: Vec<usize> = p.negatives[s0..s1].iter().map(|i| i.index()).collect();
            if st.framework == Framework::Sa2c {
                let qv = tape.value(q);
                let adv = col(&|i| {
                    (qv[[i - s0, targets[i - s0]]] - qv[[i - s0, negatives[i - s0]]]) / 2.0
                });
                let a = tape.constant(adv);
                ce = tape.mul(ce, a);
            }
            let g = st.gamma;
            let q_pos = tape.pick_per_row(q, targets);
            let y_pos = tape.constant(col(&|i| p.r_pos[i] + g * max_next[i]));
            let d_pos = tape.sub(y_pos, q_pos);
            let l_pos = tape.square(d_pos);
            let l_pos = tape.sum(l_pos);
            sums.pos = tape.scalar(l_pos);
            terms.push((l_pos, 1.0));

            let q_neg = tape.pick_per_row(q, negatives);
            let y_neg = tape.constant(col(&|i| p.r_neg[i] + g * max_cur[i]));
            let d_neg = tape.sub(y_neg, q_neg);
            let l_neg = tape.square(d_neg);
            let l_neg = tape.sum(l_neg);
            sums.neg = tape.scalar(l_neg);
            terms.push((l_neg, 1.0));

            if let Some(aug) = &p.aug {
                let a_items: Vec<usize> = aug[s0..s1].iter().map(|(a, _)| a.item.index()).collect();
                let la = tape.pick_per_row(logp, a_items.clone());
                let l_ah = tape.sum(la);
                sums.ah = -tape.scalar(l_ah);
                terms.push((l_ah, -st.w_ah));

                let q_aug = tape.pick_per_row(q, a_items);
                let y_aug = tape.constant(col(&|i| aug[i].1 + g * max_next[i]));
                let d_aug = tape.sub(y_aug, q_aug);
                let l_aq = tape.square(d_aug);
                let l_aq = tape.sum(l_aq);
                sums.aq = tape.scalar(l_aq);
                terms.push((l_aq, st.w_aq));
            }
        }
        let l_h = tape.sum(ce);
        sums.h = tape.scalar(l_h);
        let mut total_var = tape.scale(l_h, 1.0 / total as f64);
        for (v, w) in terms {
            let t = tape.scale(v, w / total as f64);
            total_var = tape.add(total_var, t);
        }
        let grads = tape.backward(total_var);
        Ok((sums, grads))
    }
}

/// Five distinct items drawn from the softmax of `scores` (Gumbel top-k).
fn sample_candidates(scores: &[f64], rng: &mut ChaCha8Rng) -> Vec<ItemId> {
    let perturbed: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            s - (-u.ln()).ln()
        })
        .collect();
    top_k(&perturbed, AUGMENT_CANDIDATES)
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy(logits: &Mat, targets: &[ItemId]) -> Result<f64> {
    if logits.nrows() != targets.len() || logits.nrows() == 0 {
        return Err(Error::dim("one target per logit row required"));
    }
    let mut total = 0.0;
    for (row, t) in logits.axis_iter(Axis(0)).zip(targets) {
        if t.index() >= row.len() {
            return Err(Error::invalid(format!(
                "target {t} is padding or outside the catalog"
            )));
        }
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t.index()];
    }
    Ok(total / targets.len() as f64)
}

/// Softmax of one score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// (r + γ·max_next − q)².
pub fn td_error(r: f64, gamma: f64, max_next: f64, q: f64) -> f64 {
    let d = r + gamma * max_next - q;
    d * d
}

/// (Q⁺ − Q⁻) / 2.
pub fn advantage(q_pos: f64, q_neg: f64) -> f64 {
    (q_pos - q_neg) / 2.0
}
