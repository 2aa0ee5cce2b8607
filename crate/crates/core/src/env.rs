//! The environment contract: user states, rewards and augmentation choices
//! supplied by a language-model environment.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::{AugmentedAction, ItemId, RewardValue, AUGMENT_CANDIDATES};
use crate::error::{Error, Result};

pub type Candidates = [ItemId; AUGMENT_CANDIDATES];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub state: bool,
    pub reward: bool,
    pub augment: bool,
}

fn unsupported(what: &str) -> Error {
    Error::Env(format!("environment does not provide {what}"))
}

/// State model, reward model and action augmenter. Implementations must be
/// pure for the lifetime of a run: equal inputs give equal outputs.
pub trait Environment: Send + Sync {
    /// Width of the vectors returned by [`Environment::state_of`].
    fn state_dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    fn state_of(&self, _history: &[ItemId]) -> Result<Vec<f64>> {
        Err(unsupported("states"))
    }

    fn reward_of(&self, _history: &[ItemId], _action: ItemId) -> Result<RewardValue> {
        Err(unsupported("rewards"))
    }

    /// Scores of the position labels "first" … "fifth".
    fn label_scores(
        &self,
        _history: &[ItemId],
        _list: &Candidates,
    ) -> Result<[f64; AUGMENT_CANDIDATES]> {
        Err(unsupported("augmentation"))
    }

    /// Index of the chosen candidate. Ties go to the lowest index.
    fn select(&self, history: &[ItemId], list: &Candidates) -> Result<usize> {
        Ok(argmax_first(&self.label_scores(history, list)?))
    }

    fn states(&self, histories: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        histories.iter().map(|h| self.state_of(h)).collect()
    }

    fn rewards(&self, queries: &[(&[ItemId], ItemId)]) -> Result<Vec<RewardValue>> {
        queries.iter().map(|(h, a)| self.reward_of(h, *a)).collect()
    }

    fn selections(&self, queries: &[(&[ItemId], Candidates)]) -> Result<Vec<usize>> {
        queries.iter().map(|(h, l)| self.select(h, l)).collect()
    }
}

macro_rules! forward_env {
    ($ty:ty) => {
        impl<E: Environment + ?Sized> Environment for $ty {
            fn state_dim(&self) -> usize {
                (**self).state_dim()
            }
            fn capabilities(&self) -> Capabilities {
                (**self).capabilities()
            }
            fn state_of(&self, h: &[ItemId]) -> Result<Vec<f64>> {
                (**self).state_of(h)
            }
            fn reward_of(&self, h: &[ItemId], a: ItemId) -> Result<RewardValue> {
                (**self).reward_of(h, a)
            }
            fn label_scores(
                &self,
                h: &[ItemId],
                l: &Candidates,
            ) -> Result<[f64; AUGMENT_CANDIDATES]> {
                (**self).label_scores(h, l)
            }
            fn select(&self, h: &[ItemId], l: &Candidates) -> Result<usize> {
                (**self).select(h, l)
            }
            fn states(&self, hs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
                (**self).states(hs)
            }
            fn rewards(&self, q: &[(&[ItemId], ItemId)]) -> Result<Vec<RewardValue>> {
                (**self).rewards(q)
            }
            fn selections(&self, q: &[(&[ItemId], Candidates)]) -> Result<Vec<usize>> {
                (**self).selections(q)
            }
        }
    };
}

forward_env!(&E);
forward_env!(Box<E>);
forward_env!(std::sync::Arc<E>);

/// First index of the maximum.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn candidates(top5: &[ItemId]) -> Result<Candidates> {
    let list: Candidates = top5.try_into().map_err(|_| {
        Error::invalid(format!(
            "expected {AUGMENT_CANDIDATES} candidates, got {}",
            top5.len()
        ))
    })?;
    for i in 0..list.len() {
        if list[..i].contains(&list[i]) {
            return Err(Error::invalid(format!("duplicate candidate {}", list[i])));
        }
    }
    Ok(list)
}

/// Asks the environment which of five distinct candidates the user is most
/// likely to pick next.
pub fn select_augmentation<E: Environment + ?Sized>(
    env: &E,
    history: &[ItemId],
    top5: &[ItemId],
) -> Result<AugmentedAction> {
    let list = candidates(top5)?;
    AugmentedAction::new(list, env.select(history, &list)?)
}

/// Batched [`select_augmentation`].
pub fn select_augmentations<E: Environment + ?Sized>(
    env: &E,
    queries: &[(&[ItemId], Vec<ItemId>)],
) -> Result<Vec<AugmentedAction>> {
    let lists: Vec<(&[ItemId], Candidates)> = queries
        .iter()
        .map(|(h, top)| Ok((*h, candidates(top)?)))
        .collect::<Result<_>>()?;
    let picks = env.selections(&lists)?;
    lists
        .iter()
        .zip(picks)
        .map(|((_, l), i)| AugmentedAction::new(*l, i))
        .collect()
}

/// Which vector the Q head reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateSource {
    /// The sequence model's hidden state only.
    #[default]
    Hidden,
    /// Projected environment state concatenated with the hidden state.
    Fused,
    /// Projected environment state only.
    LeOnly,
}

impl StateSource {
    pub fn uses_env(self) -> bool {
        self != StateSource::Hidden
    }

    pub fn dim(self, d_proj: usize, d_h: usize) -> usize {
        match self {
            StateSource::Hidden => d_h,
            StateSource::Fused => d_proj + d_h,
            StateSource::LeOnly => d_proj,
        }
    }
}

/// Builds the Q-head input on the tape. `le` is B × d_lm, `proj` is
/// d_lm × d_proj and `hidden` is B × d_h.
pub fn fuse_on_tape(
    tape: &mut Tape<'_>,
    source: StateSource,
    le: Option<Var>,
    proj: Option<Var>,
    hidden: Var,
) -> Result<Var> {
    if source == StateSource::Hidden {
        return Ok(hidden);
    }
    let (le, proj) = match (le, proj) {
        (Some(l), Some(p)) => (l, p),
        _ => return Err(Error::invalid("environment state and projection required")),
    };
    let (lv, pv, hv) = (
        tape.value(le).dim(),
        tape.value(proj).dim(),
        tape.value(hidden).dim(),
    );
    if lv.1 != pv.0 || lv.0 != hv.0 {
        return Err(Error::dim(format!(
            "fuse: le {lv:?}, proj {pv:?}, hidden {hv:?}"
        )));
    }
    let projected = tape.matmul(le, proj);
    Ok(match source {
        StateSource::LeOnly => projected,
        _ => tape.concat_cols(projected, hidden),
    })
}

/// `proj(le) ⧺ hidden`, or `proj(le)` alone for [`StateSource::LeOnly`].
/// `proj = None` means the identity.
pub fn fuse_state(
    le: &[f64],
    hidden: &[f64],
    proj: Option<&Mat>,
    source: StateSource,
) -> Result<Vec<f64>> {
    let identity;
    let proj = match proj {
        Some(p) => p,
        None => {
            identity = Mat::eye(le.len());
            &identity
        }
    };
    let mut tape = Tape::new();
    let l = tape.constant(Mat::from_shape_vec((1, le.len()), le.to_vec()).expect("row vector"));
    let h =
        tape.constant(Mat::from_shape_vec((1, hidden.len()), hidden.to_vec()).expect("row vector"));
    let p = tape.constant_ref(proj);
    let out = fuse_on_tape(&mut tape, source, Some(l), Some(p), h)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Environment that has no language model behind it. It serves the
/// constant rewards used by the plain baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedRewardEnv {
    pub reward: f64,
}

impl Default for FixedRewardEnv {
    fn default() -> Self {
        FixedRewardEnv { reward: 1.0 }
    }
}

impl Environment for FixedRewardEnv {
    fn state_dim(&self) -> usize {
        0
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn reward_of(&self, _history: &[ItemId], _action: ItemId) -> Result<RewardValue> {
        Ok(RewardValue::fixed(self.reward))
    }
}

/// Counts queries per capability.
#[derive(Debug, Default)]
pub struct CallCounts {
    pub state: AtomicU64,
    pub reward: AtomicU64,
    pub augment: AtomicU64,
}

impl CallCounts {
    pub fn snapshot(&self) -> [u64; 3] {
        [
            self.state.load(Ordering::Relaxed),
            self.reward.load(Ordering::Relaxed),
            self.augment.load(Ordering::Relaxed),
        ]
    }

    pub fn total(&self) -> u64 {
        self.snapshot().iter().sum()
    }
}

pub struct CountingEnv<E> {
    pub inner: E,
    pub counts: CallCounts,
}

impl<E> CountingEnv<E> {
    pub fn new(inner: E) -> Self {
        CountingEnv {
            inner,
            counts: CallCounts::default(),
        }
    }
}

fn bump(c: &AtomicU64, n: usize) {
    c.fetch_add(n as u64, Ordering::Relaxed);
}

impl<E: Environment> Environment for CountingEnv<E> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn state_of(&self, h: &[ItemId]) -> Result<Vec<f64>> {
        bump(&self.counts.state, 1);
        self.inner.state_of(h)
    }
    fn reward_of(&self, h: &[ItemId], a: ItemId) -> Result<RewardValue> {
        bump(&self.counts.reward, 1);
        self.inner.reward_of(h, a)
    }
    fn label_scores(&self, h: &[ItemId], l: &Candidates) -> Result<[f64; AUGMENT_CANDIDATES]> {
        bump(&self.counts.augment, 1);
        self.inner.label_scores(h, l)
    }
    fn select(&self, h: &[ItemId], l: &Candidates) -> Result<usize> {
        bump(&self.counts.augment, 1);
        self.inner.select(h, l)
    }
    fn states(&self, hs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        bump(&self.counts.state, hs.len());
        self.inner.states(hs)
    }
    fn rewards(&self, q: &[(&[ItemId], ItemId)]) -> Result<Vec<RewardValue>> {
        bump(&self.counts.reward, q.len());
        self.inner.rewards(q)
    }
    fn selections(&self, q: &[(&[ItemId], Candidates)]) -> Result<Vec<usize>> {
        bump(&self.counts.augment, q.len());
        self.inner.selections(q)
    }
}

pub(crate) struct Memo<K, V> {
    map: Mutex<HashMap<K, V>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<K: Eq + Hash + Clone, V: Clone> Memo<K, V> {
    pub(crate) fn new() -> Self {
        Memo {
            map: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Resolves `keys` in order. Keys absent from the cache are computed once
    /// each, in a single call to `compute`; repeats inside the batch count as
    /// hits.
    pub(crate) fn resolve(
        &self,
        keys: Vec<K>,
        compute: impl FnOnce(&[usize]) -> Result<Vec<V>>,
    ) -> Result<Vec<V>> {
        let mut out: Vec<Option<V>> = Vec::with_capacity(keys.len());
        let mut pending: HashMap<K, usize> = HashMap::new();
        let mut first: Vec<usize> = Vec::new();
        let mut slot_of: Vec<Option<usize>> = Vec::with_capacity(keys.len());
        {
            let map = self.map.lock().expect("cache lock");
            for (i, k) in keys.iter().enumerate() {
                if let Some(v) = map.get(k) {
                    out.push(Some(v.clone()));
                    slot_of.push(None);
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else if let Some(&j) = pending.get(k) {
                    out.push(None);
                    slot_of.push(Some(j));
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else {
                    pending.insert(k.clone(), first.len());
                    slot_of.push(Some(first.len()));
                    first.push(i);
                    out.push(None);
                    self.misses.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        if first.is_empty() {
            return Ok(out.into_iter().map(|v| v.expect("all cached")).collect());
        }
        let computed = compute(&first)?;
        {
            let mut map = self.map.lock().expect("cache lock");
            for (&i, v) in first.iter().zip(&computed) {
                map.entry(keys[i].clone()).or_insert_with(|| v.clone());
            }
        }
        Ok(out
            .into_iter()
            .zip(slot_of)
            .map(|(v, s)| v.unwrap_or_else(|| computed[s.expect("pending slot")].clone()))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Memoises every query by its exact inputs.
pub struct CachedEnv<E> {
    pub inner: E,
    states: Memo<Vec<ItemId>, Vec<f64>>,
    rewards: Memo<(Vec<ItemId>, ItemId), RewardValue>,
    selections: Memo<(Vec<ItemId>, Candidates), usize>,
}

impl<E: Environment> CachedEnv<E> {
    pub fn new(inner: E) -> Self {
        CachedEnv {
            inner,
            states: Memo::new(),
            rewards: Memo::new(),
            selections: Memo::new(),
        }
    }

    pub fn stats(&self) -> CacheStats {
        let memos = [
            (&self.states.hits, &self.states.misses),
            (&self.rewards.hits, &self.rewards.misses),
            (&self.selections.hits, &self.selections.misses),
        ];
        memos
            .iter()
            .fold(CacheStats::default(), |acc, (h, m)| CacheStats {
                hits: acc.hits + h.load(Ordering::Relaxed),
                misses: acc.misses + m.load(Ordering::Relaxed),
            })
    }
}

impl<E: Environment> Environment for CachedEnv<E> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn state_of(&self, h: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.states(&[h])?.remove(0))
    }
    fn reward_of(&self, h: &[ItemId], a: ItemId) -> Result<RewardValue> {
        Ok(self.rewards(&[(h, a)])?[0])
    }
    fn label_scores(&self, h: &[ItemId], l: &Candidates) -> Result<[f64; AUGMENT_CANDIDATES]> {
        self.inner.label_scores(h, l)
    }
    fn select(&self, h: &[ItemId], l: &Candidates) -> Result<usize> {
        Ok(self.selections(&[(h, *l)])?[0])
    }
    fn states(&self, hs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        let keys = hs.iter().map(|h| h.to_vec()).collect();
        self.states.resolve(keys, |idx| {
            let q: Vec<&[ItemId]> = idx.iter().map(|&i| hs[i]).collect();
            self.inner.states(&q)
        })
    }
    fn rewards(&self, qs: &[(&[ItemId], ItemId)]) -> Result<Vec<RewardValue>> {
        let keys = qs.iter().map(|(h, a)| (h.to_vec(), *a)).collect();
        self.rewards.resolve(keys, |idx| {
            let q: Vec<(&[ItemId], ItemId)> = idx.iter().map(|&i| qs[i]).collect();
            self.inner.rewards(&q)
        })
    }
    fn selections(&self, qs: &[(&[ItemId], Candidates)]) -> Result<Vec<usize>> {
        let keys = qs.iter().map(|(h, l)| (h.to_vec(), *l)).collect();
        self.selections.resolve(keys, |idx| {
            let q: Vec<(&[ItemId], Candidates)> = idx.iter().map(|&i| qs[i]).collect();
            self.inner.selections(&q)
        })
    }
}
