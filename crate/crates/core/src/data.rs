//! Domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense item index in `[0, n)`. The value `n` is reserved for padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The padding id for a catalog of `n_items` items.
    pub fn padding(n_items: usize) -> Self {
        ItemId(n_items as u32)
    }

    pub fn is_padding(self, n_items: usize) -> bool {
        self.index() == n_items
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One user session: items ordered by timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub session_id: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// First invariant a sequence breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TooShort { len: usize },
    LengthMismatch { items: usize, timestamps: usize },
    Unsorted { position: usize },
    Padding { position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooShort { len } => write!(f, "length < 3 (got {len})"),
            Violation::LengthMismatch { items, timestamps } => {
                write!(f, "{items} items but {timestamps} timestamps")
            }
            Violation::Unsorted { position } => {
                write!(f, "timestamps not nondecreasing at position {position}")
            }
            Violation::Padding { position } => {
                write!(f, "padding or out-of-catalog id at position {position}")
            }
        }
    }
}

pub const MIN_SEQUENCE_LEN: usize = 3;

/// Checks the sequence invariants. `n_items` enables the padding check.
pub fn validate(
    seq: &InteractionSequence,
    n_items: Option<usize>,
) -> std::result::Result<(), Violation> {
    if seq.items.len() != seq.timestamps.len() {
        return Err(Violation::LengthMismatch {
            items: seq.items.len(),
            timestamps: seq.timestamps.len(),
        });
    }
    if seq.items.len() < MIN_SEQUENCE_LEN {
        return Err(Violation::TooShort {
            len: seq.items.len(),
        });
    }
    if let Some(position) = seq.timestamps.windows(2).position(|w| w[1] < w[0]) {
        return Err(Violation::Unsorted {
            position: position + 1,
        });
    }
    if let Some(n) = n_items {
        if let Some(position) = seq.items.iter().position(|i| i.index() >= n) {
            return Err(Violation::Padding { position });
        }
    }
    Ok(())
}

/// A fixed-length, left-padded context with its next item and one sampled
/// negative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowedExample {
    pub context: Vec<ItemId>,
    pub target: ItemId,
    pub negative: ItemId,
    pub position_mask: Vec<bool>,
}

impl WindowedExample {
    /// Real (non-padding) items of the context, oldest first.
    pub fn history(&self) -> Vec<ItemId> {
        self.context
            .iter()
            .zip(&self.position_mask)
            .filter(|(_, &real)| real)
            .map(|(&i, _)| i)
            .collect()
    }

    /// Context after the positive action is taken: the window slides by one
    /// and the target becomes the most recent item.
    pub fn next_context(&self) -> (Vec<ItemId>, Vec<bool>) {
        let mut ctx = self.context[1..].to_vec();
        ctx.push(self.target);
        let mut mask = self.position_mask[1..].to_vec();
        mask.push(true);
        (ctx, mask)
    }

    pub fn next_history(&self) -> Vec<ItemId> {
        let mut h = self.history();
        if h.len() == self.context.len() {
            h.remove(0);
        }
        h.push(self.target);
        h
    }
}

/// An item's embedding in the language model's token space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemToken {
    pub item: ItemId,
    pub embedding: Vec<f64>,
}

/// State returned for one step: the environment state, the sequence-model
/// hidden state and their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub le_state: Vec<f64>,
    pub hidden: Vec<f64>,
    pub fused_state: Vec<f64>,
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A reward in `[0, 1]`. Rewards produced by a score head carry the raw
/// output; fixed rewards do not.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub value: f64,
    pub raw: Option<f64>,
}

impl RewardValue {
    pub fn from_raw(raw: f64) -> Self {
        RewardValue {
            value: logistic(raw),
            raw: Some(raw),
        }
    }

    pub fn fixed(value: f64) -> Self {
        RewardValue { value, raw: None }
    }
}

pub const AUGMENT_CANDIDATES: usize = 5;

/// The item an environment picked from a five-item candidate list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedAction {
    pub item: ItemId,
    pub list: [ItemId; AUGMENT_CANDIDATES],
    pub selected_index: usize,
}

impl AugmentedAction {
    pub fn new(list: [ItemId; AUGMENT_CANDIDATES], selected_index: usize) -> Result<Self> {
        if selected_index >= AUGMENT_CANDIDATES {
            return Err(Error::invalid(format!(
                "selected index {selected_index} out of range"
            )));
        }
        Ok(AugmentedAction {
            item: list[selected_index],
            list,
            selected_index,
        })
    }
}

/// Per-batch loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_h: f64,
    pub l_q: f64,
    pub l_ah: f64,
    pub l_aq: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub w_ah: f64,
    pub w_aq: f64,
}

impl LossBreakdown {
    pub fn compose(l_h: f64, l_q: f64, l_ah: f64, l_aq: f64, w_ah: f64, w_aq: f64) -> Self {
        let l_c = l_h + l_q;
        LossBreakdown {
            l_h,
            l_q,
            l_ah,
            l_aq,
            l_c,
            l_total: l_c + w_ah * l_ah + w_aq * l_aq,
            w_ah,
            w_aq,
        }
    }

    /// Largest violation of `l_c = l_h + l_q` and
    /// `l_total = l_c + w_ah l_ah + w_aq l_aq`.
    pub fn identity_error(&self) -> f64 {
        let c = (self.l_c - (self.l_h + self.l_q)).abs();
        let t = (self.l_total - (self.l_c + self.w_ah * self.l_ah + self.w_aq * self.l_aq)).abs();
        c.max(t)
    }
}

/// Training hyperparameters. Defaults follow the published setup where one
/// exists; see `docs/CONFIG.md` for provenance of each value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub seq_len: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub w_ah: f64,
    pub w_aq: f64,
    pub lr: f64,
    pub eval_every_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            seq_len: 10,
            emb_dim: 64,
            hidden_dim: 64,
            batch_size: 100,
            gamma: 0.5,
            w_ah: 0.1,
            w_aq: 0.01,
            lr: 1e-3,
            eval_every_steps: 500,
            max_epochs: 20,
            patience: 5,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        let positive = [
            ("seq_len", self.seq_len),
            ("emb_dim", self.emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("eval_every_steps", self.eval_every_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.w_ah < 0.0 || self.w_aq < 0.0 {
            return Err(Error::Config(
                "augmentation weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
