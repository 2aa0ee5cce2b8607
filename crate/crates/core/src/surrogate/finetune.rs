//! Joint reward-model / state-model fine-tuning through one shared adapter.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::lm::{Adapter, LmOut, Sources, TinyLm, Tok};
use super::vocab::BOS;
use crate::autodiff::{Mat, Tape, Var};
use crate::data::{logistic, ItemId, WindowedExample};
use crate::error::{Error, Result};
use crate::exec;
use crate::ingest::NegativeSampler;
use crate::optim::{Adam, AdamConfig};
use crate::prompt::{Piece, PromptTemplate};

/// One fine-tuning example: a history, the item that followed it and a
/// sampled item that did not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeExample {
    pub history: Vec<ItemId>,
    pub positive: ItemId,
    pub negative: ItemId,
}

impl LeExample {
    pub fn from_window(w: &WindowedExample) -> Self {
        LeExample {
            history: w.history(),
            positive: w.target,
            negative: w.negative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub rank: usize,
    pub seed: u64,
    /// Drop the example's own positive from the contrastive sum.
    pub exclude_self: bool,
    /// Draw fresh negatives (outside the history and the positive) every
    /// epoch after the first.
    pub resample_negatives: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch: 20,
            lr: 3e-3,
            rank: 4,
            seed: 0,
            exclude_self: false,
            resample_negatives: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rm: f64,
    pub sm: f64,
}

/// `-ln σ(r⁺ − r⁻)`.
pub fn rm_loss(r_pos: f64, r_neg: f64) -> f64 {
    -logistic(r_pos - r_neg).ln()
}

/// Contrastive state loss averaged over the batch. `states[i]` is the state
/// for example i and `positives[j]` the token of example j's next item.
pub fn sm_loss(states: &[Vec<f64>], positives: &[Vec<f64>], exclude_self: bool) -> Result<f64> {
    let b = states.len();
    if b < 2 || positives.len() != b {
        return Err(Error::invalid(
            "contrastive loss needs a batch of at least two matched examples",
        ));
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..b {
        let own = dot(&states[i], &positives[i]);
        let mut acc = 0.0;
        for j in 0..b {
            if exclude_self && j == i {
                continue;
            }
            acc -= logistic(own - dot(&states[i], &positives[j])).ln();
        }
        total += acc
            / if exclude_self {
                (b - 1) as f64
            } else {
                b as f64
            };
    }
    Ok(total / b as f64)
}

pub(crate) fn to_toks(lm: &TinyLm, pieces: &[Piece]) -> Vec<Tok> {
    let mut out = Vec::with_capacity(pieces.len() + 1);
    out.push(Tok::Word(BOS));
    for p in pieces {
        out.push(match p {
            Piece::Word(w) => Tok::Word(lm.vocab.id(w)),
            Piece::Item(i) => Tok::Item(i.index()),
        });
    }
    out
}

/// Keeps the last `max` tokens but always the leading `<bos>`.
pub(crate) fn clip(mut s: Vec<Tok>, max: usize) -> Vec<Tok> {
    if s.len() > max {
        let cut = s.len() - max + 1;
        s.drain(1..cut);
    }
    s
}

/// `L_sm` on the tape. `states` is B × d, `pos` B × d (constant).
pub fn sm_loss_on_tape(
    tape: &mut Tape<'_>,
    states: Var,
    pos: Var,
    exclude_self: bool,
) -> Result<Var> {
    let b = tape.value(states).nrows();
    if b < 2 {
        return Err(Error::invalid(
            "contrastive loss needs a batch of at least two examples",
        ));
    }
    let g = tape.matmul_nt(states, pos);
    let own = tape.pick_per_row(g, (0..b).collect());
    let ones = tape.constant(Mat::ones((b, b)));
    let own = tape.mul_col(ones, own);
    let diff = tape.sub(own, g);
    let ls = tape.log_sigmoid(diff);
    let denom = if exclude_self {
        (b - 1) as f64
    } else {
        b as f64
    };
    let ls = if exclude_self {
        let keep = tape.constant(Mat::from_shape_fn(
            (b, b),
            |(i, j)| if i == j { 0.0 } else { 1.0 },
        ));
        tape.mul(ls, keep)
    } else {
        ls
    };
    let s = tape.sum(ls);
    Ok(tape.scale(s, -1.0 / (denom * b as f64)))
}

/// Forward for state and reward prompts of a batch together.
struct BatchOut {
    out: LmOut,
    b: usize,
}

fn forward_batch<'a>(
    lm: &TinyLm,
    tape: &mut Tape<'a>,
    adapter: &crate::autodiff::Bound,
    base: &crate::autodiff::Bound,
    items: Var,
    template: &PromptTemplate,
    batch: &[&LeExample],
    n_items: usize,
) -> Result<BatchOut> {
    let max = lm.config.max_positions;
    let mut seqs = Vec::with_capacity(3 * batch.len());
    for e in batch {
        seqs.push(clip(
            to_toks(lm, &template.state_prompt(&e.history, n_items)?),
            max,
        ));
    }
    for e in batch {
        seqs.push(clip(
            to_toks(
                lm,
                &template.reward_prompt(&e.history, e.positive, n_items)?,
            ),
            max,
        ));
    }
    for e in batch {
        seqs.push(clip(
            to_toks(
                lm,
                &template.reward_prompt(&e.history, e.negative, n_items)?,
            ),
            max,
        ));
    }
    let src = Sources {
        items: Some(items),
        free: None,
    };
    let out = lm.forward(tape, base, Some(adapter), src, &seqs)?;
    Ok(BatchOut {
        out,
        b: batch.len(),
    })
}

/// Losses of one fine-tuning batch and the gradient of `L_rm + sm_weight ·
/// L_sm` with respect to the adapter and score head.
pub struct LeBatchLoss {
    pub rm: f64,
    pub sm: f64,
    pub grads: crate::autodiff::Gradients,
}

pub fn le_batch_loss(
    lm: &TinyLm,
    adapter: &Adapter,
    tokens: &Mat,
    template: &PromptTemplate,
    batch: &[&LeExample],
    exclude_self: bool,
    sm_weight: f64,
) -> Result<LeBatchLoss> {
    let n_items = tokens.nrows();
    let mut tape = Tape::new();
    let base = lm.base.bind(&mut tape, false, 0);
    let ad = adapter.params.bind(&mut tape, true, 0);
    let items = tape.constant_ref(tokens);
    let fb = forward_batch(lm, &mut tape, &ad, &base, items, template, batch, n_items)?;
    let b = fb.b;
    let states = tape.select_rows(fb.out.last, (0..b).collect());
    let pos_tok = tape.constant(tokens.select(
        ndarray::Axis(0),
        &batch.iter().map(|e| e.positive.index()).collect::<Vec<_>>(),
    ));
    let l_sm = sm_loss_on_tape(&mut tape, states, pos_tok, exclude_self)?;
    let reward_last = tape.select_rows(fb.out.last, (b..3 * b).collect());
    let scores = lm.score(&mut tape, &ad, reward_last);
    let sp = tape.select_rows(scores, (0..b).collect());
    let sn = tape.select_rows(scores, (b..2 * b).collect());
    let gap = tape.sub(sp, sn);
    let ls = tape.log_sigmoid(gap);
    let l_rm = tape.mean(ls);
    let l_rm = tape.scale(l_rm, -1.0);
    let weighted = tape.scale(l_sm, sm_weight);
    let total = tape.add(l_rm, weighted);
    Ok(LeBatchLoss {
        rm: tape.scalar(l_rm),
        sm: tape.scalar(l_sm),
        grads: tape.backward(total),
    })
}

/// Trains a fresh adapter and score head with `L_rm + L_sm`. The base model
/// and the item tokens stay fixed.
pub fn finetune(
    lm: &TinyLm,
    tokens: &Mat,
    template: &PromptTemplate,
    examples: &[LeExample],
    cfg: &FinetuneConfig,
) -> Result<(Adapter, Vec<EpochLoss>)> {
    if tokens.ncols() != lm.d_model() {
        return Err(Error::dim(format!(
            "item tokens have width {}, model has {}",
            tokens.ncols(),
            lm.d_model()
        )));
    }
    if tokens.nrows() == 0 {
        return Err(Error::MissingInput("item tokens".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::Config("fine-tuning batch must be at least 2".into()));
    }
    let n_items = tokens.nrows();
    let mut adapter = lm.new_adapter(cfg.rank, exec::derive_seed(cfg.seed, 0xADA));
    let mut adam = Adam::new(AdamConfig::new(cfg.lr), &adapter.params);
    let mut rng = exec::rng(exec::derive_seed(cfg.seed, 0x5EED));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let sampler = NegativeSampler { n_items };
    let mut current: Vec<LeExample> = examples.to_vec();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.resample_negatives {
            let mut neg_rng = exec::rng(exec::derive_seed(cfg.seed, 0x4E60 + epoch as u64));
            for e in current.iter_mut() {
                let mut seen: HashSet<ItemId> = e.history.iter().copied().collect();
                seen.insert(e.positive);
                e.negative = sampler.sample(&seen, &mut neg_rng)?;
            }
        }
        let examples = &current;
        super::lm::shuffle(&mut order, &mut rng);
        let (mut rm, mut sm, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&LeExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let l = le_batch_loss(
                lm,
                &adapter,
                tokens,
                template,
                &batch,
                cfg.exclude_self,
                1.0,
            )?;
            rm += l.rm;
            sm += l.sm;
            n += 1;
            let grads = l.grads;
            adam.step(&mut adapter.params, &grads, 0);
        }
        let k = n.max(1) as f64;
        history.push(EpochLoss {
            epoch,
            rm: rm / k,
            sm: sm / k,
        });
    }
    Ok((adapter, history))
}
