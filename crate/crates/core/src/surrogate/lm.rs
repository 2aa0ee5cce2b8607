//! A small decoder-only transformer with optional low-rank adapters and a
//! scalar score head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS, EOS, PAD};
use crate::autodiff::{uniform_init, Bound, Mat, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub max_words: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            n_blocks: 2,
            ff_dim: 128,
            max_positions: 128,
            max_words: 2000,
        }
    }
}

/// One input position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tok {
    Word(u32),
    /// Row of the item-token table.
    Item(usize),
    /// Row of a free (optimised) embedding table.
    Free(usize),
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub base: ParamSet,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
}

/// Low-rank factors for the four attention projections of every block,
/// plus the score head.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub rank: usize,
    pub params: ParamSet,
}

/// Embedding tables a forward pass reads besides the vocabulary.
#[derive(Clone, Copy, Default)]
pub struct Sources {
    pub items: Option<Var>,
    pub free: Option<Var>,
}

pub struct LmOut {
    /// Final-layer states, `batch * len` rows, sequence-major.
    pub hidden: Var,
    /// State at the last position of each sequence (B × d).
    pub last: Var,
    pub len: usize,
    pub pads: Vec<usize>,
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

impl TinyLm {
    pub fn new(config: LmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if d == 0 || config.n_blocks == 0 || config.ff_dim == 0 || config.max_positions == 0 {
            return Err(Error::Config(
                "language model dimensions must be positive".into(),
            ));
        }
        let mut rng = exec::rng(seed);
        let mut base = ParamSet::new();
        let mut tok_m = uniform_init(vocab.len(), d, d, &mut rng);
        tok_m.row_mut(PAD as usize).fill(0.0);
        let tok = base.push("tok", tok_m);
        let pos = base.push("pos", uniform_init(config.max_positions, d, d, &mut rng));
        let ln = |base: &mut ParamSet, name: String| {
            (
                base.push(format!("{name}.gain"), Mat::ones((1, d))),
                base.push(format!("{name}.bias"), Mat::zeros((1, d))),
            )
        };
        let mut blocks = Vec::new();
        for b in 0..config.n_blocks {
            let ln1 = ln(&mut base, format!("block{b}.ln1"));
            let mut sq = |n: &str, rng: &mut rand_chacha::ChaCha8Rng| {
                base.push(format!("block{b}.w_{n}"), uniform_init(d, d, d, rng))
            };
            let wq = sq("q", &mut rng);
            let wk = sq("k", &mut rng);
            let wv = sq("v", &mut rng);
            let wo = sq("o", &mut rng);
            let ln2 = ln(&mut base, format!("block{b}.ln2"));
            let ff1 = (
                base.push(
                    format!("block{b}.ff1.w"),
                    uniform_init(d, config.ff_dim, d, &mut rng),
                ),
                base.push(format!("block{b}.ff1.b"), Mat::zeros((1, config.ff_dim))),
            );
            let ff2 = (
                base.push(
                    format!("block{b}.ff2.w"),
                    uniform_init(config.ff_dim, d, config.ff_dim, &mut rng),
                ),
                base.push(format!("block{b}.ff2.b"), Mat::zeros((1, d))),
            );
            blocks.push(BlockIds {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ff1,
                ff2,
            });
        }
        let ln_f = ln(&mut base, "ln_f".into());
        Ok(TinyLm {
            config,
            vocab,
            base,
            tok,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Rebuilds a model from saved base weights.
    pub fn from_parts(config: LmConfig, vocab: Vocab, base: ParamSet) -> Result<Self> {
        let mut lm = TinyLm::new(config, vocab, 0)?;
        crate::checkpoint::restore(&mut lm.base, &base)?;
        Ok(lm)
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn token_embeddings(&self) -> &Mat {
        self.base.get(self.tok)
    }

    /// Fresh adapter: A factors random, B factors zero, score head random.
    pub fn new_adapter(&self, rank: usize, seed: u64) -> Adapter {
        let d = self.config.d_model;
        let mut rng = exec::rng(seed);
        let mut params = ParamSet::new();
        for b in 0..self.config.n_blocks {
            for p in PROJ {
                params.push(
                    format!("block{b}.lora_{p}.a"),
                    uniform_init(d, rank, d, &mut rng),
                );
                params.push(format!("block{b}.lora_{p}.b"), Mat::zeros((rank, d)));
            }
        }
        params.push("score.w", uniform_init(d, 1, d, &mut rng));
        params.push("score.b", Mat::zeros((1, 1)));
        Adapter { rank, params }
    }

    /// Forward over left-padded sequences. Positions count from each
    /// sequence's first real token.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        base: &Bound,
        adapter: Option<&Bound>,
        src: Sources,
        seqs: &[Vec<Tok>],
    ) -> Result<LmOut> {
        let d = self.config.d_model;
        let b = seqs.len();
        let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || l == 0 {
            return Err(Error::invalid("empty language-model batch"));
        }
        if l > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {l} tokens exceeds {}",
                self.config.max_positions
            )));
        }
        let pads: Vec<usize> = seqs.iter().map(|s| l - s.len()).collect();
        let mut parts = Vec::with_capacity(b * l);
        let mut pos_parts = Vec::with_capacity(b * l);
        let mut real = Vec::with_capacity(b * l);
        for (s, &p) in seqs.iter().zip(&pads) {
            for j in 0..l {
                if j < p {
                    parts.push(None);
                    pos_parts.push(None);
                    real.push(false);
                    continue;
                }
                let part = match s[j - p] {
                    Tok::Word(w) => {
                        if w as usize >= self.vocab.len() {
                            return Err(Error::invalid(format!("word id {w} outside vocabulary")));
                        }
                        (base[self.tok], w as usize)
                    }
                    Tok::Item(i) => (
                        src.items
                            .ok_or_else(|| Error::invalid("item table missing"))?,
                        i,
                    ),
                    Tok::Free(i) => (
                        src.free
                            .ok_or_else(|| Error::invalid("free table missing"))?,
                        i,
                    ),
                };
                parts.push(Some(part));
                pos_parts.push(Some((base[self.pos], j - p)));
                real.push(true);
            }
        }
        let emb = tape.rows(d, parts);
        let pos = tape.rows(d, pos_parts);
        let mut x = tape.add(emb, pos);
        let mask = Mat::from_shape_fn((b * l, l), |(r, j)| {
            let (blk, i) = (r / l, r % l);
            if j <= i && real[blk * l + j] && real[r] {
                1.0
            } else {
                0.0
            }
        });
        let scale = 1.0 / (d as f64).sqrt();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, base[blk.ln1.0], base[blk.ln1.1]);
            let proj = |tape: &mut Tape<'a>, input: Var, w: ParamId, k: usize| {
                let y = tape.matmul(input, base[w]);
                match adapter {
                    Some(ad) => {
                        let ia = ad[ParamId(bi * 8 + 2 * k)];
                        let ib = ad[ParamId(bi * 8 + 2 * k + 1)];
                        let xa = tape.matmul(input, ia);
                        let xab = tape.matmul(xa, ib);
                        tape.add(y, xab)
                    }
                    None => y,
                }
            };
            let q = proj(tape, h, blk.wq, 0);
            let k = proj(tape, h, blk.wk, 1);
            let v = proj(tape, h, blk.wv, 2);
            let sc = tape.block_matmul(q, k, l, true);
            let sc = tape.scale(sc, scale);
            let pr = tape.masked_softmax(sc, &mask);
            let att = tape.block_matmul(pr, v, l, false);
            let o = proj(tape, att, blk.wo, 3);
            x = tape.add(x, o);
            let h2 = tape.layer_norm(x, base[blk.ln2.0], base[blk.ln2.1]);
            let f = tape.matmul(h2, base[blk.ff1.0]);
            let f = tape.add_row(f, base[blk.ff1.1]);
            let f = tape.gelu(f);
            let f = tape.matmul(f, base[blk.ff2.0]);
            let f = tape.add_row(f, base[blk.ff2.1]);
            x = tape.add(x, f);
        }
        let hidden = tape.layer_norm(x, base[self.ln_f.0], base[self.ln_f.1]);
        let last = tape.select_rows(hidden, (0..b).map(|i| i * l + l - 1).collect());
        Ok(LmOut {
            hidden,
            last,
            len: l,
            pads,
        })
    }

    /// Raw score-head outputs (B × 1) from last states.
    pub fn score<'a>(&self, tape: &mut Tape<'a>, adapter: &Bound, last: Var) -> Var {
        let n = self.config.n_blocks * 8;
        let s = tape.matmul(last, adapter[ParamId(n)]);
        let ones = tape.value(last).nrows();
        let b = tape.constant(Mat::ones((ones, 1)));
        let bias = tape.matmul(b, adapter[ParamId(n + 1)]);
        tape.add(s, bias)
    }

    /// Sum of next-token negative log-likelihoods for the tokens at
    /// positions `>= from` of each sequence (0-based, unpadded), each
    /// predicted from the position before it. Returns (sum, per-sequence
    /// sums).
    pub fn nll<'a>(
        &self,
        tape: &mut Tape<'a>,
        base: &Bound,
        out: &LmOut,
        seqs: &[Vec<Tok>],
        from: usize,
    ) -> Result<(Var, Vec<f64>)> {
        let l = out.len;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut owner = Vec::new();
        for (si, (s, &p)) in seqs.iter().zip(&out.pads).enumerate() {
            for t in from.max(1)..s.len() {
                let Tok::Word(w) = s[t] else {
                    return Err(Error::invalid("only word tokens can be predicted"));
                };
                rows.push(si * l + p + t - 1);
                targets.push(w as usize);
                owner.push(si);
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("nothing to predict"));
        }
        let h = tape.select_rows(out.hidden, rows);
        let logits = tape.matmul_nt(h, base[self.tok]);
        let logp = tape.log_softmax(logits);
        let picked = tape.pick_per_row(logp, targets);
        let mut per = vec![0.0; seqs.len()];
        for (i, &o) in owner.iter().enumerate() {
            per[o] -= tape.value(picked)[[i, 0]];
        }
        let total = tape.sum(picked);
        Ok((tape.scale(total, -1.0), per))
    }

    /// Next-token pre-training on word sentences (`<bos> words <eos>`).
    pub fn pretrain(
        &mut self,
        sentences: &[Vec<u32>],
        epochs: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut adam = Adam::new(AdamConfig::new(lr), &self.base);
        let mut rng = exec::rng(seed);
        let seqs: Vec<Vec<Tok>> = sentences
            .iter()
            .map(|s| {
                let mut v = vec![Tok::Word(BOS)];
                v.extend(s.iter().map(|&w| Tok::Word(w)));
                v.push(Tok::Word(EOS));
                v.truncate(self.config.max_positions);
                v
            })
            .collect();
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut epoch_loss = Vec::new();
        for _ in 0..epochs {
            shuffle(&mut order, &mut rng);
            let (mut total, mut count) = (0.0, 0usize);
            for chunk in order.chunks(batch.max(1)) {
                let group: Vec<Vec<Tok>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                let n_pred: usize = group.iter().map(|s| s.len() - 1).sum();
                let grads = {
                    let mut tape = Tape::new();
                    let base = self.base.bind(&mut tape, true, 0);
                    let out = self.forward(&mut tape, &base, None, Sources::default(), &group)?;
                    let (sum, _) = self.nll(&mut tape, &base, &out, &group, 1)?;
                    total += tape.scalar(sum);
                    count += n_pred;
                    let mean = tape.scale(sum, 1.0 / n_pred as f64);
                    tape.backward(mean)
                };
                adam.step(&mut self.base, &grads, 0);
                self.base.get_mut(self.tok).row_mut(PAD as usize).fill(0.0);
            }
            epoch_loss.push(total / count.max(1) as f64);
        }
        Ok(epoch_loss)
    }
}

pub(crate) fn shuffle<T, R: Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TinyLm {
        let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let vocab = Vocab::build(std::iter::once(words.as_slice()), 10);
        let cfg = LmConfig {
            d_model: 8,
            n_blocks: 2,
            ff_dim: 8,
            max_positions: 16,
            max_words: 10,
        };
        TinyLm::new(cfg, vocab, 3).unwrap()
    }

    fn last_states(lm: &TinyLm, adapter: Option<&Adapter>, seqs: &[Vec<Tok>]) -> Mat {
        let mut tape = Tape::new();
        let base = lm.base.bind(&mut tape, false, 0);
        let ad = adapter.map(|a| a.params.bind(&mut tape, false, 0));
        let out = lm
            .forward(&mut tape, &base, ad.as_ref(), Sources::default(), seqs)
            .unwrap();
        tape.value(out.last).clone()
    }

    #[test]
    fn padding_does_not_change_states() {
        let lm = tiny();
        let short = vec![Tok::Word(5), Tok::Word(6)];
        let long = vec![Tok::Word(5), Tok::Word(7), Tok::Word(6), Tok::Word(6)];
        let alone = last_states(&lm, None, &[short.clone()]);
        let batched = last_states(&lm, None, &[long, short]);
        for j in 0..8 {
            assert!((alone[[0, j]] - batched[[1, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_prefix_is_unaffected_by_suffix() {
        let lm = tiny();
        let a = vec![Tok::Word(5), Tok::Word(6), Tok::Word(7)];
        let b = vec![Tok::Word(5), Tok::Word(6), Tok::Word(5)];
        let mut tape = Tape::new();
        let base = lm.base.bind(&mut tape, false, 0);
        let out = lm
            .forward(&mut tape, &base, None, Sources::default(), &[a, b])
            .unwrap();
        let h = tape.value(out.hidden);
        for r in 0..2 {
            for j in 0..8 {
                assert_eq!(h[[r, j]], h[[3 + r, j]]);
            }
        }
    }

    #[test]
    fn zero_b_adapter_is_identity() {
        let lm = tiny();
        let ad = lm.new_adapter(4, 9);
        let s = vec![vec![Tok::Word(5), Tok::Word(6), Tok::Word(7)]];
        assert_eq!(last_states(&lm, None, &s), last_states(&lm, Some(&ad), &s));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut lm = tiny();
        let sents = vec![vec![5, 6, 7], vec![5, 6, 6], vec![7, 7, 5]];
        let losses = lm.pretrain(&sents, 30, 3, 1e-2, 0).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(lm.token_embeddings().row(0).iter().all(|&x| x == 0.0));
    }
}
