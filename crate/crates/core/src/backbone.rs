//! Sequence encoders: a gated recurrent unit and a single-block causal
//! self-attention encoder. Both read left-padded contexts and return one
//! hidden vector per context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_init, Bound, Mat, ParamId, ParamSet, Tape, Var};
use crate::data::ItemId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Recurrent,
    Attention,
}

#[derive(Clone, Debug)]
struct GruIds {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

#[derive(Clone, Debug)]
struct AttnIds {
    pos: ParamId,
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln_f: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
enum Layers {
    Gru(GruIds),
    Attn(AttnIds),
}

/// Encoder G(·) together with the item embedding table. Parameters live in
/// a caller-owned [`ParamSet`]; the encoder only remembers their ids.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: BackboneKind,
    pub n_items: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    embedding: ParamId,
    layers: Layers,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        kind: BackboneKind,
        n_items: usize,
        emb_dim: usize,
        hidden_dim: usize,
        seq_len: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if n_items == 0 || emb_dim == 0 || hidden_dim == 0 || seq_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if kind == BackboneKind::Attention && emb_dim != hidden_dim {
            return Err(Error::Config(format!(
                "attention encoder needs emb_dim == hidden_dim (got {emb_dim} and {hidden_dim})"
            )));
        }
        let mut table = uniform_init(n_items + 1, emb_dim, emb_dim, rng);
        table.row_mut(n_items).fill(0.0);
        let embedding = params.push("item_embeddings", table);
        let layers = match kind {
            BackboneKind::Recurrent => {
                let mut mk = |name: &str, r: usize, c: usize, fan: usize, rng: &mut R| {
                    params.push(format!("gru.{name}"), uniform_init(r, c, fan, rng))
                };
                let w = [
                    mk("w_z", emb_dim, hidden_dim, emb_dim, rng),
                    mk("w_r", emb_dim, hidden_dim, emb_dim, rng),
                    mk("w_n", emb_dim, hidden_dim, emb_dim, rng),
                ];
                let u = [
                    mk("u_z", hidden_dim, hidden_dim, hidden_dim, rng),
                    mk("u_r", hidden_dim, hidden_dim, hidden_dim, rng),
                    mk("u_n", hidden_dim, hidden_dim, hidden_dim, rng),
                ];
                let b = ["b_z", "b_r", "b_n"]
                    .map(|n| params.push(format!("gru.{n}"), Mat::zeros((1, hidden_dim))));
                Layers::Gru(GruIds { w, u, b })
            }
            BackboneKind::Attention => {
                let d = emb_dim;
                let ln = |params: &mut ParamSet, name: &str| {
                    (
                        params.push(format!("attn.{name}.gain"), Mat::ones((1, d))),
                        params.push(format!("attn.{name}.bias"), Mat::zeros((1, d))),
                    )
                };
                let pos = params.push("attn.pos", uniform_init(seq_len, d, d, rng));
                let ln1 = ln(params, "ln1");
                let wq = params.push("attn.w_q", uniform_init(d, d, d, rng));
                let wk = params.push("attn.w_k", uniform_init(d, d, d, rng));
                let wv = params.push("attn.w_v", uniform_init(d, d, d, rng));
                let wo = params.push("attn.w_o", uniform_init(d, d, d, rng));
                let ln2 = ln(params, "ln2");
                let ff1 = (
                    params.push("attn.ff1.w", uniform_init(d, hidden_dim, d, rng)),
                    params.push("attn.ff1.b", Mat::zeros((1, hidden_dim))),
                );
                let ff2 = (
                    params.push("attn.ff2.w", uniform_init(hidden_dim, d, hidden_dim, rng)),
                    params.push("attn.ff2.b", Mat::zeros((1, d))),
                );
                let ln_f = ln(params, "ln_f");
                Layers::Attn(AttnIds {
                    pos,
                    ln1,
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2,
                    ff1,
                    ff2,
                    ln_f,
                })
            }
        };
        Ok(Encoder {
            kind,
            n_items,
            emb_dim,
            hidden_dim,
            seq_len,
            embedding,
            layers,
        })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    fn check_contexts(&self, contexts: &[&[ItemId]]) -> Result<()> {
        if contexts.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for c in contexts {
            if c.len() != self.seq_len {
                return Err(Error::dim(format!(
                    "context length {} != seq_len {}",
                    c.len(),
                    self.seq_len
                )));
            }
            if let Some(bad) = c.iter().find(|i| i.index() > self.n_items) {
                return Err(Error::invalid(format!(
                    "item {bad} outside catalog of {}",
                    self.n_items
                )));
            }
        }
        Ok(())
    }

    /// Hidden states, one row per context (B × hidden_dim).
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &Bound,
        contexts: &[&[ItemId]],
    ) -> Result<Var> {
        self.check_contexts(contexts)?;
        Ok(match &self.layers {
            Layers::Gru(ids) => self.gru(tape, p, ids, contexts),
            Layers::Attn(ids) => self.attention(tape, p, ids, contexts),
        })
    }

    fn lookup(&self, id: ItemId) -> Option<usize> {
        (!id.is_padding(self.n_items)).then_some(id.index())
    }

    fn gru<'a>(&self, tape: &mut Tape<'a>, p: &Bound, ids: &GruIds, contexts: &[&[ItemId]]) -> Var {
        let b = contexts.len();
        let emb = p[self.embedding];
        let mut h = tape.constant(Mat::zeros((b, self.hidden_dim)));
        for t in 0..self.seq_len {
            let col: Vec<Option<usize>> = contexts.iter().map(|c| self.lookup(c[t])).collect();
            if col.iter().all(Option::is_none) {
                continue;
            }
            let mask =
                Mat::from_shape_fn((b, 1), |(i, _)| if col[i].is_some() { 1.0 } else { 0.0 });
            let x = tape.gather(emb, &col);
            let gate = |tape: &mut Tape<'a>, k: usize, hin: Var| {
                let xw = tape.matmul(x, p[ids.w[k]]);
                let hu = tape.matmul(hin, p[ids.u[k]]);
                let s = tape.add(xw, hu);
                tape.add_row(s, p[ids.b[k]])
            };
            let zp = gate(tape, 0, h);
            let z = tape.sigmoid(zp);
            let rp = gate(tape, 1, h);
            let r = tape.sigmoid(rp);
            let rh = tape.mul(r, h);
            let np = gate(tape, 2, rh);
            let n = tape.tanh(np);
            // h' = h + z (n - h), then only real slots advance
            let diff = tape.sub(n, h);
            let step = tape.mul(z, diff);
            let m = tape.constant(mask);
            let masked = tape.mul_col(step, m);
            h = tape.add(h, masked);
        }
        h
    }

    fn attention<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &Bound,
        ids: &AttnIds,
        contexts: &[&[ItemId]],
    ) -> Var {
        let (b, l, d) = (contexts.len(), self.seq_len, self.emb_dim);
        let flat: Vec<Option<usize>> = contexts
            .iter()
            .flat_map(|c| c.iter().map(|&i| self.lookup(i)))
            .collect();
        let real: Vec<bool> = flat.iter().map(Option::is_some).collect();
        let emb = tape.gather(p[self.embedding], &flat);
        let pos_parts = (0..b * l)
            .map(|r| {
                if real[r] {
                    Some((p[ids.pos], r % l))
                } else {
                    None
                }
            })
            .collect();
        let pos = tape.rows(d, pos_parts);
        let x0 = tape.add(emb, pos);

        let h = tape.layer_norm(x0, p[ids.ln1.0], p[ids.ln1.1]);
        let q = tape.matmul(h, p[ids.wq]);
        let k = tape.matmul(h, p[ids.wk]);
        let v = tape.matmul(h, p[ids.wv]);
        let scores = tape.block_matmul(q, k, l, true);
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let mask = Mat::from_shape_fn((b * l, l), |(r, j)| {
            let (blk, i) = (r / l, r % l);
            if j <= i && real[blk * l + j] && real[r] {
                1.0
            } else {
                0.0
            }
        });
        let probs = tape.masked_softmax(scores, &mask);
        let attn = tape.block_matmul(probs, v, l, false);
        let o = tape.matmul(attn, p[ids.wo]);
        let x1 = tape.add(x0, o);

        let h2 = tape.layer_norm(x1, p[ids.ln2.0], p[ids.ln2.1]);
        let f = tape.matmul(h2, p[ids.ff1.0]);
        let f = tape.add_row(f, p[ids.ff1.1]);
        let f = tape.gelu(f);
        let f = tape.matmul(f, p[ids.ff2.0]);
        let f = tape.add_row(f, p[ids.ff2.1]);
        let x2 = tape.add(x1, f);
        let out = tape.layer_norm(x2, p[ids.ln_f.0], p[ids.ln_f.1]);

        let last: Vec<usize> = (0..b).map(|i| i * l + l - 1).collect();
        let pooled = tape.select_rows(out, last.clone());
        let keep = Mat::from_shape_fn((b, 1), |(i, _)| if real[last[i]] { 1.0 } else { 0.0 });
        let keep = tape.constant(keep);
        tape.mul_col(pooled, keep)
    }
}

/// Left-pads (or truncates to the most recent) items to `seq_len`.
pub fn left_pad(history: &[ItemId], seq_len: usize, n_items: usize) -> Vec<ItemId> {
    let start = history.len().saturating_sub(seq_len);
    let tail = &history[start..];
    let mut out = vec![ItemId::padding(n_items); seq_len - tail.len()];
    out.extend_from_slice(tail);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec;

    fn encode(enc: &Encoder, ps: &ParamSet, ctx: &[ItemId]) -> Vec<f64> {
        let mut t = Tape::new();
        let b = ps.bind(&mut t, false, 0);
        let h = enc.forward(&mut t, &b, &[ctx]).unwrap();
        t.value(h).row(0).to_vec()
    }

    #[test]
    fn gru_single_step_by_hand() {
        let mut ps = ParamSet::new();
        let mut rng = exec::rng(0);
        let enc = Encoder::new(BackboneKind::Recurrent, 2, 2, 2, 1, &mut ps, &mut rng).unwrap();
        let set = |ps: &mut ParamSet, name: &str, v: [f64; 4]| {
            let id = ps.id_of(name).unwrap();
            *ps.get_mut(id) = Mat::from_shape_vec((2, 2), v.to_vec()).unwrap();
        };
        let e = ps.id_of("item_embeddings").unwrap();
        *ps.get_mut(e) = Mat::from_shape_vec((3, 2), vec![1.0, -1.0, 0.5, 0.5, 0.0, 0.0]).unwrap();
        set(&mut ps, "gru.w_z", [0.5, -0.5, 0.25, 1.0]);
        set(&mut ps, "gru.w_r", [1.0, 0.0, 0.0, 1.0]);
        set(&mut ps, "gru.w_n", [0.3, 0.7, -0.2, 0.4]);
        let bz = ps.id_of("gru.b_z").unwrap();
        *ps.get_mut(bz) = Mat::from_shape_vec((1, 2), vec![0.1, -0.1]).unwrap();
        let bn = ps.id_of("gru.b_n").unwrap();
        *ps.get_mut(bn) = Mat::from_shape_vec((1, 2), vec![0.0, 0.2]).unwrap();
        // x = (1, -1), h0 = 0: U terms vanish
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = [sig(0.5 - 0.25 + 0.1), sig(-0.5 - 1.0 - 0.1)];
        let n = [(0.3 + 0.2f64).tanh(), (0.7 - 0.4 + 0.2f64).tanh()];
        let expect = [z[0] * n[0], z[1] * n[1]];
        let got = encode(&enc, &ps, &[ItemId(0)]);
        for i in 0..2 {
            assert!((got[i] - expect[i]).abs() < 1e-9, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn all_padding_gives_zero() {
        for kind in [BackboneKind::Recurrent, BackboneKind::Attention] {
            let mut ps = ParamSet::new();
            let enc = Encoder::new(kind, 5, 4, 4, 3, &mut ps, &mut exec::rng(1)).unwrap();
            let pad = ItemId::padding(5);
            assert!(encode(&enc, &ps, &[pad; 3]).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn swapping_items_changes_hidden() {
        for kind in [BackboneKind::Recurrent, BackboneKind::Attention] {
            for seed in 0..10 {
                let mut ps = ParamSet::new();
                let enc = Encoder::new(kind, 6, 4, 4, 4, &mut ps, &mut exec::rng(seed)).unwrap();
                let a = encode(&enc, &ps, &[ItemId(6), ItemId(1), ItemId(2), ItemId(3)]);
                let b = encode(&enc, &ps, &[ItemId(6), ItemId(2), ItemId(1), ItemId(3)]);
                let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-9, "{kind:?} seed {seed}");
                assert_eq!(
                    a,
                    encode(&enc, &ps, &[ItemId(6), ItemId(1), ItemId(2), ItemId(3)])
                );
            }
        }
    }

    #[test]
    fn rejects_bad_context() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(
            BackboneKind::Recurrent,
            5,
            4,
            4,
            3,
            &mut ps,
            &mut exec::rng(1),
        )
        .unwrap();
        let mut t = Tape::new();
        let b = ps.bind(&mut t, false, 0);
        assert!(matches!(
            enc.forward(&mut t, &b, &[&[ItemId(0)]]),
            Err(Error::Dimension(_))
        ));
        assert!(Encoder::new(
            BackboneKind::Attention,
            5,
            4,
            6,
            3,
            &mut ParamSet::new(),
            &mut exec::rng(0)
        )
        .is_err());
    }

    #[test]
    fn left_pad_truncates_to_recent() {
        let h: Vec<ItemId> = (0..5).map(ItemId).collect();
        assert_eq!(left_pad(&h, 3, 9), vec![ItemId(2), ItemId(3), ItemId(4)]);
        assert_eq!(
            left_pad(&h[..1], 3, 9),
            vec![ItemId(9), ItemId(9), ItemId(0)]
        );
    }
}
