//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every op records its inputs; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients into numbered slots. Trainable tensors are
//! registered as leaves with a slot; everything else is a constant. The tape
//! borrows the tensors it reads, so the parameters cannot change while a
//! trace is alive.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        block: usize,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    LogSigmoid(Var),
    Rows {
        parts: Vec<Option<(Var, usize)>>,
    },
    ConcatCols(Var, Var),
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    PickPerRow {
        a: Var,
        cols: Vec<usize>,
    },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients collected per slot.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn set(&mut self, slot: usize, g: Mat) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        self.slots[slot] = Some(g);
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Adds `other` slot-wise. Used to reduce per-chunk gradients in a fixed
    /// order.
    pub fn accumulate(&mut self, other: Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => *m += &t,
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * f);
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    crate::data::logistic(x)
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) {
    assert!(cond, "{}", msg());
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            requires_grad: false,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf whose gradient lands in `slot`.
    pub fn param(&mut self, m: &'a Mat, slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            requires_grad: true,
            slot: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, m: Mat, slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            requires_grad: true,
            slot: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.ncols() == vb.nrows(), || {
            format!("matmul {:?} x {:?}", va.dim(), vb.dim())
        });
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, tb: false }, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.ncols() == vb.ncols(), || {
            format!("matmul_nt {:?} x {:?}", va.dim(), vb.dim())
        });
        let out = va.dot(&vb.t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, tb: true }, rg)
    }

    /// Per-block products over consecutive row blocks of `block` rows:
    /// with `tb`, block i of the output is `a_i · b_iᵀ` (block × block);
    /// otherwise `a_i · b_i` where `a_i` is block × block.
    pub fn block_matmul(&mut self, a: Var, b: Var, block: usize, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.nrows() == vb.nrows() && va.nrows() % block == 0, || {
            format!(
                "block_matmul rows {:?} {:?} block {block}",
                va.dim(),
                vb.dim()
            )
        });
        let nb = va.nrows() / block;
        let out = if tb {
            check(va.ncols() == vb.ncols(), || {
                "block_matmul_nt inner dim".into()
            });
            let mut out = Mat::zeros((va.nrows(), block));
            for i in 0..nb {
                let r = s![i * block..(i + 1) * block, ..];
                out.slice_mut(r).assign(&va.slice(r).dot(&vb.slice(r).t()));
            }
            out
        } else {
            check(va.ncols() == block, || {
                "block_matmul left operand must be square blocks".into()
            });
            let mut out = Mat::zeros((va.nrows(), vb.ncols()));
            for i in 0..nb {
                let r = s![i * block..(i + 1) * block, ..];
                out.slice_mut(r).assign(&va.slice(r).dot(&vb.slice(r)));
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::BlockMatMul { a, b, block, tb }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        check(self.shape(a) == self.shape(b), || {
            format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))
        });
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a 1 × c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        check(vr.nrows() == 1 && vr.ncols() == va.ncols(), || {
            format!("add_row {:?} + {:?}", va.dim(), vr.dim())
        });
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies row i of `a` by `col[i]` (col is r × 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        check(vc.ncols() == 1 && vc.nrows() == va.nrows(), || {
            format!("mul_col {:?} * {:?}", va.dim(), vc.dim())
        });
        let out = va * vc;
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.value(a) * f;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, f), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(log_sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    /// Builds a matrix row by row from rows of other nodes; `None` gives a
    /// zero row that carries no gradient.
    pub fn rows(&mut self, width: usize, parts: Vec<Option<(Var, usize)>>) -> Var {
        let mut out = Mat::zeros((parts.len(), width));
        for (i, p) in parts.iter().enumerate() {
            if let Some((v, r)) = *p {
                let src = self.value(v);
                check(src.ncols() == width && r < src.nrows(), || {
                    format!("rows: bad source row {r}")
                });
                out.row_mut(i).assign(&src.row(r));
            }
        }
        let rg = parts.iter().flatten().any(|&(v, _)| self.rg(v));
        self.push(out, Op::Rows { parts }, rg)
    }

    /// Embedding lookup; `None` ids produce zero rows.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>]) -> Var {
        let parts = ids.iter().map(|id| id.map(|r| (table, r))).collect();
        let width = self.shape(table).1;
        self.rows(width, parts)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.nrows() == vb.nrows(), || {
            "concat_cols row mismatch".into()
        });
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("shapes checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        let rg = self.rg(a);
        self.push(out, Op::SelectRows { a, rows }, rg)
    }

    /// Picks `a[i, cols[i]]` into an r × 1 column.
    pub fn pick_per_row(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let va = self.value(a);
        check(cols.len() == va.nrows(), || "pick_per_row length".into());
        let out = Mat::from_shape_fn((cols.len(), 1), |(i, _)| va[[i, cols[i]]]);
        let rg = self.rg(a);
        self.push(out, Op::PickPerRow { a, cols }, rg)
    }

    /// Row softmax restricted to entries where `mask` is nonzero. Rows with
    /// no admissible entry are all zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mat) -> Var {
        let va = self.value(a);
        check(va.dim() == mask.dim(), || {
            "masked_softmax mask shape".into()
        });
        let mut out = Mat::zeros(va.dim());
        for ((x, m), mut o) in va.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
            let mx = x
                .iter()
                .zip(m)
                .filter(|(_, &m)| m != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ((o, &v), &m) in o.iter_mut().zip(x).zip(m) {
                if m != 0.0 {
                    *o = (v - mx).exp();
                    z += *o;
                }
            }
            o.mapv_inplace(|e| e / z);
        }
        let rg = self.rg(a);
        self.push(out, Op::MaskedSoftmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalisation with 1 × c gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let va = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        let d = va.ncols() as f64;
        let mut xhat = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * g + b;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Gradients of a scalar (1 × 1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        self.backward_from(loss, Mat::from_elem((1, 1), 1.0))
            .expect("shape checked")
    }

    /// Backpropagates an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, upstream: Mat) -> Result<Gradients> {
        self.backward_from(out, upstream)
    }

    fn backward_from(&self, out: Var, upstream: Mat) -> Result<Gradients> {
        if upstream.dim() != self.shape(out) {
            return Err(Error::dim(format!(
                "upstream gradient {:?} for node of shape {:?}",
                upstream.dim(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(upstream);
        let mut result = Gradients::default();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(slot) = node.slot {
                if result.slots.len() <= slot {
                    result.slots.resize(slot + 1, None);
                }
                match &mut result.slots[slot] {
                    Some(acc) => *acc += &g,
                    s => *s = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(result)
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |v: Var, d: Mat, grads: &mut [Option<Mat>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(x) => *x += &d,
                s => *s = Some(d),
            }
        };
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if *tb {
                    if self.rg(*a) {
                        acc(*a, g.dot(vb), grads);
                    }
                    if self.rg(*b) {
                        acc(*b, g.t().dot(va), grads);
                    }
                } else {
                    if self.rg(*a) {
                        acc(*a, g.dot(&vb.t()), grads);
                    }
                    if self.rg(*b) {
                        acc(*b, va.t().dot(g), grads);
                    }
                }
            }
            Op::BlockMatMul { a, b, block, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = va.nrows() / block;
                let mut da = self.rg(*a).then(|| Mat::zeros(va.dim()));
                let mut db = self.rg(*b).then(|| Mat::zeros(vb.dim()));
                for k in 0..nb {
                    let r = s![k * block..(k + 1) * block, ..];
                    let (ga, bk, ak) = (g.slice(r), vb.slice(r), va.slice(r));
                    if *tb {
                        if let Some(da) = da.as_mut() {
                            da.slice_mut(r).assign(&ga.dot(&bk));
                        }
                        if let Some(db) = db.as_mut() {
                            db.slice_mut(r).assign(&ga.t().dot(&ak));
                        }
                    } else {
                        if let Some(da) = da.as_mut() {
                            da.slice_mut(r).assign(&ga.dot(&bk.t()));
                        }
                        if let Some(db) = db.as_mut() {
                            db.slice_mut(r).assign(&ak.t().dot(&ga));
                        }
                    }
                }
                if let Some(da) = da {
                    acc(*a, da, grads);
                }
                if let Some(db) = db {
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, -g, grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b), grads);
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a), grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::MulCol(a, col) => {
                let vc = self.value(*col);
                if self.rg(*a) {
                    acc(*a, g * vc, grads);
                }
                if self.rg(*col) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, d, grads);
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f, grads),
            Op::Sigmoid(a) => acc(*a, g * &out.mapv(|y| y * (1.0 - y)), grads),
            Op::Tanh(a) => acc(*a, g * &out.mapv(|y| 1.0 - y * y), grads),
            Op::Gelu(a) => acc(*a, g * &self.value(*a).mapv(gelu_grad), grads),
            Op::Square(a) => acc(*a, g * &self.value(*a).mapv(|x| 2.0 * x), grads),
            Op::LogSigmoid(a) => acc(*a, g * &self.value(*a).mapv(|x| sigmoid(-x)), grads),
            Op::Rows { parts } => {
                let mut per_src: Vec<(Var, Mat)> = Vec::new();
                for (row, p) in parts.iter().enumerate() {
                    let Some((v, r)) = *p else { continue };
                    if !self.rg(v) {
                        continue;
                    }
                    let pos = match per_src.iter().position(|(s, _)| *s == v) {
                        Some(p) => p,
                        None => {
                            per_src.push((v, Mat::zeros(self.shape(v))));
                            per_src.len() - 1
                        }
                    };
                    let mut dst = per_src[pos].1.row_mut(r);
                    dst += &g.row(row);
                }
                for (v, d) in per_src {
                    acc(v, d, grads);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                acc(*a, g.slice(s![.., ..ca]).to_owned(), grads);
                acc(*b, g.slice(s![.., ca..]).to_owned(), grads);
            }
            Op::SelectRows { a, rows } => {
                let mut d = Mat::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*a, d, grads);
            }
            Op::PickPerRow { a, cols } => {
                let mut d = Mat::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    d[[i, c]] += g[[i, 0]];
                }
                acc(*a, d, grads);
            }
            Op::MaskedSoftmax(a) => {
                let dot = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, out * &(g - &dot), grads);
            }
            Op::LogSoftmax(a) => {
                let sm = out.mapv(f64::exp);
                let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*a, g - &(&sm * &gs), grads);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*gain) {
                    acc(
                        *gain,
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        grads,
                    );
                }
                if self.rg(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
                if self.rg(*a) {
                    let dxhat = g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / d * (d * dh[c] - s1 - xh[c] * s2);
                        }
                    }
                    acc(*a, dx, grads);
                }
            }
            Op::RowSum(a) => {
                let d = Mat::from_shape_fn(self.shape(*a), |(r, _)| g[[r, 0]]);
                acc(*a, d, grads);
            }
            Op::Sum(a) => acc(*a, Mat::from_elem(self.shape(*a), g[[0, 0]]), grads),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Mat::from_elem(self.shape(*a), g[[0, 0]] / n), grads)
            }
        }
    }
}

/// Named tensors with stable ids; the unit of optimisation and
/// checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(m);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on the tape. Trainable tensors get gradient
    /// slots `offset + index`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool, offset: usize) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if trainable {
                        tape.param(t, offset + i)
                    } else {
                        tape.constant_ref(t)
                    }
                })
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn uniform_init<R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}
