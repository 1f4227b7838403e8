//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node; node indices are assigned
//! in creation order, so walking the tape backwards visits children before
//! parents. Parameters enter the tape by value (see [`Graph::param`]) and
//! their gradients come back from [`Graph::backward`] keyed by [`ParamId`].
//!
//! Recurrent and attention layers are single fused nodes with hand-written
//! backward passes; everything else is composed from elementwise and
//! matrix primitives.

use std::collections::HashSet;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::param::{Gradients, Matrix, ParamId, ParamSet};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    block: usize,
    uniform: bool,
    probs: Vec<Matrix>,
}

struct LstmNode {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    batch: usize,
    reverse: bool,
    // All caches are laid out by time index: rows t*B..(t+1)*B.
    acts: Matrix,
    tanh_c: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    BlockMean {
        x: Var,
        block: usize,
    },
    BlockTake {
        x: Var,
        block: usize,
        index: usize,
    },
    BlockPrepend {
        x: Var,
        row: Var,
        block: usize,
    },
    BlockAdd {
        x: Var,
        table: Var,
    },
    Attention(Box<AttentionNode>),
    Lstm(Box<LstmNode>),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
        norm: f64,
    },
    Sum(Var),
    Mean(Var),
}

/// Computation tape.
///
/// A graph built with [`Graph::training`] applies dropout using its own
/// seeded generator; one built with [`Graph::new`] treats dropout as the
/// identity.
pub struct Graph {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
    frozen: HashSet<ParamId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference-mode graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
            frozen: HashSet::new(),
        }
    }

    /// Training-mode graph; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            frozen: HashSet::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters in `ids` enter this graph as constants: no gradient is
    /// computed for them.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let requires_grad = !self.frozen.contains(&id);
        self.nodes.push(Node {
            value: params.get(id).clone(),
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "add shape mismatch"
        );
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "sub shape mismatch"
        );
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "mul shape mismatch"
        );
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + row`, with the `1 × m` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        assert_eq!(r.ncols(), self.value(a).ncols(), "add_row width mismatch");
        let value = self.value(a) + r;
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row`, with the `1 × m` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        assert_eq!(r.ncols(), self.value(a).ncols(), "mul_row width mismatch");
        let value = self.value(a) * r;
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let input = self.value(x);
        let m = input.ncols() as f64;
        let mut value = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().as_standard_layout().to_owned();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows() % block, 0);
        let nb = src.nrows() / block;
        let mut value = Matrix::zeros((nb, src.ncols()));
        for b in 0..nb {
            let mean = src
                .slice(s![b * block..(b + 1) * block, ..])
                .mean_axis(Axis(0))
                .expect("non-empty block");
            value.row_mut(b).assign(&mean);
        }
        self.push(value, Op::BlockMean { x, block }, &[x])
    }

    /// Row `index` of every block of `block` rows.
    pub fn block_take(&mut self, x: Var, block: usize, index: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows() % block, 0);
        assert!(index < block);
        let nb = src.nrows() / block;
        let mut value = Matrix::zeros((nb, src.ncols()));
        for b in 0..nb {
            value.row_mut(b).assign(&src.row(b * block + index));
        }
        self.push(value, Op::BlockTake { x, block, index }, &[x])
    }

    /// Inserts the `1 × m` `row` in front of every block of `block` rows.
    pub fn block_prepend(&mut self, x: Var, row: Var, block: usize) -> Var {
        let src = self.value(x);
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        assert_eq!(src.nrows() % block, 0);
        let nb = src.nrows() / block;
        let mut value = Matrix::zeros((nb * (block + 1), src.ncols()));
        for b in 0..nb {
            let out0 = b * (block + 1);
            value.row_mut(out0).assign(&r.row(0));
            value
                .slice_mut(s![out0 + 1..out0 + 1 + block, ..])
                .assign(&src.slice(s![b * block..(b + 1) * block, ..]));
        }
        self.push(value, Op::BlockPrepend { x, row, block }, &[x, row])
    }

    /// Adds the `L × m` `table` to every block of `L` rows.
    pub fn block_add(&mut self, x: Var, table: Var) -> Var {
        let src = self.value(x);
        let t = self.value(table);
        let block = t.nrows();
        assert_eq!(src.ncols(), t.ncols());
        assert_eq!(src.nrows() % block, 0);
        let mut value = src.clone();
        for b in 0..src.nrows() / block {
            let mut dst = value.slice_mut(s![b * block..(b + 1) * block, ..]);
            dst += t;
        }
        self.push(value, Op::BlockAdd { x, table }, &[x, table])
    }

    /// Scaled dot-product self-attention over blocks of `block` rows with
    /// `heads` column groups. With `uniform` set, every attention row is
    /// fixed to `1 / block` and `q`, `k` receive no gradient.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        uniform: bool,
    ) -> Var {
        let (n, d) = self.value(q).dim();
        assert_eq!(self.value(k).dim(), (n, d));
        assert_eq!(self.value(v).dim(), (n, d));
        assert_eq!(d % heads, 0, "width not divisible by heads");
        assert_eq!(n % block, 0, "rows not divisible by block");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nb = n / block;
        let mut out = Matrix::zeros((n, d));
        let mut probs = Vec::new();
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for b in 0..nb {
                let rows = b * block..(b + 1) * block;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let vh = vv.slice(s![rows.clone(), cols.clone()]);
                    if uniform {
                        let mean = vh.mean_axis(Axis(0)).expect("non-empty block");
                        let mut dst = out.slice_mut(s![rows.clone(), cols.clone()]);
                        for mut r in dst.rows_mut() {
                            r.assign(&mean);
                        }
                        continue;
                    }
                    let qh = qv.slice(s![rows.clone(), cols.clone()]);
                    let kh = kv.slice(s![rows.clone(), cols.clone()]);
                    let mut p = Matrix::zeros((block, block));
                    general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut p);
                    for mut row in p.rows_mut() {
                        softmax_in_place(row.as_slice_mut().expect("contiguous"));
                    }
                    let mut dst = out.slice_mut(s![rows.clone(), cols.clone()]);
                    general_mat_mul(1.0, &p, &vh, 0.0, &mut dst);
                    probs.push(p);
                }
            }
        }
        let node = AttentionNode {
            q,
            k,
            v,
            heads,
            block,
            uniform,
            probs,
        };
        self.push(out, Op::Attention(Box::new(node)), &[q, k, v])
    }

    /// Single-direction LSTM over a time-major input and returns the final
    /// hidden state (`batch × H`).
    ///
    /// `x` holds `T·batch` rows: rows `t*batch..(t+1)*batch` are time step
    /// `t`. Gate columns are ordered input, forget, cell, output. With
    /// `reverse` the sequence is consumed from the last step to the first.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        batch: usize,
        reverse: bool,
    ) -> Var {
        let xv = self.value(x);
        let whh = self.value(w_hh);
        let hidden = whh.nrows();
        let four = 4 * hidden;
        assert_eq!(whh.ncols(), four);
        assert_eq!(self.value(w_ih).dim(), (xv.ncols(), four));
        assert_eq!(self.value(bias).dim(), (1, four));
        assert_eq!(xv.nrows() % batch, 0);
        let steps = xv.nrows() / batch;

        let mut acts = xv.dot(self.value(w_ih));
        acts += self.value(bias);
        let whh = whh.as_standard_layout();
        let whh = whh.as_slice().expect("standard layout");
        let n = steps * batch * hidden;
        let mut tanh_c = vec![0.0; n];
        let mut h_prev = vec![0.0; n];
        let mut c_prev = vec![0.0; n];
        let mut h = vec![0.0; batch * hidden];
        let mut c = vec![0.0; batch * hidden];
        {
            let acts = acts.as_slice_mut().expect("standard layout");
            for step in 0..steps {
                let t = if reverse { steps - 1 - step } else { step };
                let hs = t * batch * hidden..(t + 1) * batch * hidden;
                h_prev[hs.clone()].copy_from_slice(&h);
                c_prev[hs.clone()].copy_from_slice(&c);
                let gates = &mut acts[t * batch * four..(t + 1) * batch * four];
                for b in 0..batch {
                    let g = &mut gates[b * four..(b + 1) * four];
                    let hb = &h[b * hidden..(b + 1) * hidden];
                    for (k, &hk) in hb.iter().enumerate() {
                        let w = &whh[k * four..(k + 1) * four];
                        for (gv, wv) in g.iter_mut().zip(w) {
                            *gv += hk * wv;
                        }
                    }
                    let (gi, rest) = g.split_at_mut(hidden);
                    let (gf, rest) = rest.split_at_mut(hidden);
                    let (gc, go) = rest.split_at_mut(hidden);
                    let cb = &mut c[b * hidden..(b + 1) * hidden];
                    let hb = &mut h[b * hidden..(b + 1) * hidden];
                    let tcb = &mut tanh_c[hs.start + b * hidden..hs.start + (b + 1) * hidden];
                    for j in 0..hidden {
                        let i_g = sigmoid(gi[j]);
                        let f_g = sigmoid(gf[j]);
                        let c_g = fast_tanh(gc[j]);
                        let o_g = sigmoid(go[j]);
                        gi[j] = i_g;
                        gf[j] = f_g;
                        gc[j] = c_g;
                        go[j] = o_g;
                        let cell = f_g * cb[j] + i_g * c_g;
                        let t_cell = fast_tanh(cell);
                        cb[j] = cell;
                        tcb[j] = t_cell;
                        hb[j] = o_g * t_cell;
                    }
                }
            }
        }
        let shape = (steps * batch, hidden);
        let tanh_c = Matrix::from_shape_vec(shape, tanh_c).expect("shape");
        let h_prev = Matrix::from_shape_vec(shape, h_prev).expect("shape");
        let c_prev = Matrix::from_shape_vec(shape, c_prev).expect("shape");
        let h = Matrix::from_shape_vec((batch, hidden), h).expect("shape");
        let node = LstmNode {
            x,
            w_ih,
            w_hh,
            bias,
            batch,
            reverse,
            acts,
            tanh_c,
            h_prev,
            c_prev,
        };
        self.push(h, Op::Lstm(Box::new(node)), &[x, w_ih, w_hh, bias])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.ncols(), 1);
        assert_eq!(z.nrows(), targets.len());
        let n = targets.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::BceWithLogits { logits, targets },
            &[logits],
        )
    }

    /// Class-weighted cross-entropy over softmax of `logits`, normalized by
    /// the summed weight of the targets. A batch whose targets all carry
    /// zero weight has loss 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(z.ncols(), weights.len());
        let mut probs = z.clone();
        let mut total = 0.0;
        let mut norm = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(targets) {
            let r = row.as_slice_mut().expect("contiguous");
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = weights[y];
            total += w * (lse - r[y]);
            norm += w;
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            norm,
        };
        self.push(Matrix::from_elem((1, 1), loss), op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Inverted dropout; the identity on inference graphs or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let dim = self.value(x).dim();
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - rate;
        let mask = Matrix::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.input(mask);
        self.mul(x, m)
    }

    /// Gradients of the scalar `loss` with respect to every non-frozen
    /// parameter that reached it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let max_param = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id.index() + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut out = Gradients::with_len(max_param);
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) {
        let mut send = |v: Var, d: Matrix| {
            if self.needs(v) {
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    send(*b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    send(*b, g.clone());
                }
                send(*a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    send(*b, -&g);
                }
                send(*a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, &g * self.value(*b));
                }
                if self.needs(*b) {
                    send(*b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*row) {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                send(*a, g);
            }
            Op::MulRow(a, row) => {
                if self.needs(*row) {
                    let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, d);
                }
                if self.needs(*a) {
                    send(*a, &g * self.value(*row));
                }
            }
            Op::Scale(a, f) => send(*a, g * *f),
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                send(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                send(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                send(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                send(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g;
                for (mut dr, yr) in d.rows_mut().into_iter().zip(node.value.rows()) {
                    let dot: f64 = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut dr)
                        .and(&yr)
                        .for_each(|d, &y| *d = y * (*d - dot));
                }
                send(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let m = node.value.ncols() as f64;
                let mut d = g;
                for ((mut dr, xr), &is) in
                    d.rows_mut().into_iter().zip(node.value.rows()).zip(inv_std)
                {
                    let sum_g = dr.sum();
                    let sum_gx: f64 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut dr)
                        .and(&xr)
                        .for_each(|d, &xh| *d = is / m * (m * *d - sum_g - xh * sum_gx));
                }
                send(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.needs(*p) {
                        send(*p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let mut d = Matrix::zeros(self.value(*x).dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(&g);
                send(*x, d);
            }
            Op::Transpose(x) => send(*x, g.t().as_standard_layout().to_owned()),
            Op::Reshape(x) => {
                let dim = self.value(*x).dim();
                let data: Vec<f64> = g.iter().copied().collect();
                send(*x, Array2::from_shape_vec(dim, data).expect("reshape grad"));
            }
            Op::BlockMean { x, block } => {
                let mut d = Matrix::zeros(self.value(*x).dim());
                let inv = 1.0 / *block as f64;
                for (b, gr) in g.rows().into_iter().enumerate() {
                    for mut r in d.slice_mut(s![b * block..(b + 1) * block, ..]).rows_mut() {
                        r.scaled_add(inv, &gr);
                    }
                }
                send(*x, d);
            }
            Op::BlockTake { x, block, index } => {
                let mut d = Matrix::zeros(self.value(*x).dim());
                for (b, gr) in g.rows().into_iter().enumerate() {
                    d.row_mut(b * block + index).assign(&gr);
                }
                send(*x, d);
            }
            Op::BlockPrepend { x, row, block } => {
                let nb = g.nrows() / (block + 1);
                if self.needs(*row) {
                    let mut dr = Matrix::zeros((1, g.ncols()));
                    for b in 0..nb {
                        let mut r0 = dr.row_mut(0);
                        r0 += &g.row(b * (block + 1));
                    }
                    send(*row, dr);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros((nb * block, g.ncols()));
                    for b in 0..nb {
                        let o = b * (block + 1) + 1;
                        dx.slice_mut(s![b * block..(b + 1) * block, ..])
                            .assign(&g.slice(s![o..o + block, ..]));
                    }
                    send(*x, dx);
                }
            }
            Op::BlockAdd { x, table } => {
                if self.needs(*table) {
                    let block = self.value(*table).nrows();
                    let mut dt = Matrix::zeros(self.value(*table).dim());
                    for b in 0..g.nrows() / block {
                        dt += &g.slice(s![b * block..(b + 1) * block, ..]);
                    }
                    send(*table, dt);
                }
                send(*x, g);
            }
            Op::Attention(att) => self.backprop_attention(att, &g, &mut send),
            Op::Lstm(lstm) => self.backprop_lstm(lstm, &g, &mut send),
            Op::BceWithLogits { logits, targets } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let z = self.value(*logits);
                let d = Matrix::from_shape_fn(z.dim(), |(i, _)| {
                    scale * (sigmoid(z[[i, 0]]) - targets[i])
                });
                send(*logits, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                norm,
            } => {
                let mut d = Matrix::zeros(probs.dim());
                if *norm > 0.0 {
                    let scale = g[[0, 0]] / norm;
                    for (i, &y) in targets.iter().enumerate() {
                        let w = weights[y] * scale;
                        for j in 0..probs.ncols() {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[[i, j]] = w * (probs[[i, j]] - onehot);
                        }
                    }
                }
                send(*logits, d);
            }
            Op::Sum(x) => send(*x, Matrix::from_elem(self.value(*x).dim(), g[[0, 0]])),
            Op::Mean(x) => {
                let m = self.value(*x);
                send(*x, Matrix::from_elem(m.dim(), g[[0, 0]] / m.len() as f64));
            }
        }
    }

    fn backprop_attention(
        &self,
        att: &AttentionNode,
        g: &Matrix,
        send: &mut impl FnMut(Var, Matrix),
    ) {
        let (n, d) = g.dim();
        let block = att.block;
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(att.q), self.value(att.k), self.value(att.v));
        let mut dq = Matrix::zeros((n, d));
        let mut dk = Matrix::zeros((n, d));
        let mut dv = Matrix::zeros((n, d));
        let mut dp = Matrix::zeros((block, block));
        let mut idx = 0;
        for b in 0..n / block {
            let rows = b * block..(b + 1) * block;
            for h in 0..att.heads {
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![rows.clone(), cols.clone()]);
                if att.uniform {
                    let mean = go.sum_axis(Axis(0)) / block as f64;
                    for mut r in dv.slice_mut(s![rows.clone(), cols.clone()]).rows_mut() {
                        r += &mean;
                    }
                    continue;
                }
                let p = &att.probs[idx];
                idx += 1;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                general_mat_mul(
                    1.0,
                    &p.t(),
                    &go,
                    1.0,
                    &mut dv.slice_mut(s![rows.clone(), cols.clone()]),
                );
                general_mat_mul(1.0, &go, &vh.t(), 0.0, &mut dp);
                Zip::from(dp.rows_mut())
                    .and(p.rows())
                    .for_each(|mut dr, pr| {
                        let dot: f64 = dr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut dr)
                            .and(&pr)
                            .for_each(|d, &pv| *d = pv * (*d - dot));
                    });
                general_mat_mul(
                    scale,
                    &dp,
                    &kh,
                    1.0,
                    &mut dq.slice_mut(s![rows.clone(), cols.clone()]),
                );
                general_mat_mul(
                    scale,
                    &dp.t(),
                    &qh,
                    1.0,
                    &mut dk.slice_mut(s![rows.clone(), cols.clone()]),
                );
            }
        }
        if !att.uniform {
            send(att.q, dq);
            send(att.k, dk);
        }
        send(att.v, dv);
    }

    fn backprop_lstm(&self, lstm: &LstmNode, g: &Matrix, send: &mut impl FnMut(Var, Matrix)) {
        let batch = lstm.batch;
        let hidden = g.ncols();
        let whh = self.value(lstm.w_hh);
        let steps = lstm.acts.nrows() / batch;
        let four = 4 * hidden;
        let whh = whh.as_standard_layout();
        let whh = whh.as_slice().expect("standard layout");
        let acts = lstm.acts.as_slice().expect("standard layout");
        let tanh_c = lstm.tanh_c.as_slice().expect("standard layout");
        let c_prev = lstm.c_prev.as_slice().expect("standard layout");
        let mut dpre = vec![0.0; acts.len()];
        let mut dh: Vec<f64> = g.iter().copied().collect();
        let mut dc = vec![0.0; batch * hidden];
        for step in (0..steps).rev() {
            let t = if lstm.reverse { steps - 1 - step } else { step };
            for b in 0..batch {
                let row = t * batch + b;
                let a = &acts[row * four..(row + 1) * four];
                let tc = &tanh_c[row * hidden..(row + 1) * hidden];
                let cp = &c_prev[row * hidden..(row + 1) * hidden];
                let dp = &mut dpre[row * four..(row + 1) * four];
                let dhb = &mut dh[b * hidden..(b + 1) * hidden];
                let dcb = &mut dc[b * hidden..(b + 1) * hidden];
                for j in 0..hidden {
                    let i_g = a[j];
                    let f_g = a[hidden + j];
                    let c_g = a[2 * hidden + j];
                    let o_g = a[3 * hidden + j];
                    let t_cell = tc[j];
                    let dhv = dhb[j];
                    let dcell = dcb[j] + dhv * o_g * (1.0 - t_cell * t_cell);
                    dp[j] = dcell * c_g * i_g * (1.0 - i_g);
                    dp[hidden + j] = dcell * cp[j] * f_g * (1.0 - f_g);
                    dp[2 * hidden + j] = dcell * i_g * (1.0 - c_g * c_g);
                    dp[3 * hidden + j] = dhv * t_cell * o_g * (1.0 - o_g);
                    dcb[j] = dcell * f_g;
                }
                // dh = dpre_row · W_hhᵀ
                for (k, d) in dhb.iter_mut().enumerate() {
                    let w = &whh[k * four..(k + 1) * four];
                    *d = w.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
                }
            }
        }
        let dpre = Matrix::from_shape_vec(lstm.acts.dim(), dpre).expect("shape");
        if self.needs(lstm.w_hh) {
            send(lstm.w_hh, lstm.h_prev.t().dot(&dpre));
        }
        if self.needs(lstm.w_ih) {
            send(lstm.w_ih, self.value(lstm.x).t().dot(&dpre));
        }
        if self.needs(lstm.bias) {
            send(lstm.bias, dpre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if self.needs(lstm.x) {
            send(lstm.x, dpre.dot(&self.value(lstm.w_ih).t()));
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `tanh` through one `exp`; agrees with `f64::tanh` to a few ulps.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
