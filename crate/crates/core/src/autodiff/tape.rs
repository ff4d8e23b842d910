use std::cell::{Ref, RefCell};

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::{attention, SeqLayout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    LogSoftmax(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` is several times slower.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable row softmax.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on a non-scalar node");
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            (f(&na.value, &nb.value), na.requires_grad || nb.requires_grad)
        };
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(&y.t()), Op::MatMulNt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.dim(), y.dim(), "add shape mismatch");
                x + y
            },
            Op::Add(a, b),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
                x - y
            },
            Op::Sub(a, b),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
                x * y
            },
            Op::Mul(a, b),
        )
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(
            a,
            row,
            |x, r| {
                assert_eq!(r.nrows(), 1, "add_row expects a single row");
                assert_eq!(x.ncols(), r.ncols(), "add_row width mismatch");
                x + r
            },
            Op::AddRow(a, row),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&self, a: Var, mask: Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), mask.dim(), "mask shape mismatch");
            &nodes[a.0].value * &mask
        };
        let rg = self.nodes.borrow()[a.0].requires_grad;
        self.push(value, Op::MulConst(a, mask), rg)
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(
            a,
            |x| x.select(Axis(0), idx),
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| concatenate(Axis(0), &[x.view(), y.view()]).expect("concat_rows width mismatch"),
            Op::ConcatRows(a, b),
        )
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| concatenate(Axis(1), &[x.view(), y.view()]).expect("concat_cols height mismatch"),
            Op::ConcatCols(a, b),
        )
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (value, xhat, inv_std, rg) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = &nodes[gain.0].value;
            let b = &nodes[bias.0].value;
            assert_eq!(g.dim(), (1, xv.ncols()), "layer_norm gain shape");
            assert_eq!(b.dim(), (1, xv.ncols()), "layer_norm bias shape");
            let cols = xv.ncols() as f64;
            let mut xhat = xv.clone();
            let mut inv_std = Vec::with_capacity(xv.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / cols;
                let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / cols;
                let inv = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| (v - mean) * inv);
                inv_std.push(inv);
            }
            let value = &xhat * g + b;
            let rg = nodes[x.0].requires_grad || nodes[gain.0].requires_grad || nodes[bias.0].requires_grad;
            (value, xhat, inv_std, rg)
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(gelu), Op::Gelu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Op::Exp(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.mapv(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.dim(), y.dim(), "minimum shape mismatch");
                Zip::from(x).and(y).map_collect(|&p, &q| if p <= q { p } else { q })
            },
            Op::Minimum(a, b),
        )
    }

    /// `log softmax(logits[r])[targets[r]]` for every row, as an `r × 1`
    /// column.
    pub fn log_softmax_pick(&self, logits: Var, targets: &[usize]) -> Var {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            assert_eq!(x.nrows(), targets.len(), "one target per row");
            let mut value = Array2::zeros((x.nrows(), 1));
            for (r, (row, &t)) in x.rows().into_iter().zip(targets).enumerate() {
                assert!(t < row.len(), "target {t} out of range {}", row.len());
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
                value[[r, 0]] = row[t] - lse;
            }
            let probs = if nodes[logits.0].requires_grad {
                softmax_rows(x)
            } else {
                Array2::zeros((0, 0))
            };
            (value, probs, nodes[logits.0].requires_grad)
        };
        self.push(
            value,
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Full row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for mut row in out.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
                    row.mapv_inplace(|v| v - lse);
                }
                out
            },
            Op::LogSoftmax(a),
        )
    }

    /// Scales every row to unit Euclidean norm (norms floored at `eps`).
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let (value, norms, rg) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.nrows());
            for mut row in out.rows_mut() {
                let n = row.dot(&row).sqrt().max(eps);
                row.mapv_inplace(|v| v / n);
                norms.push(n);
            }
            (out, norms, nodes[a.0].requires_grad)
        };
        self.push(value, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Array2::from_elem((1, 1), x.sum() / x.len() as f64),
            Op::Mean(a),
        )
    }

    /// Causal multi-head scaled dot-product attention, confined to each
    /// segment of `layout`. `q`, `k`, `v` are already projected.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, layout: &SeqLayout, heads: usize) -> Var {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            assert_eq!(qv.dim(), kv.dim(), "attention q/k shape");
            assert_eq!(qv.dim(), vv.dim(), "attention q/v shape");
            assert_eq!(qv.nrows(), layout.rows(), "attention rows vs layout");
            let (out, probs) = attention::forward(qv, kv, vv, layout, heads);
            let rg = nodes[q.0].requires_grad || nodes[k.0].requires_grad || nodes[v.0].requires_grad;
            (out, probs, rg)
        };
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(Array2::ones((1, 1)));

        let acc = |grads: &mut Vec<Option<Tensor>>, p: Var, g: Tensor| {
            if !nodes[p.0].requires_grad {
                return;
            }
            match &mut grads[p.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, *a, g.dot(&nodes[b.0].value.t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, *b, nodes[a.0].value.t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, *a, g.dot(&nodes[b.0].value));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, *b, g.t().dot(&nodes[a.0].value));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, *a, &g * &nodes[b.0].value);
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, *b, &g * &nodes[a.0].value);
                    }
                }
                Op::AddRow(a, row) => {
                    if nodes[row.0].requires_grad {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, mask) => acc(&mut grads, *a, g * mask),
                Op::GatherRows(a, idx) => {
                    let src = &nodes[a.0].value;
                    let mut da = Array2::zeros(src.dim());
                    for (r, &j) in idx.iter().enumerate() {
                        let mut dst = da.row_mut(j);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::ConcatRows(a, b) => {
                    let split = nodes[a.0].value.nrows();
                    acc(&mut grads, *a, g.slice(s![..split, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(s![split.., ..]).to_owned());
                }
                Op::ConcatCols(a, b) => {
                    let split = nodes[a.0].value.ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &nodes[gain.0].value;
                    if nodes[gain.0].requires_grad {
                        acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if nodes[bias.0].requires_grad {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if nodes[x.0].requires_grad {
                        let cols = xhat.ncols() as f64;
                        let dxhat = &g * gv;
                        let mut dx = Array2::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let h = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_h = dh.dot(&h);
                            let scale = inv_std[r] / cols;
                            let mut out = dx.row_mut(r);
                            Zip::from(&mut out).and(&dh).and(&h).for_each(|o, &d, &hv| {
                                *o = scale * (cols * d - sum_dh - hv * sum_dh_h);
                            });
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Gelu(a) => {
                    let d = &g * &nodes[a.0].value.mapv(gelu_grad);
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = &g * &node.value;
                    acc(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[a.0].value;
                    let d = Zip::from(&g)
                        .and(x)
                        .map_collect(|&gv, &xv| if xv > *lo && xv < *hi { gv } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Minimum(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    let da = Zip::from(&g)
                        .and(x)
                        .and(y)
                        .map_collect(|&gv, &p, &q| if p <= q { gv } else { 0.0 });
                    let db = &g - &da;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::LogSoftmaxPick {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[[r, 0]];
                        let mut row = d.row_mut(r);
                        row.mapv_inplace(|p| -gr * p);
                        row[t] += gr;
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for (mut drow, orow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&orow).for_each(|dv, &o| *dv -= o.exp() * total);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = drow.dot(&yr);
                        Zip::from(&mut drow).and(&yr).for_each(|dv, &yv| *dv = (*dv - yv * proj) / norms[r]);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum(a) => {
                    let dim = nodes[a.0].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let dim = nodes[a.0].value.dim();
                    let n = (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention::backward(
                        &g,
                        &nodes[q.0].value,
                        &nodes[k.0].value,
                        &nodes[v.0].value,
                        probs,
                        layout,
                        *heads,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
            }
        }
        Gradients { grads }
    }
}
