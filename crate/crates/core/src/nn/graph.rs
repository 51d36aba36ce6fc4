//! Reverse-mode automatic differentiation over row-major token matrices.
//!
//! Every value is an `Array2<f64>`; a `h×w×d` feature grid is carried as an
//! `(h·w)×d` matrix with tokens in row-major spatial order. A [`Graph`] is
//! built for one forward pass and consumed by [`Graph::backward`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::functional::{gelu, gelu_grad};

const LN_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which named parameters receive gradients.
#[derive(Debug, Clone, Copy)]
pub enum Trainable<'a> {
    Nothing,
    Everything,
    Names(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Names(set) => set.contains(name),
        }
    }
}

enum Value<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

impl Value<'_> {
    fn get(&self) -> &Array2<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

/// Sparse separable bilinear interpolation weights (half-pixel centres).
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub from: (usize, usize),
    pub to: (usize, usize),
    rows: Vec<[(usize, f64); 2]>,
    cols: Vec<[(usize, f64); 2]>,
}

impl ResizePlan {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        Self {
            from,
            to,
            rows: axis_weights(from.0, to.0),
            cols: axis_weights(from.1, to.1),
        }
    }

    /// Apply to a `(from.0·from.1)×d` matrix.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let (_, fw) = self.from;
        let (th, tw) = self.to;
        let mut out = Array2::zeros((th * tw, d));
        for (oy, ry) in self.rows.iter().enumerate() {
            for (ox, rx) in self.cols.iter().enumerate() {
                let mut row = out.row_mut(oy * tw + ox);
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let w = wy * wx;
                        if w != 0.0 {
                            row.scaled_add(w, &x.row(iy * fw + ix));
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ResizePlan::apply`].
    pub fn apply_transpose(&self, g: ArrayView2<f64>) -> Array2<f64> {
        let d = g.ncols();
        let (fh, fw) = self.from;
        let tw = self.to.1;
        let mut out = Array2::zeros((fh * fw, d));
        for (oy, ry) in self.rows.iter().enumerate() {
            for (ox, rx) in self.cols.iter().enumerate() {
                let src = g.row(oy * tw + ox);
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let w = wy * wx;
                        if w != 0.0 {
                            out.row_mut(iy * fw + ix).scaled_add(w, &src);
                        }
                    }
                }
            }
        }
        out
    }
}

fn axis_weights(input: usize, output: usize) -> Vec<[(usize, f64); 2]> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Loss {
        x: Var,
        grad: Array2<f64>,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: Trainable<'a>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Array2<f64>>,
    inputs: HashMap<usize, Array2<f64>>,
}

impl Gradients {
    /// Gradient with respect to an input created with [`Graph::input`] and `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.inputs.get(&v.0)
    }

    /// Adds `scale · other` into `self`.
    pub fn accumulate(&mut self, other: Gradients, scale: f64) {
        for (name, g) in other.params {
            match self.params.get_mut(&name) {
                Some(acc) => acc.scaled_add(scale, &g),
                None => {
                    self.params.insert(name, g * scale);
                }
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new(trainable: Trainable<'a>) -> Self {
        Self {
            nodes: Vec::new(),
            trainable,
        }
    }

    /// A graph that records no gradients.
    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.get()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(Value::Owned(value), Op::Leaf, requires_grad)
    }

    /// A named parameter leaf. Registering the same name twice accumulates its gradient.
    pub fn param(&mut self, name: &str, value: &'a Array2<f64>) -> Var {
        let needs = self.trainable.contains(name);
        self.push(Value::Borrowed(value), Op::Param(name.to_string()), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.owned(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.owned(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x) * factor;
        self.owned(v, Op::Scale(x, factor), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.owned(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.owned(v, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalisation with affine `1×d` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let centred = xv - &mean.view().insert_axis(Axis(1));
        let var = centred.mapv(|c| c * c).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centred * inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Global multi-head self-attention over packed `n×3d` query/key/value rows.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let packed = self.value(qkv);
        let (n, three_d) = packed.dim();
        let d = three_d / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = packed.slice(s![.., h * hd..(h + 1) * hd]);
            let k = packed.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = packed.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut p = q.dot(&k.t());
            for mut row in p.rows_mut() {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0;
                row.mapv_inplace(|x| {
                    let e = ((x - max) * scale).exp();
                    sum += e;
                    e
                });
                row /= sum;
            }
            out.slice_mut(s![.., h * hd..(h + 1) * hd])
                .assign(&p.dot(&v));
            probs.push(p);
        }
        self.owned(out, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// 2×2 mean pooling of an `(h·w)×d` grid.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = avg_pool2(self.value(x).view(), h, w);
        self.owned(v, Op::AvgPool2 { x, h, w }, &[x])
    }

    pub fn resize(&mut self, x: Var, from: (usize, usize), to: (usize, usize)) -> Var {
        let plan = ResizePlan::new(from, to);
        let v = plan.apply(self.value(x).view());
        self.owned(v, Op::Resize { x, plan }, &[x])
    }

    /// Replaces the rows selected by `mask` with the `1×d` `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Var {
        let mut v = self.value(x).clone();
        let t = self.value(token).row(0).to_owned();
        for (mut row, &m) in v.rows_mut().into_iter().zip(&mask) {
            if m {
                row.assign(&t);
            }
        }
        self.owned(v, Op::ReplaceRows { x, token, mask }, &[x, token])
    }

    /// A scalar objective with a precomputed gradient with respect to `x`.
    pub fn loss(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(x).dim());
        self.owned(Array2::from_elem((1, 1), value), Op::Loss { x, grad }, &[x])
    }

    /// Back-propagates from a `1×1` output.
    pub fn backward(self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::default();
        if !self.nodes[out.0].needs_grad {
            return result;
        }
        grads[out.0] = Some(Array2::ones(self.value(out).dim()));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    result.inputs.insert(i, g);
                }
                Op::Param(name) => match result.params.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        result.params.insert(name.clone(), g);
                    }
                },
                Op::Add(a, b) => {
                    if needs(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::MatMul(a, b) => {
                    if needs(a) {
                        let da = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, da);
                    }
                    if needs(b) {
                        let db = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Gelu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| *d *= gelu_grad(xv));
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if needs(gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, dg);
                    }
                    if needs(beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(x) {
                        let d = xhat.ncols() as f64;
                        let dxhat = &g * self.value(*gamma);
                        let sum_d = dxhat.sum_axis(Axis(1));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(1));
                        let mut dx = dxhat * d;
                        dx -= &sum_d.insert_axis(Axis(1));
                        dx -= &(xhat * &sum_dx.insert_axis(Axis(1)));
                        dx *= &(inv_std / d).insert_axis(Axis(1));
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { qkv, heads, probs } => {
                    let packed = self.value(*qkv);
                    let (n, three_d) = packed.dim();
                    let d = three_d / 3;
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dqkv = Array2::zeros((n, three_d));
                    for (h, p) in probs.iter().enumerate() {
                        let q = packed.slice(s![.., h * hd..(h + 1) * hd]);
                        let k = packed.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                        let v = packed.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                        let go = g.slice(s![.., h * hd..(h + 1) * hd]);
                        let dv = p.t().dot(&go);
                        let mut ds = go.dot(&v.t());
                        Zip::from(ds.rows_mut())
                            .and(p.rows())
                            .for_each(|mut dr, pr| {
                                let dot = dr.dot(&pr);
                                Zip::from(&mut dr).and(&pr).for_each(|x, &pv| {
                                    *x = pv * (*x - dot) * scale;
                                });
                            });
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
                        dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd])
                            .assign(&dk);
                        dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd])
                            .assign(&dv);
                    }
                    acc(&mut grads, *qkv, dqkv);
                }
                Op::AvgPool2 { x, h, w } => {
                    let dx = avg_pool2_transpose(g.view(), *h, *w);
                    acc(&mut grads, *x, dx);
                }
                Op::Resize { x, plan } => {
                    let dx = plan.apply_transpose(g.view());
                    acc(&mut grads, *x, dx);
                }
                Op::ReplaceRows { x, token, mask } => {
                    if needs(token) {
                        let mut dt = Array2::zeros((1, g.ncols()));
                        for (row, &m) in g.rows().into_iter().zip(mask) {
                            if m {
                                let mut acc_row = dt.row_mut(0);
                                acc_row += &row;
                            }
                        }
                        acc(&mut grads, *token, dt);
                    }
                    if needs(x) {
                        let mut dx = g;
                        for (mut row, &m) in dx.rows_mut().into_iter().zip(mask) {
                            if m {
                                row.fill(0.0);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Loss { x, grad } => {
                    let upstream = g[[0, 0]];
                    acc(&mut grads, *x, grad * upstream);
                }
            }
        }
        result
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// 2×2 mean pooling of an `(h·w)×d` token matrix.
pub fn avg_pool2(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for i in 0..oh {
        for j in 0..ow {
            let mut row = out.row_mut(i * ow + j);
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row.scaled_add(0.25, &x.row((2 * i + a) * w + 2 * j + b));
            }
        }
    }
    out
}

fn avg_pool2_transpose(g: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let ow = w / 2;
    let mut out = Array2::zeros((h * w, g.ncols()));
    for i in 0..h / 2 {
        for j in 0..ow {
            let src = g.row(i * ow + j);
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out.row_mut((2 * i + a) * w + 2 * j + b)
                    .scaled_add(0.25, &src);
            }
        }
    }
    out
}
