//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Values are
//! 2-D matrices (`[rows x cols]`); scalars are `[1 x 1]`. [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients, summing over every
//! use of a value.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_raw, Real, Tensor};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    HardSigmoid(Var, F),
    StraightThrough(Var, F),
    Maximum(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    TileRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    MulCol(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    MaskedSoftmax(Var, Vec<bool>),
    TimeWeightedSum { weights: Var, values: Var, steps: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// The tape: an append-only record of executed primitives.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to every tracked value on a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter, if it took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.param_vars.get(id.index()).copied().flatten().and_then(|v| self.get(v))
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn collect_params(&self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        store
            .ids()
            .map(|id| {
                let shape = store.value(id).shape().to_vec();
                match self.param(id) {
                    Some(g) => g.clone().reshape(shape).expect("gradient size matches its parameter"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn as_matrix_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 => vec![1, 1],
        1 => vec![1, shape[0]],
        2 => shape.to_vec(),
        _ => vec![shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]],
    }
}

fn acc<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut Vec<F> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn mat(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = as_matrix_shape(t.shape());
        let t = t.reshape(shape).expect("same element count");
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].tracked = true;
        v
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Var {
        self.constant(Self::mat(vec![rows, cols], data))
    }

    /// Records a parameter once per tape; later calls return the same handle
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let v = self.input(store.value(id).clone());
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Self::mat(va.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "maximum");
        self.zip(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.affine(a, s, F::zero())
    }

    /// Adds a `[1 x C]` (or `[C]`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.value(row).len(), c, "add_row: bias width");
        let xv = self.value(x).data();
        let bv = self.value(row).data();
        let mut data = xv.to_vec();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let t = Self::mat(vec![r, c], data);
        self.push(t, Op::AddRow(x, row), &[x, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Self::mat(vec![m, n], data);
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| F::one() / (F::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > F::zero() { x } else { F::zero() })
    }

    /// `max(0, min(1, (slope * a + 1) / 2))`.
    pub fn hard_sigmoid(&mut self, a: Var, slope: F) -> Var {
        assert!(slope > F::zero(), "hard_sigmoid: slope must be positive");
        self.unary(a, Op::HardSigmoid(a, slope), |x| hard_sigmoid(x, slope))
    }

    /// Binary step forward (`1` iff `a > 0`), hard-sigmoid derivative backward.
    pub fn straight_through_step(&mut self, a: Var, slope: F) -> Var {
        assert!(slope > F::zero(), "straight_through_step: slope must be positive");
        self.unary(a, Op::StraightThrough(a, slope), step)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols: row counts differ");
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Self::mat(vec![rows, total], data);
        self.push(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Self::mat(vec![r, len], data);
        self.push(t, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == cols), "concat_rows: widths differ");
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let t = Self::mat(vec![rows, cols], data);
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Self::mat(vec![len, c], data);
        self.push(t, Op::SliceRows(a, start), &[a])
    }

    /// Row `i` of the result is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for ix in &index {
            match ix {
                Some(i) => {
                    assert!(*i < r, "gather_rows: index {i} >= {r}");
                    data.extend_from_slice(&src[i * c..(i + 1) * c]);
                }
                None => data.extend(std::iter::repeat(F::zero()).take(c)),
            }
        }
        let t = Self::mat(vec![index.len(), c], data);
        self.push(t, Op::GatherRows(a, index), &[a])
    }

    /// Embedding lookup.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(times * r * c);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let t = Self::mat(vec![times * r, c], data);
        self.push(t, Op::TileRows(a, times), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Self::mat(vec![c, r], data);
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(vec![rows, cols]).expect("reshape: element count");
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Scales row `i` of `x` by `s[i]`, where `s` is `[R x 1]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(s), (r, 1), "mul_col: scale must be [rows x 1]");
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let data = (0..r * c).map(|i| xv[i] * sv[i / c]).collect();
        let t = Self::mat(vec![r, c], data);
        self.push(t, Op::MulCol(x, s), &[x, s])
    }

    /// Constant per-row scaling, e.g. a padding mask.
    pub fn scale_rows(&mut self, x: Var, factors: &[F]) -> Var {
        let s = self.constant_matrix(factors.len(), 1, factors.to_vec());
        self.mul_col(x, s)
    }

    /// `mask * a + (1 - mask) * b`, row-wise with a constant mask.
    pub fn blend_rows(&mut self, mask: &[F], a: Var, b: Var) -> Var {
        if mask.iter().all(|&m| m == F::one()) {
            return a;
        }
        let diff = self.sub(a, b);
        let scaled = self.scale_rows(diff, mask);
        self.add(b, scaled)
    }

    /// Normalizes each row to zero mean and unit variance (epsilon inside the
    /// square root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (r, d) = self.shape(x);
        assert!(d >= 1, "layer_norm: empty feature dimension");
        assert_eq!(self.value(gain).len(), d);
        assert_eq!(self.value(bias).len(), d);
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let dn = F::of(d as f64);
        let mut xhat = vec![F::zero(); r * d];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Self::mat(vec![r, d], out);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), Contract, "dropout rate {rate} outside [0, 1)");
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let (r, c) = self.shape(x);
        let mask: Vec<F> =
            (0..r * c).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect();
        let m = self.constant_matrix(r, c, mask);
        Ok(self.mul(x, m))
    }

    /// Row-wise softmax over positions where `mask` is true. Every row needs
    /// at least one unmasked position.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.shape(x);
        ensure!(mask.len() == r * c, Shape, "mask has {} entries for [{r} x {c}]", mask.len());
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            ensure!(m.iter().any(|&b| b), Contract, "softmax row {i} is fully masked");
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &b)| b)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= total;
            }
        }
        let t = Self::mat(vec![r, c], out);
        Ok(self.push(t, Op::MaskedSoftmax(x, mask), &[x]))
    }

    /// `out[b] = sum_t weights[b, t] * values[t * B + b]` for time-major values.
    pub fn time_weighted_sum(&mut self, weights: Var, values: Var) -> Var {
        let (b, steps) = self.shape(weights);
        let (rows, d) = self.shape(values);
        assert_eq!(rows, b * steps, "time_weighted_sum: values must be [T*B x d]");
        let wv = self.value(weights).data();
        let vv = self.value(values).data();
        let mut out = vec![F::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for t in 0..steps {
                let w = wv[bi * steps + t];
                let row = &vv[(t * b + bi) * d..(t * b + bi + 1) * d];
                for (oj, &v) in o.iter_mut().zip(row) {
                    *oj += w * v;
                }
            }
        }
        let t = Self::mat(vec![b, d], out);
        self.push(t, Op::TimeWeightedSum { weights, values, steps }, &[weights, values])
    }

    /// Summed weighted negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`. Returns a `[1 x 1]` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        ensure!(targets.len() == n, Shape, "{} targets for {n} rows", targets.len());
        ensure!(weights.len() == n, Shape, "{} weights for {n} rows", weights.len());
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!("target id {bad} >= vocabulary size {v}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); n * v];
        let mut loss = F::zero();
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                total += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= total;
            }
            if weights[i] != F::zero() {
                let log_p = row[targets[i]] - max - total.ln();
                loss -= weights[i] * log_p;
            }
        }
        let t = Self::mat(vec![1, 1], vec![loss]);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let t = Self::mat(vec![1, 1], vec![s]);
        self.push(t, Op::Sum(a), &[a])
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Self::mat(nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();
        let tracked = |v: Var| nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if tracked(v) {
                        for (d, &x) in acc(grads, nodes, v).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    for (d, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if tracked(*b) {
                    for (d, &x) in acc(grads, nodes, *b).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if tracked(*a) {
                    for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if tracked(*b) {
                    for ((d, &x), &y) in acc(grads, nodes, *b).iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if tracked(*a) {
                    let d = acc(grads, nodes, *a);
                    for k in 0..g.len() {
                        if va[k] >= vb[k] {
                            d[k] += g[k];
                        }
                    }
                }
                if tracked(*b) {
                    let d = acc(grads, nodes, *b);
                    for k in 0..g.len() {
                        if va[k] < vb[k] {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Affine(a, s) => {
                for (d, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                    *d += *s * x;
                }
            }
            Op::AddRow(x, row) => {
                if tracked(*x) {
                    for (d, &v) in acc(grads, nodes, *x).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if tracked(*row) {
                    let c = nodes[row.0].value.len();
                    let d = acc(grads, nodes, *row);
                    for (k, &v) in g.iter().enumerate() {
                        d[k % c] += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if tracked(*a) {
                    // dA[m x k] += G[m x n] @ B^T
                    let bv = nodes[b.0].value.data();
                    let d = acc(grads, nodes, *a);
                    F::gemm(m, n, k, F::one(), g, n as isize, 1, bv, 1, n as isize, F::one(), d, k as isize, 1);
                }
                if tracked(*b) {
                    // dB[k x n] += A^T @ G
                    let av = nodes[a.0].value.data();
                    let d = acc(grads, nodes, *b);
                    F::gemm(k, m, n, F::one(), av, 1, k as isize, g, n as isize, 1, F::one(), d, n as isize, 1);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out) {
                    *d += x * y * (F::one() - y);
                }
            }
            Op::Tanh(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out) {
                    *d += x * (F::one() - y * y);
                }
            }
            Op::Relu(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out) {
                    if y > F::zero() {
                        *d += x;
                    }
                }
            }
            Op::HardSigmoid(a, slope) | Op::StraightThrough(a, slope) => {
                let av = nodes[a.0].value.data();
                for ((d, &x), &pre) in acc(grads, nodes, *a).iter_mut().zip(g).zip(av) {
                    *d += x * hard_sigmoid_grad(pre, *slope);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if tracked(p) {
                        let d = acc(grads, nodes, p);
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].value.shape()[1];
                let (rows, len) = (node.value.shape()[0], node.value.shape()[1]);
                let d = acc(grads, nodes, *a);
                for r in 0..rows {
                    for j in 0..len {
                        d[r * c + start + j] += g[r * len + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if tracked(p) {
                        for (d, &x) in acc(grads, nodes, p).iter_mut().zip(&g[offset..offset + n]) {
                            *d += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.shape()[1];
                let d = acc(grads, nodes, *a);
                for (k, &x) in g.iter().enumerate() {
                    d[start * c + k] += x;
                }
            }
            Op::GatherRows(a, index) => {
                let c = node.value.shape()[1];
                let d = acc(grads, nodes, *a);
                for (r, ix) in index.iter().enumerate() {
                    if let Some(src) = ix {
                        for j in 0..c {
                            d[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::TileRows(a, times) => {
                let n = nodes[a.0].value.len();
                let d = acc(grads, nodes, *a);
                for t in 0..*times {
                    for (dk, &x) in d.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *dk += x;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let d = acc(grads, nodes, *a);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                for (d, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::MulCol(x, s) => {
                let c = node.value.shape()[1];
                let (xv, sv) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                if tracked(*x) {
                    let d = acc(grads, nodes, *x);
                    for k in 0..g.len() {
                        d[k] += g[k] * sv[k / c];
                    }
                }
                if tracked(*s) {
                    let d = acc(grads, nodes, *s);
                    for k in 0..g.len() {
                        d[k / c] += g[k] * xv[k];
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let gv = nodes[gain.0].value.data();
                if tracked(*bias) {
                    let db = acc(grads, nodes, *bias);
                    for (k, &v) in g.iter().enumerate() {
                        db[k % d] += v;
                    }
                }
                if tracked(*gain) {
                    let dg = acc(grads, nodes, *gain);
                    for (k, &v) in g.iter().enumerate() {
                        dg[k % d] += v * xhat[k];
                    }
                }
                if tracked(*x) {
                    let dn = F::of(d as f64);
                    let dx = acc(grads, nodes, *x);
                    for r in 0..rows {
                        let gh: Vec<F> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                        let mean_gh = gh.iter().copied().sum::<F>() / dn;
                        let mean_gh_xh =
                            (0..d).map(|j| gh[j] * xhat[r * d + j]).sum::<F>() / dn;
                        for j in 0..d {
                            dx[r * d + j] +=
                                rstd[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_gh_xh);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                let c = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let d = acc(grads, nodes, *a);
                for r in 0..rows {
                    let dot: F = (0..c).map(|j| g[r * c + j] * out[r * c + j]).sum();
                    for j in 0..c {
                        if mask[r * c + j] {
                            d[r * c + j] += out[r * c + j] * (g[r * c + j] - dot);
                        }
                    }
                }
            }
            Op::TimeWeightedSum { weights, values, steps } => {
                let (b, dd) = (node.value.shape()[0], node.value.shape()[1]);
                let steps = *steps;
                if tracked(*weights) {
                    let vv = nodes[values.0].value.data();
                    let dw = acc(grads, nodes, *weights);
                    for bi in 0..b {
                        for t in 0..steps {
                            let row = &vv[(t * b + bi) * dd..(t * b + bi + 1) * dd];
                            let gr = &g[bi * dd..(bi + 1) * dd];
                            dw[bi * steps + t] += row.iter().zip(gr).map(|(&x, &y)| x * y).sum::<F>();
                        }
                    }
                }
                if tracked(*values) {
                    let wv = nodes[weights.0].value.data();
                    let dv = acc(grads, nodes, *values);
                    for bi in 0..b {
                        for t in 0..steps {
                            let w = wv[bi * steps + t];
                            for j in 0..dd {
                                dv[(t * b + bi) * dd + j] += w * g[bi * dd + j];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = nodes[logits.0].value.shape()[1];
                let d = acc(grads, nodes, *logits);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let gw = g[0] * w;
                    for j in 0..v {
                        let mut p = probs[r * v + j];
                        if j == t {
                            p -= F::one();
                        }
                        d[r * v + j] += gw * p;
                    }
                }
            }
            Op::Sum(a) => {
                for d in acc(grads, nodes, *a).iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

pub fn hard_sigmoid<F: Real>(a: F, slope: F) -> F {
    let two = F::of(2.0);
    ((slope * a + F::one()) / two).max(F::zero()).min(F::one())
}

/// Derivative of the hard sigmoid: `slope / 2` inside the linear region.
pub fn hard_sigmoid_grad<F: Real>(a: F, slope: F) -> F {
    let lin = slope * a;
    if lin > -F::one() && lin < F::one() {
        slope / F::of(2.0)
    } else {
        F::zero()
    }
}

/// Binary step: `1` iff `a > 0` (so `hard_sigmoid(a) == 0.5` maps to `0`).
pub fn step<F: Real>(a: F) -> F {
    if a > F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(g: &mut Graph<f64>, xs: &[f64]) -> Var {
        g.input(Tensor::from_f64(vec![1, xs.len()], xs).unwrap())
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[0.3, -2.0, 7.0]);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[2.0, -1.0]);
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[1.0, 3.0]);
        let gain = g.constant(Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap());
        let bias = g.constant(Tensor::from_f64(vec![2], &[0.0, 0.0]).unwrap());
        let y = g.layer_norm(x, gain, bias, 0.0);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let c = row(&mut g, &[5.0, 5.0, 5.0]);
        let gain = g.constant(Tensor::filled(vec![3], 1.0));
        let bias = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(c, gain, bias, 1e-6);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_sigmoid_examples() {
        assert_eq!(hard_sigmoid(0.0, 1.0), 0.5);
        assert_eq!(hard_sigmoid(1.0, 1.0), 1.0);
        assert!((hard_sigmoid(0.4f64, 1.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn straight_through_examples() {
        let mut g = Graph::<f64>::new();
        let a = row(&mut g, &[0.4, -3.0, 0.0]);
        let z = g.straight_through_step(a, 1.0);
        assert_eq!(g.value(z).data(), &[1.0, 0.0, 0.0]);
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn dropout_rate_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::filled(vec![4, 4], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.3, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let n = 100_000;
        let x = g.input(Tensor::filled(vec![1, n], 1.0));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = vals.iter().sum::<f64>() / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[0.5, 9.0, 0.5]);
        let p = g.masked_softmax(x, vec![true, false, true]).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.0, 0.5]);
        assert!(g.masked_softmax(x, vec![false; 3]).is_err());
    }

    #[test]
    fn gradients_sum_over_uses_and_are_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(vec![2, 2], &[0.1, 0.2, -0.3, 0.4]).unwrap());
        let y = g.matmul(x, x);
        let z = g.tanh(y);
        let w = g.mul(z, x);
        let s = g.sum(w);
        let a = g.backward(s).unwrap();
        let b = g.backward(s).unwrap();
        assert_eq!(a.get(x).unwrap().data(), b.get(x).unwrap().data());
    }
}
