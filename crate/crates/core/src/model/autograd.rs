//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D array. Parameters live in a
//! [`Parameters`] store borrowed by the graph; gradients for them come back
//! from [`Graph::backward`] indexed by parameter slot.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::Parameters;
use super::tensor::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouped multi-head attention layout: `q` holds `q_groups` stacked
/// sequences; `k`/`v` hold either one shared sequence or one per group.
struct AttnCache<F> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_groups: usize,
    k_groups: usize,
    probs: Vec<Array2<F>>,
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Acos(Var),
    SmoothAbs(Var, F),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, xhat: Array2<F>, rstd: Vec<F> },
    Modulate { x: Var, shift: Var, scale: Var },
    GateRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    RowDot(Var, Var),
    SumAll(Var),
    ColMean(Var),
    ClampMin(Var, F),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Attention(Box<AttnCache<F>>),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<F> {
    pub params: Vec<Option<Array2<F>>>,
    leaves: HashMap<usize, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a leaf created by [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.leaves.get(&v.0)
    }

    /// Parameter gradients with missing entries filled by zeros.
    pub fn dense(self, params: &Parameters<F>) -> Vec<Array2<F>> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Array2::zeros(params.value(i).dim())))
            .collect()
    }
}

pub struct Graph<'p, F: Real> {
    params: Option<&'p Parameters<F>>,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    param_vars: HashMap<usize, Var>,
}

fn col_sum<F: Real>(a: &Array2<F>) -> Array2<F> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn row_sum<F: Real>(a: &Array2<F>) -> Array2<F> {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let a = F::c(0.044715);
    let half = F::c(0.5);
    let u = k * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th)
        + half * x * (F::one() - th * th) * k * (F::one() + F::c(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax_rows<F: Real>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// Graph that records what is needed for a backward pass.
    pub fn new(params: &'p Parameters<F>) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: HashMap::new(),
        }
    }

    /// Forward-only graph: no gradient bookkeeping, no attention caches.
    pub fn inference(params: &'p Parameters<F>) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(params)
        }
    }

    /// Graph without a parameter store (loss-only computations).
    pub fn standalone() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.expect("param node implies store").value(i),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// First entry; intended for 1×1 results.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for the parameter at slot `i`; repeated calls share one node.
    pub fn param_at(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars.get(&i) {
            return *v;
        }
        self.nodes.push(Node {
            value: Array2::zeros((0, 0)),
            op: Op::Param(i),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(i, v);
        v
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let i = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param_at(i))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn is_row_for(&self, row: Var, x: Var, what: &str) -> Result<()> {
        let (r, c) = self.shape(row);
        if r != 1 || c != self.shape(x).1 {
            return Err(Error::Contract(format!(
                "{what}: expected 1×{} row, got {r}×{c}",
                self.shape(x).1
            )));
        }
        Ok(())
    }

    fn is_col_for(&self, col: Var, x: Var, what: &str) -> Result<()> {
        let (r, c) = self.shape(col);
        if c != 1 || r != self.shape(x).0 {
            return Err(Error::Contract(format!(
                "{what}: expected {}×1 column, got {r}×{c}",
                self.shape(x).0
            )));
        }
        Ok(())
    }

    /// Returns a numeric error naming `context` if `v` holds NaN or ±inf.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                context: context.to_string(),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Contract(format!("matmul {ar}×{ac} by {br}×{bc}")));
        }
        let y = self.value(a).dot(self.value(b));
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w (+ b)` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr {
            return Err(Error::Contract(format!("linear {xr}×{xc} by {wr}×{wc}")));
        }
        let mut y = self.value(x).dot(self.value(w));
        let mut parents = vec![x, w];
        if let Some(b) = b {
            if self.shape(b) != (1, wc) {
                return Err(Error::Contract(format!("linear bias shape {:?}", self.shape(b))));
            }
            y += self.value(b);
            parents.push(b);
        }
        Ok(self.push(y, Op::Linear(x, w, b), &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let y = self.value(a) / self.value(b);
        Ok(self.push(y, Op::Div(a, b), &[a, b]))
    }

    /// Adds a 1×c row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.is_row_for(row, x, "add_row")?;
        let y = self.value(x) + self.value(row);
        Ok(self.push(y, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::c(s);
        let y = self.value(x) * s;
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x) + F::c(s);
        self.push(y, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * v);
        self.push(y, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.sqrt());
        self.push(y, Op::Sqrt(x), &[x])
    }

    /// `acos` of the input clamped to [-1, 1]; zero gradient where clamped.
    pub fn acos(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(-F::one()).min(F::one()).acos());
        self.push(y, Op::Acos(x), &[x])
    }

    /// `|x|`, replaced by `x²/(2δ)` inside `|x| < δ`.
    pub fn smooth_abs(&mut self, x: Var, delta: f64) -> Var {
        let d = F::c(delta);
        let half = F::c(0.5);
        let y = self
            .value(x)
            .mapv(|v| if v.abs() < d { v * v / (d + d) } else { v.abs() - half * d });
        self.push(y, Op::SmoothAbs(x, d), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| gelu_parts(v).0);
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance (eps 1e-5),
    /// without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let eps = F::c(1e-5);
        let cf = F::c(c as f64);
        let mut xhat = Array2::zeros((n, c));
        let mut rstd = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / cf;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (*v - mean) * r;
            }
        }
        let y = xhat.clone();
        if self.grad_enabled && self.nodes[x.0].needs_grad {
            self.push(y, Op::LayerNorm { x, xhat, rstd }, &[x])
        } else {
            self.push(y, Op::Leaf, &[])
        }
    }

    /// `x ⊙ (1 + scale) + shift` with 1×c rows `shift` and `scale`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        self.is_row_for(shift, x, "modulate shift")?;
        self.is_row_for(scale, x, "modulate scale")?;
        let s1 = self.value(scale).mapv(|v| v + F::one());
        let y = self.value(x) * &s1 + self.value(shift);
        Ok(self.push(y, Op::Modulate { x, shift, scale }, &[x, shift, scale]))
    }

    /// `x ⊙ gate` with a 1×c row `gate`.
    pub fn gate_row(&mut self, x: Var, gate: Var) -> Result<Var> {
        self.is_row_for(gate, x, "gate")?;
        let y = self.value(x) * self.value(gate);
        Ok(self.push(y, Op::GateRow(x, gate), &[x, gate]))
    }

    /// Multiplies each row of `x` by the matching entry of an n×1 column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.is_col_for(col, x, "mul_col")?;
        let y = self.value(x) * self.value(col);
        Ok(self.push(y, Op::MulCol(x, col), &[x, col]))
    }

    /// Divides each row of `x` by the matching entry of an n×1 column.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.is_col_for(col, x, "div_col")?;
        let y = self.value(x) / self.value(col);
        Ok(self.push(y, Op::DivCol(x, col), &[x, col]))
    }

    /// Row-wise inner products, n×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let y = row_sum(&(self.value(a) * self.value(b)));
        Ok(self.push(y, Op::RowDot(a, b), &[a, b]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(y, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means, 1×c.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let n = F::c(self.shape(x).0.max(1) as f64);
        let y = col_sum(self.value(x)) / n;
        self.push(y, Op::ColMean(x), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let lo = F::c(lo);
        let y = self.value(x).mapv(|v| v.max(lo));
        self.push(y, Op::ClampMin(x, lo), &[x])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let views: Vec<ArrayView2<F>> = xs.iter().map(|v| self.value(*v).view()).collect();
        let y = concatenate(Axis(0), &views)
            .map_err(|e| Error::Contract(format!("concat_rows: {e}")))?;
        Ok(self.push(y, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let views: Vec<ArrayView2<F>> = xs.iter().map(|v| self.value(*v).view()).collect();
        let y = concatenate(Axis(1), &views)
            .map_err(|e| Error::Contract(format!("concat_cols: {e}")))?;
        Ok(self.push(y, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, _) = self.shape(x);
        if start > end || end > n {
            return Err(Error::Contract(format!("slice_rows {start}..{end} of {n}")));
        }
        let y = self.value(x).slice(s![start..end, ..]).to_owned();
        Ok(self.push(y, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::Contract(format!("slice_cols {start}..{end} of {c}")));
        }
        let y = self.value(x).slice(s![.., start..end]).to_owned();
        Ok(self.push(y, Op::SliceCols(x, start), &[x]))
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} of {n}")));
        }
        let mut y = Array2::zeros((idx.len(), c));
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).assign(&xv.row(i));
        }
        Ok(self.push(y, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Scaled dot-product attention with `heads` heads.
    ///
    /// `q` stacks `q_groups` equal-length sequences. `k` and `v` stack either
    /// one sequence shared by every group (`k_groups == 1`) or one per group.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_groups: usize,
        k_groups: usize,
    ) -> Result<Var> {
        let (qn, d) = self.shape(q);
        let (kn, kd) = self.shape(k);
        if self.shape(v) != (kn, kd) || kd != d {
            return Err(Error::Contract("attention: q/k/v widths or k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if q_groups == 0 || qn % q_groups != 0 || !(k_groups == 1 || k_groups == q_groups) || kn % k_groups != 0 {
            return Err(Error::Contract(format!(
                "attention: {qn} query rows in {q_groups} groups vs {kn} key rows in {k_groups} groups"
            )));
        }
        let (lq, lk, dh) = (qn / q_groups, kn / k_groups, d / heads);
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let keep = self.grad_enabled
            && [q, k, v].iter().any(|p| self.nodes[p.0].needs_grad);
        let mut out = Array2::zeros((qn, d));
        let mut probs = Vec::new();
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for b in 0..q_groups {
                let kb = if k_groups == 1 { 0 } else { b };
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qs = qv.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
                    let ks = kv.slice(s![kb * lk..(kb + 1) * lk, cols.clone()]);
                    let vs = vv.slice(s![kb * lk..(kb + 1) * lk, cols.clone()]);
                    let mut sc = qs.dot(&ks.t());
                    sc *= scale;
                    softmax_rows(&mut sc);
                    out.slice_mut(s![b * lq..(b + 1) * lq, cols]).assign(&sc.dot(&vs));
                    if keep {
                        probs.push(sc);
                    }
                }
            }
        }
        let cache = AttnCache {
            q,
            k,
            v,
            heads,
            q_groups,
            k_groups,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Reverse pass from `out`, seeded with ones of `out`'s shape.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        let n_params = self.params.map_or(0, |p| p.len());
        let mut res = Gradients {
            params: vec![None; n_params],
            leaves: HashMap::new(),
        };
        if !self.nodes[out.0].needs_grad {
            return res;
        }
        let mut grads: Vec<Option<Array2<F>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(Array2::ones(self.shape(out)));

        fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    res.leaves.insert(i, g);
                }
                Op::Param(p) => {
                    res.params[*p] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                }
                Op::Linear(x, w, b) => {
                    if let Some(b) = b {
                        if need(b) {
                            acc(&mut grads, *b, col_sum(&g));
                        }
                    }
                    if need(w) {
                        acc(&mut grads, *w, self.value(*x).t().dot(&g));
                    }
                    if need(x) {
                        acc(&mut grads, *x, g.dot(&self.value(*w).t()));
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, g.mapv(|x| -x));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                    if need(a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if need(b) {
                        let mut gb = &g * y;
                        Zip::from(&mut gb).and(bv).for_each(|o, &bb| *o = -*o / bb);
                        acc(&mut grads, *b, gb);
                    }
                    if need(a) {
                        acc(&mut grads, *a, &g / bv);
                    }
                }
                Op::AddRow(x, row) => {
                    if need(row) {
                        acc(&mut grads, *row, col_sum(&g));
                    }
                    if need(x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g * *s),
                Op::AddScalar(x) => acc(&mut grads, *x, g),
                Op::Square(x) => {
                    let two = F::c(2.0);
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| *o *= two * v);
                    acc(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let two = F::c(2.0);
                    let mut gx = g;
                    Zip::from(&mut gx).and(y).for_each(|o, &v| *o /= two * v);
                    acc(&mut grads, *x, gx);
                }
                Op::Acos(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        *o = if v.abs() < F::one() {
                            -*o / (F::one() - v * v).sqrt()
                        } else {
                            F::zero()
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::SmoothAbs(x, d) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        *o *= if v.abs() < *d { v / *d } else { v.signum() }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| *o *= gelu_parts(v).1);
                    acc(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        let sg = sigmoid(v);
                        *o *= sg * (F::one() + v * (F::one() - sg));
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, xhat, rstd } => {
                    let c = F::c(xhat.ncols() as f64);
                    let mut gx = g;
                    for (r, (mut grow, xrow)) in gx.rows_mut().into_iter().zip(xhat.rows()).enumerate() {
                        let mg = grow.sum() / c;
                        let mgx = grow.iter().zip(xrow.iter()).map(|(a, b)| *a * *b).sum::<F>() / c;
                        for (o, xh) in grow.iter_mut().zip(xrow.iter()) {
                            *o = rstd[r] * (*o - mg - *xh * mgx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Modulate { x, shift, scale } => {
                    if need(scale) {
                        acc(&mut grads, *scale, col_sum(&(&g * self.value(*x))));
                    }
                    if need(shift) {
                        acc(&mut grads, *shift, col_sum(&g));
                    }
                    if need(x) {
                        let s1 = self.value(*scale).mapv(|v| v + F::one());
                        acc(&mut grads, *x, g * &s1);
                    }
                }
                Op::GateRow(x, gate) => {
                    if need(gate) {
                        acc(&mut grads, *gate, col_sum(&(&g * self.value(*x))));
                    }
                    if need(x) {
                        acc(&mut grads, *x, g * self.value(*gate));
                    }
                }
                Op::MulCol(x, col) => {
                    if need(col) {
                        acc(&mut grads, *col, row_sum(&(&g * self.value(*x))));
                    }
                    if need(x) {
                        acc(&mut grads, *x, g * self.value(*col));
                    }
                }
                Op::DivCol(x, col) => {
                    let cv = self.value(*col);
                    if need(col) {
                        let mut gc = row_sum(&(&g * y));
                        Zip::from(&mut gc).and(cv).for_each(|o, &c| *o = -*o / c);
                        acc(&mut grads, *col, gc);
                    }
                    if need(x) {
                        acc(&mut grads, *x, g / cv);
                    }
                }
                Op::RowDot(a, b) => {
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a) * &g);
                    }
                    if need(a) {
                        acc(&mut grads, *a, self.value(*b) * &g);
                    }
                }
                Op::SumAll(x) => {
                    acc(&mut grads, *x, Array2::from_elem(self.shape(*x), g[[0, 0]]));
                }
                Op::ColMean(x) => {
                    let (n, _) = self.shape(*x);
                    let row = g / F::c(n.max(1) as f64);
                    let full = row.broadcast(self.shape(*x)).expect("row broadcast").to_owned();
                    acc(&mut grads, *x, full);
                }
                Op::ClampMin(x, lo) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        if v < *lo {
                            *o = F::zero()
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(xs) => {
                    let mut at = 0;
                    for x in xs {
                        let n = self.shape(*x).0;
                        if need(x) {
                            acc(&mut grads, *x, g.slice(s![at..at + n, ..]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut at = 0;
                    for x in xs {
                        let n = self.shape(*x).1;
                        if need(x) {
                            acc(&mut grads, *x, g.slice(s![.., at..at + n]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention(c) => {
                    let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
                    let (qn, d) = qv.dim();
                    let kn = kv.nrows();
                    let (lq, lk, dh) = (qn / c.q_groups, kn / c.k_groups, d / c.heads);
                    let scale = F::c(1.0 / (dh as f64).sqrt());
                    let mut gq = Array2::zeros((qn, d));
                    let mut gk = Array2::zeros((kn, d));
                    let mut gv = Array2::zeros((kn, d));
                    for b in 0..c.q_groups {
                        let kb = if c.k_groups == 1 { 0 } else { b };
                        for h in 0..c.heads {
                            let p = &c.probs[b * c.heads + h];
                            let cols = h * dh..(h + 1) * dh;
                            let qr = s![b * lq..(b + 1) * lq, cols.clone()];
                            let kr = s![kb * lk..(kb + 1) * lk, cols.clone()];
                            let go = g.slice(qr);
                            let mut gvs = gv.slice_mut(kr);
                            gvs += &p.t().dot(&go);
                            let mut ds = go.dot(&vv.slice(kr).t());
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow.iter()).map(|(a, b)| *a * *b).sum::<F>();
                                for (o, pp) in drow.iter_mut().zip(prow.iter()) {
                                    *o = *pp * (*o - dot) * scale;
                                }
                            }
                            let mut gqs = gq.slice_mut(qr);
                            gqs += &ds.dot(&kv.slice(kr));
                            let mut gks = gk.slice_mut(kr);
                            gks += &ds.t().dot(&qv.slice(qr));
                        }
                    }
                    if need(&c.v) {
                        acc(&mut grads, c.v, gv);
                    }
                    if need(&c.k) {
                        acc(&mut grads, c.k, gk);
                    }
                    if need(&c.q) {
                        acc(&mut grads, c.q, gq);
                    }
                }
            }
        }
        res
    }
}
