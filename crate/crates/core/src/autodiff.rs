//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are added) and [`Graph::backward`] sweeps the nodes in reverse. The op set
//! is exactly what the losses in this crate need: affine layers, pointwise
//! activations, row gathering and concatenation, reductions, per-row norms
//! and a fused grouped squared-MMD node. Shape misuse panics; non-finite
//! values are recorded at the first offending node and surfaced as
//! [`Error::Numerical`] by [`Graph::check`] and [`Graph::backward`].

use crate::error::{Error, Result};
use crate::kernels::{self, MMD2_FLOOR};
use crate::tensor::Tensor;

/// `tanh` through a single `exp`; within a few ulps of `f64::tanh` and
/// roughly twice as fast, which matters for wide batched forwards.
#[inline]
pub fn tanh(v: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * v).exp() + 1.0)
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowNorm(Var),
    GroupMean(Var, usize),
    GroupedMmd2 {
        a: Var,
        b: Var,
        ga: usize,
        gb: usize,
        rho: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::RowNorm(..) => "row_norm",
            Op::GroupMean(..) => "group_mean",
            Op::GroupedMmd2 { .. } => "grouped_mmd2",
            Op::WeightedSum(..) => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Error>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of the right shape if `v` did not influence
    /// the loss.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Tensor::zeros(r, c)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that is held fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First numerical fault recorded while building the graph, if any.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(Error::Numerical { op, detail }) => Err(Error::numerical(op.clone(), detail.clone())),
            Some(other) => Err(Error::numerical("graph", other.to_string())),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(Error::numerical(
                op.name(),
                format!("non-finite value produced at node {}", self.nodes.len()),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x + b` with the `1×m` row `b` added to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row bias must be a single row");
        assert_eq!(xv.cols(), bv.cols(), "add_row width mismatch");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, c) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += c;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean of all entries, as a `1×1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Row sums, `n×c → n×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let sums: Vec<f64> = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let out = Tensor::column(&sums);
        let rg = self.rg(&[x]);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&values);
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let out = self.value(x).gather_rows(&indices);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, indices), rg)
    }

    /// Euclidean norm of each row, `n×c → n×1`. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let norms: Vec<f64> = (0..v.rows())
            .map(|i| v.row(i).iter().map(|t| t * t).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::column(&norms);
        let rg = self.rg(&[x]);
        self.push(out, Op::RowNorm(x), rg)
    }

    /// Means over consecutive groups of `group` rows, `(G·group)×c → G×c`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let v = self.value(x);
        assert!(group > 0 && v.rows() % group == 0, "group_mean: rows not divisible");
        let g = v.rows() / group;
        let mut out = Tensor::zeros(g, v.cols());
        for r in 0..v.rows() {
            let dst = r / group;
            for (o, s) in out.row_mut(dst).iter_mut().zip(v.row(r)) {
                *o += s;
            }
        }
        let out = out.scale(1.0 / group as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::GroupMean(x, group), rg)
    }

    /// Per-group squared MMD between consecutive blocks: group `g` compares
    /// rows `g·ga..(g+1)·ga` of `a` with rows `g·gb..(g+1)·gb` of `b`.
    /// Returns a `G×1` column. Estimates are clamped at zero; the gradient
    /// passes through the clamp unchanged.
    pub fn grouped_mmd2(&mut self, a: Var, b: Var, ga: usize, gb: usize, kernel: &kernels::Kernel) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "grouped_mmd2 width mismatch");
        assert!(ga > 0 && gb > 0, "grouped_mmd2 needs non-empty groups");
        assert!(av.rows() % ga == 0 && bv.rows() % gb == 0, "grouped_mmd2 rows not divisible");
        let groups = av.rows() / ga;
        assert_eq!(groups, bv.rows() / gb, "grouped_mmd2 group counts differ");
        let d = av.cols();
        let rho = kernel.rho();
        let mut vals = Vec::with_capacity(groups);
        let mut worst: f64 = 0.0;
        for g in 0..groups {
            let raw = kernels::mmd2_blocks(
                &av.data()[g * ga * d..(g + 1) * ga * d],
                ga,
                &bv.data()[g * gb * d..(g + 1) * gb * d],
                gb,
                d,
                rho,
            );
            worst = worst.min(raw);
            vals.push(raw.max(0.0));
        }
        let rg = self.rg(&[a, b]);
        let v = self.push(
            Tensor::column(&vals),
            Op::GroupedMmd2 { a, b, ga, gb, rho },
            rg,
        );
        if worst < MMD2_FLOOR && self.fault.is_none() {
            self.fault = Some(Error::numerical(
                "grouped_mmd2",
                format!("estimate {worst:e} is below the cancellation floor {MMD2_FLOOR:e}"),
            ));
        }
        v
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for (v, w) in terms {
            assert_eq!(self.shape(*v), (1, 1), "weighted_sum expects scalars");
            total += w * self.value(*v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.matmul_nt(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).matmul_tn(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.requires_grad(*b) {
                        let gb = Tensor::row_vector(&g.column_sums());
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s)),
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = g.data().iter().zip(y.data()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let data = g.data().iter().zip(xv.data()).map(|(gi, xi)| 2.0 * gi * xi).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SumCols(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        gx.row_mut(i).iter_mut().for_each(|v| *v = g.get(i, 0));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.requires_grad(*p) {
                            accumulate(&mut grads, *p, g.slice_cols(start, start + w));
                        }
                        start += w;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    for (k, &src) in indices.iter().enumerate() {
                        for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let n = node.value.get(i, 0);
                        if n > 0.0 {
                            let s = g.get(i, 0) / n;
                            for (o, v) in gx.row_mut(i).iter_mut().zip(xv.row(i)) {
                                *o = s * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupMean(x, group) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    let inv = 1.0 / *group as f64;
                    for i in 0..r {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(i / group)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupedMmd2 { a, b, ga, gb, rho } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let d = av.cols();
                    let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                    let mut gav = need_a.then(|| Tensor::zeros(av.rows(), d));
                    let mut gbv = need_b.then(|| Tensor::zeros(bv.rows(), d));
                    for grp in 0..g.rows() {
                        let scale = g.get(grp, 0);
                        if scale == 0.0 {
                            continue;
                        }
                        let (ra, rb) = (grp * ga * d..(grp + 1) * ga * d, grp * gb * d..(grp + 1) * gb * d);
                        kernels::mmd2_blocks_grad(
                            &av.data()[ra.clone()],
                            *ga,
                            &bv.data()[rb.clone()],
                            *gb,
                            d,
                            *rho,
                            scale,
                            gav.as_mut().map(|t| &mut t.data_mut()[ra]),
                            gbv.as_mut().map(|t| &mut t.data_mut()[rb]),
                        );
                    }
                    if let Some(t) = gav {
                        accumulate(&mut grads, *a, t);
                    }
                    if let Some(t) = gbv {
                        accumulate(&mut grads, *b, t);
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        if self.requires_grad(*v) {
                            accumulate(&mut grads, *v, Tensor::scalar(g.item() * w));
                        }
                    }
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::numerical(
                        self.nodes[i].op.name(),
                        format!("non-finite gradient at node {i}"),
                    ));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
