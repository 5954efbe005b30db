//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Leaves
//! are either constants ([`Graph::input`]) or references into a
//! [`ParamStore`] ([`Graph::param`]); parameter values are borrowed, never
//! copied. [`Graph::backward`] walks the tape once in reverse and returns the
//! parameter gradients as a fresh [`Gradients`] value, so independent graphs
//! over the same store can run side by side and be merged afterwards.
//!
//! All values are 2-D; vectors are `1×n` or `n×1`.

use ndarray::{s, Axis, Zip};

use super::params::{Gradients, Mat, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Deliberate gradient corruption used by mutation tests of the gradient
/// checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates the local derivative of every sigmoid (the GRU gates).
    FlipSigmoidGrad,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Unfold { x: NodeId, kernel: usize, stride: usize },
    SumRows(NodeId),
    Sum(NodeId),
    Blend { new: NodeId, old: NodeId, mask: Vec<bool> },
    SoftmaxXent { logits: NodeId, targets: Vec<Option<usize>>, probs: Mat },
    CosineDistance { a: NodeId, b: NodeId, norms: Vec<(f64, f64)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves; their value lives in the store.
    value: Option<Mat>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Fault,
}

const NORM_GUARD: f64 = 1e-12;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), fault: Fault::None }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node { op: Op::Param(id), value: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    /// `a + row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(Op::OneMinus(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, count: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + count, ..]).to_owned();
        self.push(Op::SliceRows(a, start), v)
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let v = self.value(a).select(Axis(0), &indices);
        self.push(Op::GatherRows(a, indices), v)
    }

    /// Sliding windows over rows: `T×C` becomes `T'×(kernel·C)` with
    /// `T' = (T - kernel) / stride + 1`. Window row `t` concatenates input
    /// rows `t·stride .. t·stride + kernel`.
    pub fn unfold(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let v = unfold_rows(self.value(x), kernel, stride)?;
        Ok(self.push(Op::Unfold { x, kernel, stride }, v))
    }

    /// `r×c → r×1` row sums.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a), v)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise select: rows with `mask[i]` take `new`, others keep `old`.
    pub fn blend_rows(&mut self, new: NodeId, old: NodeId, mask: Vec<bool>) -> NodeId {
        let mut v = self.value(old).clone();
        let nv = self.value(new);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(i).assign(&nv.row(i));
            }
        }
        self.push(Op::Blend { new, old, mask }, v)
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits).
    /// Rows with a `None` target contribute 0 and receive no gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                lv.nrows(),
                targets.len()
            )));
        }
        let mut probs = Mat::zeros(lv.dim());
        let mut out = Mat::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[[i, j]] = e;
                z += e;
            }
            probs.row_mut(i).mapv_inplace(|e| e / z);
            if let Some(t) = targets[i] {
                if t >= row.len() {
                    return Err(Error::Shape(format!("target {t} outside {} classes", row.len())));
                }
                out[[i, 0]] = -(row[t] - max - z.ln());
            }
        }
        Ok(self.push(Op::SoftmaxXent { logits, targets, probs }, out))
    }

    /// Per-row cosine distance `1 - <a_i, b_i> / (|a_i| |b_i|)` as `r×1`.
    pub fn cosine_distance_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros((av.nrows(), 1));
        let mut norms = Vec::with_capacity(av.nrows());
        for (i, (ra, rb)) in av.rows().into_iter().zip(bv.rows()).enumerate() {
            let na = ra.dot(&ra).sqrt().max(NORM_GUARD);
            let nb = rb.dot(&rb).sqrt().max(NORM_GUARD);
            out[[i, 0]] = 1.0 - ra.dot(&rb) / (na * nb);
            norms.push((na, nb));
        }
        self.push(Op::CosineDistance { a, b, norms }, out)
    }

    /// Reverse sweep from a `1×1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!("loss must be 1x1, got {:?}", lv.dim())));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let own = || node.value.as_ref().expect("computed node");
            match &node.op {
                Op::Input => {}
                Op::Param(p) => *out.get_mut(*p) += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.mapv(|v| v * f)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::OneMinus(a) => acc(&mut grads, *a, g.mapv(|v| -v)),
                Op::Sigmoid(a) => {
                    let sign = if self.fault == Fault::FlipSigmoidGrad { -1.0 } else { 1.0 };
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(own())
                        .for_each(|gv, &y| *gv *= sign * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(own()).for_each(|gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(own()).for_each(|gv, &y| *gv *= 0.5 / y);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (i, &src) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Unfold { x, kernel, stride } => {
                    let xv = self.value(*x);
                    let c = xv.ncols();
                    let mut gx = Mat::zeros(xv.dim());
                    for t in 0..g.nrows() {
                        for k in 0..*kernel {
                            let mut dst = gx.row_mut(t * stride + k);
                            dst += &g.slice(s![t, k * c..(k + 1) * c]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumRows(a) => {
                    let cols = self.value(*a).ncols();
                    let ga = Mat::from_shape_fn((g.nrows(), cols), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Blend { new, old, mask } => {
                    let mut gn = g.clone();
                    let mut go = g;
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            go.row_mut(i).fill(0.0);
                        } else {
                            gn.row_mut(i).fill(0.0);
                        }
                    }
                    acc(&mut grads, *new, gn);
                    acc(&mut grads, *old, go);
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    let mut gl = probs.clone();
                    for (i, t) in targets.iter().enumerate() {
                        match t {
                            Some(t) => {
                                gl[[i, *t]] -= 1.0;
                                gl.row_mut(i).mapv_inplace(|v| v * g[[i, 0]]);
                            }
                            None => gl.row_mut(i).fill(0.0),
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::CosineDistance { a, b, norms } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.dim());
                    let mut gb = Mat::zeros(bv.dim());
                    for (i, &(na, nb)) in norms.iter().enumerate() {
                        let (ra, rb) = (av.row(i), bv.row(i));
                        let cos = ra.dot(&rb) / (na * nb);
                        let gi = -g[[i, 0]];
                        for j in 0..ra.len() {
                            ga[[i, j]] = gi * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                            gb[[i, j]] = gi * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Window extraction shared by [`Graph::unfold`] and batched front-ends.
pub fn unfold_rows(x: &Mat, kernel: usize, stride: usize) -> Result<Mat> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
    }
    let (t, c) = x.dim();
    if t < kernel {
        return Err(Error::FrontEndTooShort { frames: t, kernel });
    }
    let out_t = (t - kernel) / stride + 1;
    let mut out = Mat::zeros((out_t, kernel * c));
    for i in 0..out_t {
        for k in 0..kernel {
            out.slice_mut(s![i, k * c..(k + 1) * c])
                .assign(&x.row(i * stride + k));
        }
    }
    Ok(out)
}
