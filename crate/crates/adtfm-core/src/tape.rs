//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Each node holds one tensor-valued primitive (elementwise arithmetic,
//! matrix-vector products, activations, outer products, reductions,
//! softmax). Values are computed eagerly at insertion, so the tape is a
//! topologically ordered record of the forward pass; [`Tape::gradient`]
//! replays it backwards, and [`Tape::evaluate`] replays it forwards with
//! fresh leaf bindings (which is what the finite-difference checker uses
//! to avoid rebuilding the graph per perturbation).
//!
//! Complex quantities never appear on the tape: callers carry explicit
//! (real, imaginary) tensor pairs, so only real arithmetic is recorded.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Affine2 {
        w: NodeId,
        x: NodeId,
        u: NodeId,
        h: NodeId,
        b: NodeId,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Recip(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MulScalar(NodeId, NodeId),
    ClampMin(NodeId, f64),
    Outer3(NodeId, NodeId, NodeId),
    OuterVecMat(NodeId, NodeId),
    SumAll(NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    Pick(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    Stack(Vec<NodeId>),
    ProjectKj {
        weights: NodeId,
        amp: NodeId,
        bias: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `c * other` into `self`; the key sets and shapes must match.
    pub fn add_scaled(&mut self, other: &GradientMap, c: f64) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::dim("GradientMap::add_scaled", self.len(), other.len()));
        }
        for ((ka, ta), (kb, tb)) in self.entries.iter_mut().zip(other.entries.iter()) {
            if ka != kb || ta.shape() != tb.shape() {
                return Err(CoreError::dim("GradientMap::add_scaled", ka.clone(), kb.clone()));
            }
            for (a, b) in ta.data_mut().iter_mut().zip(tb.data().iter()) {
                *a += c * b;
            }
        }
        Ok(())
    }

    /// Multiplies every entry by `c`.
    pub fn scale(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// Euclidean norm over all entries, used for global-norm clipping.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Append-only record of the forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops all nodes and parameter registrations, keeping capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registered parameter nodes by name.
    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Ids of all leaf nodes in insertion order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Inserts a constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value });
        id
    }

    /// Inserts a leaf and registers it as a trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(CoreError::Contract(format!("parameter {name:?} registered twice")));
        }
        let id = self.leaf(value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = eval_op(&op, |id| &self.nodes[id.0].value)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// `w` is `[m, n]`, `x` is `[n]`; the result is `[m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec(w, x))
    }

    /// Fused gate pre-activation `W x + U h + b`, recorded as one node.
    pub fn affine2(
        &mut self,
        w: NodeId,
        x: NodeId,
        u: NodeId,
        h: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        self.push(Op::Affine2 { w, x, u, h, b })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Cos(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Recip(a))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Offset(a, c))
    }

    /// Multiplies a tensor by a scalar node (shape `[1]`).
    pub fn mul_scalar(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::MulScalar(t, s))
    }

    /// Elementwise `max(x, c)`.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::ClampMin(a, c))
    }

    /// Three-way outer product: `[D] x [J] x [K] -> [D, J, K]`.
    pub fn outer3(&mut self, u: NodeId, v: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::Outer3(u, v, w))
    }

    /// Outer product of a vector with a matrix: `[D] x [J, K] -> [D, J, K]`.
    pub fn outer_vec_mat(&mut self, u: NodeId, m: NodeId) -> Result<NodeId> {
        self.push(Op::OuterVecMat(u, m))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    /// Dot product of two equal-length vectors, as a `[1]` tensor.
    pub fn dot(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(u, v))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, v: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(v))
    }

    /// Extracts element `i` of a vector as a `[1]` tensor.
    pub fn pick(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        self.push(Op::Pick(v, i))
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape))
    }

    /// Stacks `[1]` scalars into one vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Stack(parts.to_vec()))
    }

    /// Summed per-slice affine map used by the cell projection:
    /// `out[p] = sum_{k,j} (sum_d W[k,j,p,d] * A[d,j,k] + b[k,j,p])`
    /// with `W: [K,J,D,D]`, `A: [D,J,K]`, `b: [K,J,D]`.
    pub fn project_kj(&mut self, weights: NodeId, amp: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::ProjectKj { weights, amp, bias })
    }

    /// Re-evaluates every node from the given leaf bindings.
    ///
    /// All leaves must be bound (with matching shapes) or the replay
    /// fails with a missing-input error. Returns the value of every node
    /// in insertion order.
    pub fn evaluate(&self, bindings: &BTreeMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => {
                    let bound = bindings.get(&NodeId(i)).ok_or(CoreError::MissingInput(i))?;
                    if bound.shape() != node.value.shape() {
                        return Err(CoreError::dim(
                            "Tape::evaluate",
                            format!("{:?}", node.value.shape()),
                            format!("{:?}", bound.shape()),
                        ));
                    }
                    bound.clone()
                }
                op => eval_op(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse accumulation from a scalar loss node.
    ///
    /// Returns one gradient tensor per registered parameter; parameters
    /// the loss does not depend on get zero gradients. Adjoints live in a
    /// single flat arena indexed by per-node offsets.
    pub fn gradient(&self, loss: NodeId) -> Result<GradientMap> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Contract(format!(
                "loss node must be scalar-valued, has {} elements",
                self.nodes[loss.0].value.len()
            )));
        }
        let mut offsets = Vec::with_capacity(self.nodes.len());
        let mut total = 0usize;
        for n in &self.nodes {
            offsets.push(total);
            total += n.value.len();
        }
        let mut arena = vec![0.0f64; total];
        arena[offsets[loss.0]] = 1.0;

        for i in (0..=loss.0).rev() {
            // Parents always precede their node, so splitting at the node's
            // offset lets its adjoint be read while parents are written.
            let (before, rest) = arena.split_at_mut(offsets[i]);
            let go = &rest[..self.nodes[i].value.len()];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            backward_op(&self.nodes[i].op, &self.nodes[i].value, go, before, &offsets, |id| {
                &self.nodes[id.0].value
            });
        }

        let mut entries = BTreeMap::new();
        for (name, id) in &self.params {
            let value = &self.nodes[id.0].value;
            let off = offsets[id.0];
            entries.insert(
                name.clone(),
                Tensor::new(value.shape().to_vec(), arena[off..off + value.len()].to_vec())?,
            );
        }
        Ok(GradientMap { entries })
    }
}

/// Plain (untraced) three-way outer product; the tape op and tests share
/// the same definition through this function.
pub fn outer3(u: &[f64], v: &[f64], w: &[f64]) -> Result<Tensor> {
    if u.is_empty() || v.is_empty() || w.is_empty() {
        return Err(CoreError::dim("outer3", "non-empty vectors", "empty input"));
    }
    let (d, j, k) = (u.len(), v.len(), w.len());
    let mut data = Vec::with_capacity(d * j * k);
    for &ud in u {
        for &vj in v {
            for &wk in w {
                data.push(ud * vj * wk);
            }
        }
    }
    Tensor::new(vec![d, j, k], data)
}

fn want_rank(t: &Tensor, rank: usize, context: &'static str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(CoreError::dim(context, format!("rank {rank}"), format!("{:?}", t.shape())));
    }
    Ok(())
}

fn want_same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::dim(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn eval_op<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            want_same_shape(ta, tb, "add")?;
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            want_same_shape(ta, tb, "mul")?;
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        }
        Op::MatVec(w, x) => {
            let (tw, tx) = (get(*w), get(*x));
            want_rank(tw, 2, "matvec")?;
            want_rank(tx, 1, "matvec")?;
            let (m, n) = (tw.shape()[0], tw.shape()[1]);
            if n != tx.len() {
                return Err(CoreError::dim("matvec", n, tx.len()));
            }
            let wd = tw.data();
            let xd = tx.data();
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                out[i] = row.iter().zip(xd).map(|(a, b)| a * b).sum();
            }
            Tensor::new(vec![m], out)
        }
        Op::Affine2 { w, x, u, h, b } => {
            let (tw, tx, tu, th, tb) = (get(*w), get(*x), get(*u), get(*h), get(*b));
            want_rank(tw, 2, "affine2")?;
            want_rank(tu, 2, "affine2")?;
            let m = tw.shape()[0];
            if tu.shape()[0] != m || tb.len() != m {
                return Err(CoreError::dim("affine2", m, tu.shape()[0].max(tb.len())));
            }
            if tw.shape()[1] != tx.len() || tu.shape()[1] != th.len() {
                return Err(CoreError::dim(
                    "affine2",
                    format!("x [{}], h [{}]", tw.shape()[1], tu.shape()[1]),
                    format!("x [{}], h [{}]", tx.len(), th.len()),
                ));
            }
            let (nx, nh) = (tx.len(), th.len());
            let (wd, ud) = (tw.data(), tu.data());
            let (xd, hd) = (tx.data(), th.data());
            let mut out = tb.data().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                let wrow = &wd[i * nx..(i + 1) * nx];
                let urow = &ud[i * nh..(i + 1) * nh];
                let mut acc = *o;
                for (a, b) in wrow.iter().zip(xd) {
                    acc += a * b;
                }
                for (a, b) in urow.iter().zip(hd) {
                    acc += a * b;
                }
                *o = acc;
            }
            Tensor::new(vec![m], out)
        }
        Op::Sigmoid(a) => Ok(map_unary(get(*a), |x| 1.0 / (1.0 + (-x).exp()))),
        Op::Tanh(a) => Ok(map_unary(get(*a), f64::tanh)),
        Op::Exp(a) => Ok(map_unary(get(*a), f64::exp)),
        Op::Log(a) => Ok(map_unary(get(*a), f64::ln)),
        Op::Square(a) => Ok(map_unary(get(*a), |x| x * x)),
        Op::Sqrt(a) => Ok(map_unary(get(*a), f64::sqrt)),
        Op::Abs(a) => Ok(map_unary(get(*a), f64::abs)),
        Op::Sin(a) => Ok(map_unary(get(*a), f64::sin)),
        Op::Cos(a) => Ok(map_unary(get(*a), f64::cos)),
        Op::Recip(a) => Ok(map_unary(get(*a), f64::recip)),
        Op::Scale(a, c) => Ok(map_unary(get(*a), |x| c * x)),
        Op::Offset(a, c) => Ok(map_unary(get(*a), |x| c + x)),
        Op::MulScalar(t, s) => {
            let (tt, ts) = (get(*t), get(*s));
            let sv = ts.scalar_value()?;
            Ok(map_unary(tt, |x| x * sv))
        }
        Op::ClampMin(a, c) => Ok(map_unary(get(*a), |x| x.max(*c))),
        Op::Outer3(u, v, w) => {
            let (tu, tv, tw) = (get(*u), get(*v), get(*w));
            want_rank(tu, 1, "outer3")?;
            want_rank(tv, 1, "outer3")?;
            want_rank(tw, 1, "outer3")?;
            outer3(tu.data(), tv.data(), tw.data())
        }
        Op::OuterVecMat(u, m) => {
            let (tu, tm) = (get(*u), get(*m));
            want_rank(tu, 1, "outer_vec_mat")?;
            want_rank(tm, 2, "outer_vec_mat")?;
            let mut data = Vec::with_capacity(tu.len() * tm.len());
            for &ud in tu.data() {
                data.extend(tm.data().iter().map(|&mv| ud * mv));
            }
            Tensor::new(vec![tu.len(), tm.shape()[0], tm.shape()[1]], data)
        }
        Op::SumAll(a) => Ok(Tensor::scalar(get(*a).data().iter().sum())),
        Op::Dot(u, v) => {
            let (tu, tv) = (get(*u), get(*v));
            want_same_shape(tu, tv, "dot")?;
            Ok(Tensor::scalar(tu.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum()))
        }
        Op::Softmax(v) => {
            let tv = get(*v);
            want_rank(tv, 1, "softmax")?;
            let max = tv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = tv.data().iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Tensor::new(vec![tv.len()], exps.iter().map(|e| e / sum).collect())
        }
        Op::Pick(v, i) => {
            let tv = get(*v);
            if *i >= tv.len() {
                return Err(CoreError::dim("pick", format!("index < {}", tv.len()), *i));
            }
            Ok(Tensor::scalar(tv.data()[*i]))
        }
        Op::Reshape(a, shape) => get(*a).reshaped(shape.clone()),
        Op::Stack(parts) => {
            let mut data = Vec::with_capacity(parts.len());
            for p in parts {
                data.push(get(*p).scalar_value()?);
            }
            Tensor::new(vec![parts.len()], data)
        }
        Op::ProjectKj { weights, amp, bias } => {
            let (tw, ta, tb) = (get(*weights), get(*amp), get(*bias));
            want_rank(tw, 4, "project_kj")?;
            want_rank(ta, 3, "project_kj")?;
            want_rank(tb, 3, "project_kj")?;
            let (d, j, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            if tw.shape() != [k, j, d, d] || tb.shape() != [k, j, d] {
                return Err(CoreError::dim(
                    "project_kj",
                    format!("W [{k},{j},{d},{d}], b [{k},{j},{d}]"),
                    format!("{:?}, {:?}", tw.shape(), tb.shape()),
                ));
            }
            let (wd, ad, bd) = (tw.data(), ta.data(), tb.data());
            // Transposed copy [k, j, d] keeps the inner products contiguous.
            let mut at = vec![0.0; d * j * k];
            for dd in 0..d {
                for jj in 0..j {
                    for kk in 0..k {
                        at[(kk * j + jj) * d + dd] = ad[(dd * j + jj) * k + kk];
                    }
                }
            }
            let mut out = vec![0.0; d];
            for kj in 0..k * j {
                let wbase = kj * d * d;
                let abase = kj * d;
                let acol = &at[abase..abase + d];
                for (p, o) in out.iter_mut().enumerate() {
                    let mut acc = bd[kj * d + p];
                    let wrow = &wd[wbase + p * d..wbase + (p + 1) * d];
                    for (wv, av) in wrow.iter().zip(acol) {
                        acc += wv * av;
                    }
                    *o += acc;
                }
            }
            Tensor::new(vec![d], out)
        }
    }
}

fn backward_op<'a>(
    op: &Op,
    out: &Tensor,
    god: &[f64],
    before: &mut [f64],
    offsets: &[usize],
    get: impl Fn(NodeId) -> &'a Tensor,
) {
    // Adjoint slice of a parent node within the arena prefix.
    macro_rules! grad {
        ($id:expr) => {
            &mut before[offsets[$id.0]..offsets[$id.0] + get($id).len()]
        };
    }
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (g, &v) in grad!(*a).iter_mut().zip(god) {
                *g += v;
            }
            for (g, &v) in grad!(*b).iter_mut().zip(god) {
                *g += v;
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (get(*a).data(), get(*b).data());
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(vb).zip(god) {
                *g += v * y;
            }
            for ((g, &x), &v) in grad!(*b).iter_mut().zip(va).zip(god) {
                *g += v * x;
            }
        }
        Op::MatVec(w, x) => {
            let tw = get(*w);
            let (m, n) = (tw.shape()[0], tw.shape()[1]);
            let wd = tw.data();
            let xd = get(*x).data();
            {
                let gw = grad!(*w);
                for i in 0..m {
                    let row = &mut gw[i * n..(i + 1) * n];
                    let gi = god[i];
                    for (g, &xv) in row.iter_mut().zip(xd) {
                        *g += gi * xv;
                    }
                }
            }
            let gx = grad!(*x);
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                let gi = god[i];
                for (g, &wv) in gx.iter_mut().zip(row) {
                    *g += gi * wv;
                }
            }
        }
        Op::Affine2 { w, x, u, h, b } => {
            let (tw, tu) = (get(*w), get(*u));
            let (nx, nh) = (tw.shape()[1], tu.shape()[1]);
            let m = tw.shape()[0];
            let (wd, ud) = (tw.data(), tu.data());
            let (xd, hd) = (get(*x).data(), get(*h).data());
            {
                let gw = grad!(*w);
                for i in 0..m {
                    let gi = god[i];
                    for (g, &xv) in gw[i * nx..(i + 1) * nx].iter_mut().zip(xd) {
                        *g += gi * xv;
                    }
                }
            }
            {
                let gu = grad!(*u);
                for i in 0..m {
                    let gi = god[i];
                    for (g, &hv) in gu[i * nh..(i + 1) * nh].iter_mut().zip(hd) {
                        *g += gi * hv;
                    }
                }
            }
            {
                let gx = grad!(*x);
                for i in 0..m {
                    let gi = god[i];
                    for (g, &wv) in gx.iter_mut().zip(&wd[i * nx..(i + 1) * nx]) {
                        *g += gi * wv;
                    }
                }
            }
            {
                let gh = grad!(*h);
                for i in 0..m {
                    let gi = god[i];
                    for (g, &uv) in gh.iter_mut().zip(&ud[i * nh..(i + 1) * nh]) {
                        *g += gi * uv;
                    }
                }
            }
            for (g, &v) in grad!(*b).iter_mut().zip(god) {
                *g += v;
            }
        }
        Op::Sigmoid(a) => {
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(out.data()).zip(god) {
                *g += v * y * (1.0 - y);
            }
        }
        Op::Tanh(a) => {
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(out.data()).zip(god) {
                *g += v * (1.0 - y * y);
            }
        }
        Op::Exp(a) => {
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(out.data()).zip(god) {
                *g += v * y;
            }
        }
        Op::Log(a) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                *g += v / x;
            }
        }
        Op::Square(a) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                *g += v * 2.0 * x;
            }
        }
        Op::Sqrt(a) => {
            // Subgradient 0 at the origin.
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(out.data()).zip(god) {
                if y > 0.0 {
                    *g += v / (2.0 * y);
                }
            }
        }
        Op::Abs(a) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                *g += v * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }
        Op::Sin(a) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                *g += v * x.cos();
            }
        }
        Op::Cos(a) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                *g -= v * x.sin();
            }
        }
        Op::Recip(a) => {
            for ((g, &y), &v) in grad!(*a).iter_mut().zip(out.data()).zip(god) {
                *g -= v * y * y;
            }
        }
        Op::Scale(a, c) => {
            for (g, &v) in grad!(*a).iter_mut().zip(god) {
                *g += c * v;
            }
        }
        Op::Offset(a, _) => {
            for (g, &v) in grad!(*a).iter_mut().zip(god) {
                *g += v;
            }
        }
        Op::MulScalar(t, s) => {
            let sv = get(*s).data()[0];
            let td = get(*t).data();
            for (g, &v) in grad!(*t).iter_mut().zip(god) {
                *g += v * sv;
            }
            grad!(*s)[0] += td.iter().zip(god).map(|(x, v)| x * v).sum::<f64>();
        }
        Op::ClampMin(a, c) => {
            let xd = get(*a).data();
            for ((g, &x), &v) in grad!(*a).iter_mut().zip(xd).zip(god) {
                if x > *c {
                    *g += v;
                }
            }
        }
        Op::Outer3(u, v, w) => {
            let ud = get(*u).data();
            let vd = get(*v).data();
            let wd = get(*w).data();
            let (d, j, k) = (ud.len(), vd.len(), wd.len());
            {
                let gu = grad!(*u);
                for dd in 0..d {
                    let mut acc = 0.0;
                    for jj in 0..j {
                        for kk in 0..k {
                            acc += god[(dd * j + jj) * k + kk] * vd[jj] * wd[kk];
                        }
                    }
                    gu[dd] += acc;
                }
            }
            {
                let gv = grad!(*v);
                for jj in 0..j {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        for kk in 0..k {
                            acc += god[(dd * j + jj) * k + kk] * ud[dd] * wd[kk];
                        }
                    }
                    gv[jj] += acc;
                }
            }
            let gw = grad!(*w);
            for kk in 0..k {
                let mut acc = 0.0;
                for dd in 0..d {
                    for jj in 0..j {
                        acc += god[(dd * j + jj) * k + kk] * ud[dd] * vd[jj];
                    }
                }
                gw[kk] += acc;
            }
        }
        Op::OuterVecMat(u, m) => {
            let ud = get(*u).data();
            let md = get(*m).data();
            let (d, jk) = (ud.len(), md.len());
            {
                let gu = grad!(*u);
                for dd in 0..d {
                    gu[dd] += god[dd * jk..(dd + 1) * jk]
                        .iter()
                        .zip(md)
                        .map(|(g, mv)| g * mv)
                        .sum::<f64>();
                }
            }
            let gm = grad!(*m);
            for dd in 0..d {
                let block = &god[dd * jk..(dd + 1) * jk];
                let uv = ud[dd];
                for (gmv, &g) in gm.iter_mut().zip(block) {
                    *gmv += g * uv;
                }
            }
        }
        Op::SumAll(a) => {
            let v = god[0];
            for g in grad!(*a).iter_mut() {
                *g += v;
            }
        }
        Op::Dot(u, v) => {
            let s = god[0];
            let ud = get(*u).data();
            let vd = get(*v).data();
            for (g, &y) in grad!(*u).iter_mut().zip(vd) {
                *g += s * y;
            }
            for (g, &x) in grad!(*v).iter_mut().zip(ud) {
                *g += s * x;
            }
        }
        Op::Softmax(v) => {
            let y = out.data();
            let inner: f64 = god.iter().zip(y).map(|(g, yi)| g * yi).sum();
            for ((g, &yi), &gi) in grad!(*v).iter_mut().zip(y).zip(god) {
                *g += yi * (gi - inner);
            }
        }
        Op::Pick(v, i) => {
            grad!(*v)[*i] += god[0];
        }
        Op::Reshape(a, _) => {
            for (g, &v) in grad!(*a).iter_mut().zip(god) {
                *g += v;
            }
        }
        Op::Stack(parts) => {
            for (idx, p) in parts.iter().enumerate() {
                grad!(*p)[0] += god[idx];
            }
        }
        Op::ProjectKj { weights, amp, bias } => {
            let tw = get(*weights);
            let ta = get(*amp);
            let (d, j, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let wd = tw.data();
            let ad = ta.data();
            let mut at = vec![0.0; d * j * k];
            for dd in 0..d {
                for jj in 0..j {
                    for kk in 0..k {
                        at[(kk * j + jj) * d + dd] = ad[(dd * j + jj) * k + kk];
                    }
                }
            }
            {
                let gw = grad!(*weights);
                for kj in 0..k * j {
                    let wbase = kj * d * d;
                    let acol = &at[kj * d..(kj + 1) * d];
                    for p in 0..d {
                        let gp = god[p];
                        let row = &mut gw[wbase + p * d..wbase + (p + 1) * d];
                        for (g, &av) in row.iter_mut().zip(acol) {
                            *g += gp * av;
                        }
                    }
                }
            }
            {
                // Accumulate in the transposed layout, then scatter once.
                let mut gat = vec![0.0; d * j * k];
                for kj in 0..k * j {
                    let wbase = kj * d * d;
                    let gcol = &mut gat[kj * d..(kj + 1) * d];
                    for p in 0..d {
                        let gp = god[p];
                        let wrow = &wd[wbase + p * d..wbase + (p + 1) * d];
                        for (g, &wv) in gcol.iter_mut().zip(wrow) {
                            *g += gp * wv;
                        }
                    }
                }
                let ga = grad!(*amp);
                for dd in 0..d {
                    for jj in 0..j {
                        for kk in 0..k {
                            ga[(dd * j + jj) * k + kk] += gat[(kk * j + jj) * d + dd];
                        }
                    }
                }
            }
            let gb = grad!(*bias);
            for kk in 0..k {
                for jj in 0..j {
                    let bbase = (kk * j + jj) * d;
                    for (p, g) in gb[bbase..bbase + d].iter_mut().enumerate() {
                        *g += god[p];
                    }
                }
            }
        }
    }
}
