use std::sync::Arc;

use super::resample;
use super::{ImageTensor, ParamVector};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of primitives the tape understands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    ScalarMul,
    Mul,
    Conv2dSame,
    ChannelAffine,
    BilinearUpsample,
    Sigmoid,
    Clamp01,
    InnerProduct,
    Sum,
    Mean,
    Abs,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { segment: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Mul(NodeId, NodeId),
    Conv { x: NodeId, k: NodeId },
    Affine { x: NodeId, gain: NodeId, bias: NodeId },
    Upsample { x: NodeId },
    Sigmoid(NodeId),
    Clamp01(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Inner(NodeId, NodeId),
    /// Inner products of one node against `count` constant rows.
    Project { x: NodeId, rows: Arc<[f64]>, count: usize },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Mul(..) => OpKind::Mul,
            Op::Conv { .. } => OpKind::Conv2dSame,
            Op::Affine { .. } => OpKind::ChannelAffine,
            Op::Upsample { .. } => OpKind::BilinearUpsample,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Clamp01(_) => OpKind::Clamp01,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Inner(..) | Op::Project { .. } => OpKind::InnerProduct,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever appended after their inputs, so the node order is a
/// topological order and a backward sweep over indices in reverse visits each
/// node once. Kinks use fixed subgradients: `abs` has slope 0 at 0 and
/// `clamp01` has slope 1 strictly inside `(0, 1)` and 0 elsewhere.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `node`, if the node lies on a
    /// differentiable path to it.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.adjoints.get(node.0).and_then(|a| a.as_deref())
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.value.len() != 1 {
            return Err(Error::Shape {
                op: "scalar_value",
                detail: format!("node has shape {:?}", n.shape),
            });
        }
        Ok(n.value[0])
    }

    pub fn to_image(&self, id: NodeId) -> Result<ImageTensor> {
        match self.shape(id) {
            &[h, w, c] => ImageTensor::new(h, w, c, self.value(id).to_vec()),
            s => Err(Error::Shape {
                op: "to_image",
                detail: format!("expected [h, w, c], got {s:?}"),
            }),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape_len(&shape), value.len());
        let needs_grad = match &op {
            Op::Leaf { .. } => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Inner(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Conv { x, k } => self.nodes[x.0].needs_grad || self.nodes[k.0].needs_grad,
            Op::Affine { x, gain, bias } => {
                self.nodes[x.0].needs_grad
                    || self.nodes[gain.0].needs_grad
                    || self.nodes[bias.0].needs_grad
            }
            Op::ScalarMul(a, _)
            | Op::Upsample { x: a }
            | Op::Sigmoid(a)
            | Op::Clamp01(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Project { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, segment: Option<usize>, grad: bool) -> Result<NodeId> {
        if shape_len(&shape) != value.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {shape:?} holds {} values, got {}", shape_len(&shape), value.len()),
            });
        }
        let id = self.push(Op::Leaf { segment }, shape, value);
        self.nodes[id.0].needs_grad = grad;
        Ok(id)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, value, None, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, value, None, true)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf { segment: None }, vec![], vec![v])
    }

    pub fn image(&mut self, img: &ImageTensor) -> NodeId {
        let (h, w, c) = img.shape();
        self.push(Op::Leaf { segment: None }, vec![h, w, c], img.data().to_vec())
    }

    pub fn image_variable(&mut self, img: &ImageTensor) -> NodeId {
        let id = self.image(img);
        self.nodes[id.0].needs_grad = true;
        id
    }

    /// Records a parameter segment as a leaf with the given shape.
    pub fn param(&mut self, params: &ParamVector, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        let idx = params
            .segment_index(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter segment '{name}'")))?;
        let values = params.segment_at(idx).to_vec();
        self.leaf(shape, values, Some(idx), true)
    }

    fn broadcast_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || shape_len(sb) == 1 {
            Ok(sa.to_vec())
        } else if shape_len(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(mismatch(op, sa, sb))
        }
    }

    fn zip_broadcast(&self, a: NodeId, b: NodeId, len: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        (0..len)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect()
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.broadcast_pair("add", a, b)?;
        let v = self.zip_broadcast(a, b, shape_len(&shape), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), shape, v))
    }

    /// Elementwise difference; a single-element operand broadcasts.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.broadcast_pair("sub", a, b)?;
        let v = self.zip_broadcast(a, b, shape_len(&shape), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), shape, v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarMul(a, c), shape, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let v = self.zip_broadcast(a, b, self.value(a).len(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, v))
    }

    /// Depthwise 2-D correlation with "same" output size and edge-replicated
    /// borders. `x` is `[h, w, c]`, `k` is `[c, s, s]` with odd `s`.
    pub fn conv2d_same(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let (h, w, c) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(mismatch("conv2d_same", s, &[0, 0, 0])),
        };
        let s = match self.shape(k) {
            &[kc, s1, s2] if kc == c && s1 == s2 && s1 % 2 == 1 => s1,
            ks => {
                return Err(Error::Shape {
                    op: "conv2d_same",
                    detail: format!("input {:?} needs kernel [{c}, s, s] with odd s, got {ks:?}", [h, w, c]),
                })
            }
        };
        let out = conv_forward(self.value(x), self.value(k), (h, w, c), s);
        Ok(self.push(Op::Conv { x, k }, vec![h, w, c], out))
    }

    /// `x * gain[c] + bias[c]` per channel.
    pub fn channel_affine(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = match self.shape(x) {
            &[_, _, c] => c,
            s => return Err(mismatch("channel_affine", s, &[0, 0, 0])),
        };
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "channel_affine",
                detail: format!(
                    "input {:?} needs gain/bias [{c}], got {:?} and {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv * g[i % c] + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Affine { x, gain, bias }, shape, v))
    }

    /// Bilinear resize of `[h, w, c]` to `[out_h, out_w, c]`.
    pub fn upsample(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (h, w, c) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(mismatch("bilinear_upsample", s, &[0, 0, 0])),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape {
                op: "bilinear_upsample",
                detail: format!("target {out_h}x{out_w} is empty"),
            });
        }
        let v = resample::resize(self.value(x), (h, w, c), (out_h, out_w));
        Ok(self.push(Op::Upsample { x }, vec![out_h, out_w, c], v))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Clamp01(a), |x| x.clamp(0.0, 1.0))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `<a, b>` as a scalar.
    pub fn inner_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("inner_product", self.shape(a), self.shape(b)));
        }
        let v: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Inner(a, b), vec![], vec![v]))
    }

    /// Inner products of `x` against each of `count` constant rows stored
    /// back to back in `rows`; the result has shape `[count]`.
    pub fn inner_products(&mut self, x: NodeId, rows: Arc<[f64]>, count: usize) -> Result<NodeId> {
        let n = self.value(x).len();
        if rows.len() != n * count {
            return Err(Error::Shape {
                op: "inner_product",
                detail: format!(
                    "input {:?} ({n} values) against {count} rows needs {} constants, got {}",
                    self.shape(x),
                    n * count,
                    rows.len()
                ),
            });
        }
        let xv = self.value(x);
        let v = rows
            .chunks_exact(n)
            .map(|r| r.iter().zip(xv).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Op::Project { x, rows, count }, vec![count], v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![], vec![v])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let vals = self.value(a);
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        self.push(Op::Mean(a), vec![], vec![v])
    }

    /// Smallest distance from any `abs` or `clamp01` input element to its
    /// kink (0 for abs; 0 and 1 for clamp01). `INFINITY` if there are none.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Abs(a) if node.needs_grad => {
                    for &x in self.value(a) {
                        best = best.min(x.abs());
                    }
                }
                Op::Clamp01(a) if node.needs_grad => {
                    for &x in self.value(a) {
                        best = best.min(x.abs()).min((x - 1.0).abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if seed.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node {} is not on this tape", seed.0)));
        }
        if self.nodes[seed.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("seed must be scalar, got shape {:?}", self.nodes[seed.0].shape),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[seed.0] = Some(vec![1.0]);
        for i in (0..=seed.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Gradient of `seed` laid out like `template`; segments that the seed
    /// does not depend on get zeros.
    pub fn backward_params(&self, seed: NodeId, template: &ParamVector) -> Result<ParamVector> {
        let grads = self.backward(seed)?;
        self.param_gradient(&grads, template)
    }

    pub fn param_gradient(&self, grads: &Gradients, template: &ParamVector) -> Result<ParamVector> {
        let mut out = template.zeros_like();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Leaf { segment: Some(s) } = node.op else { continue };
            let seg = template
                .layout()
                .get(s)
                .ok_or_else(|| Error::invalid("parameter leaf does not match template layout"))?
                .clone();
            if seg.len != node.value.len() {
                return Err(Error::invalid(format!(
                    "segment '{}' has {} values but leaf holds {}",
                    seg.name,
                    seg.len,
                    node.value.len()
                )));
            }
            if let Some(g) = grads.adjoints[i].as_deref() {
                for (o, v) in out.values_mut()[seg.offset..seg.offset + seg.len].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let acc = |adj: &mut [Option<Vec<f64>>], id: NodeId, f: &dyn Fn(usize) -> f64| {
            let len = self.nodes[id.0].value.len();
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
            for (j, s) in slot.iter_mut().enumerate() {
                *s += f(j);
            }
        };
        // Elementwise ops with scalar broadcast: a single-element input
        // receives the sum over the output.
        let acc_b = |adj: &mut [Option<Vec<f64>>], id: NodeId, sign: f64| {
            let len = self.nodes[id.0].value.len();
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
            if len == 1 && g.len() > 1 {
                slot[0] += sign * g.iter().sum::<f64>();
            } else {
                for (s, gj) in slot.iter_mut().zip(g) {
                    *s += sign * gj;
                }
            }
        };
        match node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if wants(a) {
                    acc_b(adj, a, 1.0);
                }
                if wants(b) {
                    acc_b(adj, b, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc_b(adj, a, 1.0);
                }
                if wants(b) {
                    acc_b(adj, b, -1.0);
                }
            }
            Op::ScalarMul(a, c) => acc(adj, a, &|j| c * g[j]),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if wants(a) {
                    acc(adj, a, &|j| g[j] * vb[j]);
                }
                if wants(b) {
                    acc(adj, b, &|j| g[j] * va[j]);
                }
            }
            Op::Conv { x, k } => {
                let (h, w, c) = (node.shape[0], node.shape[1], node.shape[2]);
                let s = self.shape(k)[1];
                let (gx, gk) = conv_backward(g, self.value(x), self.value(k), (h, w, c), s, wants(x), wants(k));
                if let Some(gx) = gx {
                    acc(adj, x, &|j| gx[j]);
                }
                if let Some(gk) = gk {
                    acc(adj, k, &|j| gk[j]);
                }
            }
            Op::Affine { x, gain, bias } => {
                let c = node.shape[2];
                let (vx, vg) = (self.value(x), self.value(gain));
                if wants(x) {
                    acc(adj, x, &|j| g[j] * vg[j % c]);
                }
                if wants(gain) {
                    let mut gg = vec![0.0; c];
                    for (j, (&gj, &xj)) in g.iter().zip(vx).enumerate() {
                        gg[j % c] += gj * xj;
                    }
                    acc(adj, gain, &|j| gg[j]);
                }
                if wants(bias) {
                    let mut gb = vec![0.0; c];
                    for (j, &gj) in g.iter().enumerate() {
                        gb[j % c] += gj;
                    }
                    acc(adj, bias, &|j| gb[j]);
                }
            }
            Op::Upsample { x } => {
                let s = self.shape(x);
                let gx = resample::resize_adjoint(g, (s[0], s[1], s[2]), (node.shape[0], node.shape[1]));
                acc(adj, x, &|j| gx[j]);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(adj, a, &|j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::Clamp01(a) => {
                let x = self.value(a);
                acc(adj, a, &|j| if x[j] > 0.0 && x[j] < 1.0 { g[j] } else { 0.0 });
            }
            Op::Abs(a) => {
                let x = self.value(a);
                acc(adj, a, &|j| {
                    if x[j] > 0.0 {
                        g[j]
                    } else if x[j] < 0.0 {
                        -g[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(a);
                acc(adj, a, &|j| 2.0 * x[j] * g[j]);
            }
            Op::Inner(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if wants(a) {
                    acc(adj, a, &|j| g[0] * vb[j]);
                }
                if wants(b) {
                    acc(adj, b, &|j| g[0] * va[j]);
                }
            }
            Op::Project { x, ref rows, count } => {
                let n = self.value(x).len();
                let mut gx = vec![0.0; n];
                for r in 0..count {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    for (o, p) in gx.iter_mut().zip(&rows[r * n..(r + 1) * n]) {
                        *o += gr * p;
                    }
                }
                acc(adj, x, &|j| gx[j]);
            }
            Op::Sum(a) => acc(adj, a, &|_| g[0]),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(adj, a, &|_| g[0] / n);
            }
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamped_offsets(len: usize, s: usize) -> Vec<usize> {
    // Row-major table: for each output position p and tap t, the source index.
    let r = (s / 2) as isize;
    let mut out = Vec::with_capacity(len * s);
    for p in 0..len as isize {
        for t in 0..s as isize {
            out.push((p + t - r).clamp(0, len as isize - 1) as usize);
        }
    }
    out
}

fn conv_forward(x: &[f64], k: &[f64], (h, w, c): (usize, usize, usize), s: usize) -> Vec<f64> {
    let rows = clamped_offsets(h, s);
    let cols = clamped_offsets(w, s);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let kb = &k[ch * s * s..(ch + 1) * s * s];
                let mut acc = 0.0;
                for dy in 0..s {
                    let sy = rows[y * s + dy];
                    for dx in 0..s {
                        let sx = cols[xx * s + dx];
                        acc += kb[dy * s + dx] * x[(sy * w + sx) * c + ch];
                    }
                }
                out[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward(
    g: &[f64],
    x: &[f64],
    k: &[f64],
    (h, w, c): (usize, usize, usize),
    s: usize,
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = clamped_offsets(h, s);
    let cols = clamped_offsets(w, s);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gk = want_k.then(|| vec![0.0; k.len()]);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let go = g[(y * w + xx) * c + ch];
                if go == 0.0 {
                    continue;
                }
                for dy in 0..s {
                    let sy = rows[y * s + dy];
                    for dx in 0..s {
                        let sx = cols[xx * s + dx];
                        let src = (sy * w + sx) * c + ch;
                        let ki = ch * s * s + dy * s + dx;
                        if let Some(gx) = gx.as_mut() {
                            gx[src] += go * k[ki];
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[ki] += go * x[src];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> ImageTensor {
        ImageTensor::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let s = t.sigmoid(z);
        assert_eq!(t.scalar_value(s).unwrap(), 0.5);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = img(5, 6, 3, |i| (i as f64 * 0.37).sin());
        let mut k = vec![0.0; 3 * 9];
        for ch in 0..3 {
            k[ch * 9 + 4] = 1.0;
        }
        let mut t = Tape::new();
        let xn = t.image(&x);
        let kn = t.constant(vec![3, 3, 3], k).unwrap();
        let y = t.conv2d_same(xn, kn).unwrap();
        assert_eq!(t.value(y), x.data());
    }

    #[test]
    fn identity_affine_is_identity() {
        let x = img(3, 3, 3, |i| i as f64 / 27.0);
        let mut t = Tape::new();
        let xn = t.image(&x);
        let g = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = t.channel_affine(xn, g, b).unwrap();
        assert_eq!(t.value(y), x.data());
    }

    #[test]
    fn square_and_abs_gradients() {
        let pv = ParamVector::from_parts(
            vec![super::super::Segment { name: "t".into(), offset: 0, len: 1 }],
            vec![3.0],
        )
        .unwrap();
        let mut t = Tape::new();
        let th = t.param(&pv, "t", vec![1]).unwrap();
        let sq = t.square(th);
        let s = t.sum(sq);
        assert_eq!(t.backward_params(s, &pv).unwrap().values(), &[6.0]);

        let mut pv2 = pv.clone();
        pv2.values_mut()[0] = -2.0;
        let mut t = Tape::new();
        let th = t.param(&pv2, "t", vec![1]).unwrap();
        let a = t.abs(th);
        let s = t.sum(a);
        assert_eq!(t.backward_params(s, &pv2).unwrap().values(), &[-1.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2, 1], vec![0.0; 4]).unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 2, 1]") && err.contains("[3]"), "{err}");
        let k = t.constant(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        let err = t.conv2d_same(a, k).unwrap_err().to_string();
        assert!(err.contains("conv2d_same"), "{err}");
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut t = Tape::new();
        let a = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let b = t.square(a);
        assert!(t.backward(b).is_err());
    }

    #[test]
    fn untouched_segments_get_zero() {
        let pv = ParamVector::zeros([("a", 2), ("b", 3)]).unwrap();
        let mut t = Tape::new();
        let a = t.param(&pv, "a", vec![2]).unwrap();
        let s = t.sum(a);
        let g = t.backward_params(s, &pv).unwrap();
        assert_eq!(g.values(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_subgradient_convention() {
        let mut t = Tape::new();
        let a = t.variable(vec![4], vec![-0.5, 0.0, 0.5, 1.0]).unwrap();
        let c = t.clamp01(a);
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_in_sub() {
        let mut t = Tape::new();
        let a = t.variable(vec![3], vec![1.0, 2.0, 6.0]).unwrap();
        let m = t.mean(a);
        let d = t.sub(a, m).unwrap();
        assert_eq!(t.value(d), &[-2.0, -1.0, 3.0]);
        let sq = t.square(d);
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        // d/da_i sum (a_i - mean)^2 = 2 (a_i - mean)
        let ga = g.wrt(a).unwrap();
        for (gi, di) in ga.iter().zip([-2.0, -1.0, 3.0]) {
            assert!((gi - 2.0 * di).abs() < 1e-12);
        }
    }
}
