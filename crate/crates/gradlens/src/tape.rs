//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Operations are recorded in topological order during the forward pass and
//! replayed in reverse to accumulate gradients via the chain rule. The tape is
//! rebuilt for every forward call; node values live in an arena indexed by
//! [`NodeId`]. Gradients are available for parameters and for inputs alike,
//! which is what the attribution layer relies on.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into the tape arena. Inputs of a node always precede it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out[j] = sum_i x[i] * w[i, j] + b[j]
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row lookup: out[r] = table[indices[r]].
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Valid 1-d convolution over time, stride 1.
    /// x: [T, d], kernels: [C, k, d], bias: [C] -> out: [T-k+1, C]
    Conv1d {
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    /// Per-channel max over the time axis; argmax saved from the forward pass.
    MaxPoolTime {
        x: NodeId,
        argmax: Vec<usize>,
    },
    /// Binary cross-entropy of a pre-sigmoid score against a {0,1} target,
    /// computed in the numerically stable logits form.
    Bce {
        score: NodeId,
        target: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

/// Node values are either owned by the tape or shared, so that model
/// parameters need not be copied into every per-example tape.
#[derive(Debug, Clone)]
enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node id.
///
/// Every gradient-requiring leaf has an entry (zero-filled if the leaf is
/// unreachable from the output); retained internal nodes such as an embedding
/// lookup keep theirs too.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    /// Scalar value of a length-1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    /// Mark a node so that backward computes and keeps its gradient even when
    /// nothing upstream of it requires one. Must be called before the node is
    /// used as an input to further operations.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].requires_grad = true;
    }

    /// Saved argmax positions of a max-pool node, one per channel.
    pub fn max_pool_argmax(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxPoolTime { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Value, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Value::Owned(value), requires_grad)
    }

    /// Leaf backed by a shared tensor (trained parameters).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, Value::Shared(value), requires_grad)
    }

    // ---- operators ---------------------------------------------------

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 1 || wv.rank() != 2 || xv.shape()[0] != wv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (n, m) = (wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = bv.data().to_vec();
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..n {
            let xi = xd[i];
            if xi == 0.0 {
                continue;
            }
            let row = &wd[i * m..(i + 1) * m];
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(
            Op::Affine { x, w, b },
            Value::Owned(Tensor::vector(out)),
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(Op::Relu(x), Value::Owned(value), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(Op::Sigmoid(x), Value::Owned(value), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(Op::Tanh(x), Value::Owned(value), rg)
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, rows });
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![indices.len(), dim], out)?;
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            Value::Owned(value),
            rg,
        ))
    }

    pub fn conv1d_valid(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernels), self.value(bias));
        if xv.rank() != 2 || kv.rank() != 3 || xv.shape()[1] != kv.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (t_len, dim) = (xv.shape()[0], xv.shape()[1]);
        let (channels, width) = (kv.shape()[0], kv.shape()[1]);
        if width > t_len || bv.shape() != [channels] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: kv.shape().to_vec(),
                rhs: if width > t_len {
                    xv.shape().to_vec()
                } else {
                    bv.shape().to_vec()
                },
            });
        }
        let out_t = t_len - width + 1;
        let window = width * dim;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; out_t * channels];
        for t in 0..out_t {
            // A window of `width` consecutive rows is contiguous in row-major
            // storage, as is each kernel; the convolution is a plain dot.
            let win = &xd[t * dim..t * dim + window];
            for c in 0..channels {
                let ker = &kd[c * window..(c + 1) * window];
                let mut acc = bd[c];
                for (a, b) in win.iter().zip(ker) {
                    acc += a * b;
                }
                out[t * channels + c] = acc;
            }
        }
        let value = Tensor::new(vec![out_t, channels], out)?;
        let rg = self.needs_grad(&[x, kernels, bias]);
        Ok(self.push(Op::Conv1d { x, kernels, bias }, Value::Owned(value), rg))
    }

    /// Max over the time axis of a [T, C] tensor. Ties go to the lowest time
    /// index so backward is deterministic.
    pub fn max_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool_time",
                lhs: xv.shape().to_vec(),
                rhs: vec![2],
            });
        }
        let (t_len, channels) = (xv.shape()[0], xv.shape()[1]);
        if t_len == 0 {
            return Err(Error::EmptyTimeAxis);
        }
        let xd = xv.data();
        let mut out = xd[..channels].to_vec();
        let mut argmax = vec![0usize; channels];
        for t in 1..t_len {
            for c in 0..channels {
                let v = xd[t * channels + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = t;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::MaxPoolTime { x, argmax },
            Value::Owned(Tensor::vector(out)),
            rg,
        ))
    }

    /// Binary cross-entropy against `target`, taking the pre-sigmoid score.
    /// loss = max(s, 0) - s*y + ln(1 + exp(-|s|)), dloss/ds = sigmoid(s) - y.
    pub fn binary_cross_entropy(&mut self, score: NodeId, target: f64) -> Result<NodeId> {
        let sv = self.value(score);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: sv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let s = sv.data()[0];
        let loss = s.max(0.0) - s * target + (-s.abs()).exp().ln_1p();
        let rg = self.needs_grad(&[score]);
        Ok(self.push(
            Op::Bce { score, target },
            Value::Owned(Tensor::scalar(loss)),
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Value::Owned(value), rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar output. Gradients are exact and the sweep
    /// is fully deterministic: identical tapes produce bit-identical maps.
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        if output.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(output.0));
        }
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: out_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=output.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            // Inputs always precede node i on the tape, so splitting here
            // gives simultaneous access to the output gradient and the input
            // accumulators without cloning.
            let (head, tail) = grads.split_at_mut(i);
            let gout = tail[0].as_ref().expect("checked above").data();

            match &self.nodes[i].op {
                Op::Leaf => {}

                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, m) = (wv.shape()[0], wv.shape()[1]);
                    if self.nodes[x.0].requires_grad {
                        let gx = slot(head, *x, &[n]);
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            let row = &wv.data()[i * m..(i + 1) * m];
                            let mut acc = 0.0;
                            for (g, wij) in gout.iter().zip(row) {
                                acc += g * wij;
                            }
                            *gxi += acc;
                        }
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = slot(head, *w, &[n, m]);
                        for i in 0..n {
                            let xi = xv.data()[i];
                            if xi == 0.0 {
                                continue;
                            }
                            let row = &mut gw[i * m..(i + 1) * m];
                            for (g, go) in row.iter_mut().zip(gout) {
                                *g += xi * go;
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = slot(head, *b, &[m]);
                        for (g, go) in gb.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                }

                Op::Relu(x) => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let gx = slot(head, *x, xv.shape());
                        // Subgradient at exactly 0 is defined as 0.
                        for ((g, go), v) in gx.iter_mut().zip(gout).zip(xv.data()) {
                            if *v > 0.0 {
                                *g += go;
                            }
                        }
                    }
                }

                Op::Sigmoid(x) => {
                    if self.nodes[x.0].requires_grad {
                        let out = self.nodes[i].value.get();
                        let gx = slot(head, *x, out.shape());
                        for ((g, go), s) in gx.iter_mut().zip(gout).zip(out.data()) {
                            *g += go * s * (1.0 - s);
                        }
                    }
                }

                Op::Tanh(x) => {
                    if self.nodes[x.0].requires_grad {
                        let out = self.nodes[i].value.get();
                        let gx = slot(head, *x, out.shape());
                        for ((g, go), t) in gx.iter_mut().zip(gout).zip(out.data()) {
                            *g += go * (1.0 - t * t);
                        }
                    }
                }

                Op::Gather { table, indices } => {
                    if self.nodes[table.0].requires_grad {
                        let tv = self.value(*table);
                        let dim = tv.shape()[1];
                        let gt = slot(head, *table, tv.shape());
                        for (r, &idx) in indices.iter().enumerate() {
                            let src = &gout[r * dim..(r + 1) * dim];
                            let dst = &mut gt[idx * dim..(idx + 1) * dim];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }

                Op::Conv1d { x, kernels, bias } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernels));
                    let dim = xv.shape()[1];
                    let (channels, width) = (kv.shape()[0], kv.shape()[1]);
                    let out_t = xv.shape()[0] - width + 1;
                    let window = width * dim;
                    let x_needs = self.nodes[x.0].requires_grad;
                    let k_needs = self.nodes[kernels.0].requires_grad;
                    let b_needs = self.nodes[bias.0].requires_grad;
                    for t in 0..out_t {
                        for c in 0..channels {
                            let g = gout[t * channels + c];
                            if g == 0.0 {
                                continue;
                            }
                            if x_needs {
                                let gx = slot(head, *x, xv.shape());
                                let dst = &mut gx[t * dim..t * dim + window];
                                let ker = &kv.data()[c * window..(c + 1) * window];
                                for (d, k) in dst.iter_mut().zip(ker) {
                                    *d += g * k;
                                }
                            }
                            if k_needs {
                                let gk = slot(head, *kernels, kv.shape());
                                let dst = &mut gk[c * window..(c + 1) * window];
                                let win = &xv.data()[t * dim..t * dim + window];
                                for (d, v) in dst.iter_mut().zip(win) {
                                    *d += g * v;
                                }
                            }
                            if b_needs {
                                slot(head, *bias, &[channels])[c] += g;
                            }
                        }
                    }
                }

                Op::MaxPoolTime { x, argmax } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let channels = xv.shape()[1];
                        let gx = slot(head, *x, xv.shape());
                        for (c, &t) in argmax.iter().enumerate() {
                            gx[t * channels + c] += gout[c];
                        }
                    }
                }

                Op::Bce { score, target } => {
                    if self.nodes[score.0].requires_grad {
                        let s = self.value(*score).data()[0];
                        slot(head, *score, &[1])[0] += gout[0] * (sigmoid(s) - target);
                    }
                }

                Op::Add { a, b } => {
                    let shape = self.nodes[i].value.get().shape().to_vec();
                    for id in [*a, *b] {
                        if self.nodes[id.0].requires_grad {
                            let g = slot(head, id, &shape);
                            for (gi, go) in g.iter_mut().zip(gout) {
                                *gi += go;
                            }
                        }
                    }
                }
            }
        }

        // Gradient-requiring leaves always get an entry, even when they are
        // unreachable from the output.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.get().shape().to_vec()));
            }
        }

        Ok(GradientMap { grads })
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut [f64] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Central-difference oracle over the flattened entries of one leaf.
    /// Rebuilds the graph per perturbation via `eval`, which maps leaf values
    /// to a scalar output. Independent of the backward implementation.
    fn central_diff<F>(eval: F, point: &[f64], h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut grad = vec![0.0; point.len()];
        let mut probe = point.to_vec();
        for i in 0..point.len() {
            probe[i] = point[i] + h;
            let plus = eval(&probe);
            probe[i] = point[i] - h;
            let minus = eval(&probe);
            probe[i] = point[i];
            grad[i] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn affine_forward_value() {
        // beta = (2, -1), bias 0, input (3, 4) -> 2*3 - 1*4 = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]), false);
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let out = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.scalar_value(out), 2.0);
    }

    #[test]
    fn affine_shape_mismatch_names_operator() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine"), "got: {msg}");
        assert!(msg.contains("[3]") && msg.contains("[2, 1]"), "got: {msg}");
    }

    #[test]
    fn sigmoid_of_zero_is_half_and_slope_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let s = tape.sigmoid(x);
        assert_eq!(tape.scalar_value(s), 0.5);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn conv_output_length_is_valid_convolution() {
        // input length 5, kernel length 3 -> output length 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![5, 1], vec![1.0; 5]).unwrap(), false);
        let k = tape.leaf(Tensor::new(vec![1, 3, 1], vec![1.0; 3]).unwrap(), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let out = tape.conv1d_valid(x, k, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 1]);
    }

    #[test]
    fn linear_model_gradient_is_exactly_beta() {
        // f(x) = beta^T x: the input gradient equals the parameters, bitwise,
        // at any evaluation point.
        let beta = [2.0, -1.0, 0.5];
        for point in [[0.3, 1.7, -2.4], [100.0, -3.5, 0.0]] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(point.to_vec()), true);
            let w = tape.leaf(Tensor::new(vec![3, 1], beta.to_vec()).unwrap(), false);
            let b = tape.leaf(Tensor::vector(vec![0.0]), false);
            let out = tape.affine(x, w, b).unwrap();
            let grads = tape.backward(out).unwrap();
            assert_eq!(grads.grad(x).unwrap().data(), &beta);
        }
    }

    #[test]
    fn relu_net_gradient_matches_central_differences() {
        // Random 2-layer ReLU net, checked against the oracle away from kinks.
        let mut rng = StdRng::seed_from_u64(7);
        let (n_in, n_hidden) = (6, 5);
        let w1: Vec<f64> = (0..n_in * n_hidden)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let b1: Vec<f64> = (0..n_hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2: Vec<f64> = (0..n_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |xs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.to_vec()), false);
            let w1 = tape.leaf(
                Tensor::new(vec![n_in, n_hidden], w1.clone()).unwrap(),
                false,
            );
            let b1 = tape.leaf(Tensor::vector(b1.clone()), false);
            let w2 = tape.leaf(Tensor::new(vec![n_hidden, 1], w2.clone()).unwrap(), false);
            let b2 = tape.leaf(Tensor::vector(vec![0.1]), false);
            let h = tape.affine(x, w1, b1).unwrap();
            let h = tape.relu(h);
            let out = tape.affine(h, w2, b2).unwrap();
            tape.scalar_value(out)
        };

        let mut checked = 0;
        'points: while checked < 10 {
            let xs: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Resample when any pre-activation sits near a ReLU kink.
            for j in 0..n_hidden {
                let pre: f64 = b1[j] + (0..n_in).map(|i| xs[i] * w1[i * n_hidden + j]).sum::<f64>();
                if pre.abs() < 1e-3 {
                    continue 'points;
                }
            }
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.clone()), true);
            let w1n = tape.leaf(Tensor::new(vec![n_in, n_hidden], w1.clone()).unwrap(), true);
            let b1n = tape.leaf(Tensor::vector(b1.clone()), true);
            let w2n = tape.leaf(Tensor::new(vec![n_hidden, 1], w2.clone()).unwrap(), true);
            let b2n = tape.leaf(Tensor::vector(vec![0.1]), true);
            let h = tape.affine(x, w1n, b1n).unwrap();
            let h = tape.relu(h);
            let out = tape.affine(h, w2n, b2n).unwrap();
            let grads = tape.backward(out).unwrap();

            let fd = central_diff(eval, &xs, 1e-4);
            let err = max_rel_err(grads.grad(x).unwrap().data(), &fd);
            assert!(err < 1e-5, "input gradient off by {err:.3e}");
            checked += 1;
        }
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        // Same check, but differentiating with respect to weights and biases
        // of an affine -> tanh -> affine -> sigmoid -> bce chain.
        let mut rng = StdRng::seed_from_u64(11);
        let (n_in, n_hidden) = (4, 3);
        let xs: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..n_in * n_hidden)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let b1: Vec<f64> = (0..n_hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2: Vec<f64> = (0..n_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = 1.0;

        let build = |w1d: &[f64], b1d: &[f64], w2d: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.clone()), false);
            let w1n = tape.leaf(
                Tensor::new(vec![n_in, n_hidden], w1d.to_vec()).unwrap(),
                true,
            );
            let b1n = tape.leaf(Tensor::vector(b1d.to_vec()), true);
            let w2n = tape.leaf(Tensor::new(vec![n_hidden, 1], w2d.to_vec()).unwrap(), true);
            let b2n = tape.leaf(Tensor::vector(vec![-0.2]), false);
            let h = tape.affine(x, w1n, b1n).unwrap();
            let h = tape.tanh(h);
            let s = tape.affine(h, w2n, b2n).unwrap();
            let loss = tape.binary_cross_entropy(s, target).unwrap();
            (tape, w1n, b1n, w2n, loss)
        };

        let (tape, w1n, b1n, w2n, loss) = build(&w1, &b1, &w2);
        let grads = tape.backward(loss).unwrap();

        let fd_w1 = central_diff(
            |p| {
                let (t, _, _, _, l) = build(p, &b1, &w2);
                t.scalar_value(l)
            },
            &w1,
            1e-4,
        );
        let fd_b1 = central_diff(
            |p| {
                let (t, _, _, _, l) = build(&w1, p, &w2);
                t.scalar_value(l)
            },
            &b1,
            1e-4,
        );
        let fd_w2 = central_diff(
            |p| {
                let (t, _, _, _, l) = build(&w1, &b1, p);
                t.scalar_value(l)
            },
            &w2,
            1e-4,
        );

        assert!(max_rel_err(grads.grad(w1n).unwrap().data(), &fd_w1) < 1e-5);
        assert!(max_rel_err(grads.grad(b1n).unwrap().data(), &fd_b1) < 1e-5);
        assert!(max_rel_err(grads.grad(w2n).unwrap().data(), &fd_w2) < 1e-5);
    }

    /// One graph through every operator; every leaf checked against the
    /// central-difference oracle at a smooth point.
    #[test]
    fn every_operator_gradient_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let (rows, dim, channels, width, l) = (5usize, 3usize, 2usize, 2usize, 4usize);
        let indices = [4usize, 0, 2, 0];
        let table: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..channels * width * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let kbias: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wb = vec![0.37];

        // leaves in a fixed order for the oracle loop
        let build = |leaves: &[&[f64]]| {
            let mut tape = Tape::new();
            let t = tape.leaf(
                Tensor::new(vec![rows, dim], leaves[0].to_vec()).unwrap(),
                true,
            );
            let k = tape.leaf(
                Tensor::new(vec![channels, width, dim], leaves[1].to_vec()).unwrap(),
                true,
            );
            let kb = tape.leaf(Tensor::vector(leaves[2].to_vec()), true);
            let wn = tape.leaf(
                Tensor::new(vec![channels, 1], leaves[3].to_vec()).unwrap(),
                true,
            );
            let wbn = tape.leaf(Tensor::vector(leaves[4].to_vec()), true);
            let z = tape.gather(t, &indices).unwrap();
            let c = tape.conv1d_valid(z, k, kb).unwrap();
            let c = tape.tanh(c);
            let p = tape.max_pool_time(c).unwrap();
            let p = tape.relu(p);
            let score = tape.affine(p, wn, wbn).unwrap();
            // two branches off the score: bce on the raw value and a plain
            // sigmoid probe, summed so every operator reaches the output
            let loss = tape.binary_cross_entropy(score, 0.0).unwrap();
            let prob = tape.sigmoid(score);
            let combined = tape.add(loss, prob).unwrap();
            (tape, combined)
        };
        debug_assert_eq!(indices.len(), l);

        let leaves: Vec<Vec<f64>> = vec![table, kern, kbias, w, wb];
        let refs: Vec<&[f64]> = leaves.iter().map(|v| v.as_slice()).collect();
        let (tape, out) = build(&refs);
        let grads = tape.backward(out).unwrap();
        let leaf_ids: Vec<NodeId> = (0..5).map(NodeId).collect();

        for which in 0..5 {
            let eval = |probe: &[f64]| {
                let mut alt: Vec<&[f64]> = refs.clone();
                alt[which] = probe;
                let (t, o) = build(&alt);
                t.scalar_value(o)
            };
            let fd = central_diff(eval, &leaves[which], 1e-4);
            let got = grads.grad(leaf_ids[which]).unwrap().data();
            let err = max_rel_err(got, &fd);
            assert!(err < 1e-5, "leaf {which}: max relative error {err:.3e}");
        }
    }

    #[test]
    fn gather_selects_rows_and_accumulates_repeats() {
        let table = Tensor::new(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();

        // indices (2, 0) -> rows (r2, r0)
        let mut tape = Tape::new();
        let t = tape.leaf(table.clone(), true);
        let z = tape.gather(t, &[2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &[20.0, 21.0, 0.0, 1.0]);

        // repeated index (1, 1): both row gradients sum into table row 1.
        // Reduce the gathered [2, 2] to a scalar with a full-width kernel.
        let mut tape = Tape::new();
        let t = tape.leaf(table, true);
        let z = tape.gather(t, &[1, 1]).unwrap();
        let k = tape.leaf(
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let kb = tape.leaf(Tensor::vector(vec![0.0]), false);
        let c = tape.conv1d_valid(z, k, kb).unwrap();
        let pooled = tape.max_pool_time(c).unwrap();
        let grads = tape.backward(pooled).unwrap();
        // d out / d table row1 = (1+3, 2+4); rows 0 and 2 untouched
        assert_eq!(
            grads.grad(t).unwrap().data(),
            &[0.0, 0.0, 4.0, 6.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gather_index_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(), false);
        match tape.gather(t, &[0, 5]) {
            Err(Error::IndexOutOfRange { index: 5, rows: 2 }) => {}
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn gather_gradient_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let table: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let indices = [3usize, 0, 3];
        let eval = |td: &[f64]| {
            let mut tape = Tape::new();
            let t = tape.leaf(Tensor::new(vec![4, 2], td.to_vec()).unwrap(), false);
            let z = tape.gather(t, &indices).unwrap();
            let k = tape.leaf(
                Tensor::new(vec![1, 3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
                false,
            );
            let kb = tape.leaf(Tensor::vector(vec![0.0]), false);
            let c = tape.conv1d_valid(z, k, kb).unwrap();
            let s = tape.max_pool_time(c).unwrap();
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::new(vec![4, 2], table.clone()).unwrap(), true);
        let z = tape.gather(t, &indices).unwrap();
        let k = tape.leaf(
            Tensor::new(vec![1, 3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
            false,
        );
        let kb = tape.leaf(Tensor::vector(vec![0.0]), false);
        let c = tape.conv1d_valid(z, k, kb).unwrap();
        let s = tape.max_pool_time(c).unwrap();
        let grads = tape.backward(s).unwrap();
        let fd = central_diff(eval, &table, 1e-4);
        assert!(max_rel_err(grads.grad(t).unwrap().data(), &fd) < 1e-5);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax_only() {
        // column (1, 5, 3) -> 5 with gradient (0, g, 0)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 5.0, 3.0]).unwrap(), true);
        let p = tape.max_pool_time(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_index() {
        // constant column (2, 2, 2): first maximal index takes the gradient
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap(), true);
        let p = tape.max_pool_time(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
        assert_eq!(tape.max_pool_argmax(p).unwrap(), &[0]);
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_gradient_matches_central_differences_off_ties() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut xs: Vec<f64>;
        // 8x4 input; resample on near-ties so the oracle stays valid.
        loop {
            xs = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut clean = true;
            for c in 0..4 {
                let mut col: Vec<f64> = (0..8).map(|t| xs[t * 4 + c]).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if col[0] - col[1] < 1e-3 {
                    clean = false;
                }
            }
            if clean {
                break;
            }
        }
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |d: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![8, 4], d.to_vec()).unwrap(), false);
            let p = tape.max_pool_time(x).unwrap();
            let w = tape.leaf(Tensor::new(vec![4, 1], weights.clone()).unwrap(), false);
            let b = tape.leaf(Tensor::vector(vec![0.0]), false);
            let s = tape.affine(p, w, b).unwrap();
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![8, 4], xs.clone()).unwrap(), true);
        let p = tape.max_pool_time(x).unwrap();
        let w = tape.leaf(Tensor::new(vec![4, 1], weights.clone()).unwrap(), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let s = tape.affine(p, w, b).unwrap();
        let grads = tape.backward(s).unwrap();
        let fd = central_diff(eval, &xs, 1e-4);
        assert!(max_rel_err(grads.grad(x).unwrap().data(), &fd) < 1e-5);
    }

    #[test]
    fn empty_time_axis_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![0, 4]), false);
        assert!(matches!(tape.max_pool_time(x), Err(Error::EmptyTimeAxis)));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), false);
        assert!(matches!(
            tape.max_pool_time(x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn backward_rejects_foreign_node_id() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let _ = tape.relu(x);
        let stale = {
            let mut other = Tape::new();
            let a = other.leaf(Tensor::scalar(0.0), true);
            let b = other.relu(a);
            let c = other.add(a, b).unwrap();
            other.add(b, c).unwrap()
        };
        assert!(matches!(tape.backward(stale), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::vector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                true,
            );
            let w = tape.leaf(
                Tensor::new(
                    vec![6, 3],
                    (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                true,
            );
            let b = tape.leaf(Tensor::vector(vec![0.1, -0.2, 0.3]), true);
            let h = tape.affine(x, w, b).unwrap();
            let h = tape.relu(h);
            let w2 = tape.leaf(Tensor::new(vec![3, 1], vec![0.5, -0.5, 1.0]).unwrap(), true);
            let b2 = tape.leaf(Tensor::vector(vec![0.0]), true);
            let s = tape.affine(h, w2, b2).unwrap();
            let loss = tape.binary_cross_entropy(s, 1.0).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.grad(x).unwrap().data().to_vec(),
                grads.grad(w).unwrap().data().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        // bit-identical, not merely close
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn sum_of_losses_gradient_equals_sum_of_gradients() {
        // Two examples sharing parameter leaves on one tape; the gradient of
        // the summed loss must equal the sum of the per-example gradients.
        let w_data = vec![0.4, -0.7, 0.2];
        let xs = [vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let targets = [1.0, 0.0];

        let per_example: Vec<Vec<f64>> = xs
            .iter()
            .zip(&targets)
            .map(|(x, &y)| {
                let mut tape = Tape::new();
                let w = tape.leaf(Tensor::new(vec![3, 1], w_data.clone()).unwrap(), true);
                let b = tape.leaf(Tensor::vector(vec![0.1]), false);
                let xn = tape.leaf(Tensor::vector(x.clone()), false);
                let s = tape.affine(xn, w, b).unwrap();
                let loss = tape.binary_cross_entropy(s, y).unwrap();
                let grads = tape.backward(loss).unwrap();
                grads.grad(w).unwrap().data().to_vec()
            })
            .collect();

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![3, 1], w_data).unwrap(), true);
        let b = tape.leaf(Tensor::vector(vec![0.1]), false);
        let mut losses = Vec::new();
        for (x, &y) in xs.iter().zip(&targets) {
            let xn = tape.leaf(Tensor::vector(x.clone()), false);
            let s = tape.affine(xn, w, b).unwrap();
            losses.push(tape.binary_cross_entropy(s, y).unwrap());
        }
        let total = tape.add(losses[0], losses[1]).unwrap();
        let grads = tape.backward(total).unwrap();

        let summed: Vec<f64> = per_example[0]
            .iter()
            .zip(&per_example[1])
            .map(|(a, b)| a + b)
            .collect();
        for (got, want) in grads.grad(w).unwrap().data().iter().zip(&summed) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_marked_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::vector(vec![1.0, 1.0]), true);
        let out = tape.relu(used);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.grad(unused).unwrap().shape(), &[2]);
    }

    #[test]
    fn bce_loss_value_and_gradient() {
        // loss at s=0 is ln 2 regardless of target; gradient is sigmoid(s)-y
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(0.0), true);
        let loss = tape.binary_cross_entropy(s, 1.0).unwrap();
        assert!((tape.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(s).unwrap().data(), &[-0.5]);

        // large magnitudes stay finite
        for s_val in [-40.0, 40.0] {
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::scalar(s_val), true);
            let loss = tape.binary_cross_entropy(s, 0.0).unwrap();
            assert!(tape.scalar_value(loss).is_finite());
            let grads = tape.backward(loss).unwrap();
            assert!(grads.grad(s).unwrap().all_finite());
        }
    }
}
