//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Nodes are identified by integer handles into a growing `Vec`; nothing is
//! ever mutated or removed, so handles stay valid and node ids are already
//! in topological order. The important property of this engine is that
//! [`Graph::gradient`] does not *compute* gradients — it *builds* them, as
//! new nodes in the same graph. The returned handles can therefore be
//! differentiated again, which is exactly what a gradient-matching loss
//! needs: the loss is a function of gradients, and optimizing it requires
//! gradients of gradients.
//!
//! Evaluation ([`Graph::eval`]) is read-only and deterministic: values are
//! computed in node-id order with fixed-order accumulation, so two
//! evaluations with identical leaf bindings produce bitwise-identical
//! results, and a `Graph` can be shared across threads.

use std::collections::HashMap;
use std::sync::Arc;

use crate::convolve;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The operation a node performs on its parents.
#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder whose value is supplied at evaluation time.
    Leaf { name: String },
    /// Embedded constant.
    Const(Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Sum of all elements, producing shape `[1]`.
    SumAll(NodeId),
    /// Broadcast of a one-element tensor to an arbitrary shape.
    Expand(NodeId),
    Reshape(NodeId),
    /// Maximum over all elements, treated as a constant by differentiation.
    /// Used to stabilize log-sum-exp without affecting derivatives.
    DetachedMax(NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    },
    ConvInputGrad {
        out_grad: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
        input_width: usize,
    },
    ConvKernelGrad {
        out_grad: NodeId,
        input: NodeId,
        stride: usize,
        padding: usize,
        kernel_size: usize,
    },
    /// `[h] -> [h, rows, cols]`, repeating each channel value spatially.
    ChannelBroadcast(NodeId),
    /// `[h, rows, cols] -> [h]`, summing each channel.
    SpatialSum(NodeId),
}

#[derive(Debug)]
pub struct Node {
    op: Op,
    shape: Vec<usize>,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Parent handles, in argument order.
    pub fn parents(&self) -> Vec<NodeId> {
        match self.op {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SumAll(a)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::DetachedMax(a)
            | Op::ChannelBroadcast(a)
            | Op::SpatialSum(a) => vec![a],
            Op::Conv2d { input, kernels, .. } => vec![input, kernels],
            Op::ConvInputGrad {
                out_grad, kernels, ..
            } => vec![out_grad, kernels],
            Op::ConvKernelGrad {
                out_grad, input, ..
            } => vec![out_grad, input],
        }
    }
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, shape });
        id
    }

    /// Declares a named placeholder of a fixed shape.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            shape.to_vec(),
        )
    }

    /// Embeds a constant tensor.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(Arc::new(value)), shape)
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape)
    }

    /// Strict 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([m, k1], [k2, n]) if k1 == k2 => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMul(a, b), shape))
            }
            _ => Err(Error::shape("matmul", sa, sb)),
        }
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        match self.shape(a) {
            [m, n] => {
                let shape = vec![*n, *m];
                Ok(self.push(Op::Transpose(a), shape))
            }
            other => Err(Error::invalid(
                "transpose",
                format!("expected rank-2 node, got shape {other:?}"),
            )),
        }
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1])
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = self.shape(a).iter().product();
        if numel != 1 {
            return Err(Error::invalid(
                "expand",
                format!("can only expand one-element nodes, got shape {:?}", self.shape(a)),
            ));
        }
        Ok(self.push(Op::Expand(a), shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = self.shape(a).iter().product();
        let target: usize = shape.iter().product();
        if numel != target {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Maximum over all elements with a blocked gradient. Useful only for
    /// numerical shifts (log-sum-exp); its derivative contribution is zero.
    pub fn detached_max(&mut self, a: NodeId) -> NodeId {
        self.push(Op::DetachedMax(a), vec![1])
    }

    /// Strided, padded convolution plus a per-kernel bias:
    /// `([C,d,d], [h,C,k,k], [h]) -> [h,d',d']`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let raw = self.conv2d_raw(input, kernels, stride, padding)?;
        let (h, dw) = match self.shape(raw) {
            [h, dw, _] => (*h, *dw),
            _ => unreachable!(),
        };
        if self.shape(bias) != [h] {
            return Err(Error::shape("conv2d bias", self.shape(bias), &[h]));
        }
        let spread = self.channel_broadcast(bias, dw, dw)?;
        self.add(raw, spread)
    }

    fn conv2d_raw(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (c, d) = match self.shape(input) {
            [c, d1, d2] if d1 == d2 => (*c, *d1),
            other => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("expected square [C,d,d] input node, got {other:?}"),
                ))
            }
        };
        let (h, kc, k) = match self.shape(kernels) {
            [h, kc, k1, k2] if k1 == k2 => (*h, *kc, *k1),
            other => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("expected [h,C,k,k] kernel node, got {other:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(kernels)));
        }
        let dw = convolve::conv_output_width(d, k, padding, stride)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            vec![h, dw, dw],
        ))
    }

    fn conv_input_grad(
        &mut self,
        out_grad: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
        input_width: usize,
    ) -> NodeId {
        let c = self.shape(kernels)[1];
        self.push(
            Op::ConvInputGrad {
                out_grad,
                kernels,
                stride,
                padding,
                input_width,
            },
            vec![c, input_width, input_width],
        )
    }

    fn conv_kernel_grad(
        &mut self,
        out_grad: NodeId,
        input: NodeId,
        stride: usize,
        padding: usize,
        kernel_size: usize,
    ) -> NodeId {
        let h = self.shape(out_grad)[0];
        let c = self.shape(input)[0];
        self.push(
            Op::ConvKernelGrad {
                out_grad,
                input,
                stride,
                padding,
                kernel_size,
            },
            vec![h, c, kernel_size, kernel_size],
        )
    }

    pub fn channel_broadcast(&mut self, chan: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let h = match self.shape(chan) {
            [h] => *h,
            other => {
                return Err(Error::invalid(
                    "channel_broadcast",
                    format!("expected rank-1 node, got shape {other:?}"),
                ))
            }
        };
        Ok(self.push(Op::ChannelBroadcast(chan), vec![h, rows, cols]))
    }

    pub fn spatial_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let h = match self.shape(a) {
            [h, _, _] => *h,
            other => {
                return Err(Error::invalid(
                    "spatial_sum",
                    format!("expected rank-3 node, got shape {other:?}"),
                ))
            }
        };
        Ok(self.push(Op::SpatialSum(a), vec![h]))
    }

    /// Numerically shifted softmax over all elements of `a`.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let m = self.detached_max(a);
        let m_full = self.expand(m, &shape)?;
        let shifted = self.sub(a, m_full)?;
        let e = self.exp(shifted);
        let s = self.sum_all(e);
        let s_full = self.expand(s, &shape)?;
        self.div(e, s_full)
    }

    /// Cross-entropy of softmax(`logits`) against a target distribution:
    /// `sum_j target_j * (logsumexp(logits) - logits_j)`.
    ///
    /// `target` entries are expected to sum to 1 for a proper loss (one-hot
    /// labels, or a softmax of guessed label scores); the expression itself
    /// is defined for any target.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("softmax_cross_entropy", logits, target)?;
        let m = self.detached_max(logits);
        let m_full = self.expand(m, &shape)?;
        let shifted = self.sub(logits, m_full)?;
        let e = self.exp(shifted);
        let s = self.sum_all(e);
        let log_s = self.log(s);
        let lse = self.add(m, log_s)?;
        let lse_full = self.expand(lse, &shape)?;
        let margin = self.sub(lse_full, logits)?;
        let weighted = self.mul(target, margin)?;
        Ok(self.sum_all(weighted))
    }

    /// Marks the ancestors of `from`, including itself.
    fn reachable(&self, from: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            if seen[id.index()] {
                continue;
            }
            seen[id.index()] = true;
            stack.extend(self.nodes[id.index()].parents());
        }
        seen
    }

    /// Builds gradient nodes of a scalar `output` with respect to each node
    /// in `wrt`. The result is one handle per entry, shaped like that entry.
    /// Nodes that cannot influence `output` get a zero constant. Because the
    /// gradients are ordinary nodes, they can be fed back into `gradient`.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput { shape: out_shape });
        }
        let reachable = self.reachable(output);
        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        let seed = self.constant(Tensor::filled(&out_shape, 1.0));
        adjoint.insert(output, seed);

        for idx in (0..=output.index()).rev() {
            if !reachable[idx] {
                continue;
            }
            let id = NodeId(idx as u32);
            let adj = match adjoint.get(&id) {
                Some(&a) => a,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } | Op::Const(_) | Op::DetachedMax(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, adj)?;
                    self.accumulate(&mut adjoint, b, adj)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, adj)?;
                    let neg = self.scale(adj, -1.0);
                    self.accumulate(&mut adjoint, b, neg)?;
                }
                Op::Mul(a, b) => {
                    let da = self.mul(adj, b)?;
                    self.accumulate(&mut adjoint, a, da)?;
                    let db = self.mul(adj, a)?;
                    self.accumulate(&mut adjoint, b, db)?;
                }
                Op::Div(a, b) => {
                    let da = self.div(adj, b)?;
                    self.accumulate(&mut adjoint, a, da)?;
                    let bb = self.mul(b, b)?;
                    let q = self.div(adj, bb)?;
                    let qa = self.mul(q, a)?;
                    let db = self.scale(qa, -1.0);
                    self.accumulate(&mut adjoint, b, db)?;
                }
                Op::Scale(a, c) => {
                    let da = self.scale(adj, c);
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(adj, bt)?;
                    self.accumulate(&mut adjoint, a, da)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, adj)?;
                    self.accumulate(&mut adjoint, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(adj)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Sigmoid(a) => {
                    // d sigma = sigma * (1 - sigma), written in terms of the
                    // node itself so it stays differentiable.
                    let ones = self.constant(Tensor::filled(&self.nodes[idx].shape.clone(), 1.0));
                    let one_minus = self.sub(ones, id)?;
                    let deriv = self.mul(id, one_minus)?;
                    let da = self.mul(adj, deriv)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Exp(a) => {
                    let da = self.mul(adj, id)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Log(a) => {
                    let da = self.div(adj, a)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    let da = self.expand(adj, &shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Expand(a) => {
                    let shape = self.shape(a).to_vec();
                    let total = self.sum_all(adj);
                    let da = self.reshape(total, &shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let da = self.reshape(adj, &shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let width = self.shape(input)[1];
                    let k = self.shape(kernels)[2];
                    let di = self.conv_input_grad(adj, kernels, stride, padding, width);
                    self.accumulate(&mut adjoint, input, di)?;
                    let dk = self.conv_kernel_grad(adj, input, stride, padding, k);
                    self.accumulate(&mut adjoint, kernels, dk)?;
                }
                Op::ConvInputGrad {
                    out_grad,
                    kernels,
                    stride,
                    padding,
                    ..
                } => {
                    // The op is bilinear in (out_grad, kernels); both
                    // contributions are again members of the conv trio.
                    let du = self.conv2d_raw(adj, kernels, stride, padding)?;
                    self.accumulate(&mut adjoint, out_grad, du)?;
                    let k = self.shape(kernels)[2];
                    let dk = self.conv_kernel_grad(out_grad, adj, stride, padding, k);
                    self.accumulate(&mut adjoint, kernels, dk)?;
                }
                Op::ConvKernelGrad {
                    out_grad,
                    input,
                    stride,
                    padding,
                    ..
                } => {
                    let du = self.conv2d_raw(input, adj, stride, padding)?;
                    self.accumulate(&mut adjoint, out_grad, du)?;
                    let width = self.shape(input)[1];
                    let dx = self.conv_input_grad(out_grad, adj, stride, padding, width);
                    self.accumulate(&mut adjoint, input, dx)?;
                }
                Op::ChannelBroadcast(chan) => {
                    let dc = self.spatial_sum(adj)?;
                    self.accumulate(&mut adjoint, chan, dc)?;
                }
                Op::SpatialSum(a) => {
                    let (rows, cols) = match self.shape(a) {
                        [_, r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    let da = self.channel_broadcast(adj, rows, cols)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for &target in wrt {
            match adjoint.get(&target) {
                Some(&g) => grads.push(g),
                None => {
                    let zero = Tensor::zeros(self.shape(target));
                    grads.push(self.constant(zero));
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut HashMap<NodeId, NodeId>,
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        match adjoint.get(&target) {
            Some(&existing) => {
                let combined = self.add(existing, contribution)?;
                adjoint.insert(target, combined);
            }
            None => {
                adjoint.insert(target, contribution);
            }
        }
        Ok(())
    }

    /// Evaluates `targets` under the given leaf bindings.
    ///
    /// Only nodes reachable from the targets are computed. Evaluation never
    /// mutates the graph, so it may run concurrently from several threads.
    pub fn eval(&self, leaves: &HashMap<NodeId, Tensor>, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id.index()] {
                continue;
            }
            needed[id.index()] = true;
            stack.extend(self.nodes[id.index()].parents());
        }

        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; self.nodes.len()];
        for idx in 0..self.nodes.len() {
            if !needed[idx] {
                continue;
            }
            let value = self.eval_node(idx, leaves, &values)?;
            values[idx] = Some(value);
        }

        Ok(targets
            .iter()
            .map(|t| values[t.index()].as_ref().expect("target computed").as_ref().clone())
            .collect())
    }

    fn eval_node(
        &self,
        idx: usize,
        leaves: &HashMap<NodeId, Tensor>,
        values: &[Option<Arc<Tensor>>],
    ) -> Result<Arc<Tensor>> {
        let take = |id: NodeId| -> &Tensor {
            values[id.index()]
                .as_ref()
                .expect("parent evaluated before child")
                .as_ref()
        };
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf { name } => {
                let id = NodeId(idx as u32);
                let value = leaves.get(&id).ok_or_else(|| Error::MissingLeaf {
                    name: name.clone(),
                    id: idx,
                })?;
                if value.shape() != node.shape.as_slice() {
                    return Err(Error::shape(
                        &format!("leaf '{name}'"),
                        value.shape(),
                        &node.shape,
                    ));
                }
                return Ok(Arc::new(value.clone()));
            }
            Op::Const(t) => return Ok(Arc::clone(t)),
            Op::Add(a, b) => take(*a).add(take(*b))?,
            Op::Sub(a, b) => take(*a).sub(take(*b))?,
            Op::Mul(a, b) => take(*a).mul(take(*b))?,
            Op::Div(a, b) => take(*a).div(take(*b))?,
            Op::Scale(a, c) => take(*a).scale(*c),
            Op::MatMul(a, b) => take(*a).matmul(take(*b))?,
            Op::Transpose(a) => take(*a).transposed()?,
            Op::Sigmoid(a) => take(*a).map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Exp(a) => take(*a).map(f64::exp),
            Op::Log(a) => take(*a).map(f64::ln),
            Op::SumAll(a) => Tensor::scalar(take(*a).sum()),
            Op::Expand(a) => Tensor::filled(&node.shape, take(*a).data()[0]),
            Op::Reshape(a) => take(*a).reshape(&node.shape)?,
            Op::DetachedMax(a) => {
                let m = take(*a)
                    .data()
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                Tensor::scalar(m)
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => convolve::conv2d_forward(take(*input), take(*kernels), *stride, *padding)?,
            Op::ConvInputGrad {
                out_grad,
                kernels,
                stride,
                padding,
                input_width,
            } => convolve::conv2d_input_grad(
                take(*out_grad),
                take(*kernels),
                *stride,
                *padding,
                *input_width,
            )?,
            Op::ConvKernelGrad {
                out_grad,
                input,
                stride,
                padding,
                kernel_size,
            } => convolve::conv2d_kernel_grad(
                take(*out_grad),
                take(*input),
                *stride,
                *padding,
                *kernel_size,
            )?,
            Op::ChannelBroadcast(chan) => {
                let (rows, cols) = (node.shape[1], node.shape[2]);
                let c = take(*chan);
                let mut data = Vec::with_capacity(c.numel() * rows * cols);
                for &v in c.data() {
                    data.extend(std::iter::repeat(v).take(rows * cols));
                }
                Tensor::new(node.shape.clone(), data)?
            }
            Op::SpatialSum(a) => {
                let t = take(*a);
                let (h, rows, cols) = match *t.shape() {
                    [h, r, c] => (h, r, c),
                    _ => unreachable!(),
                };
                let per = rows * cols;
                let data = (0..h)
                    .map(|m| t.data()[m * per..(m + 1) * per].iter().sum())
                    .collect();
                Tensor::new(vec![h], data)?
            }
        };
        Ok(Arc::new(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued function of one leaf.
    fn finite_diff(
        g: &Graph,
        output: NodeId,
        leaf: NodeId,
        bindings: &HashMap<NodeId, Tensor>,
        step: f64,
    ) -> Tensor {
        let base = bindings[&leaf].clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            let mut plus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] += step;
            plus.insert(leaf, t);
            let f_plus = g.eval(&plus, &[output]).unwrap()[0].item();

            let mut minus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] -= step;
            minus.insert(leaf, t);
            let f_minus = g.eval(&minus, &[output]).unwrap()[0].item();

            grad.data_mut()[i] = (f_plus - f_minus) / (2.0 * step);
        }
        grad
    }

    fn assert_close(actual: &Tensor, expected: &Tensor, rel: f64) {
        assert_eq!(actual.shape(), expected.shape());
        for (a, e) in actual.data().iter().zip(expected.data()) {
            let scale = e.abs().max(1.0);
            assert!(
                (a - e).abs() <= rel * scale,
                "got {a}, expected {e} (rel {rel})"
            );
        }
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[4]);
        let s = g.sum_all(x);
        let grad = g.gradient(s, &[x]).unwrap();
        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let got = g.eval(&leaves, &[grad[0]]).unwrap();
        assert_eq!(got[0].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_squared_norm_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3]);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum_all(xx);
        let grad = g.gradient(s, &[x]).unwrap();
        let mut leaves = HashMap::new();
        let xv = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        leaves.insert(x, xv.clone());
        let got = g.eval(&leaves, &[grad[0]]).unwrap();
        // x + x == 2x exactly in IEEE arithmetic.
        assert_eq!(got[0].data(), xv.scale(2.0).data());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.leaf("a", &[4, 3]);
        let b = g.leaf("b", &[3, 2]);
        let prod = g.matmul(a, b).unwrap();
        let s = g.sum_all(prod);
        let grads = g.gradient(s, &[a, b]).unwrap();

        let mut leaves = HashMap::new();
        leaves.insert(a, Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
        leaves.insert(b, Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng));

        let got = g.eval(&leaves, &[grads[0], grads[1]]).unwrap();
        let fa = finite_diff(&g, s, a, &leaves, 1e-5);
        let fb = finite_diff(&g, s, b, &leaves, 1e-5);
        assert_close(&got[0], &fa, 1e-6);
        assert_close(&got[1], &fb, 1e-6);
    }

    #[test]
    fn sigmoid_basics() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[5]);
        let s = g.sigmoid(x);
        let neg = g.scale(x, -1.0);
        let s_neg = g.sigmoid(neg);
        let total = g.add(s, s_neg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::uniform(&[5], -4.0, 4.0, &mut rng));
        let got = g.eval(&leaves, &[s, total]).unwrap();
        // sigma(0) = 1/2 checked separately below; sigma(x) + sigma(-x) = 1.
        for &v in got[1].data() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        leaves.insert(x, Tensor::zeros(&[5]));
        let at_zero = g.eval(&leaves, &[s]).unwrap();
        for &v in at_zero[0].data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn sigmoid_second_derivative_matches_analytic() {
        // f(x) = sum sigma(x); d2f/dx2 = sigma''(x) = s(1-s)(1-2s) elementwise.
        let mut g = Graph::new();
        let x = g.leaf("x", &[7]);
        let s = g.sigmoid(x);
        let f = g.sum_all(s);
        let grad = g.gradient(f, &[x]).unwrap()[0];
        let grad_sum = g.sum_all(grad);
        let second = g.gradient(grad_sum, &[x]).unwrap()[0];

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::uniform(&[7], -3.0, 3.0, &mut rng);
        let mut leaves = HashMap::new();
        leaves.insert(x, xv.clone());
        let got = g.eval(&leaves, &[second]).unwrap();
        for (i, &v) in got[0].data().iter().enumerate() {
            let sig = 1.0 / (1.0 + (-xv.data()[i]).exp());
            let expected = sig * (1.0 - sig) * (1.0 - 2.0 * sig);
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn second_derivative_of_cubic() {
        // f(x) = sum x^3 at x = 2: f'' = 6x = 12.
        let mut g = Graph::new();
        let x = g.leaf("x", &[1]);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let f = g.sum_all(x3);
        let first = g.gradient(f, &[x]).unwrap()[0];
        let first_sum = g.sum_all(first);
        let second = g.gradient(first_sum, &[x]).unwrap()[0];

        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::scalar(2.0));
        let got = g.eval(&leaves, &[second]).unwrap();
        assert!((got[0].item() - 12.0).abs() < 1e-8);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 8, 8]);
        let k = g.leaf("k", &[2, 3, 3, 3]);
        let b = g.leaf("b", &[2]);
        let z = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 4, 4]);
        // Square the output so the gradient depends on the input.
        let zz = g.mul(z, z).unwrap();
        let s = g.sum_all(zz);
        let grads = g.gradient(s, &[x, k, b]).unwrap();

        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng));
        leaves.insert(k, Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng));
        leaves.insert(b, Tensor::uniform(&[2], -1.0, 1.0, &mut rng));

        let got = g.eval(&leaves, &[grads[0], grads[1], grads[2]]).unwrap();
        for (leaf, grad) in [(x, 0), (k, 1), (b, 2)] {
            let fd = finite_diff(&g, s, leaf, &leaves, 1e-5);
            assert_close(&got[grad], &fd, 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        let mut g = Graph::new();
        let logits = g.leaf("logits", &[6, 1]);
        let y = g.leaf("y", &[6, 1]);
        let loss = g.softmax_cross_entropy(logits, y).unwrap();

        let mut leaves = HashMap::new();
        leaves.insert(logits, Tensor::filled(&[6, 1], 0.37));
        let mut onehot = Tensor::zeros(&[6, 1]);
        onehot.data_mut()[2] = 1.0;
        leaves.insert(y, onehot);
        let got = g.eval(&leaves, &[loss]).unwrap();
        assert!((got[0].item() - (6.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let logits = g.leaf("logits", &[5, 1]);
        let y = g.leaf("y", &[5, 1]);
        let loss = g.softmax_cross_entropy(logits, y).unwrap();
        let p = g.softmax(logits).unwrap();
        let grad = g.gradient(loss, &[logits]).unwrap()[0];

        let mut leaves = HashMap::new();
        leaves.insert(logits, Tensor::uniform(&[5, 1], -2.0, 2.0, &mut rng));
        let mut onehot = Tensor::zeros(&[5, 1]);
        onehot.data_mut()[4] = 1.0;
        leaves.insert(y, onehot.clone());
        let got = g.eval(&leaves, &[grad, p]).unwrap();
        let expected = got[1].sub(&onehot).unwrap();
        for (a, e) in got[0].data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::new();
        let a = g.leaf("a", &[9, 1]);
        let p = g.softmax(a).unwrap();
        for _ in 0..10 {
            let mut leaves = HashMap::new();
            leaves.insert(a, Tensor::uniform(&[9, 1], -30.0, 30.0, &mut rng));
            let got = g.eval(&leaves, &[p]).unwrap();
            assert!((got[0].sum() - 1.0).abs() < 1e-12);
            assert!(got[0].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_double_backprop_matches_finite_differences() {
        // L(x) = || d/dlogits CE(W x, y) ||^2 — a scalar built from gradient
        // nodes — differentiated once more with respect to x.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut g = Graph::new();
        let x = g.leaf("x", &[4, 1]);
        let w = g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let logits = g.matmul(w, x).unwrap();
        let y = g.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(logits, y).unwrap();
        let dlogits = g.gradient(loss, &[logits]).unwrap()[0];
        let sq = g.mul(dlogits, dlogits).unwrap();
        let norm = g.sum_all(sq);
        let grad_x = g.gradient(norm, &[x]).unwrap()[0];

        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::uniform(&[4, 1], -1.0, 1.0, &mut rng));
        let got = g.eval(&leaves, &[grad_x]).unwrap();
        let fd = finite_diff(&g, norm, x, &leaves, 1e-5);
        assert_close(&got[0], &fd, 1e-5);
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]);
        let other = g.leaf("other", &[3]);
        let s = g.sum_all(x);
        let grads = g.gradient(s, &[other]).unwrap();
        assert_eq!(g.shape(grads[0]), &[3]);
        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::zeros(&[2]));
        let got = g.eval(&leaves, &[grads[0]]).unwrap();
        assert_eq!(got[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_of_non_scalar_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]);
        let y = g.scale(x, 2.0);
        match g.gradient(y, &[x]) {
            Err(Error::NonScalarOutput { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarOutput, got {other:?}"),
        }
    }

    #[test]
    fn missing_leaf_is_a_named_error() {
        let mut g = Graph::new();
        let x = g.leaf("pixels", &[2]);
        let s = g.sum_all(x);
        let err = g.eval(&HashMap::new(), &[s]).unwrap_err();
        assert!(err.to_string().contains("pixels"), "{err}");
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut g = Graph::new();
        let x = g.leaf("x", &[6, 1]);
        let w = g.constant(Tensor::uniform(&[6, 6], -1.0, 1.0, &mut rng));
        let h = g.matmul(w, x).unwrap();
        let s = g.sigmoid(h);
        let y = g.constant(Tensor::new(vec![6, 1], vec![1., 0., 0., 0., 0., 0.]).unwrap());
        let loss = g.softmax_cross_entropy(s, y).unwrap();
        let grad = g.gradient(loss, &[x]).unwrap()[0];

        let mut leaves = HashMap::new();
        leaves.insert(x, Tensor::uniform(&[6, 1], 0.0, 1.0, &mut rng));
        let a = g.eval(&leaves, &[loss, grad]).unwrap();
        let b = g.eval(&leaves, &[loss, grad]).unwrap();
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(a[1].data(), b[1].data());
    }

    #[test]
    fn expand_requires_single_element() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]);
        assert!(g.expand(x, &[4]).is_err());
    }
}
