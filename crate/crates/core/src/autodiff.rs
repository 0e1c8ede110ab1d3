//! Define-by-run reverse-mode differentiation over [`Tensor2`].
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append node
//! records in execution order; [`Graph::backward`] walks them in exact
//! reverse insertion order, accumulating gradients into each node tensor's
//! gradient slot. Gradients are therefore bit-reproducible for identical
//! graphs.

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor2};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    /// Input tensor; gradient targeting is tracked by the node's `needs_grad`.
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    Activation(NodeId, Activation),
    SumAll(NodeId),
    /// Mean of -log softmax(row)[label]; stores the row-wise probabilities
    /// from the stabilized forward pass for the backward rule.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor2<S>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor2<S>,
    needs_grad: bool,
}

/// Computation record for one forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor2<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor2<S>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Insert a tensor that participates in gradient accumulation.
    pub fn param(&mut self, t: Tensor2<S>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<Tensor2<S>> {
        self.nodes[id.0].value.grad_tensor()
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> S {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::dims("matmul", (ar, ac), (br, bc)));
        }
        let mut out = Tensor2::zeros(ar, bc);
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            ar,
            ac,
            bc,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Hadamard(a, b), out, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let out = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), out, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let out = self.value(a).map(|v| v + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), out, needs)
    }

    /// Elementwise activation; the backward rule uses the derivative at the
    /// recorded pre-activation values.
    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let out = self.value(a).map(|v| kind.apply(v));
        let needs = self.needs(a);
        self.push(Op::Activation(a, kind), out, needs)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: S = self.value(a).iter().copied().sum();
        let out = Tensor2::from_fn(1, 1, |_, _| s);
        let needs = self.needs(a);
        self.push(Op::SumAll(a), out, needs)
    }

    /// Mean over the batch of -log softmax(logits)[label], as a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (n, c) = v.shape();
        if labels.len() != n {
            return Err(Error::Data(format!(
                "label count {} does not match batch size {n}",
                labels.len()
            )));
        }
        if let Some((row, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} at row {row} out of range for {c} classes"
            )));
        }

        let mut probs = Tensor2::zeros(n, c);
        let mut loss = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut denom = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs.set(i, j, e);
                denom += e;
            }
            for j in 0..c {
                probs.set(i, j, probs.get(i, j) / denom);
            }
            // log-sum-exp form keeps saturated logits finite
            loss += denom.ln() - (row[label] - max);
        }
        let batch = S::from_f64_exact(n as f64);
        let out = Tensor2::from_fn(1, 1, |_, _| loss / batch);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
            needs,
        ))
    }

    /// Reverse pass from a scalar (1x1) node. Clears previous gradients.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.value(target).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                message: format!(
                    "target must be 1x1, got {}x{}",
                    self.value(target).rows(),
                    self.value(target).cols()
                ),
            });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[target.0].value.grad_mut()[0] = S::one();

        for idx in (0..=target.0).rev() {
            if !self.nodes[idx].needs_grad || !self.nodes[idx].value.has_grad() {
                continue;
            }
            // Take the op and upstream gradient out to appease the borrow
            // checker; the op is restored below.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let upstream = self.nodes[idx].value.grad_tensor().expect("grad present");
            self.apply_backward(&op, &upstream)?;
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contribution: &Tensor2<S>) -> Result<()> {
        if self.needs(id) {
            self.nodes[id.0].value.accumulate_grad(contribution)?;
        }
        Ok(())
    }

    fn apply_backward(&mut self, op: &Op<S>, upstream: &Tensor2<S>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                // d/da = upstream * b^T, d/db = a^T * upstream
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    let ga = upstream.matmul(&bt)?;
                    self.add_grad(*a, &ga)?;
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    let gb = at.matmul(upstream)?;
                    self.add_grad(*b, &gb)?;
                }
            }
            Op::Transpose(a) => {
                self.add_grad(*a, &upstream.transpose())?;
            }
            Op::Add(a, b) => {
                self.add_grad(*a, upstream)?;
                self.add_grad(*b, upstream)?;
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    let ga = upstream.hadamard(self.value(*b))?;
                    self.add_grad(*a, &ga)?;
                }
                if self.needs(*b) {
                    let gb = upstream.hadamard(self.value(*a))?;
                    self.add_grad(*b, &gb)?;
                }
            }
            Op::Scale(a, c) => {
                self.add_grad(*a, &upstream.scale(*c))?;
            }
            Op::AddScalar(a, _) => {
                self.add_grad(*a, upstream)?;
            }
            Op::Activation(a, kind) => {
                if self.needs(*a) {
                    let deriv = self.value(*a).map(|z| kind.derivative(z));
                    let ga = upstream.hadamard(&deriv)?;
                    self.add_grad(*a, &ga)?;
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let g = upstream.data()[0];
                    let (r, c) = self.value(*a).shape();
                    self.add_grad(*a, &Tensor2::filled(r, c, g))?;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let g = upstream.data()[0];
                    let (n, c) = probs.shape();
                    let batch = S::from_f64_exact(n as f64);
                    let mut gl = Tensor2::zeros(n, c);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if label == j { S::one() } else { S::zero() };
                            gl.set(i, j, g * (probs.get(i, j) - onehot) / batch);
                        }
                    }
                    self.add_grad(*logits, &gl)?;
                }
            }
        }
        Ok(())
    }
}
