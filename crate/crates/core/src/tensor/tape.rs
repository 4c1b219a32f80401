use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F: Scalar> {
    pub(crate) value: Tensor<F>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<F>>,
    grad: Option<Tensor<F>>,
}

/// Append-only record of the operations evaluated so far.
///
/// Nodes are only ever pushed after their inputs, so reverse insertion order
/// is a valid reverse topological order. Gradients persist on leaf nodes and
/// accumulate across `backward` calls until [`Tape::zero_grad`].
pub struct Tape<F: Scalar = f32> {
    pub(crate) nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but never builds backward state.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradient (a parameter or a differentiable input).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(value, rg, None)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<F>, requires_grad: bool, op: Option<Op<F>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output. The op is kept only when some input needs
    /// gradient; otherwise the result is a plain constant.
    pub(crate) fn push_op(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { Some(op) } else { None };
        self.push_raw(value, rg, op)
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients are added to
    /// whatever earlier passes left behind.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("root {} is not on this tape", root.0)));
        }
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(rv.shape().to_vec(), F::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Some(op) => {
                    let mut sink = GradSink {
                        nodes: &self.nodes,
                        pending: &mut pending,
                    };
                    op.backward(&node.value, &g, &mut sink);
                }
                None => {
                    let n = &mut self.nodes[idx];
                    match &mut n.grad {
                        Some(acc) => acc.add_assign(&g),
                        None => n.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Collects input gradients produced while walking one op backward.
pub(crate) struct GradSink<'a, F: Scalar> {
    pub(crate) nodes: &'a [Node<F>],
    pending: &'a mut [Option<Tensor<F>>],
}

impl<F: Scalar> GradSink<'_, F> {
    pub(crate) fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable access to the pending gradient buffer of `v`, zero-initialised
    /// on first use. Returns `None` when `v` does not need gradient.
    pub(crate) fn buf(&mut self, v: Var) -> Option<&mut Tensor<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut self.pending[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut()
    }

    pub(crate) fn add(&mut self, v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.pending[v.0];
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }
}

/// Row ranges of the sequences packed into a `rows × d` activation matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    starts: Vec<usize>,
    lens: Vec<usize>,
}

impl SeqLayout {
    /// `count` sequences of identical length.
    pub fn uniform(count: usize, len: usize) -> Self {
        Self {
            starts: (0..count).map(|i| i * len).collect(),
            lens: vec![len; count],
        }
    }

    pub fn ragged(lens: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in &lens {
            starts.push(off);
            off += l;
        }
        Self { starts, lens }
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn total_rows(&self) -> usize {
        self.starts.last().map(|s| s + self.lens[self.lens.len() - 1]).unwrap_or(0)
    }

    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.lens[i]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }
}
