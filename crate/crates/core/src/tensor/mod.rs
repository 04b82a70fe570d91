//! Dense float64 tensors with recorded-graph reverse-mode differentiation.
//!
//! Every differentiable operation appends a [`Node`] to the [`Graph`]'s tape;
//! `backward` walks the tape in reverse and accumulates gradients into every
//! tensor reachable from a `requires_grad` leaf. One graph serves one forward
//! and backward pass; parameters persist across passes in a
//! [`checkpoint::ParamStore`].

mod ops;
pub mod checkpoint;

use crate::error::{CvfError, Result};

/// Dense row-major float64 tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CvfError::Shape(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != n {
            return Err(CvfError::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat index of a 3D [C,H,W] position.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.shape[1] + h) * self.shape[2] + w
    }
}

/// Handle to a tensor registered in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Gradient buffers for every tracked tensor; untracked tensors hold an
/// empty buffer and accumulation into them is a no-op.
pub struct Grads {
    bufs: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn accum(&mut self, id: usize, idx: usize, v: f64) {
        let b = &mut self.bufs[id];
        if !b.is_empty() {
            b[idx] += v;
        }
    }

    #[inline]
    pub fn buf_mut(&mut self, id: usize) -> Option<&mut [f64]> {
        if self.bufs[id].is_empty() {
            None
        } else {
            Some(&mut self.bufs[id])
        }
    }
}

type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &mut Grads)>;

/// One recorded operation: inputs, output, and how to push gradients back.
pub struct Node {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
    backward: BackwardFn,
}

/// Tape-recording computation graph. Single-threaded by contract; distinct
/// graphs may be used concurrently.
#[derive(Default)]
pub struct Graph {
    tensors: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    nodes: Vec<Node>,
    /// Number of times a probability was clamped to epsilon inside a log.
    pub clamp_warnings: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_tensor(&mut self, t: Tensor, requires: bool) -> Var {
        self.tensors.push(t);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.tensors.len() - 1)
    }

    /// Register a constant input (no gradient tracking).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_tensor(t, false)
    }

    /// Register a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_tensor(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.tensors[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient buffer of `v`, populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Recorded tape, oldest node first.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Record an operation with a hand-written backward closure. The output
    /// tracks gradients iff any input does.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: Vec<Var>,
        output: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let out = self.push_tensor(output, requires);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            output: out.0,
            backward,
        });
        out
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracked tensor, leaves included.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(CvfError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss.0].shape()
            )));
        }
        let mut grads = Grads {
            bufs: self
                .tensors
                .iter()
                .zip(&self.requires)
                .map(|(t, &r)| if r { vec![0.0; t.numel()] } else { Vec::new() })
                .collect(),
        };
        if grads.bufs[loss.0].is_empty() {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        grads.bufs[loss.0][0] = 1.0;
        for node in self.nodes.iter().rev() {
            if grads.bufs[node.output].is_empty() {
                continue;
            }
            let out_grad = std::mem::take(&mut grads.bufs[node.output]);
            (node.backward)(&self.tensors, &out_grad, &mut grads);
            grads.bufs[node.output] = out_grad;
        }
        for (slot, buf) in self.grads.iter_mut().zip(grads.bufs) {
            if !buf.is_empty() {
                *slot = Some(buf);
            }
        }
        Ok(())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, ctx: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CvfError::Shape(format!(
            "{ctx}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
