//! Eager reverse-mode tape.
//!
//! Every op evaluates immediately and appends a node holding its output and,
//! when any input tracks gradients, a closure computing the vector-Jacobian
//! product. `backward` walks the nodes in exact reverse order of creation.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient.
    pub needs: Vec<bool>,
}

/// Returns one gradient buffer per input (`None` where not needed).
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
            grad: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Gradient accumulated on a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Append an op node. The closure is kept only if some input tracks
    /// gradients.
    pub fn record<F>(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor,
        backward: F,
    ) -> Var
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            op,
            value: output,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            grad: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// First node (in execution order) whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op))
    }

    /// Propagate d(loss)/d(node) to every gradient-tracking leaf.
    ///
    /// Backward closures are consumed, so a tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.take() else {
                // Leaf tracking gradients.
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                            *e += x;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            };
            let node = &self.nodes[i];
            let args = BackwardArgs {
                grad: &g,
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                needs: node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&args);
            let inputs = node.inputs.clone();
            drop(args);
            for (j, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    ig.len(),
                    self.nodes[j].value.numel(),
                    "grad size for {}",
                    self.nodes[i].op
                );
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&ig) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([3]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let c = tape.constant(Tensor::ones([2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn finds_first_non_finite_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, -1.0]).unwrap(), false);
        let y = tape.log(x);
        let _ = tape.exp(y);
        let (idx, op) = tape.first_non_finite().unwrap();
        assert_eq!(idx, y.index());
        assert_eq!(op, "log");
    }
}
