use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule of one recorded primitive.
///
/// Implementations hold whatever forward context they need (saved inputs,
/// masks, argmax indices) and turn the output gradient into one gradient per
/// input. `needs[i]` is false for inputs that do not track gradients; the rule
/// may return `None` for those.
pub trait Backward<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;

    /// Hash of the piecewise branch this op took in the forward pass (ReLU
    /// masks, max-pool argmax, clamp regions). `None` for smooth ops.
    fn kink_signature(&self) -> Option<u64> {
        None
    }
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Option<Arc<Vec<T>>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    name: &'static str,
}

/// Single-use record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the backward sweep is a reverse scan. A tape is
/// confined to one thread; [`Tape::backward`] consumes it.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf. The tape keeps its own copy of the values.
    pub fn leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), requires_grad)
    }

    /// Records a gradient-tracked leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor, true)
    }

    /// Records an untracked leaf, taking ownership of its values.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push_leaf(shape, tensor.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Some(Arc::new(data)),
            requires_grad,
            inputs: Vec::new(),
            rule: None,
            name: "leaf",
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        if var.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        self.nodes
            .get(var.index)
            .ok_or_else(|| Error::Tape(format!("no node {}", var.index)))
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(&self.node(var)?.shape)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.node(var)?.requires_grad)
    }

    pub(crate) fn value_arc(&self, var: Var) -> Result<Arc<Vec<T>>> {
        let node = self.node(var)?;
        node.value.clone().ok_or_else(|| {
            Error::Tape(format!(
                "value of node {} ({}) was released",
                var.index, node.name
            ))
        })
    }

    pub fn value(&self, var: Var) -> Result<&[T]> {
        let node = self.node(var)?;
        node.value.as_deref().map(Vec::as_slice).ok_or_else(|| {
            Error::Tape(format!(
                "value of node {} ({}) was released",
                var.index, node.name
            ))
        })
    }

    pub fn tensor(&self, var: Var) -> Result<Tensor<T>> {
        Tensor::new(self.shape(var)?.to_vec(), self.value(var)?.to_vec())
    }

    pub fn item(&self, var: Var) -> Result<T> {
        self.tensor(var)?.item()
    }

    /// Drops the tape's reference to a forward value that no later forward op
    /// will read. Backward rules keep their own references to whatever they
    /// saved, so this never changes gradients; it only bounds peak memory.
    pub fn forget(&mut self, var: Var) -> Result<()> {
        self.node(var)?;
        self.nodes[var.index].value = None;
        Ok(())
    }

    pub(crate) fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs
            .iter()
            .any(|&v| self.nodes.get(v.index).is_some_and(|n| n.requires_grad))
    }

    /// Appends an op output. `rule` is only kept when some input tracks
    /// gradients.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        value: impl Into<Arc<Vec<T>>>,
        rule: Option<Box<dyn Backward<T>>>,
    ) -> Result<Var> {
        let value = value.into();
        for &v in inputs {
            self.node(v)?;
        }
        let len = check_shape(&shape)?;
        if len != value.len() {
            return Err(Error::Dimension(format!(
                "{name}: output shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        if cfg!(debug_assertions) && !value.iter().all(|e| e.is_finite()) {
            let inputs_finite = inputs.iter().all(|&v| {
                self.nodes[v.index]
                    .value
                    .as_ref()
                    .is_none_or(|x| x.iter().all(|e| e.is_finite()))
            });
            debug_assert!(!inputs_finite, "{name} produced non-finite values from finite inputs");
        }
        let requires_grad = self.any_requires_grad(inputs);
        self.nodes.push(Node {
            shape,
            value: Some(value),
            requires_grad,
            inputs: inputs.iter().map(|v| v.index).collect(),
            rule: if requires_grad { rule } else { None },
            name,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records an op whose forward value was computed outside the tape.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        let name = rule.name();
        let shape = output.shape().to_vec();
        self.push(name, inputs, shape, output.into_data(), Some(rule))
    }

    /// Hash over every piecewise branch taken during the forward pass. Two
    /// evaluations with equal signatures took identical ReLU/max-pool/clamp
    /// branches.
    pub fn activation_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(sig) = node.rule.as_ref().and_then(|r| r.kink_signature()) {
                (i, sig).hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient of every
    /// tracked leaf. Consumes the tape: forward values and saved contexts are
    /// released, and any later use of the tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &mut self.nodes[i];
            node.value = None;
            let Some(rule) = node.rule.take() else {
                if node.inputs.is_empty() && node.requires_grad {
                    leaf_grads[i] = Some(g);
                }
                continue;
            };
            let inputs = std::mem::take(&mut node.inputs);
            let needs: Vec<bool> = inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = rule.backward(&g, &needs);
            drop(rule);
            for ((&j, gj), need) in inputs.iter().zip(input_grads).zip(needs) {
                let Some(gj) = gj else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(gj.len(), self.nodes[j].shape.iter().product::<usize>());
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(gj),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        self.nodes.iter_mut().for_each(|n| {
            n.value = None;
            n.rule = None;
        });
        self.consumed = true;
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
            shapes,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::Tape("variable is not from this backward pass".into()));
        }
        Ok(())
    }

    /// Gradient of a tracked leaf, or `None` when no path reached it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.check(var).ok()?;
        self.grads[var.index].as_deref()
    }

    /// Gradient as a tensor; zeros when the leaf was unreachable.
    pub fn tensor(&self, var: Var) -> Result<Tensor<T>> {
        self.check(var)?;
        let shape = self.shapes[var.index].clone();
        match &self.grads[var.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Adds this pass's gradient for `var` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor<T>) -> Result<()> {
        self.check(var)?;
        if self.shapes[var.index] != target.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match tensor {:?}",
                self.shapes[var.index],
                target.shape()
            )));
        }
        match &self.grads[var.index] {
            Some(g) => target.accumulate_grad(g),
            None => {
                target.enable_grad();
                Ok(())
            }
        }
    }
}
