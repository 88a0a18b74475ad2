//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value and, when any parent
//! requires a gradient, a [`Backward`] rule. [`Tape::backward`] sweeps the
//! nodes in reverse insertion order, so reduction order is fixed by the
//! forward program and results are bit-reproducible.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one op.
///
/// `wants[i]` is false for parents that do not require a gradient; the
/// rule may return `None` for those.
pub trait Backward<T: Float> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        wants: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    op: &'static str,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(super::Shape::new(0, 0, 0, 0)))
    }

    /// Appends an op result. Non-finite outputs are rejected.
    pub(crate) fn record<B: Backward<T> + 'static>(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: B,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of the scalar `root` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let n = self.value(root).numel();
        if n != 1 {
            return Err(Error::Dimension {
                op: "backward",
                axis: "numel",
                expected: 1,
                found: n,
            });
        }
        self.backward_with(root, vec![T::ONE])
    }

    /// Backward sweep seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, root: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        check_len("backward_with", self.value(root).numel(), seed.len())?;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let wants: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parts = rule.backward(&inputs, &node.value, &g, &wants);
            debug_assert_eq!(parts.len(), node.parents.len(), "{}: wrong grad arity", node.op);
            for ((p, part), want) in node.parents.iter().zip(parts).zip(wants) {
                let Some(part) = part else { continue };
                if !want {
                    continue;
                }
                if !super::tensor::all_finite(&part) {
                    return Err(Error::NonFinite {
                        op: format!("{} (backward)", node.op),
                    });
                }
                debug_assert_eq!(part.len(), self.nodes[p.0].value.numel(), "{}: grad size", node.op);
                match grads[p.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, b)| *a += *b),
                    None => grads[p.0] = Some(part),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn check_len(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            op,
            axis: "numel",
            expected,
            found,
        });
    }
    Ok(())
}
