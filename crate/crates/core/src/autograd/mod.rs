//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation of one forward pass as
//! a node holding its input node ids and a backward rule. Nodes are appended
//! in execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] replays it in reverse, visiting each node once.
//!
//! Policy: one tape per forward pass. `backward` consumes the tape; gradients
//! are returned as a [`Gradients`] value and accumulate into a
//! [`ParamStore`] only when the caller calls [`ParamStore::accumulate`],
//! until [`ParamStore::zero_grad`].
//!
//! A tape built with [`Tape::inference`] records nothing: intermediate values
//! are dropped as soon as the last [`Var`] referencing them goes away.

mod elementwise;
mod linalg;
mod reduce;
mod shape;

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule: given dL/d(output) and which inputs need a gradient,
/// return dL/d(input) for each input (same order as recorded).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// A value produced during a forward pass, optionally linked to a tape node.
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<usize>,
    value: Tensor<T>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value.dim(axis)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var {
            node: None,
            value: self.value.clone(),
        }
    }
}

pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Tape<'static, T> {
    /// A recording tape with no parameter store (for free-standing functions).
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording tape: forward only, no gradients, no retained intermediates.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A gradient-carrying input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return Var { node: None, value };
        }
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            param: None,
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { node: None, value }
    }

    /// Reads a parameter from the attached store as a leaf.
    ///
    /// # Panics
    /// If the tape was created without a parameter store.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let store = self
            .params
            .expect("tape has no parameter store attached");
        let value = store.value(id).clone();
        if !self.recording {
            return Var { node: None, value };
        }
        let node = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            param: Some(id),
        });
        Var {
            node: Some(node),
            value,
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wraps `value` as the output of an operation over `inputs`.
    ///
    /// Nothing is recorded when the tape is not recording or no input
    /// carries a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<T> {
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Var { node: None, value };
        }
        let id = self.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// Back-propagates from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node.ok_or(Error::DetachedGraph)?;
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));

        let mut leaves = HashMap::new();
        let mut params: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                if let Some(pid) = node.param {
                    let merged = match params.remove(&pid) {
                        Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
                        None => g.clone(),
                    };
                    params.insert(pid, merged);
                }
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&g, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(ig)) = (input, ig) else { continue };
                grads[*input] = Some(match grads[*input].take() {
                    None => ig,
                    Some(prev) => prev.zip_map(&ig, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`] (None if unreachable).
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.leaves.get(&id))
    }

    /// Gradient of a parameter, summed over every use in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // L = sum(u + u) with u = 2x  ⇒ dL/dx = 4
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let u = tape.mul_scalar(&x, 2.0);
        let v = tape.add(&u, &u).unwrap();
        let loss = tape.sum_all(&v);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(
            tape.backward(&x),
            Err(Error::NonScalarLoss(_))
        ));
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(&c), Err(Error::DetachedGraph)));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut store = ParamStore::<f32>::new();
        let w = store.insert("w", Tensor::ones([3])).unwrap();
        let tape = Tape::inference(&store);
        let p = tape.param(w);
        let y = tape.mul(&p, &p).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn reused_parameter_gradients_sum() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_f64([1], &[2.0]).unwrap()).unwrap();
        let tape = Tape::with_params(&store);
        // two independent reads of the same parameter
        let a = tape.param(w);
        let b = tape.param(w);
        let loss = tape.sum_all(&tape.mul(&a, &b).unwrap());
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[4.0]);
        store.accumulate(&grads).unwrap();
        store.accumulate(&grads).unwrap();
        assert_eq!(store.grad(w).unwrap().data(), &[8.0]);
        store.zero_grad();
        assert!(store.grad(w).is_none());
    }
}
