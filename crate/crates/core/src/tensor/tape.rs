//! Wengert tape: operations are appended during the forward pass and
//! replayed in reverse by [`Tape::backward`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Element, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` is false for inputs that do not require a gradient; rules may
/// return `None` for those and skip the work.
pub trait BackwardRule<E: Element>: Send {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>>;

    fn name(&self) -> &'static str;
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    rule: Option<Box<dyn BackwardRule<E>>>,
    released: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-use for differentiation: after [`Tape::backward`] the
/// gradients must be collected and cleared with [`Tape::zero_grads`] before
/// another backward pass is allowed.
pub struct Tape<E: Element = f32> {
    id: u64,
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: Vec::new(),
            rule: None,
            released: false,
        })
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Appends the result of an operation together with its backward rule.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<E>,
        rule: impl BackwardRule<E> + 'static,
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            self.check(v)?;
            idx.push(v.index);
        }
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = idx.iter().all(|&i| self.nodes[i].value.is_finite());
            debug_assert!(
                !inputs_finite,
                "{} produced a non-finite value from finite inputs",
                rule.name()
            );
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: idx,
            rule: Some(Box::new(rule)),
            released: false,
        }))
    }

    fn push(&mut self, node: Node<E>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable #{} does not belong to this tape",
                v.index
            )));
        }
        if self.nodes[v.index].released {
            return Err(Error::Tape(format!("value of variable #{} was released", v.index)));
        }
        Ok(())
    }

    /// Frees the values of nodes recorded at or after `start` that no
    /// gradient flows through, except those in `keep`.
    ///
    /// Lets long inference passes drop activations they will not revisit.
    pub fn release_from(&mut self, start: usize, keep: &[Var]) {
        for (i, n) in self.nodes.iter_mut().enumerate().skip(start) {
            if n.requires_grad || n.released || keep.iter().any(|k| k.tape == self.id && k.index == i) {
                continue;
            }
            n.value = Tensor::from_parts(super::Shape(vec![0]), Vec::new());
            n.released = true;
        }
    }

    /// Value of `v`.
    ///
    /// # Panics
    /// If `v` was recorded on another tape; see [`Tape::try_value`].
    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.check(v).expect("variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<E>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.index).and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get_mut(v.index).and_then(|n| n.grad.take())
    }

    /// Clears every stored gradient and re-arms [`Tape::backward`].
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    ///
    /// Intermediate gradients are released as soon as they have been
    /// propagated, so only leaf gradients remain afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)
            .map_err(|_| Error::Tape("loss is not recorded on this tape".into()))?;
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran; call zero_grads() before running it again".into(),
            ));
        }
        let loss_node = &self.nodes[loss.index];
        if loss_node.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::Tape(
                "loss does not depend on any variable that requires a gradient".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.index].grad = Some(Tensor::from_parts(
            loss_node.value.shape().clone(),
            vec![E::one()],
        ));

        for i in (0..=loss.index).rev() {
            if self.nodes[i].rule.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad_out) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|&j| &before[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| before[j].requires_grad)
                .collect();
            let rule = node.rule.as_ref().expect("checked above");
            let grads = rule.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{}", rule.name());
            let targets = node.inputs.clone();
            for (j, g) in targets.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if !before[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), before[j].value.shape(), "{}", rule.name());
                accumulate(&mut before[j].grad, g);
            }
        }
        Ok(())
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, mul, scale, sum_all};

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1., -2., 3., 0.5, 9., -1.]).unwrap(), true);
        let loss = sum_all(&mut tape, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gives_x() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![0.3, -1.7, 2.0, 4.5];
        let x = tape.leaf(Tensor::from_vec(&[4], vals.clone()).unwrap(), true);
        let sq = mul(&mut tape, x, x).unwrap();
        let s = sum_all(&mut tape, sq).unwrap();
        let loss = scale(&mut tape, s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        // d/dx (f(x) + g(x)) with f = 3x, g = x*x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, -0.25]).unwrap(), true);
        let f = scale(&mut tape, x, 3.0).unwrap();
        let g = mul(&mut tape, x, x).unwrap();
        let h = add(&mut tape, f, g).unwrap();
        let loss = sum_all(&mut tape, h).unwrap();
        tape.backward(loss).unwrap();
        let expected: Vec<f64> = [1.0, 2.0, -0.25].iter().map(|v| 3.0 + 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        let loss = sum_all(&mut tape, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
        tape.zero_grads();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = b.leaf(Tensor::ones(&[1]).unwrap(), true);
        let loss = sum_all(&mut b, x).unwrap();
        assert!(a.backward(loss).is_err());
        let y = a.leaf(Tensor::ones(&[1]).unwrap(), true);
        assert!(add(&mut a, y, x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]).unwrap(), true);
        let c = tape.constant(Tensor::full(&[2], 4.0).unwrap());
        let p = mul(&mut tape, x, c).unwrap();
        let loss = sum_all(&mut tape, p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn released_values_are_unavailable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[2]).unwrap());
        let start = tape.len();
        let a = scale(&mut tape, x, 2.0).unwrap();
        let b = scale(&mut tape, a, 2.0).unwrap();
        tape.release_from(start, &[b]);
        assert!(tape.try_value(a).is_err());
        assert_eq!(tape.value(b).data(), &[4.0, 4.0]);
        assert_eq!(tape.value(x).data(), &[1.0, 1.0]);
    }
}
