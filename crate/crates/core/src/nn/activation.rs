use crate::tensor::{BackwardRule, Element, Tape, Tensor, Var};
use crate::{Error, Result};

/// Initial slope of a PReLU activation.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

struct Pointwise {
    kind: Activation,
}

impl<E: Element> BackwardRule<E> for Pointwise {
    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let data = g
                .data()
                .iter()
                .zip(output.data())
                .map(|(&gv, &y)| match self.kind {
                    Activation::Relu => {
                        if y > E::zero() {
                            gv
                        } else {
                            E::zero()
                        }
                    }
                    Activation::Tanh => gv * (E::one() - y * y),
                    Activation::Sigmoid => gv * y * (E::one() - y),
                })
                .collect();
            Tensor::from_parts(g.shape().clone(), data)
        })]
    }

    fn name(&self) -> &'static str {
        match self.kind {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

pub fn activation<E: Element>(tape: &mut Tape<E>, kind: Activation, x: Var) -> Result<Var> {
    let value = tape.value(x).map(|v| match kind {
        Activation::Relu => v.max(E::zero()),
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => E::one() / (E::one() + (-v).exp()),
    });
    tape.record(&[x], value, Pointwise { kind })
}

pub fn relu<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    activation(tape, Activation::Relu, x)
}

pub fn tanh<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    activation(tape, Activation::Tanh, x)
}

pub fn sigmoid<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    activation(tape, Activation::Sigmoid, x)
}

struct Prelu;

impl<E: Element> BackwardRule<E> for Prelu {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, slope) = (inputs[0], inputs[1].data()[0]);
        let gx = needs[0].then(|| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > E::zero() { gv } else { gv * slope })
                .collect();
            Tensor::from_parts(x.shape().clone(), data)
        });
        let ga = needs[1].then(|| {
            let s: E = g
                .data()
                .iter()
                .zip(x.data())
                .filter(|(_, &xv)| xv <= E::zero())
                .map(|(&gv, &xv)| gv * xv)
                .sum();
            Tensor::from_parts(inputs[1].shape().clone(), vec![s])
        });
        vec![gx, ga]
    }

    fn name(&self) -> &'static str {
        "prelu"
    }
}

/// `max(x, 0) + a·min(x, 0)` with a single learnable slope `a` shared by
/// all channels.
pub fn prelu<E: Element>(tape: &mut Tape<E>, x: Var, slope: Var) -> Result<Var> {
    let a = tape.value(slope);
    if a.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "prelu slope must have one element, got shape {}",
            a.shape()
        )));
    }
    let a = a.data()[0];
    let value = tape.value(x).map(|v| if v > E::zero() { v } else { a * v });
    tape.record(&[x, slope], value, Prelu)
}
