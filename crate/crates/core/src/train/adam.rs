use crate::model::{Gradients, ParamSet};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every trainable parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<E: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// Indexed like the parameter set; `None` for buffers.
    m: Vec<Option<Tensor<E>>>,
    v: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Adam<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        let mut m = vec![None; params.len()];
        let mut v = vec![None; params.len()];
        for (id, e) in params.trainable() {
            let z = Tensor::from_vec(e.value.dims(), vec![E::zero(); e.value.numel()]).expect("shape is valid");
            m[id.index()] = Some(z.clone());
            v[id.index()] = Some(z);
        }
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, index: usize) -> Option<(&Tensor<E>, &Tensor<E>)> {
        Some((self.m.get(index)?.as_ref()?, self.v.get(index)?.as_ref()?))
    }

    pub(crate) fn moments_mut(&mut self, index: usize) -> Option<(&mut Tensor<E>, &mut Tensor<E>)> {
        Some((self.m.get_mut(index)?.as_mut()?, self.v.get_mut(index)?.as_mut()?))
    }

    /// One bias-corrected update of every trainable parameter.
    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &Gradients<E>, lr: f64) -> Result<()> {
        let ids: Vec<_> = params.trainable().map(|(id, _)| id).collect();
        for &id in &ids {
            if grads.get(id).is_none() {
                return Err(Error::MissingGradient(params.entry(id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (
                self.m[id.index()].as_mut().expect("trainable has moments"),
                self.v[id.index()].as_mut().expect("trainable has moments"),
            );
            let theta = params.get_mut(id);
            for (((p, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
                *mi = E::of(mn);
                *vi = E::of(vn);
                let mhat = mn / c1;
                let vhat = vn / c2;
                *p = E::of(p.as_f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}
