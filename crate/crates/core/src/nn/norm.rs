//! Batch normalisation over the N, H, W axes of an NCHW tensor.

use crate::tensor::{BackwardRule, Element, Tape, Tensor, Var};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise by batch statistics and update the running statistics.
    Train,
    /// Normalise by the running statistics only.
    Eval,
}

/// Non-learnable state of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

struct BatchNormTrain<E> {
    xhat: Vec<E>,
    inv_std: Vec<E>,
}

impl<E: Element> BackwardRule<E> for BatchNormTrain<E> {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, c, h, w] = x.shape().as_nchw();
        let plane = h * w;
        let m = E::of((n * plane) as f64);
        let gd = g.data();
        let mut sum_g = vec![E::zero(); c];
        let mut sum_gx = vec![E::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * plane;
                for i in s..s + plane {
                    sum_g[ch] = sum_g[ch] + gd[i];
                    sum_gx[ch] = sum_gx[ch] + gd[i] * self.xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut out = vec![E::zero(); x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    let k = gamma.data()[ch] * self.inv_std[ch] / m;
                    let s = (b * c + ch) * plane;
                    for i in s..s + plane {
                        out[i] = k * (m * gd[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch]);
                    }
                }
            }
            Tensor::from_parts(x.shape().clone(), out)
        });
        let ggamma = needs[1].then(|| Tensor::from_parts(gamma.shape().clone(), sum_gx.clone()));
        let gbeta = needs[2].then(|| Tensor::from_parts(inputs[2].shape().clone(), sum_g.clone()));
        vec![gx, ggamma, gbeta]
    }

    fn name(&self) -> &'static str {
        "batch_norm(train)"
    }
}

struct BatchNormEval<E> {
    xhat: Vec<E>,
    inv_std: Vec<E>,
}

impl<E: Element> BackwardRule<E> for BatchNormEval<E> {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, c, h, w] = x.shape().as_nchw();
        let plane = h * w;
        let gd = g.data();
        let gx = needs[0].then(|| {
            let mut out = vec![E::zero(); x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    let k = gamma.data()[ch] * self.inv_std[ch];
                    let s = (b * c + ch) * plane;
                    for i in s..s + plane {
                        out[i] = gd[i] * k;
                    }
                }
            }
            Tensor::from_parts(x.shape().clone(), out)
        });
        let mut sum_g = vec![E::zero(); c];
        let mut sum_gx = vec![E::zero(); c];
        if needs[1] || needs[2] {
            for b in 0..n {
                for ch in 0..c {
                    let s = (b * c + ch) * plane;
                    for i in s..s + plane {
                        sum_g[ch] = sum_g[ch] + gd[i];
                        sum_gx[ch] = sum_gx[ch] + gd[i] * self.xhat[i];
                    }
                }
            }
        }
        let ggamma = needs[1].then(|| Tensor::from_parts(gamma.shape().clone(), sum_gx));
        let gbeta = needs[2].then(|| Tensor::from_parts(inputs[2].shape().clone(), sum_g));
        vec![gx, ggamma, gbeta]
    }

    fn name(&self) -> &'static str {
        "batch_norm(eval)"
    }
}

/// Batch normalisation `y = γ·(x − μ)/√(σ² + eps) + β`.
///
/// In [`NormMode::Train`] μ and σ² are the biased batch statistics, the
/// output is differentiated through them, and the running statistics are
/// updated as `r ← (1 − momentum)·r + momentum·stat` (unbiased variance).
/// In [`NormMode::Eval`] the running statistics are used as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &mut [E],
    running_var: &mut [E],
    cfg: BatchNormConfig,
    mode: NormMode,
) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    for (name, len) in [
        ("gamma", tape.value(gamma).numel()),
        ("beta", tape.value(beta).numel()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(Error::InvalidArgument(format!(
                "batch_norm {name} has {len} entries for {c} channels"
            )));
        }
    }
    let plane = h * w;
    let d = t.data();
    let count = n * plane;
    let eps = E::of(cfg.eps);

    let (mean, var): (Vec<E>, Vec<E>) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::InvalidArgument(
                    "batch_norm in train mode needs at least two values per channel".into(),
                ));
            }
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mut s = E::zero();
                for b in 0..n {
                    let o = (b * c + ch) * plane;
                    s = s + d[o..o + plane].iter().copied().sum::<E>();
                }
                let mu = s / E::of(count as f64);
                let mut sq = E::zero();
                for b in 0..n {
                    let o = (b * c + ch) * plane;
                    sq = sq + d[o..o + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<E>();
                }
                mean[ch] = mu;
                var[ch] = sq / E::of(count as f64);
            }
            let mom = E::of(cfg.momentum);
            let unbias = E::of(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                running_mean[ch] = (E::one() - mom) * running_mean[ch] + mom * mean[ch];
                running_var[ch] = (E::one() - mom) * running_var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        NormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let gd = tape.value(gamma).data();
    let bd = tape.value(beta).data();
    let mut xhat = vec![E::zero(); t.numel()];
    let mut out = vec![E::zero(); t.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let value = Tensor::from_parts(t.shape().clone(), out);
    match mode {
        NormMode::Train => tape.record(&[x, gamma, beta], value, BatchNormTrain { xhat, inv_std }),
        NormMode::Eval => tape.record(&[x, gamma, beta], value, BatchNormEval { xhat, inv_std }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{square, sum_all, GradCheck};

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 43.758).sin() * 2.0 + 0.3 * (i % 3) as f64).collect()
    }

    #[test]
    fn eval_with_unit_stats() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], pseudo(8, 0.0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = batch_norm(&mut tape, xv, g, b, &mut rm, &mut rv, BatchNormConfig::default(), NormMode::Eval).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, e) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - e * k).abs() < 1e-15);
        }
        assert_eq!((rm, rv), (vec![0.0; 2], vec![1.0; 2]));
    }

    fn channel_stats(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (n, c, h, w) = t.nchw().unwrap();
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|b| {
                        let o = (b * c + ch) * h * w;
                        t.data()[o..o + h * w].to_vec()
                    })
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn train_normalises_and_applies_affine() {
        let x = Tensor::from_vec(&[3, 2, 4, 4], pseudo(96, 1.0).iter().map(|v| v * 3.0 + 5.0).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g1 = tape.constant(Tensor::ones(&[2]).unwrap());
        let b0 = tape.constant(Tensor::zeros(&[2]).unwrap());
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = batch_norm(&mut tape, xv, g1, b0, &mut rm, &mut rv, BatchNormConfig::default(), NormMode::Train).unwrap();
        for (m, v) in channel_stats(tape.value(y)) {
            assert!(m.abs() <= 1e-6, "mean {m}");
            assert!((v - 1.0).abs() <= 1e-4, "var {v}");
        }
        // running stats moved towards the batch statistics
        assert!(rm.iter().all(|&m| m > 0.0));

        let g2 = tape.constant(Tensor::full(&[2], 2.0).unwrap());
        let b3 = tape.constant(Tensor::full(&[2], 3.0).unwrap());
        let y = batch_norm(&mut tape, xv, g2, b3, &mut rm, &mut rv, BatchNormConfig::default(), NormMode::Train).unwrap();
        for (m, v) in channel_stats(tape.value(y)) {
            assert!((m - 3.0).abs() <= 1e-6);
            assert!((v.sqrt() - 2.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn running_variance_stays_non_negative() {
        let mut rm = vec![0.0f32; 1];
        let mut rv = vec![1.0f32; 1];
        for step in 0..20 {
            let mut tape = Tape::<f32>::new();
            let vals: Vec<f32> = (0..8).map(|i| ((i * 7 + step) % 5) as f32 * 0.1).collect();
            let xv = tape.constant(Tensor::from_vec(&[2, 1, 2, 2], vals).unwrap());
            let g = tape.constant(Tensor::ones(&[1]).unwrap());
            let b = tape.constant(Tensor::zeros(&[1]).unwrap());
            batch_norm(&mut tape, xv, g, b, &mut rm, &mut rv, BatchNormConfig::default(), NormMode::Train).unwrap();
            assert!(rv[0] >= 0.0);
        }
    }

    #[test]
    fn gradients_in_both_modes() {
        for mode in [NormMode::Train, NormMode::Eval] {
            let x = Tensor::from_vec(&[2, 3, 5, 5], pseudo(150, 2.0)).unwrap();
            let gamma = Tensor::from_vec(&[3], vec![0.7, 1.3, -0.4]).unwrap();
            let beta = Tensor::from_vec(&[3], vec![0.1, 0.0, -0.2]).unwrap();
            let weights = Tensor::from_vec(&[2, 3, 5, 5], pseudo(150, 9.0)).unwrap();
            let report = GradCheck::new(1e-6, 1e-4).coords(30).seed(1).run(&[x, gamma, beta], |tape, v| {
                let (mut rm, mut rv) = (vec![0.2; 3], vec![1.5; 3]);
                let y = batch_norm(tape, v[0], v[1], v[2], &mut rm, &mut rv, BatchNormConfig::default(), mode)?;
                let wv = tape.constant(weights.clone());
                let p = crate::tensor::mul(tape, y, wv)?;
                let s = square(tape, p)?;
                sum_all(tape, s)
            });
            assert!(report.passed(), "{mode:?}: {report}");
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(Tensor::ones(&[1, 2, 2, 2]).unwrap());
        let g = tape.constant(Tensor::ones(&[3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        assert!(batch_norm(&mut tape, xv, g, b, &mut rm, &mut rv, BatchNormConfig::default(), NormMode::Eval).is_err());
    }
}
