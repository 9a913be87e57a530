//! Training objectives. Pixel values are expected in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::nn::{laplacian, spatial_gradients};
use crate::tensor::{add, add_scalar, reduce, scale, sqrt, square, sub, sum_all, Element, ReduceKind, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Squared error, for synthetic Gaussian noise.
    Mse,
    /// Charbonnier + edge + total variation, for real noise.
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda_edge: f64,
    pub lambda_tv: f64,
    pub epsilon: f64,
    /// Average the Charbonnier norms over images instead of taking one
    /// norm over the whole batch.
    pub per_image: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Mse,
            lambda_edge: 0.1,
            lambda_tv: 0.05,
            epsilon: 1e-3,
            per_image: false,
        }
    }
}

impl LossConfig {
    pub fn real() -> Self {
        LossConfig {
            mode: LossMode::Real,
            ..Self::default()
        }
    }
}

fn same_shape<E: Element>(tape: &Tape<E>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (ta, tb) = (tape.try_value(a)?, tape.try_value(b)?);
    if ta.shape() != tb.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape().clone(),
            rhs: tb.shape().clone(),
        });
    }
    Ok(())
}

/// `Σᵢ ‖x̂ᵢ − xᵢ‖² / 2N` over a batch of N images.
pub fn mse_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, "mse_loss", pred, target)?;
    let n = tape.value(pred).dims().first().copied().unwrap_or(1).max(1);
    let d = sub(tape, pred, target)?;
    let sq = square(tape, d)?;
    let s = sum_all(tape, sq)?;
    scale(tape, s, 1.0 / (2 * n) as f64)
}

fn charbonnier_of_diff<E: Element>(tape: &mut Tape<E>, d: Var, eps: f64, per_image: bool) -> Result<Var> {
    let sq = square(tape, d)?;
    if per_image {
        let rank = tape.value(sq).shape().rank();
        let axes: Vec<usize> = (1..rank).collect();
        let n = tape.value(sq).dims().first().copied().unwrap_or(1).max(1);
        let s = reduce(tape, ReduceKind::Sum, sq, &axes)?;
        let s = add_scalar(tape, s, eps * eps)?;
        let r = sqrt(tape, s)?;
        let total = sum_all(tape, r)?;
        scale(tape, total, 1.0 / n as f64)
    } else {
        let s = sum_all(tape, sq)?;
        let s = add_scalar(tape, s, eps * eps)?;
        sqrt(tape, s)
    }
}

/// `√(‖x̂ − x‖² + ε²)`.
pub fn charbonnier_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "charbonnier_loss", pred, target)?;
    let d = sub(tape, pred, target)?;
    charbonnier_of_diff(tape, d, eps, false)
}

/// Charbonnier distance between the zero-padded Laplacians of both images.
pub fn edge_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "edge_loss", pred, target)?;
    let d = sub(tape, pred, target)?;
    let ld = laplacian(tape, d)?;
    charbonnier_of_diff(tape, ld, eps, false)
}

/// Sum of squared horizontal and vertical forward differences.
pub fn tv_loss<E: Element>(tape: &mut Tape<E>, map: Var) -> Result<Var> {
    let (gh, gv) = spatial_gradients(tape, map)?;
    let h = square(tape, gh)?;
    let h = sum_all(tape, h)?;
    let v = square(tape, gv)?;
    let v = sum_all(tape, v)?;
    add(tape, h, v)
}

/// The configured training objective. `noise_map` is only used in real mode.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    pred: Var,
    target: Var,
    noise_map: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    match cfg.mode {
        LossMode::Mse => mse_loss(tape, pred, target),
        LossMode::Real => {
            same_shape(tape, "total_loss", pred, target)?;
            let d = sub(tape, pred, target)?;
            let char = charbonnier_of_diff(tape, d, cfg.epsilon, cfg.per_image)?;
            let ld = laplacian(tape, d)?;
            let edge = charbonnier_of_diff(tape, ld, cfg.epsilon, cfg.per_image)?;
            let tv = tv_loss(tape, noise_map)?;
            let edge = scale(tape, edge, cfg.lambda_edge)?;
            let tv = scale(tape, tv, cfg.lambda_tv)?;
            let s = add(tape, char, edge)?;
            add(tape, s, tv)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradCheck, Tensor};

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap()
    }

    fn img(dims: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|i| (i as f64 * 0.917 + seed).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let x = img(&[1, 1, 2, 2], 0.0);
        let xh = x.map(|v| v + 0.1);
        let v = eval(|t| {
            let (a, b) = (t.constant(xh.clone()), t.constant(x.clone()));
            mse_loss(t, a, b)
        });
        assert!((v - 0.02).abs() < 1e-12);
        let v0 = eval(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
            mse_loss(t, a, b)
        });
        assert_eq!(v0, 0.0);
        // duplicated batch keeps the value
        let x2 = Tensor::from_vec(&[2, 1, 2, 2], [x.data(), x.data()].concat()).unwrap();
        let xh2 = Tensor::from_vec(&[2, 1, 2, 2], [xh.data(), xh.data()].concat()).unwrap();
        let v2 = eval(|t| {
            let (a, b) = (t.constant(xh2), t.constant(x2));
            mse_loss(t, a, b)
        });
        assert!((v2 - v).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_examples() {
        let x = img(&[1, 1, 3, 3], 1.0);
        let same = eval(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
            charbonnier_loss(t, a, b, 1e-3)
        });
        assert!((same - 1e-3).abs() < 1e-12);
        let mut xh = x.clone();
        xh.data_mut()[4] += 0.3;
        let v = eval(|t| {
            let (a, b) = (t.constant(xh), t.constant(x.clone()));
            charbonnier_loss(t, a, b, 1e-3)
        });
        assert!((v - (0.09f64 + 1e-6).sqrt()).abs() < 1e-9);
        assert!((v - 0.3000017).abs() < 1e-7);
    }

    #[test]
    fn charbonnier_gradient_is_finite_at_zero_residual() {
        let x = img(&[1, 1, 4, 4], 2.0);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(x.clone(), true);
        let b = tape.constant(x);
        let l = charbonnier_loss(&mut tape, a, b, 1e-3).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(a).unwrap();
        let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm <= 1.0);
    }

    #[test]
    fn edge_loss_of_a_shift_sees_only_the_border() {
        // zero padding: a constant offset c leaves −c·(4 − neighbours) at
        // each border pixel and 0 inside
        let (h, w, c) = (4usize, 5usize, 0.2);
        let x = img(&[1, 1, h, w], 3.0);
        let same = eval(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
            edge_loss(t, a, b, 1e-3)
        });
        assert!((same - 1e-3).abs() < 1e-12);
        let v = eval(|t| {
            let (a, b) = (t.constant(x.map(|v| v + c)), t.constant(x.clone()));
            edge_loss(t, a, b, 1e-3)
        });
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                let missing = [i == 0, i == h - 1, j == 0, j == w - 1].iter().filter(|&&b| b).count();
                s += (c * missing as f64).powi(2);
            }
        }
        assert!((v - (s + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn edge_is_charbonnier_of_laplacians() {
        let (x, y) = (img(&[2, 1, 5, 5], 0.3), img(&[2, 1, 5, 5], 1.9));
        let a = eval(|t| {
            let (p, q) = (t.constant(x.clone()), t.constant(y.clone()));
            edge_loss(t, p, q, 1e-3)
        });
        let b = eval(|t| {
            let (p, q) = (t.constant(x.clone()), t.constant(y.clone()));
            let (lp, lq) = (laplacian(t, p)?, laplacian(t, q)?);
            charbonnier_loss(t, lp, lq, 1e-3)
        });
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let v = eval(|t| {
            let m = t.constant(Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 1.0, 0.0])?);
            tv_loss(t, m)
        });
        assert_eq!(v, 2.0);
        let v = eval(|t| {
            let m = t.constant(Tensor::full(&[1, 1, 4, 4], 0.7)?);
            tv_loss(t, m)
        });
        assert_eq!(v, 0.0);
        let (h, w, s) = (6, 7, 0.5);
        let data: Vec<f64> = (0..h * w).map(|i| if i / w >= 3 { s } else { 0.0 }).collect();
        let v = eval(|t| {
            let m = t.constant(Tensor::from_vec(&[1, 1, h, w], data)?);
            tv_loss(t, m)
        });
        assert!((v - w as f64 * s * s).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let x = img(&[1, 1, 6, 6], 0.0);
        let y = img(&[1, 1, 6, 6], 0.7);
        let map = Tensor::full(&[1, 1, 6, 6], 0.3).unwrap();
        let cfg = LossConfig::real();
        assert_eq!((cfg.lambda_edge, cfg.lambda_tv, cfg.epsilon), (0.1, 0.05, 1e-3));
        let same = eval(|t| {
            let (a, b, m) = (t.constant(x.clone()), t.constant(x.clone()), t.constant(map.clone()));
            total_loss(t, a, b, m, &cfg)
        });
        assert!((same - (1e-3 + 0.1 * 1e-3)).abs() < 1e-12);
        let zero = LossConfig {
            lambda_edge: 0.0,
            lambda_tv: 0.0,
            ..cfg
        };
        let a = eval(|t| {
            let (p, q, m) = (t.constant(y.clone()), t.constant(x.clone()), t.constant(x.clone()));
            total_loss(t, p, q, m, &zero)
        });
        let b = eval(|t| {
            let (p, q) = (t.constant(y.clone()), t.constant(x.clone()));
            charbonnier_loss(t, p, q, 1e-3)
        });
        assert_eq!(a, b);
        let mut prev = 0.0;
        for lam in [0.0, 0.05, 0.1, 0.5] {
            let c = LossConfig { lambda_edge: lam, lambda_tv: lam, ..cfg };
            let v = eval(|t| {
                let (p, q, m) = (t.constant(y.clone()), t.constant(x.clone()), t.constant(y.clone()));
                total_loss(t, p, q, m, &c)
            });
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn per_image_averages_norms() {
        let x = img(&[2, 1, 3, 3], 0.0);
        let mut y = x.clone();
        y.data_mut()[0] += 0.3;
        y.data_mut()[9] += 0.4;
        let cfg = LossConfig {
            per_image: true,
            lambda_edge: 0.0,
            lambda_tv: 0.0,
            ..LossConfig::real()
        };
        let v = eval(|t| {
            let (p, q) = (t.constant(y), t.constant(x.clone()));
            total_loss(t, p, q, q, &cfg)
        });
        let expect = ((0.09f64 + 1e-6).sqrt() + (0.16f64 + 1e-6).sqrt()) / 2.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let b = t.constant(Tensor::zeros(&[1, 1, 2, 3]).unwrap());
        assert!(mse_loss(&mut t, a, b).is_err());
        assert!(charbonnier_loss(&mut t, a, b, 1e-3).is_err());
        assert!(edge_loss(&mut t, a, b, 1e-3).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let x = img(&[1, 1, 6, 6], 0.1);
        let y = img(&[1, 1, 6, 6], 2.3);
        let chk = GradCheck::new(1e-6, 1e-4);
        let target = y.clone();
        let r = chk.check(&x, |t, v| {
            let c = t.constant(target.clone());
            mse_loss(t, v, c)
        });
        assert!(r.passed(), "mse {r}");
        let r = chk.check(&x, |t, v| {
            let c = t.constant(target.clone());
            charbonnier_loss(t, v, c, 1e-3)
        });
        assert!(r.passed(), "charbonnier {r}");
        let r = chk.check(&x, |t, v| {
            let c = t.constant(target.clone());
            edge_loss(t, v, c, 1e-3)
        });
        assert!(r.passed(), "edge {r}");
        let r = chk.check(&x, |t, v| tv_loss(t, v));
        assert!(r.passed(), "tv {r}");
        let cfg = LossConfig::real();
        let r = chk.run(&[x.clone(), y.clone()], |t, v| {
            let c = t.constant(target.clone());
            total_loss(t, v[0], c, v[1], &cfg)
        });
        assert!(r.passed(), "total {r}");
    }
}
