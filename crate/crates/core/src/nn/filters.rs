//! Pooling statistics and fixed (non-learnable) differential filters.

use crate::tensor::{reduce, BackwardRule, Element, ReduceKind, Shape, Tape, Tensor, Var};
use crate::Result;

/// Per-pixel mean or max across channels: N×C×H×W → N×1×H×W.
pub fn channel_pool<E: Element>(tape: &mut Tape<E>, kind: ReduceKind, x: Var) -> Result<Var> {
    tape.value(x).nchw()?;
    reduce(tape, kind, x, &[1])
}

/// Per-channel spatial mean: N×C×H×W → N×C×1×1.
pub fn spatial_gap<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    tape.value(x).nchw()?;
    reduce(tape, ReduceKind::Mean, x, &[2, 3])
}

/// Zero-padded 5-point Laplacian of every plane.
fn laplace_planes<E: Element>(src: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let four = E::of(4.0);
    let mut out = vec![E::zero(); src.len()];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = -four * s[i * w + j];
                if i > 0 {
                    acc = acc + s[(i - 1) * w + j];
                }
                if i + 1 < h {
                    acc = acc + s[(i + 1) * w + j];
                }
                if j > 0 {
                    acc = acc + s[i * w + j - 1];
                }
                if j + 1 < w {
                    acc = acc + s[i * w + j + 1];
                }
                o[i * w + j] = acc;
            }
        }
    }
    out
}

struct Laplacian;

impl<E: Element> BackwardRule<E> for Laplacian {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        // the zero-padded symmetric stencil is self-adjoint
        vec![needs[0].then(|| {
            let [n, c, h, w] = inputs[0].shape().as_nchw();
            Tensor::from_parts(g.shape().clone(), laplace_planes(g.data(), n * c, h, w))
        })]
    }

    fn name(&self) -> &'static str {
        "laplacian"
    }
}

/// Per-channel convolution with `[[0,1,0],[1,−4,1],[0,1,0]]`, zero padding.
pub fn laplacian<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    let value = Tensor::from_parts(t.shape().clone(), laplace_planes(t.data(), n * c, h, w));
    tape.record(&[x], value, Laplacian)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Horizontal,
    Vertical,
}

struct ForwardDiff {
    axis: Axis,
}

impl<E: Element> BackwardRule<E> for ForwardDiff {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let [n, c, h, w] = inputs[0].shape().as_nchw();
            let [_, _, ho, wo] = output.shape().as_nchw();
            let mut out = vec![E::zero(); inputs[0].numel()];
            for p in 0..n * c {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = g.data()[(p * ho + i) * wo + j];
                        let here = (p * h + i) * w + j;
                        let next = match self.axis {
                            Axis::Horizontal => here + 1,
                            Axis::Vertical => here + w,
                        };
                        out[next] = out[next] + gv;
                        out[here] = out[here] - gv;
                    }
                }
            }
            Tensor::from_parts(inputs[0].shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "forward_difference"
    }
}

fn forward_diff<E: Element>(tape: &mut Tape<E>, x: Var, axis: Axis) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    let (ho, wo) = match axis {
        Axis::Horizontal => (h, w.saturating_sub(1)),
        Axis::Vertical => (h.saturating_sub(1), w),
    };
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let here = (p * h + i) * w + j;
                let next = match axis {
                    Axis::Horizontal => here + 1,
                    Axis::Vertical => here + w,
                };
                out.push(d[next] - d[here]);
            }
        }
    }
    let value = Tensor::from_parts(Shape::new(&[n, c, ho, wo])?, out);
    tape.record(&[x], value, ForwardDiff { axis })
}

/// Forward differences `(gh, gv)`: `gh[i,j] = x[i,j+1] − x[i,j]` has width
/// W−1 and `gv` has height H−1. Degenerate axes yield empty tensors.
pub fn spatial_gradients<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<(Var, Var)> {
    let gh = forward_diff(tape, x, Axis::Horizontal)?;
    let gv = forward_diff(tape, x, Axis::Vertical)?;
    Ok((gh, gv))
}
