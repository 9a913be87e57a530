//! 2× max pooling, 2× bilinear upsampling and centre cropping.

use crate::tensor::{BackwardRule, Element, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

struct MaxPool2 {
    argmax: Vec<usize>,
}

impl<E: Element> BackwardRule<E> for MaxPool2 {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let mut out = vec![E::zero(); inputs[0].numel()];
            for (&src, &gv) in self.argmax.iter().zip(g.data()) {
                out[src] = out[src] + gv;
            }
            Tensor::from_parts(inputs[0].shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "max_pool2"
    }
}

/// 2×2 max pooling with stride 2.
///
/// Odd extents are replicate-padded on the right/bottom, so the output is
/// `⌈H/2⌉×⌈W/2⌉`. Ties go to the first element in window scan order.
pub fn max_pool2<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("max_pool2 on an empty image".into()));
    }
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            let rows = [2 * i, (2 * i + 1).min(h - 1)];
            for j in 0..wo {
                let colsx = [2 * j, (2 * j + 1).min(w - 1)];
                let mut best = base + rows[0] * w + colsx[0];
                for &r in &rows {
                    for &cc in &colsx {
                        let idx = base + r * w + cc;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_parts(Shape::new(&[n, c, ho, wo])?, out);
    tape.record(&[x], value, MaxPool2 { argmax })
}

/// Source taps `(lo, hi, frac)` along one axis for 2× upsampling with
/// half-pixel centres: `src = (dst + 0.5)/2 − 0.5`, clamped to the edges.
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

struct Upsample2;

impl<E: Element> BackwardRule<E> for Upsample2 {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let x = inputs[0];
            let [n, c, h, w] = x.shape().as_nchw();
            let (ty, tx) = (taps(h), taps(w));
            let gd = g.data();
            let mut out = vec![E::zero(); x.numel()];
            for plane in 0..n * c {
                let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut out[plane * h * w..(plane + 1) * h * w];
                for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (fy, gy) = (E::of(fy), E::of(1.0 - fy));
                    for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (fx, gx) = (E::of(fx), E::of(1.0 - fx));
                        let gv = src[oi * 2 * w + oj];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gv * gy * gx;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gv * gy * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gv * fy * gx;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gv * fy * fx;
                    }
                }
            }
            Tensor::from_parts(x.shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "bilinear_upsample2"
    }
}

/// Scale-2 bilinear interpolation with half-pixel centres and edge clamping.
pub fn bilinear_upsample2<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("upsampling an empty image".into()));
    }
    let (ty, tx) = (taps(h), taps(w));
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let (fy, gy) = (E::of(fy), E::of(1.0 - fy));
            for &(x0, x1, fx) in &tx {
                let (fx, gx) = (E::of(fx), E::of(1.0 - fx));
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    let value = Tensor::from_parts(Shape::new(&[n, c, 2 * h, 2 * w])?, out);
    tape.record(&[x], value, Upsample2)
}

struct Crop {
    top: usize,
    left: usize,
}

impl<E: Element> BackwardRule<E> for Crop {
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
            for plane in 0..n * c {
                for i in 0..ho {
                    let dst = plane * h * w + (i + self.top) * w + self.left;
                    let src = (plane * ho + i) * wo;
                    out[dst..dst + wo].copy_from_slice(&g.data()[src..src + wo]);
                }
            }
            Tensor::from_parts(inputs[0].shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "crop"
    }
}

/// Centre crop to `height×width`; a no-op (still recorded) when extents match.
pub fn crop_center<E: Element>(tape: &mut Tape<E>, x: Var, height: usize, width: usize) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    if height > h || width > w {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {h}×{w} to {height}×{width}"
        )));
    }
    if (height, width) == (h, w) {
        return Ok(x);
    }
    let (top, left) = ((h - height) / 2, (w - width) / 2);
    let mut out = Vec::with_capacity(n * c * height * width);
    for plane in 0..n * c {
        for i in 0..height {
            let s = plane * h * w + (i + top) * w + left;
            out.extend_from_slice(&t.data()[s..s + width]);
        }
    }
    let value = Tensor::from_parts(Shape::new(&[n, c, height, width])?, out);
    tape.record(&[x], value, Crop { top, left })
}
