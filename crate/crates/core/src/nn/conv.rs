//! Dilated 2-D cross-correlation, stride 1, zero padding.
//!
//! Lowered to im2col + GEMM per image. Images are processed in parallel but
//! every reduction runs in a fixed order, so results do not depend on the
//! worker count.

use rayon::prelude::*;

use crate::tensor::{BackwardRule, Element, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

/// Dilation and zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Padding that preserves spatial extents for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry {
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    d: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.p == 0
    }

    /// Range of output columns `j` whose source `j + off - p` lies inside `0..len`.
    fn valid(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        let shift = off as isize - self.p as isize;
        let lo = (-shift).clamp(0, out_len as isize) as usize;
        let hi = (len as isize - shift).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col<E: Element>(x: &[E], g: &Dims, cols: &mut [E]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.k {
            let (i_lo, i_hi) = g.valid(u * g.d, g.h, g.ho);
            for v in 0..g.k {
                let row = (ci * g.k + u) * g.k + v;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (j_lo, j_hi) = g.valid(v * g.d, g.w, g.wo);
                for i in 0..g.ho {
                    let line = &mut dst[i * g.wo..(i + 1) * g.wo];
                    if i < i_lo || i >= i_hi || j_lo >= j_hi {
                        line.fill(E::zero());
                        continue;
                    }
                    let si = i + u * g.d - g.p;
                    line[..j_lo].fill(E::zero());
                    line[j_hi..].fill(E::zero());
                    let sj = j_lo + v * g.d - g.p;
                    line[j_lo..j_hi].copy_from_slice(&src[si * g.w + sj..si * g.w + sj + (j_hi - j_lo)]);
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], g: &Dims, dx: &mut [E]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.k {
            let (i_lo, i_hi) = g.valid(u * g.d, g.h, g.ho);
            for v in 0..g.k {
                let row = (ci * g.k + u) * g.k + v;
                let src = &cols[row * plane..(row + 1) * plane];
                let (j_lo, j_hi) = g.valid(v * g.d, g.w, g.wo);
                if j_lo >= j_hi {
                    continue;
                }
                for i in i_lo..i_hi {
                    let si = i + u * g.d - g.p;
                    let sj = j_lo + v * g.d - g.p;
                    let out = &mut dst[si * g.w + sj..si * g.w + sj + (j_hi - j_lo)];
                    for (o, &c) in out.iter_mut().zip(&src[i * g.wo + j_lo..i * g.wo + j_hi]) {
                        *o = *o + c;
                    }
                }
            }
        }
    }
}

/// Row-major `c[m×n] = a[m×k]·b[k×n] (+ c if accumulate)`, with optional
/// transposed views of `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn matmul<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    a_t: bool,
    b: &[E],
    b_t: bool,
    c: &mut [E],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: the slices hold at least the extents described by the strides.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2d {
    dims: Dims,
    has_bias: bool,
}

impl<E: Element> BackwardRule<E> for Conv2d {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let dm = self.dims;
        let (x, w) = (inputs[0], inputs[1]);
        let n = x.dims()[0];
        let in_sz = dm.c * dm.h * dm.w;
        let out_sz = dm.o * dm.out_plane();
        let (patch, plane) = (dm.patch(), dm.out_plane());
        let need_w = needs[1];
        let need_x = needs[0];

        let per_image: Vec<(Option<Vec<E>>, Option<Vec<E>>)> = (0..n)
            .into_par_iter()
            .map(|b| {
                let xi = &x.data()[b * in_sz..(b + 1) * in_sz];
                let gi = &g.data()[b * out_sz..(b + 1) * out_sz];
                let dw = need_w.then(|| {
                    let mut dw = vec![E::zero(); dm.o * patch];
                    if dm.is_pointwise() {
                        matmul(dm.o, plane, patch, gi, false, xi, true, &mut dw, false);
                    } else {
                        let mut cols = vec![E::zero(); patch * plane];
                        im2col(xi, &dm, &mut cols);
                        matmul(dm.o, plane, patch, gi, false, &cols, true, &mut dw, false);
                    }
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dx = vec![E::zero(); in_sz];
                    if dm.is_pointwise() {
                        matmul(patch, dm.o, plane, w.data(), true, gi, false, &mut dx, false);
                    } else {
                        let mut dcols = vec![E::zero(); patch * plane];
                        matmul(patch, dm.o, plane, w.data(), true, gi, false, &mut dcols, false);
                        col2im(&dcols, &dm, &mut dx);
                    }
                    dx
                });
                (dx, dw)
            })
            .collect();

        let mut gx = need_x.then(|| Vec::with_capacity(x.numel()));
        let mut gw = need_w.then(|| vec![E::zero(); w.numel()]);
        for (dx, dw) in per_image {
            if let (Some(acc), Some(dx)) = (gx.as_mut(), dx) {
                acc.extend_from_slice(&dx);
            }
            if let (Some(acc), Some(dw)) = (gw.as_mut(), dw) {
                for (a, v) in acc.iter_mut().zip(dw) {
                    *a = *a + v;
                }
            }
        }
        let mut grads = vec![
            gx.map(|d| Tensor::from_parts(x.shape().clone(), d)),
            gw.map(|d| Tensor::from_parts(w.shape().clone(), d)),
        ];
        if self.has_bias {
            grads.push(needs[2].then(|| {
                let mut gb = vec![E::zero(); dm.o];
                for b in 0..n {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        let s = (b * dm.o + o) * plane;
                        *acc = *acc + g.data()[s..s + plane].iter().copied().sum::<E>();
                    }
                }
                Tensor::from_parts(inputs[2].shape().clone(), gb)
            }));
        }
        grads
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

/// `out[o,i,j] = bias[o] + Σ w[o,c,u,v] · x_pad[c, i+u·d, j+v·d]`.
///
/// `x` is N×C×H×W, `weight` O×C×k×k with odd `k`, `bias` (if any) has O
/// elements.
pub fn conv2d<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
) -> Result<Var> {
    let xt = tape.value(x);
    let wt = tape.value(weight);
    let (n, c, h, w) = xt.nchw()?;
    let (o, wc, kh, kw) = wt.nchw()?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xt.shape().clone(),
            rhs: wt.shape().clone(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernels must be square with odd size, got {kh}×{kw}"
        )));
    }
    if geom.dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be positive".into()));
    }
    if let Some(b) = bias {
        if tape.value(b).numel() != o {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: wt.shape().clone(),
                rhs: tape.value(b).shape().clone(),
            });
        }
    }
    let span = geom.dilation * (kh - 1);
    let (ho, wo) = (h + 2 * geom.padding, w + 2 * geom.padding);
    if ho <= span || wo <= span {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} input too small for a {kh}×{kh} kernel at dilation {}",
            geom.dilation
        )));
    }
    let dims = Dims {
        c,
        h,
        w,
        o,
        k: kh,
        d: geom.dilation,
        p: geom.padding,
        ho: ho - span,
        wo: wo - span,
    };
    let (patch, plane) = (dims.patch(), dims.out_plane());
    let in_sz = c * h * w;
    let bias_vals: Option<Vec<E>> = bias.map(|b| tape.value(b).data().to_vec());
    let xd = xt.data();
    let wd = wt.data();

    let mut out = vec![E::zero(); n * o * plane];
    out.par_chunks_mut(o * plane).enumerate().for_each(|(b, dst)| {
        let xi = &xd[b * in_sz..(b + 1) * in_sz];
        if dims.is_pointwise() {
            matmul(o, patch, plane, wd, false, xi, false, dst, false);
        } else {
            let mut cols = vec![E::zero(); patch * plane];
            im2col(xi, &dims, &mut cols);
            matmul(o, patch, plane, wd, false, &cols, false, dst, false);
        }
        if let Some(bv) = &bias_vals {
            for (oc, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bv[oc]);
            }
        }
    });
    let value = Tensor::from_parts(Shape::new(&[n, o, dims.ho, dims.wo])?, out);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.record(
        &inputs,
        value,
        Conv2d {
            dims,
            has_bias: bias.is_some(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sum_all, GradCheck};

    /// Direct sliding-window evaluation in f64.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], d: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.nchw().unwrap();
        let (o, _, k, _) = w.nchw().unwrap();
        let ho = h + 2 * p - d * (k - 1);
        let wo = wd + 2 * p - d * (k - 1);
        let mut out = vec![0.0; n * o * ho * wo];
        for bn in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for u in 0..k {
                                for v in 0..k {
                                    let si = (i + u * d) as isize - p as isize;
                                    let sj = (j + v * d) as isize - p as isize;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * c + ci) * k + u) * k + v]
                                        * x.data()[((bn * c + ci) * h + si as usize) * wd + sj as usize];
                                }
                            }
                        }
                        out[((bn * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, ho, wo], out).unwrap()
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 12.9898).sin() * 0.8).collect()
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = b.map(|b| tape.constant(b.clone()));
        let y = conv2d(&mut tape, xv, wv, bv, g).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 4, 5], pseudo(20, 1.0)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        assert_eq!(run(&x, &w, None, ConvGeometry::same(3, 1)), x);
    }

    #[test]
    fn all_ones_window_counts() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = run(&x, &w, Some(&b), ConvGeometry::same(3, 1));
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn dilated_delta_response() {
        let mut delta = vec![0.0; 81];
        delta[4 * 9 + 4] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 9, 9], delta).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let y = run(&x, &w, None, ConvGeometry::same(3, 2));
        for i in 0..9 {
            for j in 0..9 {
                let (di, dj) = (i as isize - 4, j as isize - 4);
                let hit = [-2, 0, 2].contains(&di) && [-2, 0, 2].contains(&dj);
                assert_eq!(y.data()[i * 9 + j], if hit { 1.0 } else { 0.0 }, "({i},{j})");
            }
        }
    }

    #[test]
    fn matches_naive_for_many_geometries() {
        for &(c, o, k, d, p, h, w) in &[
            (2, 3, 3, 1, 1, 5, 6),
            (3, 2, 3, 3, 3, 7, 7),
            (2, 2, 3, 2, 0, 8, 6),
            (4, 5, 1, 1, 0, 3, 4),
            (2, 1, 7, 1, 3, 6, 9),
            (1, 2, 3, 8, 8, 4, 4),
        ] {
            let x = Tensor::from_vec(&[2, c, h, w], pseudo(2 * c * h * w, 0.3)).unwrap();
            let wt = Tensor::from_vec(&[o, c, k, k], pseudo(o * c * k * k, 7.0)).unwrap();
            let b = Tensor::from_vec(&[o], pseudo(o, 3.0)).unwrap();
            let got = run(&x, &wt, Some(&b), ConvGeometry { dilation: d, padding: p });
            let want = naive(&x, &wt, b.data(), d, p);
            assert_eq!(got.dims(), want.dims());
            assert!(got.max_abs_diff(&want) < 1e-12, "c{c} o{o} k{k} d{d} p{p}");
        }
    }

    #[test]
    fn same_padding_preserves_extent_for_all_dilations() {
        for d in 1..=8 {
            let x = Tensor::<f32>::ones(&[1, 2, 17, 17]).unwrap();
            let w = Tensor::ones(&[3, 2, 3, 3]).unwrap();
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x), tape.constant(w));
            let y = conv2d(&mut tape, xv, wv, None, ConvGeometry::same(3, d)).unwrap();
            assert_eq!(tape.value(y).dims(), &[1, 3, 17, 17]);
        }
    }

    #[test]
    fn errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]).unwrap());
        let w_bad_c = tape.constant(Tensor::ones(&[1, 3, 3, 3]).unwrap());
        assert!(conv2d(&mut tape, x, w_bad_c, None, ConvGeometry::same(3, 1)).is_err());
        let w_even = tape.constant(Tensor::ones(&[1, 2, 2, 2]).unwrap());
        let err = conv2d(&mut tape, x, w_even, None, ConvGeometry { dilation: 1, padding: 0 });
        assert!(err.unwrap_err().to_string().contains("odd"));
    }

    #[test]
    fn linear_in_input_and_weights() {
        let x = Tensor::from_vec(&[1, 2, 6, 6], pseudo(72, 0.1)).unwrap();
        let z = Tensor::from_vec(&[1, 2, 6, 6], pseudo(72, 5.1)).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], pseudo(54, 2.2)).unwrap();
        let v = Tensor::from_vec(&[3, 2, 3, 3], pseudo(54, 9.2)).unwrap();
        let g = ConvGeometry::same(3, 2);
        let (a, b) = (1.7, -0.6);
        let mix = |p: &Tensor<f64>, q: &Tensor<f64>| {
            Tensor::from_vec(p.dims(), p.data().iter().zip(q.data()).map(|(s, t)| a * s + b * t).collect()).unwrap()
        };
        let lhs = run(&mix(&x, &z), &w, None, g);
        let rhs = mix(&run(&x, &w, None, g), &run(&z, &w, None, g));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let lhs = run(&x, &mix(&w, &v), None, g);
        let rhs = mix(&run(&x, &w, None, g), &run(&x, &v, None, g));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        for (k, geom) in [(3, ConvGeometry::same(3, 1)), (3, ConvGeometry::same(3, 2)), (1, ConvGeometry::same(1, 1))] {
            let x = Tensor::from_vec(&[2, 3, 5, 5], pseudo(150, 0.5)).unwrap();
            let w = Tensor::from_vec(&[2, 3, k, k], pseudo(6 * k * k, 4.0)).unwrap();
            let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
            let report = GradCheck::new(1e-6, 1e-4).coords(40).seed(5).run(&[x, w, b], |tape, v| {
                let y = conv2d(tape, v[0], v[1], Some(v[2]), geom)?;
                let s = crate::tensor::square(tape, y)?;
                sum_all(tape, s)
            });
            assert!(report.passed(), "k={k}: {report}");
        }
    }

    #[test]
    fn batch_results_do_not_depend_on_thread_count() {
        let x = Tensor::from_vec(&[4, 3, 9, 9], pseudo(972, 0.9)).unwrap().cast::<f32>();
        let w = Tensor::from_vec(&[5, 3, 3, 3], pseudo(135, 1.9)).unwrap().cast::<f32>();
        let eval = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = conv2d(&mut tape, xv, wv, None, ConvGeometry::same(3, 2)).unwrap();
            let l = sum_all(&mut tape, y).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(wv).unwrap().clone(), tape.grad(xv).unwrap().clone())
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(eval);
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(eval);
        assert_eq!(one.0.data(), three.0.data());
        assert_eq!(one.1.data(), three.1.data());
    }
}
