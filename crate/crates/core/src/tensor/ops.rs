//! Shape-generic tensor operations: broadcasting arithmetic, channel
//! concatenation/slicing and reductions.

use super::{BackwardRule, Element, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Strides of `b` when broadcast against `a`; zero on broadcast axes.
fn broadcast_strides(a: &Shape, b: &Shape) -> Option<[usize; 4]> {
    let ad = a.as_nchw();
    if b.numel() == 1 {
        return Some([0; 4]);
    }
    if b.rank() != a.rank() {
        return None;
    }
    let bd = b.as_nchw();
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        if bd[axis] == ad[axis] {
            strides[axis] = if bd[axis] == 1 { 0 } else { acc };
        } else if bd[axis] == 1 {
            strides[axis] = 0;
        } else {
            return None;
        }
        acc *= bd[axis];
    }
    Some(strides)
}

/// Visits `(a_index, b_index)` pairs in row-major order of `a`.
fn for_each_broadcast(a: &Shape, bs: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = a.as_nchw();
    let mut ai = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let base = i0 * bs[0] + i1 * bs[1] + i2 * bs[2];
                for i3 in 0..w {
                    f(ai, base + i3 * bs[3]);
                    ai += 1;
                }
            }
        }
    }
}

struct Binary {
    kind: BinaryKind,
    strides: Option<[usize; 4]>,
}

impl<E: Element> BackwardRule<E> for Binary {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let gd = g.data();
        let ga = needs[0].then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => g.clone(),
            BinaryKind::Mul => {
                let mut out = vec![E::zero(); a.numel()];
                match self.strides {
                    None => {
                        for ((o, &gv), &bv) in out.iter_mut().zip(gd).zip(b.data()) {
                            *o = gv * bv;
                        }
                    }
                    Some(bs) => {
                        let bd = b.data();
                        for_each_broadcast(a.shape(), bs, |ai, bi| out[ai] = gd[ai] * bd[bi]);
                    }
                }
                Tensor::from_parts(a.shape().clone(), out)
            }
        });
        let gb = needs[1].then(|| {
            let sign = if self.kind == BinaryKind::Sub { -E::one() } else { E::one() };
            let mut out = vec![E::zero(); b.numel()];
            match (self.strides, self.kind) {
                (None, BinaryKind::Mul) => {
                    for ((o, &gv), &av) in out.iter_mut().zip(gd).zip(a.data()) {
                        *o = gv * av;
                    }
                }
                (None, _) => {
                    for (o, &gv) in out.iter_mut().zip(gd) {
                        *o = sign * gv;
                    }
                }
                (Some(bs), BinaryKind::Mul) => {
                    let ad = a.data();
                    for_each_broadcast(a.shape(), bs, |ai, bi| out[bi] = out[bi] + gd[ai] * ad[ai]);
                }
                (Some(bs), _) => {
                    for_each_broadcast(a.shape(), bs, |ai, bi| out[bi] = out[bi] + sign * gd[ai]);
                }
            }
            Tensor::from_parts(b.shape().clone(), out)
        });
        vec![ga, gb]
    }

    fn name(&self) -> &'static str {
        "elementwise"
    }
}

/// `a ∘ b` where `b` matches `a` or broadcasts along singleton axes.
/// The result always has `a`'s shape.
pub fn elementwise<E: Element>(tape: &mut Tape<E>, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.try_value(a)?, tape.try_value(b)?);
    let op = |x: E, y: E| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let (strides, out) = if av.shape() == bv.shape() {
        let out: Vec<E> = av.data().iter().zip(bv.data()).map(|(&x, &y)| op(x, y)).collect();
        (None, out)
    } else {
        let bs = broadcast_strides(av.shape(), bv.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            lhs: av.shape().clone(),
            rhs: bv.shape().clone(),
        })?;
        let mut out = vec![E::zero(); av.numel()];
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(av.shape(), bs, |ai, bi| out[ai] = op(ad[ai], bd[bi]));
        (Some(bs), out)
    };
    let value = Tensor::from_parts(av.shape().clone(), out);
    tape.record(&[a, b], value, Binary { kind, strides })
}

pub fn add<E: Element>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Add, a, b)
}

pub fn sub<E: Element>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Sub, a, b)
}

pub fn mul<E: Element>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryKind::Mul, a, b)
}

struct Affine<E> {
    factor: E,
}

impl<E: Element> BackwardRule<E> for Affine<E> {
    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| g.map(|v| v * self.factor))]
    }

    fn name(&self) -> &'static str {
        "affine"
    }
}

/// `a · factor`.
pub fn scale<E: Element>(tape: &mut Tape<E>, a: Var, factor: f64) -> Result<Var> {
    let factor = E::of(factor);
    let value = tape.value(a).map(|v| v * factor);
    tape.record(&[a], value, Affine { factor })
}

/// `a + offset`.
pub fn add_scalar<E: Element>(tape: &mut Tape<E>, a: Var, offset: f64) -> Result<Var> {
    let offset = E::of(offset);
    let value = tape.value(a).map(|v| v + offset);
    tape.record(&[a], value, Affine { factor: E::one() })
}

struct Square;

impl<E: Element> BackwardRule<E> for Square {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let two = E::of(2.0);
        vec![needs[0].then(|| {
            let data = g.data().iter().zip(inputs[0].data()).map(|(&gv, &x)| two * x * gv).collect();
            Tensor::from_parts(g.shape().clone(), data)
        })]
    }

    fn name(&self) -> &'static str {
        "square"
    }
}

pub fn square<E: Element>(tape: &mut Tape<E>, a: Var) -> Result<Var> {
    let value = tape.value(a).map(|v| v * v);
    tape.record(&[a], value, Square)
}

struct Sqrt;

impl<E: Element> BackwardRule<E> for Sqrt {
    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let half = E::of(0.5);
        vec![needs[0].then(|| {
            let data = g.data().iter().zip(output.data()).map(|(&gv, &y)| half * gv / y).collect();
            Tensor::from_parts(g.shape().clone(), data)
        })]
    }

    fn name(&self) -> &'static str {
        "sqrt"
    }
}

/// Elementwise square root; inputs must be strictly positive to be
/// differentiable.
pub fn sqrt<E: Element>(tape: &mut Tape<E>, a: Var) -> Result<Var> {
    let value = tape.value(a).map(|v| v.sqrt());
    tape.record(&[a], value, Sqrt)
}

struct Concat {
    /// Channel extent of each part.
    extents: Vec<usize>,
}

impl<E: Element> BackwardRule<E> for Concat {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let [n, c_total, h, w] = output.shape().as_nchw();
        let plane = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (part, (&c, &need)) in inputs.iter().zip(self.extents.iter().zip(needs)) {
            if need {
                let mut out = Vec::with_capacity(part.numel());
                for b in 0..n {
                    let start = (b * c_total + offset) * plane;
                    out.extend_from_slice(&g.data()[start..start + c * plane]);
                }
                grads.push(Some(Tensor::from_parts(part.shape().clone(), out)));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }

    fn name(&self) -> &'static str {
        "concat"
    }
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis.
pub fn concat_channels<E: Element>(tape: &mut Tape<E>, parts: &[Var]) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat needs at least one part".into()))?;
    let (n, _, h, w) = tape.value(*first).nchw()?;
    let mut extents = Vec::with_capacity(parts.len());
    for &p in parts {
        let t = tape.value(p);
        let (pn, pc, ph, pw) = t.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: tape.value(*first).shape().clone(),
                rhs: t.shape().clone(),
            });
        }
        extents.push(pc);
    }
    let c_total: usize = extents.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c_total * plane);
    for b in 0..n {
        for (&p, &c) in parts.iter().zip(&extents) {
            let src = tape.value(p).data();
            data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let value = Tensor::from_parts(Shape::new(&[n, c_total, h, w])?, data);
    tape.record(parts, value, Concat { extents })
}

struct SliceChannels {
    start: usize,
}

impl<E: Element> BackwardRule<E> for SliceChannels {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let [n, c_in, h, w] = inputs[0].shape().as_nchw();
            let c_out = output.shape().as_nchw()[1];
            let plane = h * w;
            let mut out = vec![E::zero(); inputs[0].numel()];
            for b in 0..n {
                let dst = (b * c_in + self.start) * plane;
                let src = b * c_out * plane;
                out[dst..dst + c_out * plane].copy_from_slice(&g.data()[src..src + c_out * plane]);
            }
            Tensor::from_parts(inputs[0].shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "slice_channels"
    }
}

/// Channels `start..start + len` of an N×C×H×W tensor.
pub fn slice_channels<E: Element>(tape: &mut Tape<E>, x: Var, start: usize, len: usize) -> Result<Var> {
    let t = tape.value(x);
    let (n, c, h, w) = t.nchw()?;
    if start + len > c || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let s = (b * c + start) * plane;
        data.extend_from_slice(&t.data()[s..s + len * plane]);
    }
    let value = Tensor::from_parts(Shape::new(&[n, len, h, w])?, data);
    tape.record(&[x], value, SliceChannels { start })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

struct Reduce {
    kind: ReduceKind,
    /// For each input element, the output slot it reduces into.
    out_strides: [usize; 4],
    count: usize,
    /// Input index of the winning element per output slot (max only).
    argmax: Vec<usize>,
}

impl<E: Element> BackwardRule<E> for Reduce {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| {
            let x = inputs[0];
            let gd = g.data();
            let mut out = vec![E::zero(); x.numel()];
            match self.kind {
                ReduceKind::Max => {
                    for (&src, &gv) in self.argmax.iter().zip(gd) {
                        out[src] = out[src] + gv;
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let factor = if self.kind == ReduceKind::Mean {
                        E::one() / E::of(self.count as f64)
                    } else {
                        E::one()
                    };
                    for_each_broadcast(x.shape(), self.out_strides, |xi, oi| {
                        out[xi] = gd[oi] * factor;
                    });
                }
            }
            Tensor::from_parts(x.shape().clone(), out)
        })]
    }

    fn name(&self) -> &'static str {
        "reduce"
    }
}

/// Reduces over `axes`, keeping them as singleton extents.
///
/// Max routes its gradient to the first maximal element in row-major scan
/// order.
pub fn reduce<E: Element>(tape: &mut Tape<E>, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
    let t = tape.value(x);
    let rank = t.shape().rank();
    let mut out_dims = t.dims().to_vec();
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidArgument(format!(
                "reduction axis {a} out of range for rank {rank}"
            )));
        }
        out_dims[a] = 1;
    }
    let out_shape = Shape::new(&out_dims)?;
    let out_strides = broadcast_strides(t.shape(), &out_shape).expect("keepdims shape broadcasts");
    let count = t.numel() / out_shape.numel().max(1);
    let d = t.data();
    let mut out = vec![E::zero(); out_shape.numel()];
    let mut argmax = Vec::new();
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            for_each_broadcast(t.shape(), out_strides, |xi, oi| out[oi] = out[oi] + d[xi]);
            if kind == ReduceKind::Mean {
                let inv = E::one() / E::of(count as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        ReduceKind::Max => {
            out.fill(E::neg_infinity());
            argmax = vec![usize::MAX; out.len()];
            for_each_broadcast(t.shape(), out_strides, |xi, oi| {
                // strict comparison keeps the first maximum in scan order
                if argmax[oi] == usize::MAX || d[xi] > out[oi] {
                    out[oi] = d[xi];
                    argmax[oi] = xi;
                }
            });
        }
    }
    let value = Tensor::from_parts(out_shape, out);
    tape.record(
        &[x],
        value,
        Reduce {
            kind,
            out_strides,
            count,
            argmax,
        },
    )
}

/// Sum of every element, as a scalar-shaped tensor.
pub fn sum_all<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let rank = tape.value(x).shape().rank();
    let axes: Vec<usize> = (0..rank).collect();
    let r = reduce(tape, ReduceKind::Sum, x, &axes)?;
    let total = tape.value(r).clone().reshape(&[])?;
    tape.record(&[r], total, Reshape)
}

struct Reshape;

impl<E: Element> BackwardRule<E> for Reshape {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        g: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![needs[0].then(|| Tensor::from_parts(inputs[0].shape().clone(), g.data().to_vec()))]
    }

    fn name(&self) -> &'static str {
        "reshape"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheck;

    fn t(dims: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims, v).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let c = add(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_broadcasts_spatial_map_over_channels() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[1, 3, 4, 5]).unwrap());
        let b = tape.constant(Tensor::full(&[1, 1, 4, 5], 0.5).unwrap());
        let c = mul(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(c).dims(), &[1, 3, 4, 5]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn illegal_broadcast_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[1, 3, 4, 4]).unwrap());
        let b = tape.constant(Tensor::ones(&[1, 2, 4, 4]).unwrap());
        let msg = add(&mut tape, a, b).unwrap_err().to_string();
        assert!(msg.contains("[1×3×4×4]") && msg.contains("[1×2×4×4]"), "{msg}");
    }

    #[test]
    fn mul_gradient_matches_finite_differences() {
        let check = GradCheck::new(1e-6, 1e-4).coords(5).seed(11);
        let report = check.run(
            &[
                t(&[1, 2, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()),
                t(&[1, 2, 3, 3], (0..18).map(|i| (i as f64 * 0.91).cos()).collect()),
            ],
            |tape, v| {
                let p = mul(tape, v[0], v[1])?;
                sum_all(tape, p)
            },
        );
        assert!(report.passed(), "{report}");
        // d(a·b)/da = b exactly
        let mut tape = Tape::<f64>::new();
        let bvals: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let a = tape.leaf(t(&[6], vec![1.0; 6]), true);
        let b = tape.constant(t(&[6], bvals.clone()));
        let p = mul(&mut tape, a, b).unwrap();
        let l = sum_all(&mut tape, p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), bvals.as_slice());
    }

    #[test]
    fn broadcast_gradients_sum_out_axes() {
        for b_dims in [[1, 1, 3, 4], [1, 2, 1, 1], [1, 1, 1, 1]] {
            let n: usize = b_dims.iter().product();
            let report = GradCheck::new(1e-6, 1e-4).run(
                &[
                    t(&[1, 2, 3, 4], (0..24).map(|i| (i as f64 * 0.71).sin()).collect()),
                    t(&b_dims, (0..n).map(|i| 0.3 + i as f64 * 0.1).collect()),
                ],
                |tape, v| {
                    let p = mul(tape, v[0], v[1])?;
                    let q = sub(tape, p, v[1])?;
                    let s = square(tape, q)?;
                    sum_all(tape, s)
                },
            );
            assert!(report.passed(), "{b_dims:?}: {report}");
        }
    }

    #[test]
    fn concat_extents_and_inverse() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![5., 6., 7., 8.]).unwrap());
        let c = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(c).dims(), &[1, 2, 2, 2]);
        let a2 = slice_channels(&mut tape, c, 0, 1).unwrap();
        let b2 = slice_channels(&mut tape, c, 1, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let b = tape.constant(Tensor::ones(&[1, 1, 3, 2]).unwrap());
        assert!(concat_channels(&mut tape, &[a, b]).is_err());
    }

    #[test]
    fn concat_backward_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 1, 2, 3], vec![0.5; 12]), true);
        let b = tape.leaf(t(&[2, 3, 2, 3], vec![-1.5; 36]), true);
        let c = concat_channels(&mut tape, &[a, b]).unwrap();
        let l = sum_all(&mut tape, c).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
        let report = GradCheck::new(1e-6, 1e-4).run(
            &[t(&[2, 1, 2, 3], (0..12).map(|i| i as f64).collect()), t(&[2, 3, 2, 3], vec![0.1; 36])],
            |tape, v| {
                let c = concat_channels(tape, &[v[0], v[1]])?;
                let s = square(tape, c)?;
                sum_all(tape, s)
            },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[2, 2], vec![1., 3., 5., 7.]).unwrap());
        let m = reduce(&mut tape, ReduceKind::Mean, x, &[0, 1]).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        assert_eq!(tape.value(m).dims(), &[1, 1]);

        let mut delta = vec![0.0f32; 25];
        delta[12] = 3.5;
        let d = tape.constant(Tensor::from_vec(&[1, 1, 5, 5], delta).unwrap());
        let mx = reduce(&mut tape, ReduceKind::Max, d, &[2, 3]).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.5]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2, 2, 5], (0..20).map(|i| i as f64).collect()), true);
        let m = reduce(&mut tape, ReduceKind::Mean, x, &[0, 1, 2, 3]).unwrap();
        let l = sum_all(&mut tape, m).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0 / 20.0));
        let report = GradCheck::new(1e-6, 1e-4).run(
            &[t(&[2, 3, 2, 2], (0..24).map(|i| (i as f64).sin()).collect())],
            |tape, v| {
                let m = reduce(tape, ReduceKind::Mean, v[0], &[1])?;
                let s = square(tape, m)?;
                sum_all(tape, s)
            },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn max_ties_route_to_first_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![2.0, 5.0, 5.0, 1.0]), true);
        let m = reduce(&mut tape, ReduceKind::Max, x, &[2, 3]).unwrap();
        let l = sum_all(&mut tape, m).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[2, 2]).unwrap());
        assert!(reduce(&mut tape, ReduceKind::Sum, x, &[2]).is_err());
    }
}
