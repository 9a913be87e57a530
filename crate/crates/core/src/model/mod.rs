//! The dual-branch denoiser: noise estimator, attention module, a U-shaped
//! upper branch and a dilated lower branch, fused with a global residual.

mod config;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{AttentionLayout, ModelConfig, Variant, HDC_RATES, UPPER_BLOCKS};
pub use layers::{Extent, LayerInfo, LayerKind};
pub use params::{Gradients, ParamEntry, ParamId, ParamKind, ParamSet};

use layers::{build_layout, Block, Builder, Conv, Layout, Norm};

use crate::nn::{
    batch_norm, bilinear_upsample2, channel_pool, conv2d, crop_center, max_pool2, prelu, relu, sigmoid,
    spatial_gap, tanh, BatchNormConfig, NormMode,
};
use crate::tensor::{add, concat_channels, mul, Element, ReduceKind, Tape, Tensor, Var};
use crate::{Error, Result};

/// Trainable parameters placed on a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()].expect("trainable parameter is bound")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.index()).copied().flatten()
    }
}

/// Result of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Restored image, same shape as the input.
    pub denoised: Var,
    /// Output of the noise estimator, same shape as the input.
    pub noise_map: Var,
}

#[derive(Clone, Debug)]
pub struct Dcanet<E: Element = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<E>,
    inventory: Vec<LayerInfo>,
}

impl<E: Element> Dcanet<E> {
    /// Allocates and initialises every tensor for `config`; identical seeds
    /// give bit-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = Builder::new(&mut rng);
        let layout = build_layout(&config, &mut builder)?;
        Ok(Dcanet {
            config,
            layout,
            params: builder.params,
            inventory: builder.inventory,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    /// Every conv, batch-norm and PReLU layer in construction order.
    pub fn inventory(&self) -> &[LayerInfo] {
        &self.inventory
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.trainable_scalars()
    }

    /// Dilation rates of the lower branch as stored in the built layers.
    pub fn lower_rates(&self) -> Option<Vec<usize>> {
        self.layout
            .lower
            .as_ref()
            .map(|l| l.layers.iter().map(|b| b.conv.geom.dilation).collect())
    }

    /// Ids of trainable parameters in storage order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.trainable().map(|(id, _)| id).collect()
    }

    /// Fills the (zero-initialised) head with He-uniform values, so that
    /// gradient checks see nonzero gradients everywhere upstream.
    pub fn randomize_head(&mut self, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.params.get_mut(self.layout.head.weight);
        let fan_in = w.numel() / w.dims()[0];
        let bound = (6.0 / fan_in as f64).sqrt();
        w.data_mut()
            .iter_mut()
            .for_each(|v| *v = E::of(rng.random_range(-bound..bound)));
    }

    pub fn cast<T: Element>(&self) -> Dcanet<T> {
        Dcanet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            inventory: self.inventory.clone(),
        }
    }

    /// Puts every trainable parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Bound {
        let mut vars = vec![None; self.params.len()];
        for (id, e) in self.params.trainable() {
            vars[id.index()] = Some(tape.leaf(e.value.clone(), requires_grad));
        }
        Bound { vars }
    }

    /// Uses caller-provided variables, one per trainable parameter in
    /// [`Dcanet::trainable_ids`] order.
    pub fn bind_vars(&self, tape: &Tape<E>, vars: &[Var]) -> Result<Bound> {
        let ids = self.trainable_ids();
        if ids.len() != vars.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                ids.len(),
                vars.len()
            )));
        }
        let mut bound = vec![None; self.params.len()];
        for (id, &v) in ids.iter().zip(vars) {
            let t = tape.try_value(v)?;
            if t.shape() != self.params.get(*id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind_vars",
                    lhs: self.params.get(*id).shape().clone(),
                    rhs: t.shape().clone(),
                });
            }
            bound[id.index()] = Some(v);
        }
        Ok(Bound { vars: bound })
    }

    fn ctx<'a>(&'a mut self, tape: &'a mut Tape<E>, bound: &'a Bound, mode: NormMode) -> Ctx<'a, E> {
        Ctx {
            tape,
            bound,
            params: &mut self.params,
            mode,
        }
    }

    fn check_input(&self, tape: &Tape<E>, y: Var) -> Result<(usize, usize)> {
        let t = tape.try_value(y)?;
        let (_, c, h, w) = t.nchw()?;
        if c != self.config.in_channels {
            return Err(Error::InvalidShape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        Ok((h, w))
    }

    /// Full forward pass. In [`NormMode::Train`] batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<E>, bound: &Bound, y: Var, mode: NormMode) -> Result<ForwardOutput> {
        let (h, w) = self.check_input(tape, y)?;
        let variant = self.config.variant;
        if variant.has_upper() && (h < 4 || w < 4) {
            return Err(Error::InvalidShape(format!(
                "upper branch needs at least 4×4 input, got {h}×{w}"
            )));
        }
        let layout = self.layout.clone();
        let mut cx = self.ctx(tape, bound, mode);

        let f1 = cx.estimator(&layout.estimator, y)?;
        let cat = concat_channels(cx.tape, &[f1, y])?;
        let f11 = cx.conv(&layout.fusion_in, cat)?;
        let f2 = match &layout.scam {
            Some(s) => cx.scam(s, f11, variant.long_skips())?,
            None => f11,
        };
        let short = variant.short_skips();
        let f3 = match &layout.upper {
            Some(u) => Some(cx.upper(u, f2, short)?),
            None => None,
        };
        let f4 = match &layout.lower {
            Some(l) => Some(cx.lower(&l.layers, f2, short)?),
            None => None,
        };
        let f4 = match (&layout.lower, f4) {
            (Some(l), Some(v)) => Some(cx.conv(&l.proj, v)?),
            _ => None,
        };
        let mut parts = Vec::with_capacity(2);
        for f in [f3, f4].into_iter().flatten() {
            parts.push(add(cx.tape, f, y)?);
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            concat_channels(cx.tape, &parts)?
        };
        let mut out = cx.conv(&layout.head, fused)?;
        if variant.long_skips() {
            out = add(cx.tape, out, y)?;
        }
        Ok(ForwardOutput {
            denoised: out,
            noise_map: f1,
        })
    }

    /// The noise estimator alone.
    pub fn estimator_forward(&mut self, tape: &mut Tape<E>, bound: &Bound, y: Var, mode: NormMode) -> Result<Var> {
        self.check_input(tape, y)?;
        let layout = self.layout.clone();
        self.ctx(tape, bound, mode).estimator(&layout.estimator, y)
    }

    /// The 16 dilated blocks of the lower branch (with their skips but
    /// without the output projection), applied to a `width`-channel map.
    pub fn lower_stack_forward(
        &mut self,
        tape: &mut Tape<E>,
        bound: &Bound,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let layout = self.layout.clone();
        let lower = layout
            .lower
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no lower branch", self.config.variant)))?;
        let short = self.config.variant.short_skips();
        self.ctx(tape, bound, mode).lower(&lower.layers, x, short)
    }

    /// Gradients of every trainable parameter after [`Tape::backward`].
    pub fn collect_grads(&self, tape: &mut Tape<E>, bound: &Bound) -> Result<Gradients<E>> {
        let mut grads = Gradients::new(self.params.len());
        for (id, e) in self.params.trainable() {
            let g = bound
                .get(id)
                .and_then(|v| tape.take_grad(v))
                .ok_or_else(|| Error::MissingGradient(e.name.clone()))?;
            grads.set(id, g);
        }
        Ok(grads)
    }

    /// Eval-mode inference without gradient bookkeeping; returns the
    /// restored image and the noise map.
    pub fn infer(&mut self, y: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let out = self.forward(&mut tape, &bound, yv, NormMode::Eval)?;
        Ok((tape.value(out.denoised).clone(), tape.value(out.noise_map).clone()))
    }

    /// Eval-mode noise map only.
    pub fn estimate_noise(&mut self, y: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let out = self.estimator_forward(&mut tape, &bound, yv, NormMode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

struct Ctx<'a, E: Element> {
    tape: &'a mut Tape<E>,
    bound: &'a Bound,
    params: &'a mut ParamSet<E>,
    mode: NormMode,
}

impl<E: Element> Ctx<'_, E> {
    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        conv2d(
            self.tape,
            x,
            self.bound.var(c.weight),
            Some(self.bound.var(c.bias)),
            c.geom,
        )
    }

    fn norm(&mut self, n: &Norm, x: Var) -> Result<Var> {
        let (mean, var) = self.params.pair_mut(n.mean, n.var);
        batch_norm(
            self.tape,
            x,
            self.bound.var(n.gamma),
            self.bound.var(n.beta),
            mean.data_mut(),
            var.data_mut(),
            BatchNormConfig::default(),
            self.mode,
        )
    }

    fn block(&mut self, b: &Block, x: Var) -> Result<Var> {
        let start = self.tape.len();
        let mut v = self.conv(&b.conv, x)?;
        if let Some(n) = &b.norm {
            v = self.norm(n, v)?;
        }
        if b.relu {
            v = relu(self.tape, v)?;
        }
        self.tape.release_from(start, &[v]);
        Ok(v)
    }

    fn blocks(&mut self, bs: &[Block], mut x: Var) -> Result<Var> {
        for b in bs {
            x = self.block(b, x)?;
        }
        Ok(x)
    }

    fn estimator(&mut self, bs: &[Block], y: Var) -> Result<Var> {
        let v = self.blocks(bs, y)?;
        tanh(self.tape, v)
    }

    fn sam(&mut self, s: &layers::Sam, x: Var) -> Result<Var> {
        let avg = channel_pool(self.tape, ReduceKind::Mean, x)?;
        let max = channel_pool(self.tape, ReduceKind::Max, x)?;
        let pooled = concat_channels(self.tape, &[avg, max])?;
        let a = self.conv(&s.conv, pooled)?;
        let a = self.norm(&s.norm, a)?;
        let a = relu(self.tape, a)?;
        let a = sigmoid(self.tape, a)?;
        mul(self.tape, x, a)
    }

    fn cam(&mut self, c: &layers::Cam, x: Var) -> Result<Var> {
        let g = spatial_gap(self.tape, x)?;
        let a = self.conv(&c.down, g)?;
        let a = relu(self.tape, a)?;
        let a = self.conv(&c.up, a)?;
        let a = sigmoid(self.tape, a)?;
        mul(self.tape, x, a)
    }

    fn scam(&mut self, s: &layers::Scam, f11: Var, residual: bool) -> Result<Var> {
        let f12 = self.conv(&s.conv_a, f11)?;
        let f12 = prelu(self.tape, f12, self.bound.var(s.slope))?;
        let f13 = self.conv(&s.conv_b, f12)?;
        let sam = s.sam.as_ref();
        let cam = s.cam.as_ref();
        let attended = match s.layout {
            AttentionLayout::Parallel => {
                let a = self.sam(sam.expect("built"), f13)?;
                let b = self.cam(cam.expect("built"), f13)?;
                concat_channels(self.tape, &[a, b])?
            }
            AttentionLayout::SpatialOnly => self.sam(sam.expect("built"), f13)?,
            AttentionLayout::ChannelOnly => self.cam(cam.expect("built"), f13)?,
            AttentionLayout::SpatialThenChannel => {
                let a = self.sam(sam.expect("built"), f13)?;
                self.cam(cam.expect("built"), a)?
            }
            AttentionLayout::ChannelThenSpatial => {
                let a = self.cam(cam.expect("built"), f13)?;
                self.sam(sam.expect("built"), a)?
            }
            AttentionLayout::Disabled => unreachable!("no attention module is built"),
        };
        let fused = self.conv(&s.fuse, attended)?;
        if residual {
            add(self.tape, fused, f11)
        } else {
            Ok(fused)
        }
    }

    /// Upsample `x`, crop it to `skip`'s extents, and add `skip` if asked.
    fn rise(&mut self, x: Var, skip: Var, short: bool) -> Result<Var> {
        let (_, _, h, w) = self.tape.try_value(skip)?.nchw()?;
        let up = bilinear_upsample2(self.tape, x)?;
        let up = crop_center(self.tape, up, h, w)?;
        if short {
            add(self.tape, up, skip)
        } else {
            Ok(up)
        }
    }

    fn upper(&mut self, u: &layers::Upper, x: Var, short: bool) -> Result<Var> {
        let s0 = self.blocks(&u.stages[0], x)?;
        let p = max_pool2(self.tape, s0)?;
        let s1 = self.blocks(&u.stages[1], p)?;
        let p = max_pool2(self.tape, s1)?;
        let b = self.blocks(&u.stages[2], p)?;
        let r = self.rise(b, s1, short)?;
        let r = self.blocks(&u.stages[3], r)?;
        let r = self.rise(r, s0, short)?;
        let r = self.blocks(&u.stages[4], r)?;
        self.conv(&u.proj, r)
    }

    /// Input of layer 3 joins the output of layer 13, input of layer 5 the
    /// output of layer 11 (1-based).
    fn lower(&mut self, layers: &[Block], mut x: Var, short: bool) -> Result<Var> {
        let mut saved = [None, None];
        for (l, b) in layers.iter().enumerate() {
            match l {
                2 => saved[0] = Some(x),
                4 => saved[1] = Some(x),
                _ => {}
            }
            x = self.block(b, x)?;
            if short {
                match l {
                    10 => x = add(self.tape, x, saved[1].expect("layer 5 ran"))?,
                    12 => x = add(self.tape, x, saved[0].expect("layer 3 ran"))?,
                    _ => {}
                }
            }
        }
        Ok(x)
    }
}
