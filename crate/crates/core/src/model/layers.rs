//! Layer descriptors and the construction of a model's parameter layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionLayout, ModelConfig};
use super::params::{ParamId, ParamKind, ParamSet};
use crate::nn::{ConvGeometry, PRELU_INIT};
use crate::tensor::{Element, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Conv, optional batch norm, and an optional ReLU.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub conv: Conv,
    pub norm: Option<Norm>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Sam {
    pub conv: Conv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Cam {
    pub down: Conv,
    pub up: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct Scam {
    pub conv_a: Conv,
    pub slope: ParamId,
    pub conv_b: Conv,
    pub sam: Option<Sam>,
    pub cam: Option<Cam>,
    pub fuse: Conv,
    pub layout: AttentionLayout,
}

#[derive(Clone, Debug)]
pub(crate) struct Upper {
    /// Full, ½, ¼, ½, full.
    pub stages: [Vec<Block>; 5],
    pub proj: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct Lower {
    pub layers: Vec<Block>,
    pub proj: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    /// Tanh is applied after the last block.
    pub estimator: Vec<Block>,
    pub fusion_in: Conv,
    pub scam: Option<Scam>,
    pub upper: Option<Upper>,
    pub lower: Option<Lower>,
    pub head: Conv,
}

/// Where a layer runs spatially.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    /// Input resolution divided by `2^level` (rounded up at each halving).
    Level(u8),
    /// A single pixel per channel (after global pooling).
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Prelu,
}

/// One row of the per-layer parameter inventory.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub extent: Extent,
    /// Trainable scalars.
    pub params: usize,
}

pub(crate) struct Builder<'a, E: Element> {
    pub params: ParamSet<E>,
    pub inventory: Vec<LayerInfo>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, E: Element> Builder<'a, E> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            params: ParamSet::new(),
            inventory: Vec::new(),
            rng,
        }
    }

    /// He-uniform weights, bound `√(6 / fan_in)`, and zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        extent: Extent,
    ) -> Result<Conv> {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<E> = (0..cout * fan_in)
            .map(|_| E::of(self.rng.random_range(-bound..bound)))
            .collect();
        let weight = self.params.insert(
            format!("{name}.weight"),
            Tensor::from_vec(&[cout, cin, kernel, kernel], data)?,
            ParamKind::Trainable,
        )?;
        let bias = self
            .params
            .insert(format!("{name}.bias"), Tensor::zeros(&[cout])?, ParamKind::Trainable)?;
        self.inventory.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel,
            dilation,
            extent,
            params: cout * fan_in + cout,
        });
        Ok(Conv {
            weight,
            bias,
            geom: ConvGeometry::same(kernel, dilation),
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize, extent: Extent) -> Result<Norm> {
        let p = &mut self.params;
        let gamma = p.insert(format!("{name}.gamma"), Tensor::ones(&[channels])?, ParamKind::Trainable)?;
        let beta = p.insert(format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?;
        let mean = p.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, ParamKind::Buffer)?;
        let var = p.insert(format!("{name}.running_var"), Tensor::ones(&[channels])?, ParamKind::Buffer)?;
        self.inventory.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::BatchNorm,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            dilation: 1,
            extent,
            params: 2 * channels,
        });
        Ok(Norm { gamma, beta, mean, var })
    }

    pub fn prelu(&mut self, name: &str, channels: usize, extent: Extent) -> Result<ParamId> {
        let id = self.params.insert(
            format!("{name}.slope"),
            Tensor::scalar(E::of(PRELU_INIT)).reshape(&[1])?,
            ParamKind::Trainable,
        )?;
        self.inventory.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Prelu,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            dilation: 1,
            extent,
            params: 1,
        });
        Ok(id)
    }

    /// 3×3 Conv + BN + ReLU.
    pub fn block(&mut self, name: &str, cin: usize, cout: usize, dilation: usize, extent: Extent) -> Result<Block> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, dilation, extent)?;
        let norm = self.norm(&format!("{name}.bn"), cout, extent)?;
        Ok(Block {
            conv,
            norm: Some(norm),
            relu: true,
        })
    }
}

pub(crate) fn build_layout<E: Element>(cfg: &ModelConfig, b: &mut Builder<'_, E>) -> Result<Layout> {
    let (c, w) = (cfg.in_channels, cfg.width);
    let v = cfg.variant;
    let full = Extent::Level(0);

    let mut estimator = Vec::with_capacity(7);
    estimator.push(Block {
        conv: b.conv("estimator.0.conv", c, w, 3, 1, full)?,
        norm: None,
        relu: true,
    });
    for i in 1..6 {
        estimator.push(b.block(&format!("estimator.{i}"), w, w, 1, full)?);
    }
    estimator.push(Block {
        conv: b.conv("estimator.6.conv", w, c, 3, 1, full)?,
        norm: None,
        relu: false,
    });

    let fusion_in = b.conv("fusion_in", 2 * c, w, 3, 1, full)?;

    let layout = v.attention();
    let scam = if layout == AttentionLayout::Disabled {
        None
    } else {
        let conv_a = b.conv("scam.conv_a", w, w, 3, 1, full)?;
        let slope = b.prelu("scam.prelu", w, full)?;
        let conv_b = b.conv("scam.conv_b", w, w, 3, 1, full)?;
        let sam = if layout == AttentionLayout::ChannelOnly {
            None
        } else {
            Some(Sam {
                conv: b.conv("scam.sam.conv", 2, 1, cfg.sam_kernel, 1, full)?,
                norm: b.norm("scam.sam.bn", 1, full)?,
            })
        };
        let cam = if layout == AttentionLayout::SpatialOnly {
            None
        } else {
            let r = w / cfg.cam_reduction;
            Some(Cam {
                down: b.conv("scam.cam.down", w, r, 1, 1, Extent::Global)?,
                up: b.conv("scam.cam.up", r, w, 1, 1, Extent::Global)?,
            })
        };
        let fuse_in = if layout == AttentionLayout::Parallel { 2 * w } else { w };
        let fuse = b.conv("scam.fuse", fuse_in, w, 3, 1, full)?;
        Some(Scam {
            conv_a,
            slope,
            conv_b,
            sam,
            cam,
            fuse,
            layout,
        })
    };

    let upper = if v.has_upper() {
        let levels = [0u8, 1, 2, 1, 0];
        let mut stages: [Vec<Block>; 5] = Default::default();
        for (s, stage) in stages.iter_mut().enumerate() {
            for k in 0..cfg.upper_blocks[s] {
                stage.push(b.block(&format!("upper.stage{s}.{k}"), w, w, 1, Extent::Level(levels[s]))?);
            }
        }
        let proj = b.conv("upper.proj", w, c, 3, 1, full)?;
        Some(Upper { stages, proj })
    } else {
        None
    };

    let lower = if v.has_lower() {
        let layers = cfg
            .lower_rates
            .iter()
            .enumerate()
            .map(|(l, &d)| b.block(&format!("lower.{l}"), w, w, d, full))
            .collect::<Result<Vec<_>>>()?;
        let proj = b.conv("lower.proj", w, c, 3, 1, full)?;
        Some(Lower { layers, proj })
    } else {
        None
    };

    let head_in = if v.has_upper() && v.has_lower() { 2 * c } else { c };
    // zero weights: the untrained model is the identity `x̂ = y`
    let head = b.conv("head", head_in, c, 3, 1, full)?;
    b.params.get_mut(head.weight).data_mut().fill(E::zero());

    Ok(Layout {
        estimator,
        fusion_in,
        scam,
        upper,
        lower,
        head,
    })
}
