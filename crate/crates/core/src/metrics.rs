//! Image quality metrics, model complexity, receptive fields and the
//! benchmark runner.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{add_awgn, quantize, ImageBuffer};
use crate::model::{Dcanet, Extent, LayerKind, ModelConfig, Variant};
use crate::nn::{batch_norm, conv2d, relu, BatchNormConfig, ConvGeometry, NormMode};
use crate::tensor::{mul, sum_all, Element, Tape, Tensor};
use crate::train::iteration_rng;
use crate::{Error, Result};

fn same_dims(op: &str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::InvalidArgument(format!(
            "{op}: {}×{}×{} vs {}×{}×{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR in dB after clamping and 8-bit quantisation of both images;
/// `f64::INFINITY` when they quantise identically.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_dims("psnr", a, b)?;
    let sse: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = quantize(x) as i64 - quantize(y) as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / a.data().len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * src[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity: 11×11 Gaussian window (σ = 1.5), valid
/// positions only, K1 = 0.01, K2 = 0.03, dynamic range 1. Colour images
/// average the per-channel values. No quantisation is applied.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Trainable scalars: conv weights and biases, batch-norm scale and shift,
/// PReLU slopes. Running statistics are not counted.
pub fn count_params<E: Element>(model: &Dcanet<E>) -> usize {
    model.param_count()
}

fn extent_at(size: usize, level: u8) -> usize {
    (0..level).fold(size, |s, _| s.div_ceil(2))
}

/// Multiply-accumulates of every convolution for one `height×width` image.
pub fn count_macs<E: Element>(model: &Dcanet<E>, height: usize, width: usize) -> u64 {
    model
        .inventory()
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
        .map(|l| {
            let pixels = match l.extent {
                Extent::Level(k) => extent_at(height, k) * extent_at(width, k),
                Extent::Global => 1,
            } as u64;
            (l.out_channels * l.in_channels * l.kernel * l.kernel) as u64 * pixels
        })
        .sum()
}

/// Resampling applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    None,
    /// 2×2 max-pool, stride 2.
    Pool2,
    /// ×2 bilinear upsampling.
    Up2,
}

/// One element of a layer sequence for receptive-field arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfLayer {
    pub kernel: usize,
    pub dilation: usize,
    pub resample: Resample,
}

impl RfLayer {
    pub fn conv(kernel: usize, dilation: usize) -> Self {
        RfLayer {
            kernel,
            dilation,
            resample: Resample::None,
        }
    }

    pub fn pool() -> Self {
        RfLayer {
            kernel: 1,
            dilation: 1,
            resample: Resample::Pool2,
        }
    }

    pub fn up() -> Self {
        RfLayer {
            kernel: 1,
            dilation: 1,
            resample: Resample::Up2,
        }
    }
}

/// Receptive field in input pixels: `rf ← rf + (k − 1)·d·stride` per layer,
/// where pooling doubles `stride` (after adding its own 2×2 window) and
/// upsampling halves it (after adding one low-resolution tap).
pub fn receptive_field(layers: &[RfLayer]) -> usize {
    let (mut rf, mut stride) = (1usize, 1usize);
    for l in layers {
        rf += (l.kernel - 1) * l.dilation * stride;
        match l.resample {
            Resample::None => {}
            Resample::Pool2 => {
                rf += stride;
                stride *= 2;
            }
            Resample::Up2 => {
                rf += stride;
                stride = (stride / 2).max(1);
            }
        }
    }
    rf
}

/// The dilated stack of the lower branch (without its projection).
pub fn lower_branch_layers(config: &ModelConfig) -> Vec<RfLayer> {
    config.lower_rates.iter().map(|&d| RfLayer::conv(3, d)).collect()
}

/// The U-shaped upper branch including its projection.
pub fn upper_branch_layers(config: &ModelConfig) -> Vec<RfLayer> {
    let b = config.upper_blocks;
    let mut v = Vec::new();
    for (s, &n) in b.iter().enumerate() {
        v.extend(std::iter::repeat_n(RfLayer::conv(3, 1), n));
        match s {
            0 | 1 => v.push(RfLayer::pool()),
            2 | 3 => v.push(RfLayer::up()),
            _ => {}
        }
    }
    v.push(RfLayer::conv(3, 1));
    v
}

/// Gradient-reachability of the centre output pixel of a dilated stack.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddingReport {
    pub receptive_field: usize,
    /// Nonzero input-gradient pixels inside the receptive-field square.
    pub reached: usize,
    /// Nonzero input-gradient pixels outside it (should be 0).
    pub outside: usize,
    pub density: f64,
}

fn probe_extent(rf: usize) -> usize {
    rf + 8
}

fn gridding_report(grad: &Tensor<f64>, rf: usize) -> Result<GriddingReport> {
    let (_, c, h, w) = grad.nchw()?;
    let (ci, cj) = (h / 2, w / 2);
    let half = rf / 2;
    let (mut reached, mut outside) = (0, 0);
    for i in 0..h {
        for j in 0..w {
            let any = (0..c).any(|ch| grad.data()[(ch * h + i) * w + j] != 0.0);
            let inside = i.abs_diff(ci) <= half && j.abs_diff(cj) <= half;
            match (any, inside) {
                (true, true) => reached += 1,
                (true, false) => outside += 1,
                _ => {}
            }
        }
    }
    Ok(GriddingReport {
        receptive_field: rf,
        reached,
        outside,
        density: reached as f64 / (rf * rf) as f64,
    })
}

/// Seeds the centre pixel of channel 0 and returns `d out / d input`.
fn centre_gradient(
    channels: usize,
    size: usize,
    run: impl FnOnce(&mut Tape<f64>, crate::Var) -> Result<crate::Var>,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[1, channels, size, size])?, true);
    let out = run(&mut tape, x)?;
    let (n, c, h, w) = tape.value(out).nchw()?;
    let mut mask = vec![0.0; n * c * h * w];
    mask[(h / 2) * w + w / 2] = 1.0;
    let m = tape.constant(Tensor::from_vec(&[n, c, h, w], mask)?);
    let picked = mul(&mut tape, out, m)?;
    let s = sum_all(&mut tape, picked)?;
    tape.backward(s)?;
    tape.take_grad(x)
        .ok_or_else(|| Error::MissingGradient("probe input".into()))
}

/// Probe of the lower branch built from `config` (at `width` channels) with
/// positive weights, zero biases and identity batch norms in eval mode.
pub fn gridding_probe(config: &ModelConfig, width: usize) -> Result<GriddingReport> {
    let cfg = ModelConfig {
        width,
        cam_reduction: 1,
        variant: Variant::LowerOnly,
        ..config.clone()
    };
    let mut model = Dcanet::<f64>::new(cfg, 0)?;
    let names: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, e)| e.name.starts_with("lower."))
        .map(|(id, e)| (id, e.name.clone()))
        .collect();
    for (id, name) in names {
        let t = model.params_mut().get_mut(id);
        let fill = if name.ends_with(".weight") {
            1.0 / (t.numel() / t.dims()[0]) as f64
        } else if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean") {
            0.0
        } else {
            1.0
        };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let rf = receptive_field(&lower_branch_layers(&config.clone()));
    let size = probe_extent(rf);
    let grad = centre_gradient(width, size, |tape, x| {
        let bound = model.bind(tape, false);
        model.lower_stack_forward(tape, &bound, x, NormMode::Eval)
    })?;
    gridding_report(&grad, rf)
}

/// Probe of a plain stack of 3×3 Conv + identity BN + ReLU layers with the
/// given dilation rates (any length).
pub fn gridding_probe_rates(rates: &[usize], width: usize) -> Result<GriddingReport> {
    let layers: Vec<RfLayer> = rates.iter().map(|&d| RfLayer::conv(3, d)).collect();
    let rf = receptive_field(&layers);
    let size = probe_extent(rf);
    let grad = centre_gradient(width, size, |tape, mut x| {
        let wt = tape.constant(Tensor::full(&[width, width, 3, 3], 1.0 / (9 * width) as f64)?);
        let gamma = tape.constant(Tensor::ones(&[width])?);
        let beta = tape.constant(Tensor::zeros(&[width])?);
        let (mut mean, mut var) = (vec![0.0; width], vec![1.0; width]);
        for &d in rates {
            x = conv2d(tape, x, wt, None, ConvGeometry::same(3, d))?;
            x = batch_norm(tape, x, gamma, beta, &mut mean, &mut var, BatchNormConfig::default(), NormMode::Eval)?;
            x = relu(tape, x)?;
        }
        Ok(x)
    })?;
    gridding_report(&grad, rf)
}

/// Anything that maps a noisy image to a restored one.
pub trait Denoiser {
    fn denoise(&mut self, noisy: &ImageBuffer) -> Result<ImageBuffer>;
}

impl<F: FnMut(&ImageBuffer) -> Result<ImageBuffer>> Denoiser for F {
    fn denoise(&mut self, noisy: &ImageBuffer) -> Result<ImageBuffer> {
        self(noisy)
    }
}

impl Denoiser for Dcanet<f32> {
    fn denoise(&mut self, noisy: &ImageBuffer) -> Result<ImageBuffer> {
        let (out, _) = self.infer(&noisy.to_tensor())?;
        ImageBuffer::from_tensor(&out, 0)
    }
}

/// Returns `noisy` unchanged.
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&mut self, noisy: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(noisy.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub image: String,
    /// NaN for real-noise pairs.
    pub sigma: f64,
    pub noisy_psnr: f64,
    pub psnr: f64,
    /// NaN when the image is smaller than the SSIM window.
    pub ssim: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

fn fmt_sigma(v: f64) -> String {
    if v.is_nan() {
        "real".into()
    } else {
        format!("{v}")
    }
}

impl BenchReport {
    pub fn sigmas(&self) -> Vec<f64> {
        let mut s: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !s.iter().any(|v| v.to_bits() == r.sigma.to_bits()) {
                s.push(r.sigma);
            }
        }
        s
    }

    fn at(&self, sigma: f64) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.sigma.to_bits() == sigma.to_bits())
    }

    pub fn mean_psnr(&self, sigma: f64) -> f64 {
        mean(self.at(sigma).map(|r| r.psnr))
    }

    pub fn mean_noisy_psnr(&self, sigma: f64) -> f64 {
        mean(self.at(sigma).map(|r| r.noisy_psnr))
    }

    pub fn mean_ssim(&self, sigma: f64) -> f64 {
        mean(self.at(sigma).map(|r| r.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,sigma,psnr_db,ssim,ms_per_image\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.4},{:.1}", r.image, fmt_sigma(r.sigma), fmt_db(r.psnr), r.ssim, r.ms);
        }
        s
    }

    /// One block per noise level with per-image rows and the mean.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.image.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        for sigma in self.sigmas() {
            let _ = writeln!(s, "σ = {}", fmt_sigma(sigma));
            let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>7}", "image", "noisy", "psnr", "ssim");
            for r in self.at(sigma) {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>8}  {:>8}  {:>7.4}",
                    r.image,
                    fmt_db(r.noisy_psnr),
                    fmt_db(r.psnr),
                    r.ssim
                );
            }
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}  {:>7.4}\n",
                "mean",
                fmt_db(self.mean_noisy_psnr(sigma)),
                fmt_db(self.mean_psnr(sigma)),
                self.mean_ssim(sigma)
            );
        }
        s
    }
}

/// Noise field for image `index` at level `sigma`, independent of
/// evaluation order.
pub fn bench_noisy(clean: &ImageBuffer, seed: u64, index: usize, sigma: f64) -> Result<ImageBuffer> {
    let stream = ((index as u64) << 32) | (sigma * 1000.0).round() as u64;
    add_awgn(clean, sigma, &mut iteration_rng(seed, stream))
}

/// Corrupts every image at every level, restores it and scores the result.
pub fn bench_run<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    images: &[(String, ImageBuffer)],
    sigmas: &[f64],
    seed: u64,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &sigma in sigmas {
        // noise synthesis is independent per image, so it can run in parallel
        let noisy: Vec<ImageBuffer> = images
            .par_iter()
            .enumerate()
            .map(|(i, (_, clean))| bench_noisy(clean, seed, i, sigma))
            .collect::<Result<_>>()?;
        for ((name, clean), y) in images.iter().zip(&noisy) {
            report.rows.push(score(denoiser, name, sigma, y, clean)?);
        }
    }
    Ok(report)
}

fn score<D: Denoiser + ?Sized>(denoiser: &mut D, name: &str, sigma: f64, y: &ImageBuffer, clean: &ImageBuffer) -> Result<BenchRow> {
    let t0 = Instant::now();
    let out = denoiser.denoise(y)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(BenchRow {
        image: name.to_string(),
        sigma,
        noisy_psnr: psnr(y, clean)?,
        psnr: psnr(&out, clean)?,
        ssim: ssim(&out.clamped(), clean).unwrap_or(f64::NAN),
        ms,
    })
}

/// Scores real noisy/clean pairs (`sigma` is NaN in the rows).
pub fn bench_pairs<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    pairs: &[(String, ImageBuffer, ImageBuffer)],
) -> Result<BenchReport> {
    let rows = pairs
        .iter()
        .map(|(name, noisy, clean)| score(denoiser, name, f64::NAN, noisy, clean))
        .collect::<Result<_>>()?;
    Ok(BenchReport { rows })
}
