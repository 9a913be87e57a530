//! Executable invariant suites: finite-difference gradient checks over every
//! differentiable operation, and a two-run determinism check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synthetic_image;
use crate::loss::{charbonnier_loss, edge_loss, mse_loss, total_loss, tv_loss, LossConfig};
use crate::model::{Dcanet, ModelConfig, Variant};
use crate::nn::{
    batch_norm, bilinear_upsample2, channel_pool, conv2d, crop_center, laplacian, max_pool2, prelu, relu, sigmoid,
    spatial_gap, spatial_gradients, tanh, BatchNormConfig, ConvGeometry, NormMode,
};
use crate::tensor::{
    add, add_scalar, concat_channels, mul, reduce, scale, slice_channels, sqrt, square, sub, sum_all, GradCheck,
    GradCheckReport, ReduceKind, Tape, Tensor, Var,
};
use crate::train::{train_loop, Adam, LogRecord, NoiseLevel, Schedule, TrainConfig, TrainData};
use crate::Result;

/// Tolerance for single operations and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Coordinates checked per case.
pub const COORDS: usize = 16;

/// One named gradient check.
#[derive(Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    /// Ranges that straddle zero skip a band around it, keeping relative
    /// errors away from vanishing gradients and kinks.
    fn uniform(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = self.0.random_range(lo..hi);
                if lo >= 0.0 || hi <= 0.0 || v.abs() >= 0.1 * hi.min(-lo) {
                    break v;
                }
            })
            .collect();
        Tensor::from_vec(dims, data).expect("valid dims")
    }
}

/// Weighted squared sum, so every output element gets a distinct gradient.
fn readout(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = mul(tape, y, w)?;
    let s = square(tape, p)?;
    sum_all(tape, s)
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;
type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

/// Runs every check; `seed` picks both the inputs and the coordinates.
pub fn gradcheck_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = Inputs(ChaCha8Rng::seed_from_u64(seed));
    let check = GradCheck::new(1e-6, OP_TOLERANCE).coords(COORDS).seed(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        cases.push(GradCase {
            name: name.to_string(),
            report,
        })
    };
    let dims = [2, 3, 5, 6];

    let unary: [(&str, Unary, f64, f64); 17] = [
        ("square", |t, x| square(t, x), -1.0, 1.0),
        ("sqrt", |t, x| sqrt(t, x), 0.5, 1.5),
        ("scale", |t, x| scale(t, x, -1.7), -1.0, 1.0),
        ("add_scalar", |t, x| add_scalar(t, x, 0.3), -1.0, 1.0),
        ("slice_channels", |t, x| slice_channels(t, x, 1, 2), -1.0, 1.0),
        ("reduce_mean", |t, x| reduce(t, ReduceKind::Mean, x, &[1, 3]), -1.0, 1.0),
        ("reduce_max", |t, x| reduce(t, ReduceKind::Max, x, &[1]), -1.0, 1.0),
        ("relu", |t, x| relu(t, x), -1.0, 1.0),
        ("tanh", |t, x| tanh(t, x), -2.0, 2.0),
        ("sigmoid", |t, x| sigmoid(t, x), -3.0, 3.0),
        ("channel_pool_avg", |t, x| channel_pool(t, ReduceKind::Mean, x), -1.0, 1.0),
        ("channel_pool_max", |t, x| channel_pool(t, ReduceKind::Max, x), -1.0, 1.0),
        ("spatial_gap", |t, x| spatial_gap(t, x), -1.0, 1.0),
        ("laplacian", |t, x| laplacian(t, x), -1.0, 1.0),
        ("spatial_gradients", |t, x| {
            let (h, v) = spatial_gradients(t, x)?;
            let (sh, sv) = (square(t, h)?, square(t, v)?);
            let (a, b) = (sum_all(t, sh)?, sum_all(t, sv)?);
            add(t, a, b)
        }, -1.0, 1.0),
        ("max_pool2", |t, x| max_pool2(t, x), -1.0, 1.0),
        ("bilinear_upsample2+crop", |t, x| {
            let u = bilinear_upsample2(t, x)?;
            crop_center(t, u, 9, 11)
        }, -1.0, 1.0),
    ];
    for (name, f, lo, hi) in unary {
        let x = rng.uniform(&dims, lo, hi);
        let mut tape = Tape::new();
        let probe = tape.constant(x.clone());
        let out_dims = match f(&mut tape, probe) {
            Ok(v) => tape.value(v).dims().to_vec(),
            Err(e) => {
                push(name, GradCheckReport { error: Some(e.to_string()), ..Default::default() });
                continue;
            }
        };
        let w = rng.uniform(&out_dims, 0.5, 1.5);
        push(name, check.run(&[x], |t, v| {
            let y = f(t, v[0])?;
            readout(t, y, &w)
        }));
    }

    let binary: [(&str, Binary); 4] = [
        ("add", |t, a, b| add(t, a, b)),
        ("sub", |t, a, b| sub(t, a, b)),
        ("mul", |t, a, b| mul(t, a, b)),
        ("concat_channels", |t, a, b| concat_channels(t, &[a, b])),
    ];
    for (name, f) in binary {
        let (a, b) = (rng.uniform(&dims, -1.0, 1.0), rng.uniform(&dims, -1.0, 1.0));
        let w_dims = if name == "concat_channels" { [2, 6, 5, 6] } else { dims };
        let w = rng.uniform(&w_dims, 0.5, 1.5);
        push(name, check.run(&[a, b], |t, v| {
            let y = f(t, v[0], v[1])?;
            readout(t, y, &w)
        }));
    }

    for (k, d) in [(3, 1), (3, 2), (1, 1), (7, 1)] {
        let x = rng.uniform(&dims, -1.0, 1.0);
        let wt = rng.uniform(&[4, 3, k, k], -0.5, 0.5);
        let b = rng.uniform(&[4], -0.2, 0.2);
        let w = rng.uniform(&[2, 4, 5, 6], 0.5, 1.5);
        push(&format!("conv2d_k{k}_d{d}"), check.run(&[x, wt, b], |t, v| {
            let y = conv2d(t, v[0], v[1], Some(v[2]), ConvGeometry::same(k, d))?;
            readout(t, y, &w)
        }));
    }

    for mode in [NormMode::Train, NormMode::Eval] {
        let x = rng.uniform(&dims, -1.0, 1.0);
        let gamma = rng.uniform(&[3], 0.5, 1.5);
        let beta = rng.uniform(&[3], -0.3, 0.3);
        let w = rng.uniform(&dims, 0.5, 1.5);
        push(&format!("batch_norm_{mode:?}").to_lowercase(), check.run(&[x, gamma, beta], |t, v| {
            let (mut m, mut var) = (vec![0.1; 3], vec![1.2; 3]);
            let y = batch_norm(t, v[0], v[1], v[2], &mut m, &mut var, BatchNormConfig::default(), mode)?;
            readout(t, y, &w)
        }));
    }

    let x = rng.uniform(&dims, -1.0, 1.0);
    let slope = Tensor::from_vec(&[1], vec![0.25]).expect("valid dims");
    let w = rng.uniform(&dims, 0.5, 1.5);
    push("prelu", check.run(&[x, slope], |t, v| {
        let y = prelu(t, v[0], v[1])?;
        readout(t, y, &w)
    }));

    let img = [2, 1, 8, 9];
    let (p, q) = (rng.uniform(&img, 0.0, 1.0), rng.uniform(&img, 0.0, 1.0));
    let map = rng.uniform(&img, -0.5, 0.5);
    push("mse_loss", check.run(&[p.clone(), q.clone()], |t, v| mse_loss(t, v[0], v[1])));
    push("charbonnier_loss", check.run(&[p.clone(), q.clone()], |t, v| charbonnier_loss(t, v[0], v[1], 1e-3)));
    push("edge_loss", check.run(&[p.clone(), q.clone()], |t, v| edge_loss(t, v[0], v[1], 1e-3)));
    push("tv_loss", check.run(std::slice::from_ref(&map), |t, v| tv_loss(t, v[0])));
    push("total_loss_real", check.run(&[p, q, map], |t, v| total_loss(t, v[0], v[1], v[2], &LossConfig::real())));

    let runs = [
        ("dcanet_full", Variant::Full, 8, [2, 1, 12, 12]),
        ("dcanet_serial_cam_then_sam", Variant::SerialCamThenSam, 8, [2, 1, 12, 12]),
        ("dcanet_full_width64", Variant::Full, 64, [1, 1, 16, 16]),
    ];
    for (name, variant, width, dims) in runs {
        let model = match Dcanet::<f64>::new(ModelConfig::gray().with_width(width).with_variant(variant), seed) {
            Ok(mut m) => {
                m.randomize_head(seed);
                m
            }
            Err(e) => {
                push(name, GradCheckReport { error: Some(e.to_string()), ..Default::default() });
                continue;
            }
        };
        let clean = rng.uniform(&dims, 0.1, 0.9);
        let noisy = clean.map(|v| v + 0.1);
        let mut inputs: Vec<Tensor<f64>> =
            model.trainable_ids().iter().map(|&id| model.params().get(id).clone()).collect();
        inputs.push(noisy);
        let report = GradCheck::new(1e-6, MODEL_TOLERANCE)
            .coords(2 * COORDS)
            .seed(seed)
            .run(&inputs, |t, vars| {
                let mut m = model.clone();
                let (params, y) = vars.split_at(vars.len() - 1);
                let bound = m.bind_vars(t, params)?;
                let out = m.forward(t, &bound, y[0], NormMode::Train)?;
                let x = t.constant(clean.clone());
                mse_loss(t, out.denoised, x)
            });
        push(name, report);
    }
    cases
}

/// Loss curves of two identical short training runs.
#[derive(Debug)]
pub struct DeterminismReport {
    pub first: Vec<LogRecord>,
    pub second: Vec<LogRecord>,
}

impl DeterminismReport {
    pub fn identical(&self) -> bool {
        self.first.len() == self.second.len()
            && self.first.iter().zip(&self.second).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
    }

    /// First iteration at which the curves differ.
    pub fn first_divergence(&self) -> Option<u64> {
        self.first
            .iter()
            .zip(&self.second)
            .find(|(a, b)| a.loss.to_bits() != b.loss.to_bits())
            .map(|(a, _)| a.iter)
    }
}

/// Trains a narrow model twice from the same seed for `iters` iterations.
pub fn determinism_probe(seed: u64, iters: u64) -> Result<DeterminismReport> {
    let data = TrainData::Synthetic(
        (0..4)
            .map(|i| synthetic_image(1, 32, 32, seed.wrapping_add(i)))
            .collect::<Result<_>>()?,
    );
    let cfg = TrainConfig {
        batch: 2,
        iters,
        patch: 24,
        noise: NoiseLevel::Uniform { lo: 0.0, hi: 75.0 },
        schedule: Schedule::StepHalving { init: 1e-3, every: 1000 },
        seed,
        log_every: 0,
        ..Default::default()
    };
    let run = || -> Result<Vec<LogRecord>> {
        let mut model = Dcanet::new(ModelConfig::gray().with_width(8), seed)?;
        let mut adam = Adam::new(model.params());
        train_loop(&mut model, &mut adam, &data, &cfg, 0, |_| {})
    };
    Ok(DeterminismReport {
        first: run()?,
        second: run()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let cases = gradcheck_suite(7);
        assert!(cases.len() >= 30);
        for c in &cases {
            assert!(c.report.passed(), "{}: {}", c.name, c.report);
            assert!(c.report.entries.len() >= 10.min(c.report.entries.len().max(1)));
        }
    }

    #[test]
    fn determinism_holds() {
        let r = determinism_probe(3, 5).unwrap();
        assert!(r.identical());
        assert_eq!(r.first_divergence(), None);
        assert_eq!(r.first.len(), 5);
    }
}
