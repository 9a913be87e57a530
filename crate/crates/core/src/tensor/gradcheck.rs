//! Central-difference gradient checking in 64-bit arithmetic.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Smallest half-width tried when refining around a kink.
const MIN_STEP: f64 = 1e-9;
/// Rounding error of one function value, in units of `ε·|f|`.
const NOISE_ULPS: f64 = 16.0;

/// Gradient check configuration.
///
/// Each coordinate is compared by central differences. When the two
/// one-sided quotients disagree (a ReLU or max kink lies inside the
/// interval) the half-width is divided by ten, down to `1e-9`. Gradients
/// smaller than the rounding noise of the quotient, `16·ε·|f|/(h·tol)`,
/// are compared absolutely.
#[derive(Clone, Debug)]
pub struct GradCheck {
    step: f64,
    tolerance: f64,
    abs_floor: f64,
    coords: Option<usize>,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Half-width finally used for this coordinate.
    pub step: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !(e.rel_err <= self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.entries.is_empty() && self.failures().next().is_none()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(e) = &self.error {
            return write!(f, "gradient check could not run: {e}");
        }
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.1e})",
            self.entries.len(),
            self.max_rel_err(),
            self.tolerance
        )?;
        for e in self.failures().take(10) {
            write!(
                f,
                "\n  input {} [{}]: tape {:.9e} vs numeric {:.9e} (rel {:.3e})",
                e.input, e.index, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

impl GradCheck {
    /// `step` is the central-difference half-width, clamped to `[1e-8, 1e-2]`.
    pub fn new(step: f64, tolerance: f64) -> Self {
        GradCheck {
            step: step.clamp(1e-8, 1e-2),
            tolerance,
            abs_floor: 1e-8,
            coords: None,
            seed: 0,
        }
    }

    /// Check only `n` randomly chosen coordinates instead of all of them.
    pub fn coords(mut self, n: usize) -> Self {
        self.coords = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Magnitude below which errors are measured absolutely (raised
    /// automatically to the rounding-noise level).
    pub fn abs_floor(mut self, floor: f64) -> Self {
        self.abs_floor = floor;
        self
    }

    /// Compares tape gradients of the scalar `f(inputs)` with central
    /// differences. Every input is a differentiable leaf.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut report = GradCheckReport {
            tolerance: self.tolerance,
            ..Default::default()
        };
        let eval = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), want_grad)).collect();
            let out = f(&mut tape, &vars)?;
            let value = tape.value(out).item()?;
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            tape.backward(out)?;
            let grads = vars.iter().map(|&v| tape.take_grad(v)).collect();
            Ok((value, grads))
        };

        let (f0, grads) = match eval(inputs, true) {
            Ok(v) => v,
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        };

        let mut coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect();
        if let Some(n) = self.coords {
            if n < coords.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut picked: Vec<usize> = sample(&mut rng, coords.len(), n).into_vec();
                picked.sort_unstable();
                coords = picked.into_iter().map(|k| coords[k]).collect();
            }
        }

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (input, index) in coords {
            let orig = work[input].data()[index];
            let mut h = self.step;
            let (numeric, floor) = loop {
                work[input].data_mut()[index] = orig + h;
                let plus = eval(&work, false);
                work[input].data_mut()[index] = orig - h;
                let minus = eval(&work, false);
                work[input].data_mut()[index] = orig;
                let (plus, minus) = match (plus, minus) {
                    (Ok((p, _)), Ok((m, _))) => (p, m),
                    (Err(e), _) | (_, Err(e)) => {
                        report.error = Some(e.to_string());
                        return report;
                    }
                };
                // rounding of f itself, seen through the 1/h of the quotient
                let noise = NOISE_ULPS * f64::EPSILON * f0.abs().max(plus.abs()).max(minus.abs()) / h;
                let floor = self.abs_floor.max(noise / self.tolerance);
                let (right, left) = ((plus - f0) / h, (f0 - minus) / h);
                let kink = (right - left).abs() > self.tolerance * right.abs().max(left.abs()).max(floor);
                if !kink || h / 10.0 < MIN_STEP {
                    break ((plus - minus) / (2.0 * h), floor);
                }
                h /= 10.0;
            };
            let analytic = grads[input].as_ref().map_or(0.0, |g| g.data()[index]);
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            report.entries.push(GradCheckEntry {
                input,
                index,
                analytic,
                numeric,
                step: h,
                rel_err: (analytic - numeric).abs() / denom,
            });
        }
        report
    }

    /// Single-input convenience wrapper around [`GradCheck::run`].
    pub fn check<F>(&self, x: &Tensor<f64>, f: F) -> GradCheckReport
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        self.run(std::slice::from_ref(x), |tape, v| f(tape, v[0]))
    }
}
