//! Optimiser, learning-rate schedules, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{make_checkpoint, restore_checkpoint, Checkpoint, Progress, Restored, MAGIC, VERSION};
pub use schedule::{cosine_at, Schedule};

use crate::data::{add_awgn, augment, load_image, stack, to_grayscale, DatasetManifest, ImageBuffer, Split};
use crate::loss::{mse_loss, total_loss, LossConfig};
use crate::model::Dcanet;
use crate::nn::NormMode;
use crate::tensor::{add, scale, Tape, Tensor};
use crate::{Error, Result};

/// Noise level of synthetic training pairs, in 8-bit units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Fixed(f64),
    /// Drawn uniformly per patch.
    Uniform { lo: f64, hi: f64 },
}

impl NoiseLevel {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseLevel::Fixed(s) => s,
            NoiseLevel::Uniform { lo, hi } if hi > lo => rng.random_range(lo..=hi),
            NoiseLevel::Uniform { lo, .. } => lo,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub batch: usize,
    pub iters: u64,
    pub patch: usize,
    pub noise: NoiseLevel,
    pub augment: bool,
    pub seed: u64,
    pub log_every: u64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Weight of an extra squared-error term pulling the estimator output
    /// towards `σ/255`; zero disables it.
    pub estimator_supervision: f64,
    /// Batches prepared ahead by the loader thread.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            schedule: Schedule::step_halving(),
            batch: 24,
            iters: 1000,
            patch: 48,
            noise: NoiseLevel::Uniform { lo: 0.0, hi: 75.0 },
            augment: true,
            seed: 0,
            log_every: 50,
            log_path: None,
            checkpoint_every: 1000,
            checkpoint_dir: None,
            estimator_supervision: 0.0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        match self.noise {
            NoiseLevel::Fixed(s) if !(0.0..=100.0).contains(&s) => {
                Err(Error::Config(format!("noise level {s} outside [0, 100]")))
            }
            NoiseLevel::Uniform { lo, hi } if !(0.0 <= lo && lo <= hi && hi <= 100.0) => {
                Err(Error::Config(format!("noise range [{lo}, {hi}] outside [0, 100]")))
            }
            _ => Ok(()),
        }
    }
}

/// Training images: clean only (noise is synthesised) or noisy/clean pairs.
#[derive(Clone, Debug)]
pub enum TrainData {
    Synthetic(Vec<ImageBuffer>),
    Paired(Vec<(ImageBuffer, ImageBuffer)>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Synthetic(v) => v.len(),
            TrainData::Paired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads one split of a manifest, converting to gray when `channels == 1`.
    pub fn from_manifest(m: &DatasetManifest, split: Split, channels: usize) -> Result<Self> {
        let convert = |im: ImageBuffer| -> Result<ImageBuffer> {
            match (channels, im.channels()) {
                (1, _) => Ok(to_grayscale(&im)),
                (3, 3) => Ok(im),
                (c, k) => Err(Error::Config(format!("cannot train a {c}-channel model on {k}-channel images"))),
            }
        };
        let entries: Vec<_> = m.split(split).collect();
        if entries.is_empty() {
            return Err(Error::Manifest(format!("no {split:?} entries")));
        }
        if entries.iter().all(|e| e.noisy.is_none()) {
            let ims = entries
                .iter()
                .map(|e| convert(load_image(&e.clean)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainData::Synthetic(ims))
        } else {
            let pairs = entries
                .iter()
                .map(|e| {
                    let noisy = e.noisy.as_ref().expect("paired manifest");
                    Ok((convert(load_image(noisy)?)?, convert(load_image(&e.clean)?)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainData::Paired(pairs))
        }
    }

    fn clean(&self, i: usize) -> &ImageBuffer {
        match self {
            TrainData::Synthetic(v) => &v[i],
            TrainData::Paired(v) => &v[i].1,
        }
    }

    /// Indices of images large enough for `patch`.
    fn usable(&self, patch: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let c = self.clean(i);
                let ok = c.height() >= patch && c.width() >= patch;
                if !ok {
                    warn!("skipping {}×{} training image: smaller than {patch}×{patch}", c.height(), c.width());
                }
                ok
            })
            .collect()
    }
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    /// Per-patch noise level in 8-bit units (NaN for real noise).
    pub sigmas: Vec<f64>,
}

/// Random generator of iteration `iter`: a ChaCha stream keyed by the seed,
/// so every batch is reproducible without replaying earlier ones.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

fn sample_batch_from(data: &TrainData, usable: &[usize], cfg: &TrainConfig, iter: u64) -> Result<Batch> {
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no training image is at least {0}×{0}",
            cfg.patch
        )));
    }
    let mut rng = iteration_rng(cfg.seed, iter);
    let (mut noisy, mut clean, mut sigmas) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch {
        let idx = usable[rng.random_range(0..usable.len())];
        let c = data.clean(idx);
        let top = rng.random_range(0..=c.height() - cfg.patch);
        let left = rng.random_range(0..=c.width() - cfg.patch);
        let t = if cfg.augment { rng.random_range(0..8u8) } else { 0 };
        let cp = augment(&c.crop(top, left, cfg.patch, cfg.patch)?, t)?;
        match data {
            TrainData::Synthetic(_) => {
                let s = cfg.noise.draw(&mut rng);
                noisy.push(add_awgn(&cp, s, &mut rng)?);
                sigmas.push(s);
            }
            TrainData::Paired(v) => {
                noisy.push(augment(&v[idx].0.crop(top, left, cfg.patch, cfg.patch)?, t)?);
                sigmas.push(f64::NAN);
            }
        }
        clean.push(cp);
    }
    Ok(Batch {
        noisy: stack(&noisy)?,
        clean: stack(&clean)?,
        sigmas,
    })
}

/// The batch drawn at iteration `iter`.
pub fn sample_batch(data: &TrainData, cfg: &TrainConfig, iter: u64) -> Result<Batch> {
    sample_batch_from(data, &data.usable(cfg.patch), cfg, iter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    /// Completed iterations (1-based).
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

/// One forward/backward/update step; returns the loss before the update.
pub fn train_step(model: &mut Dcanet<f32>, adam: &mut Adam<f32>, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let y = tape.constant(batch.noisy.clone());
    let x = tape.constant(batch.clean.clone());
    let out = model.forward(&mut tape, &bound, y, NormMode::Train)?;
    let mut loss = total_loss(&mut tape, out.denoised, x, out.noise_map, &cfg.loss)?;
    if cfg.estimator_supervision > 0.0 && batch.sigmas.iter().all(|s| s.is_finite()) {
        let dims = batch.noisy.dims().to_vec();
        let per = dims[1..].iter().product::<usize>();
        let target: Vec<f32> = batch
            .sigmas
            .iter()
            .flat_map(|&s| std::iter::repeat_n((s / 255.0) as f32, per))
            .collect();
        let t = tape.constant(Tensor::from_vec(&dims, target)?);
        let aux = mse_loss(&mut tape, out.noise_map, t)?;
        let aux = scale(&mut tape, aux, cfg.estimator_supervision)?;
        loss = add(&mut tape, loss, aux)?;
    }
    let value = tape.value(loss).item()?.as_f64_lossless();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads = model.collect_grads(&mut tape, &bound)?;
    adam.step(model.params_mut(), &grads, lr)?;
    Ok(value)
}

trait Widen {
    fn as_f64_lossless(self) -> f64;
}

impl Widen for f32 {
    fn as_f64_lossless(self) -> f64 {
        self as f64
    }
}

fn append_log(path: &Path, rec: &LogRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}\t{:e}\t{:.9}", rec.iter, rec.lr, rec.loss).map_err(|e| Error::io(path, e))
}

/// Runs iterations `start..cfg.iters`, calling `on_iter` after each one.
///
/// Batches are prepared on a loader thread; since each batch depends only on
/// the seed and its iteration index, the run is reproducible and resumable.
/// A non-finite loss stops training before the update is applied and, when a
/// checkpoint directory is configured, writes `diagnostic.dcan` there.
pub fn train_loop(
    model: &mut Dcanet<f32>,
    adam: &mut Adam<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    start: u64,
    mut on_iter: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if matches!(data, TrainData::Paired(_)) && matches!(cfg.loss.mode, crate::loss::LossMode::Mse) {
        info!("training on real noise pairs with the squared-error loss");
    }
    let usable = data.usable(cfg.patch);
    if usable.is_empty() {
        return Err(Error::Config(format!("no training image is at least {0}×{0}", cfg.patch)));
    }
    let per_epoch = (data.len() as u64).div_ceil(cfg.batch as u64).max(1);
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(cfg.prefetch.max(1));
        let usable = &usable;
        s.spawn(move || {
            for iter in start..cfg.iters {
                if tx.send(sample_batch_from(data, usable, cfg, iter)).is_err() {
                    break;
                }
            }
        });
        for iter in start..cfg.iters {
            let batch = rx
                .recv()
                .map_err(|_| Error::Config("batch loader stopped early".into()))??;
            let lr = cfg.schedule.lr_at(iter, per_epoch);
            let loss = train_step(model, adam, &batch, cfg, lr)?;
            let rec = LogRecord { iter: iter + 1, lr, loss };
            if !loss.is_finite() {
                if let Some(dir) = &cfg.checkpoint_dir {
                    let p = dir.join("diagnostic.dcan");
                    make_checkpoint(model, Some(adam), Some(Progress { iter, seed: cfg.seed }))?.save(&p)?;
                    warn!("non-finite loss; state before the failing step saved to {}", p.display());
                }
                return Err(Error::NonFiniteLoss { iter: iter + 1, loss });
            }
            records.push(rec);
            on_iter(&rec);
            if cfg.log_every > 0 && rec.iter % cfg.log_every == 0 {
                info!("iter {} lr {:.3e} loss {:.6}", rec.iter, lr, loss);
                if let Some(p) = &cfg.log_path {
                    append_log(p, &rec)?;
                }
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                if cfg.checkpoint_every > 0 && rec.iter % cfg.checkpoint_every == 0 {
                    let ck = make_checkpoint(model, Some(adam), Some(Progress { iter: rec.iter, seed: cfg.seed }))?;
                    ck.save(dir.join(format!("iter_{:08}.dcan", rec.iter)))?;
                    ck.save(dir.join("latest.dcan"))?;
                }
            }
        }
        drop(rx);
        Ok(())
    })?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_image;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch: 2,
            iters: 6,
            patch: 12,
            noise: NoiseLevel::Fixed(25.0),
            schedule: Schedule::StepHalving { init: 1e-3, every: 100 },
            seed: 5,
            ..Default::default()
        }
    }

    fn tiny_data() -> TrainData {
        TrainData::Synthetic((0..3).map(|i| synthetic_image(1, 20, 16, i).unwrap()).collect())
    }

    fn tiny_model() -> Dcanet<f32> {
        Dcanet::new(ModelConfig::gray().with_width(8), 1).unwrap()
    }

    #[test]
    fn batches_are_reproducible_and_distinct() {
        let (data, cfg) = (tiny_data(), tiny_cfg());
        let a = sample_batch(&data, &cfg, 3).unwrap();
        let b = sample_batch(&data, &cfg, 3).unwrap();
        let c = sample_batch(&data, &cfg, 4).unwrap();
        assert_eq!(a.noisy.data(), b.noisy.data());
        assert_ne!(a.noisy.data(), c.noisy.data());
        assert_eq!(a.noisy.dims(), &[2, 1, 12, 12]);
        assert_eq!(a.sigmas, vec![25.0, 25.0]);
    }

    #[test]
    fn uniform_levels_stay_in_range() {
        let cfg = TrainConfig {
            noise: NoiseLevel::Uniform { lo: 0.0, hi: 75.0 },
            batch: 8,
            ..tiny_cfg()
        };
        for it in 0..20 {
            let b = sample_batch(&tiny_data(), &cfg, it).unwrap();
            assert!(b.sigmas.iter().all(|s| (0.0..=75.0).contains(s)));
        }
    }

    #[test]
    fn identical_runs_match_and_resume_is_exact() {
        let (data, cfg) = (tiny_data(), tiny_cfg());
        let run = || {
            let mut m = tiny_model();
            let mut adam = Adam::new(m.params());
            let log = train_loop(&mut m, &mut adam, &data, &cfg, 0, |_| {}).unwrap();
            (m, log)
        };
        let (m1, l1) = run();
        let (_, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 6);

        let mut m = tiny_model();
        let mut adam = Adam::new(m.params());
        let half = TrainConfig { iters: 3, ..cfg.clone() };
        train_loop(&mut m, &mut adam, &data, &half, 0, |_| {}).unwrap();
        let bytes = make_checkpoint(&m, Some(&adam), Some(Progress { iter: 3, seed: cfg.seed }))
            .unwrap()
            .to_bytes();
        let r = restore_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let (mut m, mut adam) = (r.model, r.adam.unwrap());
        let rest = train_loop(&mut m, &mut adam, &data, &cfg, r.progress.unwrap().iter, |_| {}).unwrap();
        assert_eq!(rest, l1[3..].to_vec());
        for ((_, a), (_, b)) in m.params().iter().zip(m1.params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        assert!(m.params().is_finite());
        for (_, e) in m.params().iter().filter(|(_, e)| e.name.ends_with("running_var")) {
            assert!(e.value.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn logs_and_checkpoints_follow_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            log_every: 2,
            log_path: Some(dir.path().join("train.log")),
            checkpoint_every: 3,
            checkpoint_dir: Some(dir.path().join("ck")),
            ..tiny_cfg()
        };
        let mut m = tiny_model();
        let mut adam = Adam::new(m.params());
        train_loop(&mut m, &mut adam, &tiny_data(), &cfg, 0, |_| {}).unwrap();
        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        let iters: Vec<&str> = log.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(iters, vec!["2", "4", "6"]);
        assert!(log.lines().all(|l| l.split('\t').count() == 3));
        assert!(dir.path().join("ck/iter_00000003.dcan").exists());
        let latest = restore_checkpoint(&Checkpoint::load(dir.path().join("ck/latest.dcan")).unwrap()).unwrap();
        assert_eq!(latest.progress.unwrap().iter, 6);
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_cfg()
        };
        let mut m = tiny_model();
        let id = m.params().id("head.bias").unwrap();
        m.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
        let mut adam = Adam::new(m.params());
        let err = train_loop(&mut m, &mut adam, &tiny_data(), &cfg, 0, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iter: 1, .. }));
        assert!(dir.path().join("diagnostic.dcan").exists());
    }

    #[test]
    fn small_images_are_reported() {
        let data = TrainData::Synthetic(vec![synthetic_image(1, 8, 8, 0).unwrap()]);
        let mut m = tiny_model();
        let mut adam = Adam::new(m.params());
        assert!(train_loop(&mut m, &mut adam, &data, &tiny_cfg(), 0, |_| {}).is_err());
    }

    #[test]
    fn supervision_and_real_mode_run() {
        let cfg = TrainConfig {
            estimator_supervision: 0.5,
            iters: 2,
            ..tiny_cfg()
        };
        let mut m = tiny_model();
        let mut adam = Adam::new(m.params());
        train_loop(&mut m, &mut adam, &tiny_data(), &cfg, 0, |_| {}).unwrap();
        let pairs = (0..2)
            .map(|i| {
                let c = synthetic_image(1, 16, 16, i).unwrap();
                let n = add_awgn(&c, 15.0, &mut iteration_rng(9, i)).unwrap();
                (n, c)
            })
            .collect();
        let cfg = TrainConfig {
            loss: LossConfig::real(),
            iters: 2,
            ..tiny_cfg()
        };
        let log = train_loop(&mut m, &mut adam, &TrainData::Paired(pairs), &cfg, 0, |_| {}).unwrap();
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}
