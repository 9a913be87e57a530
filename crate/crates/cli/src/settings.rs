//! Flat training/model settings shared by the JSON config file and the
//! command-line flags (same names, snake_case in JSON, kebab-case on the
//! command line).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dcanet_core::loss::{LossConfig, LossMode};
use dcanet_core::model::{ModelConfig, Variant};
use dcanet_core::train::{NoiseLevel, Schedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Synthetic Gaussian noise on clean images, squared-error loss.
    Awgn,
    /// Noisy/clean pairs, Charbonnier + edge + TV loss.
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    // model
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Feature channels of hidden layers.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub cam_reduction: Option<usize>,
    #[arg(long)]
    pub sam_kernel: Option<usize>,

    // data and noise
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train on this many generated scenes instead of a manifest.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<NoiseMode>,
    /// Fixed noise level (overrides the range).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,

    // optimisation
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations between halvings (step schedule).
    #[arg(long)]
    pub lr_every: Option<u64>,
    /// Final learning rate (cosine schedule).
    #[arg(long)]
    pub lr_floor: Option<f64>,
    /// Length of the cosine schedule in epochs.
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub lambda_edge: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub per_image: Option<bool>,
    #[arg(long)]
    pub estimator_supervision: Option<f64>,

    // run
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub prefetch: Option<usize>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Desk-scale preset: 48×48 patches, batch 4, 500 iterations.
    pub fn desk() -> Self {
        Settings {
            patch: Some(48),
            batch: Some(4),
            iters: Some(500),
            log_every: Some(10),
            checkpoint_every: Some(250),
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Values set in `other` win.
    pub fn overlay(&mut self, other: &Settings) {
        overlay!(self, other;
            in_channels, width, variant, cam_reduction, sam_kernel,
            manifest, synthetic, mode, sigma, sigma_min, sigma_max, patch, augment,
            batch, iters, schedule, lr, lr_every, lr_floor, epochs,
            lambda_edge, lambda_tv, epsilon, per_image, estimator_supervision,
            seed, log_every, checkpoint_every, checkpoint_dir, prefetch,
        );
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            in_channels: self.in_channels.unwrap_or(d.in_channels),
            width: self.width.unwrap_or(d.width),
            variant: self.variant.unwrap_or(d.variant),
            cam_reduction: self.cam_reduction.unwrap_or(d.cam_reduction),
            sam_kernel: self.sam_kernel.unwrap_or(d.sam_kernel),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let mode = self.mode.unwrap_or(NoiseMode::Awgn);
        let base_loss = match mode {
            NoiseMode::Awgn => LossConfig::default(),
            NoiseMode::Real => LossConfig {
                mode: LossMode::Real,
                ..LossConfig::default()
            },
        };
        let loss = LossConfig {
            lambda_edge: self.lambda_edge.unwrap_or(base_loss.lambda_edge),
            lambda_tv: self.lambda_tv.unwrap_or(base_loss.lambda_tv),
            epsilon: self.epsilon.unwrap_or(base_loss.epsilon),
            per_image: self.per_image.unwrap_or(base_loss.per_image),
            ..base_loss
        };
        let schedule = match self.schedule.unwrap_or(ScheduleKind::Step) {
            ScheduleKind::Step => {
                let Schedule::StepHalving { init, every } = Schedule::step_halving() else {
                    unreachable!()
                };
                Schedule::StepHalving {
                    init: self.lr.unwrap_or(init),
                    every: self.lr_every.unwrap_or(every),
                }
            }
            ScheduleKind::Cosine => {
                let Schedule::Cosine { init, floor, .. } = Schedule::cosine(0.0) else {
                    unreachable!()
                };
                let Some(epochs) = self.epochs else {
                    bail!("the cosine schedule needs `epochs`");
                };
                Schedule::Cosine {
                    init: self.lr.unwrap_or(init),
                    floor: self.lr_floor.unwrap_or(floor),
                    epochs,
                }
            }
        };
        let noise = match (self.sigma, self.sigma_min, self.sigma_max) {
            (Some(s), _, _) => NoiseLevel::Fixed(s),
            (None, lo, hi) => NoiseLevel::Uniform {
                lo: lo.unwrap_or(0.0),
                hi: hi.unwrap_or(75.0),
            },
        };
        let cfg = TrainConfig {
            loss,
            schedule,
            batch: self.batch.unwrap_or(d.batch),
            iters: self.iters.unwrap_or(d.iters),
            patch: self.patch.unwrap_or(d.patch),
            noise,
            augment: self.augment.unwrap_or(d.augment),
            seed,
            log_every: self.log_every.unwrap_or(d.log_every),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            estimator_supervision: self.estimator_supervision.unwrap_or(d.estimator_supervision),
            prefetch: self.prefetch.unwrap_or(d.prefetch),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Settings {
    /// Every field filled in from the configs actually used, so the result
    /// reproduces the run when passed back as a config file.
    pub fn resolved(&self, model: &ModelConfig, train: &TrainConfig) -> Settings {
        let (schedule, lr, lr_every, lr_floor, epochs) = match train.schedule {
            Schedule::StepHalving { init, every } => (ScheduleKind::Step, init, Some(every), None, None),
            Schedule::Cosine { init, floor, epochs } => (ScheduleKind::Cosine, init, None, Some(floor), Some(epochs)),
        };
        let (sigma, sigma_min, sigma_max) = match train.noise {
            NoiseLevel::Fixed(s) => (Some(s), None, None),
            NoiseLevel::Uniform { lo, hi } => (None, Some(lo), Some(hi)),
        };
        let mode = match train.loss.mode {
            LossMode::Mse => NoiseMode::Awgn,
            LossMode::Real => NoiseMode::Real,
        };
        Settings {
            in_channels: Some(model.in_channels),
            width: Some(model.width),
            variant: Some(model.variant),
            cam_reduction: Some(model.cam_reduction),
            sam_kernel: Some(model.sam_kernel),
            manifest: self.manifest.clone(),
            synthetic: self.synthetic,
            mode: Some(mode),
            sigma,
            sigma_min,
            sigma_max,
            patch: Some(train.patch),
            augment: Some(train.augment),
            batch: Some(train.batch),
            iters: Some(train.iters),
            schedule: Some(schedule),
            lr: Some(lr),
            lr_every,
            lr_floor,
            epochs,
            lambda_edge: Some(train.loss.lambda_edge),
            lambda_tv: Some(train.loss.lambda_tv),
            epsilon: Some(train.loss.epsilon),
            per_image: Some(train.loss.per_image),
            estimator_supervision: Some(train.estimator_supervision),
            seed: Some(train.seed),
            log_every: Some(train.log_every),
            checkpoint_every: Some(train.checkpoint_every),
            checkpoint_dir: self.checkpoint_dir.clone(),
            prefetch: Some(train.prefetch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let mut s: Settings = serde_json::from_str(r#"{"batch": 8, "lr": 0.001, "variant": "no_cam"}"#).unwrap();
        s.overlay(&Settings {
            batch: Some(2),
            ..Default::default()
        });
        assert_eq!(s.batch, Some(2));
        assert_eq!(s.lr, Some(0.001));
        assert_eq!(s.model_config().unwrap().variant, Variant::NoCam);
        let t = s.train_config(3).unwrap();
        assert_eq!((t.batch, t.seed), (2, 3));
        assert_eq!(t.noise, NoiseLevel::Uniform { lo: 0.0, hi: 75.0 });
    }

    #[test]
    fn resolved_settings_round_trip() {
        let s = Settings {
            width: Some(16),
            sigma: Some(25.0),
            schedule: Some(ScheduleKind::Cosine),
            epochs: Some(3.0),
            ..Default::default()
        };
        let (m, t) = (s.model_config().unwrap(), s.train_config(9).unwrap());
        let r = s.resolved(&m, &t);
        let back: Settings = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.model_config().unwrap(), m);
        let t2 = back.train_config(9).unwrap();
        assert_eq!((t2.schedule, t2.noise, t2.batch, t2.loss), (t.schedule, t.noise, t.batch, t.loss));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Settings>(r#"{"batchsize": 8}"#).is_err());
    }

    #[test]
    fn cosine_needs_epochs() {
        let s = Settings {
            schedule: Some(ScheduleKind::Cosine),
            ..Default::default()
        };
        assert!(s.train_config(0).is_err());
    }
}
