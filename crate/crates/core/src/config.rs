//! Run configuration with the two built-in profiles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::unet::DenoiserConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    /// Window of the running-mean loss reported in logs.
    pub loss_window: usize,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        train: usize,
        val: usize,
        test: usize,
        change_rate: f64,
        seed: u64,
    },
    Manifest {
        root: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub reduction: usize,
    pub fusion_width: usize,
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Distinct training noise draws, cycled over epochs.
    pub noise_draws: u64,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub image_size: usize,
    /// Patch side used when loading manifest datasets.
    pub patch_size: usize,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub head: HeadTrainConfig,
    /// Timesteps for the change head, quoted on a 1000-step chain and
    /// rescaled to `schedule.steps`.
    pub timesteps: Vec<usize>,
    /// Timestep sets compared by the ablation, same scale as `timesteps`.
    pub ablation: Vec<Vec<usize>>,
    pub samples: usize,
}

impl RunConfig {
    /// 64×64, 200-step chain, small widths; minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            image_size: 64,
            patch_size: 64,
            schedule: ScheduleSpec::rescaled(200),
            denoiser: DenoiserConfig::with_width(16),
            pretrain: PretrainConfig {
                corpus_size: 1000,
                steps: 2000,
                batch_size: 2,
                lr: 2e-4,
                warmup_steps: 200,
                grad_clip: 1.0,
                loss_window: 100,
                checkpoint_every: 500,
            },
            data: DataConfig::Synthetic {
                train: 200,
                val: 50,
                test: 50,
                change_rate: 0.1,
                seed: 1,
            },
            head: HeadTrainConfig {
                reduction: 16,
                fusion_width: 16,
                epochs: 20,
                lr: 1e-3,
                weight_decay: 1e-2,
                batch_size: 4,
                noise_draws: 4,
                threshold: 0.5,
            },
            timesteps: vec![50, 100, 400],
            ablation: vec![vec![50], vec![100], vec![400], vec![50, 100, 400]],
            samples: 16,
        }
    }

    /// 256×256 patches, 1000-step chain, 120 head epochs at lr 1e-5.
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            seed: 0,
            image_size: 256,
            patch_size: 256,
            schedule: ScheduleSpec::standard(),
            denoiser: DenoiserConfig::with_width(64),
            pretrain: PretrainConfig {
                corpus_size: 100_000,
                steps: 200_000,
                batch_size: 16,
                lr: 1e-4,
                warmup_steps: 10_000,
                grad_clip: 1.0,
                loss_window: 1000,
                checkpoint_every: 10_000,
            },
            data: DataConfig::Synthetic {
                train: 2000,
                val: 500,
                test: 500,
                change_rate: 0.1,
                seed: 1,
            },
            head: HeadTrainConfig {
                reduction: 16,
                fusion_width: 64,
                epochs: 120,
                lr: 1e-5,
                weight_decay: 1e-2,
                batch_size: 8,
                noise_draws: 120,
                threshold: 0.5,
            },
            timesteps: vec![50, 100, 400],
            ablation: vec![vec![50], vec![100], vec![400], vec![50, 100, 400]],
            samples: 16,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        let m = 1 << (crate::unet::LEVELS - 1);
        if self.image_size == 0 || self.image_size % m != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of {m}", self.image_size)));
        }
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of {m}", self.patch_size)));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.corpus_size == 0 || p.loss_window == 0 {
            return Err(Error::Config("pretrain batch_size, corpus_size and loss_window must be positive".into()));
        }
        if !(p.lr > 0.0) || !(p.grad_clip > 0.0) {
            return Err(Error::Config("pretrain lr and grad_clip must be positive".into()));
        }
        let h = &self.head;
        if h.batch_size == 0 || h.noise_draws == 0 || h.epochs == 0 {
            return Err(Error::Config("head batch_size, epochs and noise_draws must be positive".into()));
        }
        if !(h.lr > 0.0) || h.weight_decay < 0.0 || !(0.0..1.0).contains(&h.threshold) {
            return Err(Error::Config("head lr must be positive, weight_decay ≥ 0, threshold in [0, 1)".into()));
        }
        if let DataConfig::Synthetic { change_rate, train, .. } = &self.data {
            if !(0.0..=1.0).contains(change_rate) {
                return Err(Error::Config(format!("change_rate {change_rate} outside [0, 1]")));
            }
            if *train == 0 {
                return Err(Error::Config("synthetic train split is empty".into()));
            }
        }
        if self.timesteps.is_empty() || self.ablation.iter().any(Vec::is_empty) {
            return Err(Error::Config("timestep sets must be nonempty".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}
