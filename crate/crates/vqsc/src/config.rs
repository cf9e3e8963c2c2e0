//! Run configuration: typed training/channel/architecture settings plus the
//! line-based `key = value` config file format.

use std::fs;
use std::path::Path;

use crate::channel::ChannelKind;
use crate::codec::CodecConfig;
use crate::v2it::V2itConfig;
use crate::VqscError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// 1 = codec+codebook, 2 = transformer.
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Commitment weight in the quantization loss.
    pub beta: f64,
    /// Cross-entropy weight in the stage-2 loss.
    pub lambda: f64,
    pub gan_weight: f64,
    /// Fraction of iterations with the adversarial term disabled.
    pub gan_warmup_frac: f64,
    pub perceptual_weight: f64,
    /// Stage-2 per-sample training SNR draw range, dB.
    pub snr_range_db: (f64, f64),
    pub seed: u64,
    /// Final stage-2 phase where all parameters train at 0.1x lr.
    pub unfreeze_last_k_iters: usize,
    /// Ablation: use the corrupted input (constant in the parameters) as the
    /// stage-2 feature term instead of the learned projection.
    pub literal_feature_term: bool,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl TrainConfig {
    pub fn desk_stage1() -> Self {
        TrainConfig {
            stage: 1,
            iterations: 8000,
            batch_size: 4,
            lr: 7e-5,
            beta: 0.25,
            lambda: 0.5,
            gan_weight: 0.1,
            gan_warmup_frac: 0.25,
            perceptual_weight: 1.0,
            snr_range_db: (-5.0, 20.0),
            seed: 42,
            unfreeze_last_k_iters: 0,
            literal_feature_term: false,
            log_every: 50,
            ckpt_every: 2000,
        }
    }

    pub fn desk_stage2() -> Self {
        TrainConfig {
            stage: 2,
            iterations: 6000,
            lr: 1e-4,
            ..Self::desk_stage1()
        }
    }

    /// Reported full-scale iteration counts and learning rates, recorded as
    /// presets; not intended to run at desk scale.
    pub fn paper_stage1() -> Self {
        TrainConfig {
            iterations: 415_000,
            ..Self::desk_stage1()
        }
    }

    pub fn paper_stage2() -> Self {
        TrainConfig {
            iterations: 200_000,
            ..Self::desk_stage2()
        }
    }

    pub fn validate(&self) -> Result<(), VqscError> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(VqscError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(VqscError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(VqscError::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(VqscError::Config("iterations must be >= 1".into()));
        }
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(VqscError::Config(format!(
                "snr_range_db is not well-ordered: {} > {}",
                self.snr_range_db.0, self.snr_range_db.1
            )));
        }
        if !(0.0..=1.0).contains(&self.gan_warmup_frac) {
            return Err(VqscError::Config("gan_warmup_frac must be in [0,1]".into()));
        }
        if self.log_every == 0 || self.ckpt_every == 0 {
            return Err(VqscError::Config("log_every/ckpt_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: training, architecture, and channel settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub codebook_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub disc_width: usize,
    /// Channel settings for eval/sweep commands.
    pub kind: ChannelKind,
    pub snr_db: f64,
}

impl RunConfig {
    pub fn desk(stage: u8) -> Self {
        RunConfig {
            train: if stage == 2 {
                TrainConfig::desk_stage2()
            } else {
                TrainConfig::desk_stage1()
            },
            codec: CodecConfig::desk(),
            codebook_size: 128,
            d_model: 64,
            heads: 4,
            mlp_ratio: 2,
            disc_width: 8,
            kind: ChannelKind::AwgnFeature,
            snr_db: 0.0,
        }
    }

    pub fn v2it_config(&self) -> V2itConfig {
        V2itConfig {
            d_model: self.d_model,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            grid_m: self.codec.grid_size(),
            grid_n: self.codec.grid_size(),
            q: self.codec.q,
            codebook_size: self.codebook_size,
        }
    }

    pub fn validate(&self) -> Result<(), VqscError> {
        self.train.validate()?;
        self.codec.validate()?;
        if self.codebook_size < 2 {
            return Err(VqscError::Config("codebook_size must be >= 2".into()));
        }
        self.v2it_config().validate()?;
        if self.disc_width == 0 {
            return Err(VqscError::Config("disc_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply a parsed `key = value` pair. Unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), VqscError> {
        let bad = |what: &str, v: &str| {
            VqscError::Config(format!("bad value \"{v}\" for key \"{what}\""))
        };
        match key {
            "stage" => self.train.stage = value.parse().map_err(|_| bad(key, value))?,
            "iterations" => self.train.iterations = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "lr" => self.train.lr = value.parse().map_err(|_| bad(key, value))?,
            "beta" => self.train.beta = value.parse().map_err(|_| bad(key, value))?,
            "lambda" => self.train.lambda = value.parse().map_err(|_| bad(key, value))?,
            "gan_weight" => self.train.gan_weight = value.parse().map_err(|_| bad(key, value))?,
            "gan_warmup_frac" => {
                self.train.gan_warmup_frac = value.parse().map_err(|_| bad(key, value))?
            }
            "perceptual_weight" => {
                self.train.perceptual_weight = value.parse().map_err(|_| bad(key, value))?
            }
            "snr_range_db" => {
                let (lo, hi) = value.split_once(',').ok_or_else(|| {
                    VqscError::Config(format!(
                        "snr_range_db wants \"lo,hi\", got \"{value}\""
                    ))
                })?;
                self.train.snr_range_db = (
                    lo.trim().parse().map_err(|_| bad(key, value))?,
                    hi.trim().parse().map_err(|_| bad(key, value))?,
                );
            }
            "seed" => self.train.seed = value.parse().map_err(|_| bad(key, value))?,
            "unfreeze_last_k_iters" => {
                self.train.unfreeze_last_k_iters = value.parse().map_err(|_| bad(key, value))?
            }
            "literal_feature_term" => {
                self.train.literal_feature_term = value.parse().map_err(|_| bad(key, value))?
            }
            "log_every" => self.train.log_every = value.parse().map_err(|_| bad(key, value))?,
            "ckpt_every" => self.train.ckpt_every = value.parse().map_err(|_| bad(key, value))?,
            "image_size" => self.codec.image_size = value.parse().map_err(|_| bad(key, value))?,
            "f" => self.codec.f = value.parse().map_err(|_| bad(key, value))?,
            "q" => self.codec.q = value.parse().map_err(|_| bad(key, value))?,
            "base_width" => self.codec.base_width = value.parse().map_err(|_| bad(key, value))?,
            "blocks_per_scale" => {
                self.codec.blocks_per_scale = value.parse().map_err(|_| bad(key, value))?
            }
            "norm_groups" => self.codec.norm_groups = value.parse().map_err(|_| bad(key, value))?,
            "codebook_size" => self.codebook_size = value.parse().map_err(|_| bad(key, value))?,
            "d_model" => self.d_model = value.parse().map_err(|_| bad(key, value))?,
            "heads" => self.heads = value.parse().map_err(|_| bad(key, value))?,
            "mlp_ratio" => self.mlp_ratio = value.parse().map_err(|_| bad(key, value))?,
            "disc_width" => self.disc_width = value.parse().map_err(|_| bad(key, value))?,
            "kind" => self.kind = value.parse()?,
            "snr_db" => self.snr_db = value.parse().map_err(|_| bad(key, value))?,
            other => {
                return Err(VqscError::Config(format!("unknown config key \"{other}\"")));
            }
        }
        Ok(())
    }

    /// Load `key = value` lines (# comments, blank lines allowed) over the
    /// current settings.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), VqscError> {
        let text = fs::read_to_string(path).map_err(|e| VqscError::io(path.display().to_string(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VqscError::Config(format!(
                    "{}:{}: expected \"key = value\", got \"{raw}\"",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}
