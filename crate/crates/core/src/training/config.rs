//! Training stage selection and hyperparameters.

use crate::error::{Error, Result};
use crate::model::{BACKBONE_PREFIX, CONDITION_PREFIX, LATENT_PREFIX, PREDICTOR_PREFIX};
use crate::training::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Latent encoder and backbone, prior taken from the ground truth.
    One,
    /// Condition encoder and noise predictor against the frozen latent encoder.
    Two,
    /// Condition encoder, noise predictor and backbone jointly.
    Three,
}

impl Stage {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn trains(self, name: &str) -> bool {
        let p = |prefix: &str| name.starts_with(prefix);
        match self {
            Stage::One => p(LATENT_PREFIX) || p(BACKBONE_PREFIX),
            Stage::Two => p(CONDITION_PREFIX) || p(PREDICTOR_PREFIX),
            Stage::Three => p(CONDITION_PREFIX) || p(PREDICTOR_PREFIX) || p(BACKBONE_PREFIX),
        }
    }

    /// Loss-log CSV header.
    pub fn csv_header(self) -> &'static str {
        match self {
            Stage::One => "step,loss,l1,msfr",
            Stage::Two => "step,loss,diff",
            Stage::Three => "step,loss,deblur,diff",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    /// MSFR weight λ.
    pub lambda: f64,
    pub msfr_scales: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_seq_len: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_grad: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            lambda: 0.1,
            msfr_scales: 3,
            steps: 300,
            batch_size: 1,
            seq_len: 4,
            eval_seq_len: 4,
            clip_grad: 1.0,
            augment: true,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl TrainConfig {
    /// Defaults for `stage`: the prior generator needs many cheap steps, joint fine-tuning a small rate.
    pub fn for_stage(stage: Stage) -> Self {
        let mut c = Self::default();
        match stage {
            Stage::One => {}
            Stage::Two => c.steps = 2000,
            Stage::Three => {
                c.steps = 150;
                c.optimizer.lr = 2e-4;
            }
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let o = &mut self.optimizer;
        match key {
            "lr" => o.lr = parse(key, value)?,
            "weight_decay" => o.weight_decay = parse(key, value)?,
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "adam_eps" => o.eps = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "msfr_scales" => self.msfr_scales = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "eval_seq_len" => self.eval_seq_len = parse(key, value)?,
            "clip_grad" => self.clip_grad = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.optimizer;
        vec![
            ("lr", o.lr.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("lambda", self.lambda.to_string()),
            ("msfr_scales", self.msfr_scales.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("eval_seq_len", self.eval_seq_len.to_string()),
            ("clip_grad", self.clip_grad.to_string()),
            ("augment", self.augment.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let bad = |d: String| Err(Error::Config(d));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.msfr_scales == 0 {
            return bad("msfr_scales must be at least 1".into());
        }
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("betas must lie in [0,1): {} {}", o.beta1, o.beta2));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_seq_len == 0 {
            return bad("batch_size, seq_len and eval_seq_len must be positive".into());
        }
        if !(self.clip_grad >= 0.0) {
            return bad(format!("clip_grad must be >= 0, got {}", self.clip_grad));
        }
        Ok(())
    }
}
