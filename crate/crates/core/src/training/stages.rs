//! Per-stage objectives, the training loop and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::Clip;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VdDiff};
use crate::numerics::{Bound, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::checkpoint::{Checkpoint, OptimizerState, RngState};
use crate::training::config::{Stage, TrainConfig};
use crate::training::losses::{deblur_loss, diffusion_loss, total_loss};
use crate::training::metrics::{psnr, ssim};
use crate::training::optim::{clip_grad_norm, AdamW};

/// A scalar objective with its logged components, in CSV column order.
pub struct StageLoss<'t> {
    pub total: Var<'t>,
    pub components: Vec<Var<'t>>,
    pub restored: Option<Var<'t>>,
}

/// The objective of `stage` on one clip. `seed` drives the diffusion sampler.
pub fn stage_loss<'t>(
    model: &VdDiff,
    b: &Bound<'t>,
    clip: &Clip,
    stage: Stage,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageLoss<'t>> {
    if stage != Stage::One && !model.config.use_prior {
        return Err(Error::Config(format!(
            "stage {} trains the prior generator, but the model has use_prior=false",
            stage.index()
        )));
    }
    let z = model.encode_latent(b, &clip.gt)?;
    match stage {
        Stage::One => {
            let out = model.restore(b, &clip.blur, z)?;
            let d = deblur_loss(out, &clip.gt, cfg.lambda, cfg.msfr_scales)?;
            Ok(StageLoss {
                total: d.total,
                components: vec![d.l1, d.msfr],
                restored: Some(out),
            })
        }
        Stage::Two => {
            let z_hat = model.generate_prior(b, &clip.blur, &model.schedule()?, seed)?;
            let diff = diffusion_loss(z, z_hat)?;
            Ok(StageLoss {
                total: diff,
                components: vec![diff],
                restored: None,
            })
        }
        Stage::Three => {
            let z_hat = model.generate_prior(b, &clip.blur, &model.schedule()?, seed)?;
            let diff = diffusion_loss(z, z_hat)?;
            let out = model.restore(b, &clip.blur, z_hat)?;
            let d = deblur_loss(out, &clip.gt, cfg.lambda, cfg.msfr_scales)?;
            Ok(StageLoss {
                total: total_loss(d.total, diff)?,
                components: vec![d.total, diff],
                restored: Some(out),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    /// Total loss followed by the stage's components.
    pub values: Vec<f64>,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in &self.values {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }
}

pub struct Trainer {
    pub model: VdDiff,
    pub store: ParamStore,
    pub stage: Stage,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    trainable: Vec<ParamId>,
}

fn trainable_ids(store: &ParamStore, stage: Stage) -> Vec<ParamId> {
    store.iter().filter(|(_, n, _)| stage.trains(n)).map(|(id, _, _)| id).collect()
}

fn named(store: &ParamStore, tensors: &[Tensor]) -> Vec<(String, Tensor)> {
    store.iter().map(|(id, n, _)| (n.to_string(), tensors[id.index()].clone())).collect()
}

fn by_name(store: &ParamStore, items: &[(String, Tensor)], what: &str) -> Result<Vec<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
    for (name, t) in items {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("{what} entry {name} not in model")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{what} entry {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        out[id.index()] = Some(t.clone());
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Checkpoint(format!("{what} missing {}", store.name(ParamId::new(i))))))
        .collect()
}

impl Trainer {
    fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage.index() as u64);
        rng
    }

    /// Stage one from freshly initialised parameters.
    pub fn fresh(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = VdDiff::new(model_config, config.seed)?;
        let optimizer = AdamW::new(config.optimizer, &store);
        Ok(Self {
            trainable: trainable_ids(&store, Stage::One),
            rng: Self::stage_rng(config.seed, Stage::One),
            model,
            store,
            stage: Stage::One,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Continues `ckpt` into `stage`: resumes when the stages match, otherwise
    /// starts the next stage with fresh optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint, stage: Stage, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let from = Stage::from_index(ckpt.stage)?;
        let ok = match stage {
            Stage::One => from == Stage::One,
            Stage::Two => matches!(from, Stage::One | Stage::Two),
            Stage::Three => matches!(from, Stage::Two | Stage::Three),
        };
        if !ok {
            return Err(Error::Config(format!(
                "stage {} cannot start from a stage {} checkpoint",
                stage.index(),
                from.index()
            )));
        }
        let (model, mut store) = VdDiff::new(ckpt.model.clone(), config.seed)?;
        for (name, t) in by_name(&store, &ckpt.params, "parameter")?.into_iter().enumerate() {
            *store.get_mut(ParamId::new(name)) = t;
        }
        let mut optimizer = AdamW::new(config.optimizer, &store);
        let (rng, step) = if from == stage {
            if let Some(o) = &ckpt.optimizer {
                optimizer.step = o.step;
                optimizer.m = by_name(&store, &o.m, "optimizer m")?;
                optimizer.v = by_name(&store, &o.v, "optimizer v")?;
            }
            (ckpt.rng.restore(), ckpt.step)
        } else {
            (Self::stage_rng(config.seed, stage), 0)
        };
        Ok(Self {
            trainable: trainable_ids(&store, stage),
            model,
            store,
            stage,
            config,
            optimizer,
            rng,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage.index(),
            step: self.step,
            model: self.model.config.clone(),
            rng: RngState::capture(&self.rng),
            params: self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: Some(OptimizerState {
                step: self.optimizer.step,
                m: named(&self.store, &self.optimizer.m),
                v: named(&self.store, &self.optimizer.v),
            }),
        }
    }

    fn sample_item(&mut self, clips: &[Clip]) -> Result<(Clip, u64)> {
        let clip = &clips[self.rng.random_range(0..clips.len())];
        let len = self.config.seq_len;
        if clip.frames() < len {
            return Err(Error::Dataset(format!(
                "clip {} has {} frames, seq_len is {len}",
                clip.name,
                clip.frames()
            )));
        }
        let start = self.rng.random_range(0..=clip.frames() - len);
        let mut item = clip.window(start, len)?;
        if self.config.augment {
            let (h, v) = (self.rng.random::<bool>(), self.rng.random::<bool>());
            item = item.flipped(h, v);
        }
        Ok((item, self.rng.random::<u64>()))
    }

    /// One optimizer step over `batch_size` sampled windows.
    pub fn train_step(&mut self, clips: &[Clip]) -> Result<StepLog> {
        if clips.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let batch = self.config.batch_size;
        let mut grads = Gradients::default();
        let mut values: Vec<f64> = Vec::new();
        for _ in 0..batch {
            let (item, seed) = self.sample_item(clips)?;
            let tape = Tape::new();
            let stage = self.stage;
            let b = tape.bind(&self.store, |n| stage.trains(n));
            let loss = stage_loss(&self.model, &b, &item, stage, &self.config, seed)?;
            let row: Vec<f64> = std::iter::once(loss.total)
                .chain(loss.components.iter().copied())
                .map(|v| v.value().item())
                .collect();
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "training loss" });
            }
            if values.is_empty() {
                values = row;
            } else {
                values.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
            }
            grads.accumulate(&loss.total.backward(self.store.len())?);
        }
        let inv = 1.0 / batch as f64;
        grads.scale(inv);
        values.iter_mut().for_each(|v| *v *= inv);
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_grad);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        self.optimizer.update(&mut self.store, &grads, &self.trainable)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            values,
            grad_norm,
        })
    }

    /// Trains until `config.steps` total steps, calling `on_step` after each.
    pub fn run(&mut self, clips: &[Clip], mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let log = self.train_step(clips)?;
            on_step(&log)?;
        }
        Ok(())
    }
}

/// Where the backbone's prior comes from at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSource {
    /// Latent encoder on the ground truth (the stage-one training regime).
    Latent,
    /// Condition encoder and reverse diffusion with the given schedule.
    Generated { schedule: NoiseSchedule, seed: u64 },
    /// All-zero prior.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

/// Restores `clip` in consecutive windows of at most `seq_len` frames.
pub fn restore_clip(model: &VdDiff, store: &ParamStore, clip: &Clip, prior: &PriorSource, seq_len: usize) -> Result<Tensor> {
    if seq_len == 0 {
        return Err(Error::invalid("restore_clip", "seq_len must be positive"));
    }
    let n = clip.frames();
    let mut frames = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = seq_len.min(n - start);
        let w = clip.window(start, len)?;
        let tape = Tape::new();
        let b = tape.bind(store, |_| false);
        let z = match prior {
            PriorSource::Latent => model.encode_latent(&b, &w.gt)?,
            PriorSource::Generated { schedule, seed } => {
                model.generate_prior(&b, &w.blur, schedule, seed.wrapping_add(start as u64))?
            }
            PriorSource::Zero => tape.constant(Tensor::zeros(&[len, model.config.wadt.prior_dim])),
        };
        let out = model.restore(&b, &w.blur, z)?.value();
        frames.extend((0..len).map(|t| out.frame(t)));
        start += len;
    }
    Tensor::stack(&frames)
}

pub fn evaluate_clip(
    model: &VdDiff,
    store: &ParamStore,
    clip: &Clip,
    prior: &PriorSource,
    seq_len: usize,
) -> Result<(Tensor, ClipMetrics)> {
    let restored = restore_clip(model, store, clip, prior, seq_len)?.map(|v| v.clamp(0.0, 1.0));
    let m = ClipMetrics {
        name: clip.name.clone(),
        psnr: psnr(&restored, &clip.gt, 1.0)?,
        ssim: ssim(&restored, &clip.gt, 1.0)?,
        baseline_psnr: psnr(&clip.blur, &clip.gt, 1.0)?,
        baseline_ssim: ssim(&clip.blur, &clip.gt, 1.0)?,
    };
    Ok((restored, m))
}

/// Mean restored PSNR, SSIM and baseline PSNR over clips.
pub fn mean_metrics(rows: &[ClipMetrics]) -> (f64, f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.iter().map(|r| r.baseline_psnr).sum::<f64>() / n,
    )
}
