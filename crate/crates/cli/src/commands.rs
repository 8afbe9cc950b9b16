use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use vdiff_core::datakit::{self, Clip, Split, SynthSpec};
use vdiff_core::model::{ModelConfig, VdDiff};
use vdiff_core::numerics::ParamStore;
use vdiff_core::training::stages::{evaluate_clip, mean_metrics, ClipMetrics, PriorSource, Trainer};
use vdiff_core::training::{psnr, ssim, Checkpoint, Stage, TrainConfig};
use vdiff_core::Tensor;

use crate::settings::{apply, echo, join_list, parse, parse_list, Pairs};

/// Model keys that only change the noise schedule and so may differ from a checkpoint.
const SCHEDULE_KEYS: [&str; 3] = ["diffusion_steps", "beta_start", "beta_end"];

pub const METRICS_HEADER: &str = "clip,psnr,ssim,baseline_psnr,baseline_ssim";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Rebuilds the model and its parameters from a checkpoint.
fn model_from(ckpt: &Checkpoint) -> Result<(VdDiff, ParamStore)> {
    let (model, mut store) = VdDiff::new(ckpt.model.clone(), 0)?;
    for (name, t) in &ckpt.params {
        store.assign(name, t.clone())?;
    }
    Ok((model, store))
}

pub fn synth(out: &Path, pairs: &Pairs) -> Result<()> {
    let mut spec = SynthSpec::default();
    apply(pairs, "synth", |k, v| Ok(spec.set(k, v)?))?;
    spec.validate()?;
    echo(out, "synth", &spec.entries())?;
    let clips: Vec<(Clip, Split)> = (0..spec.clips)
        .into_par_iter()
        .map(|i| Ok((datakit::synthesize_clip(&spec, i)?, spec.split_of(i))))
        .collect::<vdiff_core::Result<_>>()?;
    datakit::save_dataset(out, &clips)?;
    let scores: Vec<f64> = clips
        .iter()
        .map(|(c, _)| psnr(&c.blur, &c.gt, 1.0))
        .collect::<vdiff_core::Result<_>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("clips: {}", clips.len());
    println!("mean blur-vs-gt psnr: {mean:.4} dB");
    Ok(())
}

pub struct TrainArgs<'a> {
    pub out: &'a Path,
    pub data: &'a Path,
    pub stage: u8,
    pub checkpoint: Option<&'a Path>,
}

/// Model configuration for training: defaults for a fresh run, the checkpoint's
/// otherwise, where only schedule keys may be changed.
fn training_model(ckpt: Option<&Checkpoint>, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let base = ckpt.map(|c| c.model.clone()).unwrap_or_default();
    let mut cfg = base.clone();
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    if ckpt.is_some() {
        let (before, after) = (base.entries(), cfg.entries());
        for ((k, a), (_, b)) in before.iter().zip(&after) {
            if a != b && !SCHEDULE_KEYS.contains(k) {
                bail!("model key {k} is fixed by the checkpoint ({a}), cannot set {b}");
            }
        }
    }
    Ok(cfg)
}

pub fn train(args: TrainArgs, pairs: &Pairs) -> Result<()> {
    let stage = Stage::from_index(args.stage)?;
    let mut cfg = TrainConfig::for_stage(stage);
    let mut model_overrides = Vec::new();
    apply(pairs, "train", |k, v| {
        if ModelConfig::KEYS.contains(&k) {
            model_overrides.push((k.to_string(), v.to_string()));
            return Ok(true);
        }
        Ok(cfg.set(k, v)?)
    })?;
    cfg.validate()?;
    let ckpt = match (stage, args.checkpoint) {
        (_, Some(p)) => Some(load_checkpoint(p)?),
        (Stage::One, None) => None,
        (s, None) => bail!(
            "stage {} needs --checkpoint from stage {}",
            s.index(),
            s.index() - 1
        ),
    };
    let model_cfg = training_model(ckpt.as_ref(), &model_overrides)?;
    let mut entries = vec![("stage", stage.index().to_string())];
    entries.extend(model_cfg.entries());
    entries.extend(cfg.entries());
    echo(args.out, "train", &entries)?;

    let clips = datakit::load_split(args.data, Split::Train)?;
    let mut trainer = match ckpt {
        Some(mut c) => {
            c.model = model_cfg;
            Trainer::from_checkpoint(&c, stage, cfg)?
        }
        None => Trainer::fresh(model_cfg, cfg)?,
    };
    let start = trainer.step;
    let loss_path = args.out.join("loss.csv");
    let file = File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", stage.csv_header())?;
    let timer = Instant::now();
    let mut last = None;
    trainer.run(&clips, |l| {
        writeln!(log, "{}", l.csv_row()).map_err(|e| vdiff_core::Error::Io {
            path: loss_path.clone(),
            source: e,
        })?;
        if l.step % 50 == 0 {
            println!("step {} loss {:.6}", l.step, l.values[0]);
        }
        last = Some(l.values[0]);
        Ok(())
    })?;
    log.flush()?;
    trainer.checkpoint().save(&args.out.join("checkpoint.bin"))?;
    match last {
        Some(loss) => println!(
            "trained stage {} steps {}..{} final loss {loss:.6} in {:.1}s",
            stage.index(),
            start,
            trainer.step,
            timer.elapsed().as_secs_f64()
        ),
        None => println!("checkpoint already at step {}, nothing to train", trainer.step),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PriorKind {
    Generated,
    Latent,
    Zero,
}

impl PriorKind {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "generated" => PriorKind::Generated,
            "latent" => PriorKind::Latent,
            "zero" => PriorKind::Zero,
            _ => bail!("prior must be generated, latent or zero, got {s:?}"),
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            PriorKind::Generated => "generated",
            PriorKind::Latent => "latent",
            PriorKind::Zero => "zero",
        }
    }
}

/// What produces the frames that are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Restorer {
    Model,
    /// The blurry input itself: the baseline.
    Blur,
    /// The ground truth itself: a sanity check of the metrics.
    Gt,
}

impl Restorer {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "model" => Restorer::Model,
            "blur" => Restorer::Blur,
            "gt" => Restorer::Gt,
            _ => bail!("restorer must be model, blur or gt, got {s:?}"),
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Restorer::Model => "model",
            Restorer::Blur => "blur",
            Restorer::Gt => "gt",
        }
    }
}

/// Settings shared by `infer` and `eval`.
struct RunOpts {
    seed: u64,
    seq_len: usize,
    diffusion_steps: Option<usize>,
    prior: PriorKind,
    restorer: Restorer,
    sweep_steps: Vec<usize>,
    sweep_seq_len: Vec<usize>,
    save_frames: bool,
}

impl Default for RunOpts {
    fn default() -> Self {
        Self {
            seed: 0,
            seq_len: TrainConfig::default().eval_seq_len,
            diffusion_steps: None,
            prior: PriorKind::Generated,
            restorer: Restorer::Model,
            sweep_steps: Vec::new(),
            sweep_seq_len: Vec::new(),
            save_frames: false,
        }
    }
}

impl RunOpts {
    fn set(&mut self, k: &str, v: &str, eval: bool) -> Result<bool> {
        match k {
            "seed" => self.seed = parse(k, v)?,
            "seq_len" => self.seq_len = parse(k, v)?,
            "diffusion_steps" => self.diffusion_steps = Some(parse(k, v)?),
            "prior" => self.prior = PriorKind::parse(v)?,
            "restorer" if eval => self.restorer = Restorer::parse(v)?,
            "sweep_steps" if eval => self.sweep_steps = parse_list(k, v)?,
            "sweep_seq_len" if eval => self.sweep_seq_len = parse_list(k, v)?,
            "save_frames" if eval => self.save_frames = parse(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self, model: Option<&VdDiff>, eval: bool) -> Vec<(&'static str, String)> {
        let steps = self
            .diffusion_steps
            .or(model.map(|m| m.config.diffusion.steps))
            .map(|t| t.to_string())
            .unwrap_or_default();
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("diffusion_steps", steps),
            ("prior", self.prior.as_str().to_string()),
        ];
        if eval {
            e.push(("restorer", self.restorer.as_str().to_string()));
            e.push(("sweep_steps", join_list(&self.sweep_steps)));
            e.push(("sweep_seq_len", join_list(&self.sweep_seq_len)));
            e.push(("save_frames", self.save_frames.to_string()));
        }
        e
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.seq_len > 0, "seq_len must be positive");
        ensure!(self.diffusion_steps != Some(0), "diffusion_steps must be positive");
        Ok(())
    }

    fn prior_source(&self, model: &VdDiff, steps: Option<usize>) -> Result<PriorSource> {
        Ok(match self.prior {
            PriorKind::Generated => {
                let t = steps.or(self.diffusion_steps).unwrap_or(model.config.diffusion.steps);
                PriorSource::Generated {
                    schedule: model.schedule_with_steps(t)?,
                    seed: self.seed,
                }
            }
            PriorKind::Latent => PriorSource::Latent,
            PriorKind::Zero => PriorSource::Zero,
        })
    }
}

pub fn infer(out: &Path, checkpoint: &Path, input: &Path, pairs: &Pairs) -> Result<()> {
    let mut opts = RunOpts::default();
    apply(pairs, "infer", |k, v| opts.set(k, v, false))?;
    opts.validate()?;
    ensure!(opts.prior != PriorKind::Latent, "infer has no ground truth; prior must be generated or zero");
    let (model, store) = model_from(&load_checkpoint(checkpoint)?)?;
    echo(out, "infer", &opts.entries(Some(&model), false))?;
    let blur_dir = if input.join("blur").is_dir() { input.join("blur") } else { input.to_path_buf() };
    let blur = datakit::read_frames(&blur_dir)?;
    let clip = Clip {
        name: "input".into(),
        gt: blur.clone(),
        blur,
    };
    let timer = Instant::now();
    let prior = opts.prior_source(&model, None)?;
    let restored = vdiff_core::training::restore_clip(&model, &store, &clip, &prior, opts.seq_len)?;
    let elapsed = timer.elapsed().as_secs_f64();
    datakit::write_frames(&restored, &out.join("frames"))?;
    println!("restored {} frames in {elapsed:.3}s", clip.frames());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub out: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub data: &'a Path,
    pub split: &'a str,
}

fn score(name: &str, restored: &Tensor, clip: &Clip) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        name: name.to_string(),
        psnr: psnr(restored, &clip.gt, 1.0)?,
        ssim: ssim(restored, &clip.gt, 1.0)?,
        baseline_psnr: psnr(&clip.blur, &clip.gt, 1.0)?,
        baseline_ssim: ssim(&clip.blur, &clip.gt, 1.0)?,
    })
}

fn evaluate_all(
    model: Option<&(VdDiff, ParamStore)>,
    clips: &[Clip],
    restorer: Restorer,
    prior: Option<&PriorSource>,
    seq_len: usize,
) -> Result<Vec<(Tensor, ClipMetrics)>> {
    clips
        .par_iter()
        .map(|c| match (restorer, model, prior) {
            (Restorer::Model, Some((m, s)), Some(p)) => Ok(evaluate_clip(m, s, c, p, seq_len)?),
            (Restorer::Model, _, _) => bail!("restorer=model needs --checkpoint"),
            (Restorer::Blur, _, _) => Ok((c.blur.clone(), score(&c.name, &c.blur, c)?)),
            (Restorer::Gt, _, _) => Ok((c.gt.clone(), score(&c.name, &c.gt, c)?)),
        })
        .collect()
}

fn metrics_csv(rows: &[ClipMetrics]) -> String {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.psnr, r.ssim, r.baseline_psnr, r.baseline_ssim
        ));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&ClipMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    text.push_str(&format!(
        "mean,{},{},{},{}\n",
        mean(|r| r.psnr),
        mean(|r| r.ssim),
        mean(|r| r.baseline_psnr),
        mean(|r| r.baseline_ssim)
    ));
    text
}

fn sweep_row(key: usize, rows: &[(Tensor, ClipMetrics)]) -> String {
    let m: Vec<ClipMetrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    let (p, s, _) = mean_metrics(&m);
    format!("{key},{p},{s}\n")
}

pub fn eval(args: EvalArgs, pairs: &Pairs) -> Result<()> {
    let mut opts = RunOpts::default();
    apply(pairs, "eval", |k, v| opts.set(k, v, true))?;
    opts.validate()?;
    let split = Split::parse(args.split)?;
    let model = match args.checkpoint {
        Some(p) => Some(model_from(&load_checkpoint(p)?)?),
        None => None,
    };
    let needs_model = opts.restorer == Restorer::Model;
    ensure!(!needs_model || model.is_some(), "restorer=model needs --checkpoint");
    ensure!(
        opts.sweep_steps.is_empty() || (needs_model && opts.prior == PriorKind::Generated),
        "sweep_steps needs restorer=model and prior=generated"
    );
    ensure!(opts.sweep_seq_len.is_empty() || needs_model, "sweep_seq_len needs restorer=model");
    let mut entries = vec![("split", split.as_str().to_string())];
    entries.extend(opts.entries(model.as_ref().map(|(m, _)| m), true));
    echo(args.out, "eval", &entries)?;

    let clips = datakit::load_split(args.data, split)?;
    let source = match &model {
        Some((m, _)) => Some(opts.prior_source(m, None)?),
        None => None,
    };
    let rows = evaluate_all(model.as_ref(), &clips, opts.restorer, source.as_ref(), opts.seq_len)?;
    let metrics: Vec<ClipMetrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    write_text(&args.out.join("metrics.csv"), &metrics_csv(&metrics))?;
    if opts.save_frames {
        for (frames, m) in &rows {
            datakit::write_frames(frames, &args.out.join("frames").join(&m.name))?;
        }
    }
    let (p, s, b) = mean_metrics(&metrics);
    println!("mean psnr {p:.4} dB ssim {s:.4} (blur baseline {b:.4} dB) over {} clips", metrics.len());

    if let Some(pair) = &model {
        if !opts.sweep_steps.is_empty() {
            let mut text = String::from("diffusion_steps,psnr,ssim\n");
            for &t in &opts.sweep_steps {
                let src = opts.prior_source(&pair.0, Some(t))?;
                let r = evaluate_all(Some(pair), &clips, Restorer::Model, Some(&src), opts.seq_len)?;
                text.push_str(&sweep_row(t, &r));
            }
            print!("{text}");
            write_text(&args.out.join("sweep_steps.csv"), &text)?;
        }
        if !opts.sweep_seq_len.is_empty() {
            let mut text = String::from("seq_len,psnr,ssim\n");
            for &l in &opts.sweep_seq_len {
                let r = evaluate_all(Some(pair), &clips, Restorer::Model, source.as_ref(), l)?;
                text.push_str(&sweep_row(l, &r));
            }
            print!("{text}");
            write_text(&args.out.join("sweep_seq_len.csv"), &text)?;
        }
    }
    Ok(())
}

/// Step budgets and rates of the staged ablation; stage one uses the train keys.
struct AblateOpts {
    stage2_steps: u64,
    stage2_lr: f64,
    stage3_steps: u64,
    stage3_lr: f64,
    sweep_steps: Vec<usize>,
}

impl Default for AblateOpts {
    fn default() -> Self {
        let (two, three) = (TrainConfig::for_stage(Stage::Two), TrainConfig::for_stage(Stage::Three));
        Self {
            stage2_steps: two.steps,
            stage2_lr: two.optimizer.lr,
            stage3_steps: three.steps,
            stage3_lr: three.optimizer.lr,
            sweep_steps: vec![1, 2, 4, 8],
        }
    }
}

impl AblateOpts {
    fn set(&mut self, k: &str, v: &str) -> Result<bool> {
        match k {
            "stage2_steps" => self.stage2_steps = parse(k, v)?,
            "stage2_lr" => self.stage2_lr = parse(k, v)?,
            "stage3_steps" => self.stage3_steps = parse(k, v)?,
            "stage3_lr" => self.stage3_lr = parse(k, v)?,
            "sweep_steps" => self.sweep_steps = parse_list(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage2_steps", self.stage2_steps.to_string()),
            ("stage2_lr", self.stage2_lr.to_string()),
            ("stage3_steps", self.stage3_steps.to_string()),
            ("stage3_lr", self.stage3_lr.to_string()),
            ("sweep_steps", join_list(&self.sweep_steps)),
        ]
    }
}

fn run_logged(trainer: &mut Trainer, clips: &[Clip], path: PathBuf) -> Result<()> {
    let mut text = format!("{}\n", trainer.stage.csv_header());
    trainer.run(clips, |l| {
        text.push_str(&l.csv_row());
        text.push('\n');
        Ok(())
    })?;
    write_text(&path, &text)
}

fn mean_of(trainer: &Trainer, clips: &[Clip], prior: &PriorSource) -> Result<(f64, f64)> {
    let rows: Vec<ClipMetrics> = clips
        .iter()
        .map(|c| Ok(evaluate_clip(&trainer.model, &trainer.store, c, prior, trainer.config.eval_seq_len)?.1))
        .collect::<Result<_>>()?;
    let (p, s, _) = mean_metrics(&rows);
    Ok((p, s))
}

/// Trains the full pipeline once per diffusion step count and a prior-free
/// variant with the same backbone step budget, then scores both on the eval split.
pub fn ablate(out: &Path, data: &Path, pairs: &Pairs) -> Result<()> {
    let mut model_cfg = ModelConfig::default();
    let mut cfg = TrainConfig::for_stage(Stage::One);
    let mut opts = AblateOpts::default();
    apply(pairs, "ablate", |k, v| {
        if k == "use_prior" {
            bail!("ablate trains both prior settings; use_prior cannot be set");
        }
        Ok(model_cfg.set(k, v)? || cfg.set(k, v)? || opts.set(k, v)?)
    })?;
    model_cfg.validate()?;
    cfg.validate()?;
    let mut entries = model_cfg.entries();
    entries.retain(|(k, _)| *k != "use_prior");
    entries.extend(cfg.entries());
    entries.extend(opts.entries());
    echo(out, "ablate", &entries)?;

    let train = datakit::load_split(data, Split::Train)?;
    let eval = datakit::load_split(data, Split::Eval)?;
    let main_t = model_cfg.diffusion.steps;
    let mut steps = opts.sweep_steps.clone();
    steps.push(main_t);
    steps.sort_unstable();
    steps.dedup();

    let timer = Instant::now();
    let mut stage_one = Trainer::fresh(model_cfg.clone(), cfg.clone())?;
    run_logged(&mut stage_one, &train, out.join("loss_stage1.csv"))?;
    let latent = mean_of(&stage_one, &eval, &PriorSource::Latent)?;
    println!("stage one done in {:.1}s", timer.elapsed().as_secs_f64());
    let base = stage_one.checkpoint();

    let staged = |t: usize| -> Result<(usize, f64, f64)> {
        let mut ckpt = base.clone();
        ckpt.model.diffusion.steps = t;
        let mut c2 = cfg.clone();
        c2.steps = opts.stage2_steps;
        c2.optimizer.lr = opts.stage2_lr;
        let mut two = Trainer::from_checkpoint(&ckpt, Stage::Two, c2)?;
        run_logged(&mut two, &train, out.join(format!("loss_t{t}_stage2.csv")))?;
        let mut c3 = cfg.clone();
        c3.steps = opts.stage3_steps;
        c3.optimizer.lr = opts.stage3_lr;
        let mut three = Trainer::from_checkpoint(&two.checkpoint(), Stage::Three, c3)?;
        run_logged(&mut three, &train, out.join(format!("loss_t{t}_stage3.csv")))?;
        let prior = PriorSource::Generated {
            schedule: three.model.schedule()?,
            seed: cfg.seed,
        };
        let (p, s) = mean_of(&three, &eval, &prior)?;
        println!("diffusion_steps {t}: psnr {p:.4} dB ssim {s:.4}");
        Ok((t, p, s))
    };
    let no_prior = || -> Result<(f64, f64)> {
        let mut mc = model_cfg.clone();
        mc.use_prior = false;
        let mut c = cfg.clone();
        c.steps = cfg.steps + opts.stage3_steps;
        let mut tr = Trainer::fresh(mc, c)?;
        run_logged(&mut tr, &train, out.join("loss_no_prior.csv"))?;
        let r = mean_of(&tr, &eval, &PriorSource::Zero)?;
        println!("no prior: psnr {:.4} dB ssim {:.4}", r.0, r.1);
        Ok(r)
    };
    let (swept, no_prior) = rayon::join(
        || steps.par_iter().map(|&t| staged(t)).collect::<Result<Vec<_>>>(),
        no_prior,
    );
    let (swept, no_prior) = (swept?, no_prior?);

    let baseline = {
        let rows: Vec<ClipMetrics> = eval.iter().map(|c| score(&c.name, &c.blur, c)).collect::<Result<_>>()?;
        let (p, s, _) = mean_metrics(&rows);
        (p, s)
    };
    let full = swept.iter().find(|r| r.0 == main_t).expect("main step count is trained");
    let mut text = String::from("variant,diffusion_steps,psnr,ssim\n");
    text.push_str(&format!("full,{main_t},{},{}\n", full.1, full.2));
    text.push_str(&format!("no_prior,0,{},{}\n", no_prior.0, no_prior.1));
    text.push_str(&format!("stage_one_latent,0,{},{}\n", latent.0, latent.1));
    text.push_str(&format!("blur,0,{},{}\n", baseline.0, baseline.1));
    write_text(&out.join("ablation.csv"), &text)?;
    let mut sweep = String::from("diffusion_steps,psnr,ssim\n");
    for (t, p, s) in swept.iter().filter(|r| opts.sweep_steps.contains(&r.0)) {
        sweep.push_str(&format!("{t},{p},{s}\n"));
    }
    write_text(&out.join("sweep_steps.csv"), &sweep)?;
    print!("{text}{sweep}");
    println!("ablation finished in {:.1}s", timer.elapsed().as_secs_f64());
    Ok(())
}
