//! Conditional diffusion over compact per-frame latents.
//!
//! Forward process `q(z_t | z_{t-1}) = N(√(1-β_t) z_{t-1}, β_t I)` with closed form
//! `z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε`, and the deterministic reverse update
//! `z_{t-1} = (z_t - ε (1-α_t)/√(1-ᾱ_t)) / √α_t`. Steps are indexed `1..=T`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, Bound, ConvSpec, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("NoiseSchedule", "at least one step required"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("NoiseSchedule", format!("beta {b} outside (0,1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Evenly spaced betas from `start` to `end`; a single step uses `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => vec![],
            1 => vec![end],
            n => (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect(),
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, op: &'static str) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(op, format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t-1}`, equal to 1 at `t = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Coefficients `(a, b)` of the reverse update `z_{t-1} = a·z_t - b·ε`.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t, "reverse_step")?;
        let inv = 1.0 / self.alpha(t).sqrt();
        Ok((inv, inv * (1.0 - self.alpha(t)) / (1.0 - self.alpha_bar(t)).sqrt()))
    }
}

/// Closed-form noising `√ᾱ_t z0 + √(1-ᾱ_t) ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check(t, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t);
    z0.scale(ab.sqrt()).add(&noise.scale((1.0 - ab).sqrt()))
}

/// Applies the single-step transition once per noise draw; `noises.len()` must equal `T`.
pub fn iterative_forward(z0: &Tensor, schedule: &NoiseSchedule, noises: &[Tensor]) -> Result<Tensor> {
    if noises.len() != schedule.steps() {
        return Err(Error::invalid(
            "iterative_forward",
            format!("{} noise draws for {} steps", noises.len(), schedule.steps()),
        ));
    }
    let mut z = z0.clone();
    for (i, eps) in noises.iter().enumerate() {
        let beta = schedule.betas[i];
        z = z.scale((1.0 - beta).sqrt()).add(&eps.scale(beta.sqrt()))?;
    }
    Ok(z)
}

/// Posterior mean `μ_t(z_t, z0)` of `q(z_{t-1} | z_t, z0)`.
pub fn posterior_mean(z_t: &Tensor, z0: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t, "posterior_mean")?;
    let (ab, abp, beta) = (schedule.alpha_bar(t), schedule.alpha_bar_prev(t), schedule.beta(t));
    let c0 = abp.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
    z0.scale(c0).add(&z_t.scale(ct))
}

/// Deterministic reverse update on plain tensors.
pub fn reverse_step(z_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = schedule.reverse_coefficients(t)?;
    z_t.scale(a).sub(&eps.scale(b))
}

/// Differentiable reverse update.
pub fn reverse_step_var<'t>(z_t: Var<'t>, eps: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>> {
    let (a, b) = schedule.reverse_coefficients(t)?;
    z_t.scale(a).sub(eps.scale(b))
}

/// Sinusoidal embedding of step `t`, `[sin(t·ω_0), …, cos(t·ω_0), …]` with `ω_i = 10000^{-i/(dim/2)}`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        e[i] = (t as f64 * w).sin();
        e[half + i] = (t as f64 * w).cos();
    }
    e
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub encoder_width: usize,
    pub encoder_depth: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            beta_start: 0.1,
            beta_end: 0.99,
            hidden: 64,
            time_dim: 16,
            encoder_width: 16,
            encoder_depth: 3,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-frame image encoder: stride-2 3×3 convs with leaky ReLU, global average pool, linear head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
    pub dim: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        depth: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::with_capacity(depth);
        let mut cin = 3;
        for i in 0..depth {
            let w = fan_in_uniform(&[width, cin, 3, 3], cin * 9, rng);
            convs.push((
                store.add(format!("{name}.conv{i}.weight"), w),
                store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[width])),
            ));
            cin = width;
        }
        let head = (
            store.add(format!("{name}.head.weight"), fan_in_uniform(&[dim, cin], cin, rng)),
            store.add(format!("{name}.head.bias"), Tensor::zeros(&[dim])),
        );
        Self { convs, head, dim }
    }

    /// Maps a clip `[T,3,H,W]` to per-frame latents `[T,D]`.
    pub fn forward<'t>(&self, b: &Bound<'t>, video: Var<'t>) -> Result<Var<'t>> {
        let s = video.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("encode_latent", format!("expected [T,3,H,W], got {s:?}")));
        }
        let spec = ConvSpec::same2d(3, 3).with_stride2d(2);
        let mut x = video;
        for &(w, bias) in &self.convs {
            x = x.conv2d(b[w], Some(b[bias]), spec)?.leaky_relu(0.1);
        }
        x.mean_spatial()?.linear(b[self.head.0], Some(b[self.head.1]))
    }
}

/// Per-frame MLP predicting ε from `(z_t, c, emb(t))`.
#[derive(Clone, Debug)]
pub struct NoisePredictor {
    pub layers: Vec<(ParamId, ParamId)>,
    pub out: (ParamId, ParamId),
    pub dim: usize,
    pub time_dim: usize,
}

impl NoisePredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: &DiffusionConfig, rng: &mut R) -> Self {
        let fin = 2 * dim + cfg.time_dim;
        let layers = vec![
            (
                store.add(format!("{name}.fc0.weight"), fan_in_uniform(&[cfg.hidden, fin], fin, rng)),
                store.add(format!("{name}.fc0.bias"), Tensor::zeros(&[cfg.hidden])),
            ),
            (
                store.add(format!("{name}.fc1.weight"), fan_in_uniform(&[cfg.hidden, cfg.hidden], cfg.hidden, rng)),
                store.add(format!("{name}.fc1.bias"), Tensor::zeros(&[cfg.hidden])),
            ),
        ];
        let out = (
            store.add(format!("{name}.out.weight"), fan_in_uniform(&[dim, cfg.hidden], cfg.hidden, rng)),
            store.add(format!("{name}.out.bias"), Tensor::zeros(&[dim])),
        );
        Self {
            layers,
            out,
            dim,
            time_dim: cfg.time_dim,
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, z_t: Var<'t>, cond: Var<'t>, t: usize) -> Result<Var<'t>> {
        let (zs, cs) = (z_t.shape(), cond.shape());
        if zs != cs || zs.len() != 2 || zs[1] != self.dim {
            return Err(Error::shape(
                "predict_noise",
                format!("latent {zs:?} vs condition {cs:?} (dimension {})", self.dim),
            ));
        }
        let frames = zs[0];
        let emb = timestep_embedding(t, self.time_dim);
        let emb = Tensor::new(vec![frames, self.time_dim], emb.repeat(frames))?;
        let mut x = Var::concat(&[z_t, cond, z_t.tape().constant(emb)], 1)?;
        for &(w, bias) in &self.layers {
            x = x.linear(b[w], Some(b[bias]))?.gelu();
        }
        x.linear(b[self.out.0], Some(b[self.out.1]))
    }
}

/// Runs the full reverse chain from a given `z_T`.
pub fn reverse_chain<'t>(
    b: &Bound<'t>,
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
    z_last: Var<'t>,
    cond: Var<'t>,
) -> Result<Var<'t>> {
    let mut z = z_last;
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.forward(b, z, cond, t)?;
        z = reverse_step_var(z, eps, t, schedule)?;
    }
    Ok(z)
}

/// Standard-normal `z_T` of shape `[frames, dim]` drawn from a ChaCha8 stream seeded by `seed`.
pub fn initial_noise(frames: usize, dim: usize, seed: u64) -> Tensor {
    Tensor::randn(&[frames, dim], &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Samples `ẑ` conditioned on `cond` starting from seeded Gaussian noise.
pub fn sample_prior<'t>(
    b: &Bound<'t>,
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
    cond: Var<'t>,
    seed: u64,
) -> Result<Var<'t>> {
    let s = cond.shape();
    if s.len() != 2 {
        return Err(Error::shape("sample_prior", format!("condition must be [T,D], got {s:?}")));
    }
    let z_last = cond.tape().constant(initial_noise(s[0], s[1], seed));
    reverse_chain(b, predictor, schedule, z_last, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn linear_schedule_endpoints() {
        let s = NoiseSchedule::linear(4, 0.1, 0.99).unwrap();
        assert_eq!(s.betas()[0], 0.1);
        assert!((s.betas()[3] - 0.99).abs() < 1e-15);
        assert_eq!(NoiseSchedule::linear(1, 0.1, 0.99).unwrap().betas(), &[0.99]);
        assert!(s.alpha_bar(4) < 0.01);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::new(vec![0.0]).is_err());
        assert!(NoiseSchedule::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::new(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let z0 = Tensor::scalar(1.5);
        let eps = Tensor::scalar(-0.3);
        let z2 = forward_diffuse(&z0, 2, &s, &eps).unwrap().item();
        assert!((z2 - (0.72f64.sqrt() * 1.5 - 0.28f64.sqrt() * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn zero_prediction_rescales() {
        let s = NoiseSchedule::new(vec![0.1, 0.2]).unwrap();
        let z = Tensor::scalar(2.0);
        let out = reverse_step(&z, &Tensor::scalar(0.0), 2, &s).unwrap().item();
        assert!((out - 2.0 / 0.8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_range_checked() {
        let s = NoiseSchedule::new(vec![0.1, 0.2]).unwrap();
        let z = Tensor::scalar(0.0);
        assert!(forward_diffuse(&z, 0, &s, &z).is_err());
        assert!(forward_diffuse(&z, 3, &s, &z).is_err());
        assert!(reverse_step(&z, &z, 3, &s).is_err());
        assert!(iterative_forward(&z, &s, std::slice::from_ref(&z)).is_err());
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(1, 8);
        let b = timestep_embedding(2, 8);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn encoder_keeps_frame_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "le", 4, 2, 5, &mut rng);
        let tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        let v = tape.constant(Tensor::rand_uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut rng));
        assert_eq!(enc.forward(&b, v).unwrap().shape(), vec![3, 5]);
        assert_eq!(
            enc.forward(&b, tape.constant(Tensor::zeros(&[2, 3, 8, 8]))).unwrap().value().max_abs(),
            0.0
        );
    }
}
