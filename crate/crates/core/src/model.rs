//! The assembled restoration model: latent and condition encoders, noise predictor and backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{sample_prior, DiffusionConfig, Encoder, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamStore, Tensor, Var};
use crate::wadt::{Wadt, WadtConfig};

pub const LATENT_PREFIX: &str = "le.";
pub const CONDITION_PREFIX: &str = "ce.";
pub const PREDICTOR_PREFIX: &str = "eps.";
pub const BACKBONE_PREFIX: &str = "wadt.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub wadt: WadtConfig,
    pub diffusion: DiffusionConfig,
    /// When false the backbone always receives an all-zero prior.
    pub use_prior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            wadt: WadtConfig::default(),
            diffusion: DiffusionConfig::default(),
            use_prior: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 15] = [
        "channels",
        "n1",
        "n2",
        "heads",
        "prior_dim",
        "wbpf_resblocks",
        "global_residual",
        "diffusion_steps",
        "beta_start",
        "beta_end",
        "eps_hidden",
        "time_dim",
        "encoder_width",
        "encoder_depth",
        "use_prior",
    ];

    /// Applies one `key=value` setting; returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let (w, d) = (&mut self.wadt, &mut self.diffusion);
        match key {
            "channels" => w.channels = parse(key, value)?,
            "n1" => w.n1 = parse(key, value)?,
            "n2" => w.n2 = parse(key, value)?,
            "heads" => w.heads = parse(key, value)?,
            "prior_dim" => w.prior_dim = parse(key, value)?,
            "wbpf_resblocks" => w.wbpf_resblocks = parse(key, value)?,
            "global_residual" => w.global_residual = parse(key, value)?,
            "diffusion_steps" => d.steps = parse(key, value)?,
            "beta_start" => d.beta_start = parse(key, value)?,
            "beta_end" => d.beta_end = parse(key, value)?,
            "eps_hidden" => d.hidden = parse(key, value)?,
            "time_dim" => d.time_dim = parse(key, value)?,
            "encoder_width" => d.encoder_width = parse(key, value)?,
            "encoder_depth" => d.encoder_depth = parse(key, value)?,
            "use_prior" => self.use_prior = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (w, d) = (&self.wadt, &self.diffusion);
        vec![
            ("channels", w.channels.to_string()),
            ("n1", w.n1.to_string()),
            ("n2", w.n2.to_string()),
            ("heads", w.heads.to_string()),
            ("prior_dim", w.prior_dim.to_string()),
            ("wbpf_resblocks", w.wbpf_resblocks.to_string()),
            ("global_residual", w.global_residual.to_string()),
            ("diffusion_steps", d.steps.to_string()),
            ("beta_start", d.beta_start.to_string()),
            ("beta_end", d.beta_end.to_string()),
            ("eps_hidden", d.hidden.to_string()),
            ("time_dim", d.time_dim.to_string()),
            ("encoder_width", d.encoder_width.to_string()),
            ("encoder_depth", d.encoder_depth.to_string()),
            ("use_prior", self.use_prior.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown model key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.wadt.validate()?;
        self.diffusion.schedule()?;
        let d = &self.diffusion;
        if d.hidden == 0 || d.encoder_width == 0 || d.time_dim == 0 || d.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "eps_hidden and encoder_width must be positive and time_dim a positive even number ({d:?})"
            )));
        }
        Ok(())
    }
}

/// Parameter layout of the full model; all tensors live in the accompanying [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VdDiff {
    pub config: ModelConfig,
    pub latent_encoder: Encoder,
    pub condition_encoder: Encoder,
    pub predictor: NoisePredictor,
    pub backbone: Wadt,
}

impl VdDiff {
    /// Builds the model and its freshly initialised parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, dim) = (&config.diffusion, config.wadt.prior_dim);
        let latent_encoder = Encoder::new(&mut store, "le", d.encoder_width, d.encoder_depth, dim, &mut rng);
        let condition_encoder = Encoder::new(&mut store, "ce", d.encoder_width, d.encoder_depth, dim, &mut rng);
        let predictor = NoisePredictor::new(&mut store, "eps", dim, d, &mut rng);
        let backbone = Wadt::new(&mut store, "wadt", config.wadt.clone(), &mut rng)?;
        Ok((
            Self {
                config,
                latent_encoder,
                condition_encoder,
                predictor,
                backbone,
            },
            store,
        ))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.diffusion.schedule()
    }

    /// Schedule of the configured family with `steps` steps.
    pub fn schedule_with_steps(&self, steps: usize) -> Result<NoiseSchedule> {
        let d = &self.config.diffusion;
        NoiseSchedule::linear(steps, d.beta_start, d.beta_end)
    }

    pub fn encode_latent<'t>(&self, b: &Bound<'t>, gt: &Tensor) -> Result<Var<'t>> {
        let v = b.tape().constant(gt.clone());
        self.latent_encoder.forward(b, v)
    }

    pub fn encode_condition<'t>(&self, b: &Bound<'t>, blur: &Tensor) -> Result<Var<'t>> {
        let v = b.tape().constant(blur.clone());
        self.condition_encoder.forward(b, v)
    }

    /// Generates `ẑ` for a blurry clip with the given schedule and seed.
    pub fn generate_prior<'t>(&self, b: &Bound<'t>, blur: &Tensor, schedule: &NoiseSchedule, seed: u64) -> Result<Var<'t>> {
        let c = self.encode_condition(b, blur)?;
        sample_prior(b, &self.predictor, schedule, c, seed)
    }

    /// Runs the backbone; a model built without prior substitutes zeros for `prior`.
    pub fn restore<'t>(&self, b: &Bound<'t>, blur: &Tensor, prior: Var<'t>) -> Result<Var<'t>> {
        let prior = if self.config.use_prior {
            prior
        } else {
            b.tape().constant(Tensor::zeros(&prior.shape()))
        };
        self.backbone.forward(b, blur, prior)
    }

    /// Full inference: condition encoder, reverse diffusion, backbone.
    pub fn infer<'t>(&self, b: &Bound<'t>, blur: &Tensor, schedule: &NoiseSchedule, seed: u64) -> Result<Var<'t>> {
        let prior = self.generate_prior(b, blur, schedule, seed)?;
        self.restore(b, blur, prior)
    }
}
