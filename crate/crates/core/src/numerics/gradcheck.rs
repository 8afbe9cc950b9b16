//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{Bound, Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half-step.
    pub step: f64,
    /// Maximum accepted relative error per coordinate.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (randomly chosen); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, cfg: &GradCheckConfig, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        let m = Mismatch {
            tensor: tensor.to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel,
        };
        if rel > cfg.tolerance || !rel.is_finite() {
            self.failures.push(m.clone());
        }
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(m);
        }
    }
}

fn coords(n: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Checks gradients of `loss` w.r.t. every parameter accepted by `trainable`.
pub fn check_params<F>(
    store: &ParamStore,
    trainable: impl Fn(&str) -> bool + Copy,
    cfg: GradCheckConfig,
    loss: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = tape.bind(store, trainable);
    let grads = loss(&tape, &bound)?.backward(store.len())?;
    let trainable_ids = bound.trainable().to_vec();
    drop(bound);
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(s, |_| false);
        Ok(loss(&tape, &bound)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in trainable_ids {
        let name = store.name(id).to_string();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in coords(store.get(id).numel(), &cfg, id.index() as u64) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            report.record(&cfg, &name, i, analytic.data()[i], (up - down) / (2.0 * cfg.step));
        }
    }
    Ok(report)
}

/// Checks gradients of `loss` w.r.t. free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = loss(&tape, &leaves)?;
    let grads = tape.leaf_gradients(out, &leaves)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(loss(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in coords(input.numel(), &cfg, k as u64) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(&cfg, &format!("input{k}"), i, grads[k].data()[i], (up - down) / (2.0 * cfg.step));
        }
    }
    Ok(report)
}
