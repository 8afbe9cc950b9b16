//! Analytic gradients against central differences (h = 1e-5, relative error < 1e-4).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdiff_core::datakit::Clip;
use vdiff_core::diffusion::{DiffusionConfig, NoisePredictor};
use vdiff_core::model::{ModelConfig, VdDiff};
use vdiff_core::numerics::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use vdiff_core::numerics::{ParamStore, Tensor};
use vdiff_core::training::{l1_loss, msfr_loss, stage_loss, Stage, TrainConfig};
use vdiff_core::wadt::{Modulation, WadFfn, WadMsa, WadtConfig};
use vdiff_core::wbpf::{propagate_step, PropagationParams};

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weights(shape: &[usize]) -> Tensor {
    uniform(shape, 4242)
}

/// Redraws every parameter at unit-order scale. The damped initialisation
/// (0.1 gains, unit biases) leaves some deep-path gradients near 1e-8, where
/// central differences are dominated by rounding; gradients are pointwise
/// properties, so a well-scaled point is an equally valid place to check them.
fn rescale(store: &mut ParamStore, seed: u64, gain: f64) {
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let scale = if shape.len() > 1 { gain / (fan_in as f64).sqrt() } else { 0.3 };
        store.assign(&name, uniform(&shape, seed + i as u64).scale(scale)).unwrap();
    }
}

fn assert_passed(what: &str, r: GradCheckReport) {
    assert!(r.passed(), "{what}: worst {:?} over {} coordinates", r.worst, r.checked);
}

fn wadt_cfg() -> WadtConfig {
    WadtConfig {
        channels: 4,
        n1: 1,
        n2: 1,
        heads: 1,
        prior_dim: 3,
        wbpf_resblocks: 1,
        global_residual: true,
    }
}

#[test]
fn reconstruction_losses() {
    let target = uniform(&[2, 3, 6, 5], 1);
    let pred = uniform(&[2, 3, 6, 5], 2);
    assert_passed("l1_loss", check_inputs(&[pred.clone()], GradCheckConfig::default(), |_, x| l1_loss(x[0], &target)).unwrap());
    assert_passed(
        "msfr_loss",
        check_inputs(&[pred], GradCheckConfig::default(), |_, x| msfr_loss(x[0], &target, 3)).unwrap(),
    );
}

#[test]
fn modulation() {
    let mut store = ParamStore::new();
    let m = Modulation::new(&mut store, "m", 3, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let (f, z) = (uniform(&[2, 4, 3, 3], 4), uniform(&[2, 3], 5));
    let w = weights(&[2, 4, 3, 3]);
    let r = check_params(&store, |_| true, GradCheckConfig::default(), |tape, b| {
        Ok(m.forward(b, tape.constant(f.clone()), tape.constant(z.clone()))?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("modulate params", r);
    let r = check_inputs(&[f.clone(), z.clone()], GradCheckConfig::default(), |tape, x| {
        let b = tape.bind(&store, |_| false);
        Ok(m.forward(&b, x[0], x[1])?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("modulate inputs", r);
}

#[test]
fn attention_and_feed_forward() {
    let cfg = WadtConfig {
        channels: 8,
        heads: 2,
        ..wadt_cfg()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let msa = WadMsa::new(&mut store, "msa", &cfg, &mut rng);
    let ffn = WadFfn::new(&mut store, "ffn", &cfg, &mut rng);
    // Non-zero temperatures exercise the per-head scale gradient.
    store.assign("msa.log_inv_temp", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap()).unwrap();
    let (f, z) = (uniform(&[3, 8, 4, 4], 7), uniform(&[3, 3], 8));
    let w = weights(&[3, 8, 4, 4]);
    let r = check_params(&store, |n| n.starts_with("msa."), GradCheckConfig::default(), |tape, b| {
        Ok(msa.forward(b, tape.constant(f.clone()), tape.constant(z.clone()))?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("wad_msa params", r);
    let r = check_inputs(&[f.clone(), z.clone()], GradCheckConfig::default(), |tape, x| {
        let b = tape.bind(&store, |_| false);
        Ok(msa.forward(&b, x[0], x[1])?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("wad_msa inputs", r);
    let r = check_params(&store, |n| n.starts_with("ffn."), GradCheckConfig::default(), |tape, b| {
        Ok(ffn.forward(b, tape.constant(f.clone()), tape.constant(z.clone()))?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("wad_ffn params", r);
    let r = check_inputs(&[f, z], GradCheckConfig::default(), |tape, x| {
        let b = tape.bind(&store, |_| false);
        Ok(ffn.forward(&b, x[0], x[1])?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("wad_ffn inputs", r);
}

#[test]
fn propagation_step() {
    let mut store = ParamStore::new();
    let p = PropagationParams::new(&mut store, "p", 2, 1, &mut ChaCha8Rng::seed_from_u64(9));
    rescale(&mut store, 900, 1.5);
    let (h, x) = (uniform(&[1, 2, 4, 4], 10), uniform(&[1, 2, 4, 4], 11));
    let w = weights(&[1, 2, 4, 4]);
    let r = check_params(&store, |_| true, GradCheckConfig::default(), |tape, b| {
        Ok(propagate_step(b, &p, tape.constant(h.clone()), tape.constant(x.clone()))?
            .mul(tape.constant(w.clone()))?
            .sum())
    })
    .unwrap();
    assert_passed("propagate_step params", r);
    let r = check_inputs(&[h, x], GradCheckConfig::default(), |tape, v| {
        let b = tape.bind(&store, |_| false);
        Ok(propagate_step(&b, &p, v[0], v[1])?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("propagate_step inputs", r);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        wadt: wadt_cfg(),
        diffusion: DiffusionConfig {
            steps: 2,
            hidden: 5,
            time_dim: 4,
            encoder_width: 3,
            encoder_depth: 2,
            ..DiffusionConfig::default()
        },
        use_prior: true,
    }
}

#[test]
fn encoder_and_noise_predictor() {
    let (model, store) = VdDiff::new(tiny_model(), 12).unwrap();
    let gt = uniform(&[2, 3, 8, 8], 13);
    let w = weights(&[2, 3]);
    let r = check_params(&store, |n| n.starts_with("le."), GradCheckConfig::default(), |tape, b| {
        Ok(model.encode_latent(b, &gt)?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("encode_latent", r);

    let mut store = ParamStore::new();
    let pred = NoisePredictor::new(&mut store, "eps", 3, &tiny_model().diffusion, &mut ChaCha8Rng::seed_from_u64(14));
    let (zt, c) = (uniform(&[2, 3], 15), uniform(&[2, 3], 16));
    let r = check_params(&store, |_| true, GradCheckConfig::default(), |tape, b| {
        Ok(pred.forward(b, tape.constant(zt.clone()), tape.constant(c.clone()), 2)?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("predict_noise params", r);
    let r = check_inputs(&[zt, c], GradCheckConfig::default(), |tape, x| {
        let b = tape.bind(&store, |_| false);
        Ok(pred.forward(&b, x[0], x[1], 1)?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert_passed("predict_noise inputs", r);
}

#[test]
fn full_objective_on_tiny_model() {
    // Central differences of an O(10) loss resolve about ulp(L)/2h ≈ 1e-10, and the
    // piecewise-linear activations put kinks near some points; this draw is clear of both.
    let (model, mut store) = VdDiff::new(tiny_model(), 17).unwrap();
    rescale(&mut store, 1703, 1.5);
    let clip = Clip {
        name: "tiny".into(),
        blur: uniform(&[2, 3, 8, 8], 18).map(|v| 0.5 + 0.4 * v),
        gt: uniform(&[2, 3, 8, 8], 19).map(|v| 0.5 + 0.4 * v),
    };
    let cfg = TrainConfig::default();
    let r = check_params(&store, |_| true, GradCheckConfig::default(), |_, b| {
        Ok(stage_loss(&model, b, &clip, Stage::Three, &cfg, 5)?.total)
    })
    .unwrap();
    assert_eq!(r.checked, store.num_scalars());
    assert_passed("total loss", r);
}
