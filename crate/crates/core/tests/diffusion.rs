use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdiff_core::diffusion::{
    forward_diffuse, initial_noise, iterative_forward, posterior_mean, reverse_step, sample_prior, DiffusionConfig,
    NoisePredictor, NoiseSchedule,
};
use vdiff_core::numerics::{ParamStore, Tape, Tensor};

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

#[test]
fn substituting_closed_form_noise_into_posterior_mean_gives_reverse_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let steps = rng.random_range(1..=8);
        let betas: Vec<f64> = (0..steps).map(|_| rng.random_range(0.01..0.99)).collect();
        let s = NoiseSchedule::new(betas).unwrap();
        let t = rng.random_range(1..=steps);
        let (z0, eps) = (scalar(rng.random_range(-3.0..3.0)), scalar(rng.random_range(-3.0..3.0)));
        let zt = forward_diffuse(&z0, t, &s, &eps).unwrap();
        let mu = posterior_mean(&zt, &z0, t, &s).unwrap();
        let step = reverse_step(&zt, &eps, t, &s).unwrap();
        assert!(mu.max_abs_diff(&step) < 1e-12, "t={t} {:?}", s.betas());
    }
}

#[test]
fn first_step_with_true_noise_recovers_z0() {
    let s = NoiseSchedule::linear(4, 0.1, 0.99).unwrap();
    let z0 = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin());
    let eps = initial_noise(3, 5, 9);
    let z1 = forward_diffuse(&z0, 1, &s, &eps).unwrap();
    assert!(reverse_step(&z1, &eps, 1, &s).unwrap().max_abs_diff(&z0) < 1e-14);
}

#[test]
fn oracle_noise_reverse_chain_recovers_planted_latent() {
    // With ε_t = (z_t − √ᾱ_t z0)/√(1−ᾱ_t) each reverse step lands on the noiseless posterior path.
    let s = NoiseSchedule::linear(4, 0.1, 0.99).unwrap();
    let z0 = Tensor::from_fn(&[2, 6], |i| (i as f64).cos() * 2.0);
    let mut z = initial_noise(2, 6, 3);
    for t in (1..=4).rev() {
        let ab = s.alpha_bar(t);
        let eps = z.sub(&z0.scale(ab.sqrt())).unwrap().scale(1.0 / (1.0 - ab).sqrt());
        z = reverse_step(&z, &eps, t, &s).unwrap();
    }
    assert!(z.max_abs_diff(&z0) < 1e-10, "{}", z.max_abs_diff(&z0));
}

#[test]
fn iterative_forward_marginals_match_closed_form() {
    let s = NoiseSchedule::new(vec![0.1, 0.2]).unwrap();
    let m = 20_000;
    let z0 = 1.3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noises = [Tensor::randn(&[m], &mut rng), Tensor::randn(&[m], &mut rng)];
    let z2 = iterative_forward(&Tensor::full(&[m], z0), &s, &noises).unwrap();
    let mean = z2.mean();
    let var = z2.map(|v| (v - mean).powi(2)).sum() / (m as f64 - 1.0);
    let (mu, sigma2) = (0.72f64.sqrt() * z0, 0.28);
    assert!((mean - mu).abs() < 4.0 * (sigma2 / m as f64).sqrt());
    assert!((var - sigma2).abs() < 4.0 * sigma2 * (2.0 / (m as f64 - 1.0)).sqrt());
}

#[test]
fn zero_noise_forward_follows_mean_path() {
    let s = NoiseSchedule::linear(3, 0.2, 0.6).unwrap();
    let z0 = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
    let zeros = vec![Tensor::zeros(&[4]); 3];
    let iter = iterative_forward(&z0, &s, &zeros).unwrap();
    let closed = forward_diffuse(&z0, 3, &s, &Tensor::zeros(&[4])).unwrap();
    assert!(iter.max_abs_diff(&closed) < 1e-14);
}

#[test]
fn sampling_is_seeded_and_frame_equivariant() {
    let cfg = DiffusionConfig::default();
    let mut store = ParamStore::new();
    let pred = NoisePredictor::new(&mut store, "eps", 6, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let s = cfg.schedule().unwrap();
    let cond = Tensor::from_fn(&[3, 6], |i| (i as f64 * 0.37).sin());
    let run = |c: &Tensor, seed: u64| {
        let tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        sample_prior(&b, &pred, &s, tape.constant(c.clone()), seed).unwrap().value().as_ref().clone()
    };
    let a = run(&cond, 11);
    assert_eq!(a, run(&cond, 11));
    assert!(a.max_abs_diff(&run(&cond, 12)) > 0.0);

    // Permuting condition rows together with the initial noise rows permutes the output rows.
    let perm = [2usize, 0, 1];
    let noise = initial_noise(3, 6, 11);
    let permute = |x: &Tensor| Tensor::stack(&perm.iter().map(|&i| x.frame(i)).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let b = tape.bind(&store, |_| false);
    let chain = vdiff_core::diffusion::reverse_chain(
        &b,
        &pred,
        &s,
        tape.constant(permute(&noise)),
        tape.constant(permute(&cond)),
    )
    .unwrap()
    .value();
    assert!(chain.max_abs_diff(&permute(&a)) < 1e-12);
}
