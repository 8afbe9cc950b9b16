//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits nonzero if any fails. `VDIFF_ACCEPT=1,4` selects a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdiff_core::datakit::Clip;
use vdiff_core::diffusion::{
    forward_diffuse, initial_noise, iterative_forward, posterior_mean, reverse_step, DiffusionConfig, NoisePredictor,
    NoiseSchedule,
};
use vdiff_core::model::{ModelConfig, VdDiff};
use vdiff_core::numerics::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use vdiff_core::numerics::{ParamStore, Tape, Tensor, Var};
use vdiff_core::training::{l1_loss, msfr_loss, stage_loss, Stage, TrainConfig};
use vdiff_core::wadt::{pad_to_multiple, Modulation, WadFfn, WadMsa, WadtConfig};
use vdiff_core::wavelet::{analyze, synthesize};
use vdiff_core::wbpf::{propagate, propagate_step, Direction, PropagationParams};

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn within(elapsed: Duration, limit: f64) -> Result<()> {
    ensure!(elapsed.as_secs_f64() < limit, "took {:.2}s, limit {limit}s", elapsed.as_secs_f64());
    Ok(())
}

fn wavelet_round_trip() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut recon, mut energy, mut odd) = (0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let t = rng.random_range(1..=4);
        let c = rng.random_range(1..=8);
        let h = rng.random_range(2..=16);
        let w = rng.random_range(2..=16);
        odd += usize::from(h % 2 == 1 || w % 2 == 1);
        let x = Tensor::rand_uniform(&[t, c, h, w], -1.0, 1.0, &mut rng);
        let p = analyze(&x)?;
        recon = recon.max(synthesize(&p)?.max_abs_diff(&x));
        // Odd extents are padded by replication, so energy is preserved w.r.t. the padded video.
        let padded = pad_to_multiple(&x, 2).norm_sq();
        energy = energy.max((p.approx.norm_sq() + p.detail.norm_sq() - padded).abs() / padded);
    }
    let elapsed = start.elapsed();
    let detail = format!("max error {recon:.1e}, Parseval rel {energy:.1e}, {odd} odd videos, {:.2}s", elapsed.as_secs_f64());
    ensure!(odd > 0, "no odd extents drawn");
    ensure!(recon < 1e-10 && energy < 1e-9, "{detail}");
    within(elapsed, 5.0)?;
    Ok(detail)
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).expect("scalar")
}

fn reverse_step_identity() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let steps = rng.random_range(1..=8);
        let s = NoiseSchedule::new((0..steps).map(|_| rng.random_range(0.01..0.99)).collect())?;
        let t = rng.random_range(1..=steps);
        let (z0, eps) = (scalar(rng.random_range(-3.0..3.0)), scalar(rng.random_range(-3.0..3.0)));
        let zt = forward_diffuse(&z0, t, &s, &eps)?;
        worst = worst.max(posterior_mean(&zt, &z0, t, &s)?.max_abs_diff(&reverse_step(&zt, &eps, t, &s)?));
    }
    let s = NoiseSchedule::linear(4, 0.1, 0.99)?;
    let z0 = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.9).sin() * 2.0);
    let mut z = initial_noise(3, 8, 7);
    for t in (1..=4).rev() {
        let ab = s.alpha_bar(t);
        let eps = z.sub(&z0.scale(ab.sqrt()))?.scale(1.0 / (1.0 - ab).sqrt());
        z = reverse_step(&z, &eps, t, &s)?;
    }
    let chain = z.max_abs_diff(&z0);
    let elapsed = start.elapsed();
    let detail = format!("substitution {worst:.1e}, oracle chain {chain:.1e}, {:.2}s", elapsed.as_secs_f64());
    ensure!(worst < 1e-12 && chain < 1e-10, "{detail}");
    within(elapsed, 5.0)?;
    Ok(detail)
}

fn forward_marginals() -> Result<String> {
    let start = Instant::now();
    let m = 100_000;
    let z0 = 1.3;
    let s = NoiseSchedule::new(vec![0.1, 0.2])?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noises = [Tensor::randn(&[m], &mut rng), Tensor::randn(&[m], &mut rng)];
    let z2 = iterative_forward(&Tensor::full(&[m], z0), &s, &noises)?;
    let mean = z2.mean();
    let var = z2.map(|v| (v - mean).powi(2)).sum() / (m as f64 - 1.0);
    let (mu, sigma2) = (0.72f64.sqrt() * z0, 0.28);
    let (se_mean, se_var) = ((sigma2 / m as f64).sqrt(), sigma2 * (2.0 / (m as f64 - 1.0)).sqrt());
    let (dm, dv) = ((mean - mu).abs() / se_mean, (var - sigma2).abs() / se_var);
    let elapsed = start.elapsed();
    let detail = format!("mean off by {dm:.2}σ, variance off by {dv:.2}σ, {:.2}s", elapsed.as_secs_f64());
    ensure!(dm < 4.0 && dv < 4.0, "{detail}");
    within(elapsed, 30.0)?;
    Ok(detail)
}

fn rescale(store: &mut ParamStore, seed: u64, gain: f64) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let scale = if shape.len() > 1 { gain / (fan_in as f64).sqrt() } else { 0.3 };
        store.assign(&name, uniform(&shape, seed + i as u64).scale(scale))?;
    }
    Ok(())
}

fn probe<'t>(y: Var<'t>, w: &Tensor) -> vdiff_core::Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum())
}

fn gradient_suite() -> Result<String> {
    let start = Instant::now();
    let g = GradCheckConfig::default();
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();
    let wadt = WadtConfig {
        channels: 4,
        n1: 1,
        n2: 1,
        heads: 1,
        prior_dim: 3,
        wbpf_resblocks: 1,
        global_residual: true,
    };

    let (target, pred) = (uniform(&[2, 3, 6, 5], 1), uniform(&[2, 3, 6, 5], 2));
    reports.push(("l1_loss", check_inputs(&[pred.clone()], g, |_, x| l1_loss(x[0], &target))?));
    reports.push(("msfr_loss", check_inputs(&[pred], g, |_, x| msfr_loss(x[0], &target, 3))?));

    let mut store = ParamStore::new();
    let m = Modulation::new(&mut store, "m", 3, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let (f, z, w) = (uniform(&[2, 4, 3, 3], 4), uniform(&[2, 3], 5), uniform(&[2, 4, 3, 3], 4242));
    reports.push((
        "modulate",
        check_params(&store, |_| true, g, |t, b| probe(m.forward(b, t.constant(f.clone()), t.constant(z.clone()))?, &w))?,
    ));
    reports.push((
        "modulate inputs",
        check_inputs(&[f, z], g, |t, x| probe(m.forward(&t.bind(&store, |_| false), x[0], x[1])?, &w))?,
    ));

    let cfg = WadtConfig {
        channels: 8,
        heads: 2,
        ..wadt.clone()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let msa = WadMsa::new(&mut store, "msa", &cfg, &mut rng);
    let ffn = WadFfn::new(&mut store, "ffn", &cfg, &mut rng);
    store.assign("msa.log_inv_temp", Tensor::new(vec![2], vec![0.3, -0.2])?)?;
    let (f, z, w) = (uniform(&[3, 8, 4, 4], 7), uniform(&[3, 3], 8), uniform(&[3, 8, 4, 4], 4242));
    reports.push((
        "wad_msa",
        check_params(&store, |n| n.starts_with("msa."), g, |t, b| {
            probe(msa.forward(b, t.constant(f.clone()), t.constant(z.clone()))?, &w)
        })?,
    ));
    reports.push((
        "wad_ffn",
        check_params(&store, |n| n.starts_with("ffn."), g, |t, b| {
            probe(ffn.forward(b, t.constant(f.clone()), t.constant(z.clone()))?, &w)
        })?,
    ));

    let mut store = ParamStore::new();
    let p = PropagationParams::new(&mut store, "p", 2, 1, &mut ChaCha8Rng::seed_from_u64(9));
    rescale(&mut store, 900, 1.5)?;
    let (h, x, w) = (uniform(&[1, 2, 4, 4], 10), uniform(&[1, 2, 4, 4], 11), uniform(&[1, 2, 4, 4], 4242));
    reports.push((
        "propagate_step",
        check_params(&store, |_| true, g, |t, b| {
            probe(propagate_step(b, &p, t.constant(h.clone()), t.constant(x.clone()))?, &w)
        })?,
    ));

    let tiny = ModelConfig {
        wadt,
        diffusion: DiffusionConfig {
            steps: 2,
            hidden: 5,
            time_dim: 4,
            encoder_width: 3,
            encoder_depth: 2,
            ..DiffusionConfig::default()
        },
        use_prior: true,
    };
    let (model, store) = VdDiff::new(tiny.clone(), 12)?;
    let (gt, w) = (uniform(&[2, 3, 8, 8], 13), uniform(&[2, 3], 4242));
    reports.push((
        "encode_latent",
        check_params(&store, |n| n.starts_with("le."), g, |_, b| probe(model.encode_latent(b, &gt)?, &w))?,
    ));
    let mut store = ParamStore::new();
    let pred = NoisePredictor::new(&mut store, "eps", 3, &tiny.diffusion, &mut ChaCha8Rng::seed_from_u64(14));
    let (zt, c) = (uniform(&[2, 3], 15), uniform(&[2, 3], 16));
    reports.push((
        "predict_noise",
        check_params(&store, |_| true, g, |t, b| {
            probe(pred.forward(b, t.constant(zt.clone()), t.constant(c.clone()), 2)?, &w)
        })?,
    ));

    let (model, mut store) = VdDiff::new(tiny, 17)?;
    rescale(&mut store, 1703, 1.5)?;
    let clip = Clip {
        name: "tiny".into(),
        blur: uniform(&[2, 3, 8, 8], 18).map(|v| 0.5 + 0.4 * v),
        gt: uniform(&[2, 3, 8, 8], 19).map(|v| 0.5 + 0.4 * v),
    };
    let train = TrainConfig::default();
    let total = check_params(&store, |_| true, g, |_, b| Ok(stage_loss(&model, b, &clip, Stage::Three, &train, 5)?.total))?;
    ensure!(total.checked == store.num_scalars(), "full objective skipped coordinates");
    reports.push(("L_total", total));

    let elapsed = start.elapsed();
    let coords: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| format!("{n} ({} bad, worst {:?})", r.failures.len(), r.worst))
        .collect();
    ensure!(failed.is_empty(), "{}", failed.join("; "));
    within(elapsed, 300.0)?;
    Ok(format!("{} checks, {coords} coordinates, worst rel {worst:.1e}, {:.1}s", reports.len(), elapsed.as_secs_f64()))
}

fn run_direction(store: &ParamStore, p: &PropagationParams, frames: &[Tensor], dir: Direction) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let b = tape.bind(store, |_| false);
    let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    Ok(propagate(&b, p, &vars, dir)?.iter().map(|v| v.value().as_ref().clone()).collect())
}

fn propagation_causality() -> Result<String> {
    let mut store = ParamStore::new();
    let p = PropagationParams::new(&mut store, "p", 3, 2, &mut ChaCha8Rng::seed_from_u64(5));
    let n = 6;
    let frames: Vec<Tensor> = (0..n).map(|i| uniform(&[1, 3, 5, 6], 100 + i as u64)).collect();
    let (mut leak, mut weakest) = (0.0f64, f64::INFINITY);
    for dir in [Direction::Forward, Direction::Backward] {
        let base = run_direction(&store, &p, &frames, dir)?;
        for j in 0..n {
            let mut moved = frames.clone();
            moved[j] = moved[j].add(&uniform(&[1, 3, 5, 6], 200 + j as u64))?;
            let out = run_direction(&store, &p, &moved, dir)?;
            for i in 0..n {
                let change = out[i].max_abs_diff(&base[i]);
                let upstream = if dir == Direction::Forward { i < j } else { i > j };
                if upstream {
                    leak = leak.max(change);
                } else {
                    weakest = weakest.min(change);
                }
            }
        }
    }
    let detail = format!("max upstream change {leak:.1e}, min downstream change {weakest:.1e}");
    ensure!(leak < 1e-14 && weakest > 0.0, "{detail}");
    Ok(detail)
}

struct Cli {
    root: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<()> {
        let out = Command::new(env!("CARGO_BIN_EXE_vdiff")).args(args).output().context("spawn vdiff")?;
        if !out.status.success() {
            bail!("vdiff {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
        }
        Ok(())
    }

    fn path(&self, p: &str) -> String {
        self.root.join(p).to_string_lossy().into_owned()
    }
}

fn csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect())
}

fn num(s: &str) -> Result<f64> {
    s.parse().with_context(|| format!("not a number: {s:?}"))
}

fn default_data(cli: &Cli) -> Result<String> {
    let data = cli.path("data");
    if !Path::new(&data).join("manifest.csv").exists() {
        cli.run(&["synth", "--out", &data])?;
    }
    Ok(data)
}

fn toy_convergence(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let data = default_data(cli)?;
    let (s1, ev) = (cli.path("c6_stage1"), cli.path("c6_eval"));
    cli.run(&["train", "--stage", "1", "--data", &data, "--out", &s1, "--steps", "300"])?;
    let rows = csv(&Path::new(&s1).join("loss.csv"))?;
    ensure!(rows.len() == 300, "expected 300 loss rows, got {}", rows.len());
    let first = num(&rows[0][1])?;
    let tail = rows[rows.len() - 10..].iter().map(|r| num(&r[1])).collect::<Result<Vec<_>>>()?;
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    let ckpt = Path::new(&s1).join("checkpoint.bin");
    cli.run(&["eval", "--checkpoint", &ckpt.to_string_lossy(), "--data", &data, "--out", &ev, "--set", "prior=latent"])?;
    let metrics = csv(&Path::new(&ev).join("metrics.csv"))?;
    let mean = metrics.last().context("empty metrics")?;
    let (psnr, base) = (num(&mean[1])?, num(&mean[3])?);
    let elapsed = start.elapsed();
    let detail = format!(
        "L_deblur {first:.4} -> {last:.4} (ratio {:.3}), eval psnr {psnr:.2} dB vs blur {base:.2} dB (+{:.2}), {:.0}s",
        last / first,
        psnr - base,
        elapsed.as_secs_f64()
    );
    ensure!(last < 0.5 * first && psnr - base >= 1.0, "{detail}");
    within(elapsed, 1800.0)?;
    Ok(detail)
}

fn ablation(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let data = default_data(cli)?;
    let out = cli.path("c7_ablate");
    cli.run(&["ablate", "--data", &data, "--out", &out])?;
    let rows = csv(&Path::new(&out).join("ablation.csv"))?;
    let get = |v: &str| -> Result<f64> { num(&rows.iter().find(|r| r[0] == v).with_context(|| format!("no {v} row"))?[2]) };
    let (full, no_prior) = (get("full")?, get("no_prior")?);
    let sweep: BTreeMap<usize, f64> = csv(&Path::new(&out).join("sweep_steps.csv"))?
        .iter()
        .map(|r| Ok((r[0].parse()?, num(&r[1])?)))
        .collect::<Result<_>>()?;
    let (t4, t8) = (sweep.get(&4).context("no T=4")?, sweep.get(&8).context("no T=8")?);
    let listing: Vec<String> = sweep.iter().map(|(t, p)| format!("T{t} {p:.3}")).collect();
    let detail = format!(
        "(a) full {full:.3} vs no prior {no_prior:.3} dB; (b) {} dB, |T4-T8| {:.3}; {:.0}s",
        listing.join(", "),
        (t4 - t8).abs(),
        start.elapsed().as_secs_f64()
    );
    ensure!(full >= no_prior, "(a) fails: {detail}");
    ensure!((t4 - t8).abs() <= 0.2, "(b) fails: {detail}");
    Ok(detail)
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn reproducibility(cli: &Cli) -> Result<String> {
    let small_model = [
        "channels=4", "n1=1", "prior_dim=4", "wbpf_resblocks=1", "eps_hidden=8", "encoder_width=4", "diffusion_steps=2",
    ];
    let with = |args: &[&str], sets: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        for s in sets {
            v.push("--set".into());
            v.push(s.to_string());
        }
        v
    };
    for run in ["a", "b"] {
        let r = |p: &str| cli.path(&format!("c8_{run}/{p}"));
        let go = |args: Vec<String>| cli.run(&args.iter().map(String::as_str).collect::<Vec<_>>());
        let data = r("data");
        go(with(&["synth", "--out", &data, "--seed", "11"], &["clips=3", "frames=4", "height=16", "width=16", "eval_clips=1"]))?;
        let mut train1 = with(&["train", "--stage", "1", "--data", &data, "--out", &r("s1"), "--steps", "4"], &small_model);
        train1.extend(["--seed".into(), "4".into()]);
        go(train1)?;
        let ck = |s: &str| format!("{}/checkpoint.bin", r(s));
        go(with(&["train", "--stage", "2", "--data", &data, "--out", &r("s2"), "--checkpoint", &ck("s1"), "--steps", "4"], &[]))?;
        go(with(&["train", "--stage", "3", "--data", &data, "--out", &r("s3"), "--checkpoint", &ck("s2"), "--steps", "4"], &[]))?;
        go(with(&["infer", "--checkpoint", &ck("s3"), "--input", &format!("{data}/clip002"), "--out", &r("infer"), "--seed", "2"], &[]))?;
        go(with(
            &["eval", "--checkpoint", &ck("s3"), "--data", &data, "--out", &r("eval")],
            &["sweep_steps=1,2", "sweep_seq_len=1,3", "save_frames=true"],
        ))?;
        go(with(
            &["ablate", "--data", &data, "--out", &r("ablate"), "--steps", "3"],
            &[&small_model[..], &["stage2_steps=3", "stage3_steps=2", "sweep_steps=1,2"]].concat(),
        ))?;
    }
    let (a, b) = (tree(&cli.root.join("c8_a"))?, tree(&cli.root.join("c8_b"))?);
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    let differing: Vec<String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "differing files: {}", differing.join(", "));
    let csvs = a.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    let pngs = a.keys().filter(|k| k.extension().is_some_and(|e| e == "png")).count();
    Ok(format!("5 commands x2: {} files identical ({csvs} csv, {pngs} png)", a.len()))
}

fn main() -> ExitCode {
    let selected: Option<Vec<u8>> = std::env::var("VDIFF_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let dir = tempfile::tempdir().expect("temp dir");
    let cli = Cli {
        root: dir.path().to_path_buf(),
    };
    let criteria: Vec<(u8, &str, Box<dyn Fn() -> Result<String> + '_>)> = vec![
        (1, "wavelet round trip", Box::new(wavelet_round_trip)),
        (2, "reverse step identity", Box::new(reverse_step_identity)),
        (3, "forward marginals", Box::new(forward_marginals)),
        (4, "gradients", Box::new(gradient_suite)),
        (5, "propagation causality", Box::new(propagation_causality)),
        (6, "toy convergence", Box::new(|| toy_convergence(&cli))),
        (7, "prior ablation", Box::new(|| ablation(&cli))),
        (8, "reproducibility", Box::new(|| reproducibility(&cli))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(n)) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
