use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdiff_core::numerics::{ParamStore, Tape, Tensor, Var};
use vdiff_core::wadt::{Modulation, WadMsa, Wadt, WadtConfig};
use vdiff_core::wbpf::{propagate, Direction, PropagationParams, Wbpf};

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small() -> WadtConfig {
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

fn run_direction(store: &ParamStore, params: &PropagationParams, frames: &[Tensor], dir: Direction) -> Vec<Tensor> {
    let tape = Tape::new();
    let b = tape.bind(store, |_| false);
    let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    propagate(&b, params, &vars, dir)
        .unwrap()
        .iter()
        .map(|v| v.value().as_ref().clone())
        .collect()
}

#[test]
fn propagation_is_causal_in_each_direction() {
    let mut store = ParamStore::new();
    let params = PropagationParams::new(&mut store, "p", 2, 1, &mut ChaCha8Rng::seed_from_u64(0));
    let frames: Vec<Tensor> = (0..5).map(|i| uniform(&[1, 2, 4, 4], i)).collect();
    for dir in [Direction::Forward, Direction::Backward] {
        let base = run_direction(&store, &params, &frames, dir);
        for j in 0..5 {
            let mut moved = frames.clone();
            moved[j] = moved[j].add(&uniform(&[1, 2, 4, 4], 50 + j as u64)).unwrap();
            let out = run_direction(&store, &params, &moved, dir);
            for i in 0..5 {
                let change = out[i].max_abs_diff(&base[i]);
                let upstream = match dir {
                    Direction::Forward => i < j,
                    Direction::Backward => i > j,
                };
                if upstream {
                    assert!(change < 1e-14, "{dir:?} j={j} i={i} changed by {change}");
                } else {
                    assert!(change > 0.0, "{dir:?} j={j} i={i} unchanged");
                }
            }
        }
    }
}

#[test]
fn backward_pass_is_the_forward_pass_on_reversed_frames() {
    let mut store = ParamStore::new();
    let params = PropagationParams::new(&mut store, "p", 2, 2, &mut ChaCha8Rng::seed_from_u64(1));
    let frames: Vec<Tensor> = (0..4).map(|i| uniform(&[1, 2, 3, 5], 10 + i)).collect();
    let reversed: Vec<Tensor> = frames.iter().rev().cloned().collect();
    let fwd = run_direction(&store, &params, &reversed, Direction::Forward);
    let bwd = run_direction(&store, &params, &frames, Direction::Backward);
    for (a, b) in fwd.iter().rev().zip(&bwd) {
        assert_eq!(a, b);
    }
}

#[test]
fn fused_sequence_keeps_shape_and_first_output_sees_every_frame() {
    let mut store = ParamStore::new();
    let wbpf = Wbpf::new(&mut store, "w", 2, 1, &mut ChaCha8Rng::seed_from_u64(2));
    let x = uniform(&[3, 2, 4, 4], 3);
    let fuse = |x: &Tensor| {
        let tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        wbpf.bidirectional_fuse(&b, tape.constant(x.clone())).unwrap().value().as_ref().clone()
    };
    let y = fuse(&x);
    assert_eq!(y.shape(), x.shape());
    let mut last = x.clone();
    for v in &mut last.data_mut()[2 * 32..] {
        *v += 0.5;
    }
    assert!(fuse(&last).frame(0).max_abs_diff(&y.frame(0)) > 0.0);
}

#[test]
fn unit_modulation_standardises_channels() {
    let mut store = ParamStore::new();
    let m = Modulation::new(&mut store, "m", 3, 5, &mut ChaCha8Rng::seed_from_u64(4));
    for (name, t) in [("m.scale.weight", [5, 3]), ("m.shift.weight", [5, 3])] {
        store.assign(name, Tensor::zeros(&t)).unwrap();
    }
    let tape = Tape::new();
    let b = tape.bind(&store, |_| false);
    let f = uniform(&[2, 5, 3, 3], 5).scale(4.0).map(|v| v + 2.0);
    let y = m.forward(&b, tape.constant(f), tape.constant(uniform(&[2, 3], 6))).unwrap().value();
    for t in 0..2 {
        for p in 0..9 {
            let v: Vec<f64> = (0..5).map(|c| y.get(&[t, c, p / 3, p % 3])).collect();
            let mean = v.iter().sum::<f64>() / 5.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn attention_rows_are_distributions_per_head() {
    let cfg = WadtConfig {
        channels: 8,
        heads: 2,
        ..small()
    };
    let mut store = ParamStore::new();
    let msa = WadMsa::new(&mut store, "a", &cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let tape = Tape::new();
    let b = tape.bind(&store, |_| false);
    let (attn, v) = msa
        .attention(&b, tape.constant(uniform(&[3, 8, 4, 4], 8)), tape.constant(uniform(&[3, 3], 9)))
        .unwrap();
    assert_eq!(attn.shape(), vec![6, 4, 4]);
    assert_eq!(v.shape(), vec![6, 4, 16]);
    for row in attn.value().data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_tail_with_global_residual_returns_the_input() {
    let mut store = ParamStore::new();
    let wadt = Wadt::new(&mut store, "wadt", small(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    store.assign("wadt.tail.weight", Tensor::zeros(&[3, 4, 3, 3, 3])).unwrap();
    let blur = uniform(&[2, 3, 6, 7], 11).map(|v| 0.5 + 0.5 * v);
    let tape = Tape::new();
    let b = tape.bind(&store, |_| false);
    let out = wadt.forward(&b, &blur, tape.constant(uniform(&[2, 3], 12))).unwrap().value();
    assert_eq!(out.shape(), blur.shape());
    assert!(out.max_abs_diff(&blur) < 1e-15);
}

#[test]
fn prior_changes_the_restoration() {
    let mut store = ParamStore::new();
    let wadt = Wadt::new(&mut store, "wadt", small(), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let blur = uniform(&[2, 3, 8, 8], 14);
    let run = |z: Tensor| {
        let tape = Tape::new();
        let b = tape.bind(&store, |_| false);
        wadt.forward(&b, &blur, tape.constant(z)).unwrap().value().as_ref().clone()
    };
    let a = run(Tensor::zeros(&[2, 3]));
    assert!(a.all_finite());
    assert!(run(uniform(&[2, 3], 15)).max_abs_diff(&a) > 1e-6);
}
