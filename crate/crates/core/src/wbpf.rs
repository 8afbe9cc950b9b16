//! Bidirectional recurrent propagation of per-frame features.
//!
//! One propagation step fuses the previous hidden state with the next frame:
//!
//! ```text
//! X̂        = LeakyReLU(conv3x3([Y_i, X_{i+1}]))        split into X̂₁, X̂₂
//! F_pro    = X̂₁ ⊙ σ(W₁ X̂₁) + X̂₂ ⊙ σ(W₂ X̂₂)
//! Ȳ        = F_pro ⊙ upsample(P(F_pro))
//! Y_{i+1}  = ResBlocks(Ȳ)
//! ```
//!
//! where `P` is AvgPool(2) → ResBlock → MaxPool(3, stride 1) → ResBlock → conv3x3
//! and the upsample is bilinear back to the input extent. The backward pass
//! runs right-to-left over the forward outputs with its own parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, Bound, ConvSpec, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

fn conv3x3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut R) -> (ParamId, ParamId) {
    let w = fan_in_uniform(&[cout, cin, 3, 3], cin * 9, rng).scale(gain);
    let b = Tensor::zeros(&[cout]);
    (store.add(format!("{name}.weight"), w), store.add(format!("{name}.bias"), b))
}

/// `x + conv(LeakyReLU(conv(x)))` with 3×3 kernels.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: conv3x3(store, &format!("{name}.conv1"), channels, channels, 1.0, rng),
            conv2: conv3x3(store, &format!("{name}.conv2"), channels, channels, 0.1, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let spec = ConvSpec::same2d(3, 3);
        let h = x
            .conv2d(b[self.conv1.0], Some(b[self.conv1.1]), spec)?
            .leaky_relu(LEAKY_SLOPE);
        let h = h.conv2d(b[self.conv2.0], Some(b[self.conv2.1]), spec)?;
        x.add(h)
    }
}

/// Parameters of one propagation direction.
#[derive(Clone, Debug)]
pub struct PropagationParams {
    pub channels: usize,
    pub entry: (ParamId, ParamId),
    pub gate1: (ParamId, ParamId),
    pub gate2: (ParamId, ParamId),
    pub pool_res1: ResBlock,
    pub pool_res2: ResBlock,
    pub pool_out: (ParamId, ParamId),
    pub trunk: Vec<ResBlock>,
}

impl PropagationParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        resblocks: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let entry = conv3x3(store, &format!("{name}.entry"), 2 * c, 2 * c, 1.0, rng);
        let gate1 = conv3x3(store, &format!("{name}.gate1"), c, c, 1.0, rng);
        let gate2 = conv3x3(store, &format!("{name}.gate2"), c, c, 1.0, rng);
        let pool_res1 = ResBlock::new(store, &format!("{name}.pool.res1"), c, rng);
        let pool_res2 = ResBlock::new(store, &format!("{name}.pool.res2"), c, rng);
        // The pooled map starts near 1 so that Ȳ ≈ F_pro at initialisation.
        let pool_w = fan_in_uniform(&[c, c, 3, 3], c * 9, rng).scale(0.1);
        let pool_out = (
            store.add(format!("{name}.pool.out.weight"), pool_w),
            store.add(format!("{name}.pool.out.bias"), Tensor::ones(&[c])),
        );
        let trunk = (0..resblocks)
            .map(|i| ResBlock::new(store, &format!("{name}.trunk.{i}"), c, rng))
            .collect();
        Self {
            channels,
            entry,
            gate1,
            gate2,
            pool_res1,
            pool_res2,
            pool_out,
            trunk,
        }
    }

    /// The pooling branch `P`, returned at pooled resolution.
    pub fn pool_branch<'t>(&self, b: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let p = f.avg_pool2()?;
        let p = self.pool_res1.forward(b, p)?;
        let p = p.max_pool2d(3, 1, 1)?;
        let p = self.pool_res2.forward(b, p)?;
        p.conv2d(b[self.pool_out.0], Some(b[self.pool_out.1]), ConvSpec::same2d(3, 3))
    }
}

/// One recurrent update `(Y_i, X_{i+1}) -> Y_{i+1}` on `[1,C,H,W]` features.
pub fn propagate_step<'t>(
    b: &Bound<'t>,
    params: &PropagationParams,
    hidden: Var<'t>,
    next: Var<'t>,
) -> Result<Var<'t>> {
    let (hs, ns) = (hidden.shape(), next.shape());
    if hs != ns || hs.len() != 4 || hs[1] != params.channels {
        return Err(Error::shape(
            "propagate_step",
            format!("hidden {hs:?} vs next frame {ns:?} ({} channels expected)", params.channels),
        ));
    }
    let (h, w) = (hs[2], hs[3]);
    let spec = ConvSpec::same2d(3, 3);
    let stacked = Var::concat(&[hidden, next], 1)?;
    let x_hat = stacked
        .conv2d(b[params.entry.0], Some(b[params.entry.1]), spec)?
        .leaky_relu(LEAKY_SLOPE);
    let halves = x_hat.split(1, &[params.channels, params.channels])?;
    let g1 = halves[0].conv2d(b[params.gate1.0], Some(b[params.gate1.1]), spec)?.sigmoid();
    let g2 = halves[1].conv2d(b[params.gate2.0], Some(b[params.gate2.1]), spec)?.sigmoid();
    let f_pro = halves[0].mul(g1)?.add(halves[1].mul(g2)?)?;
    let pooled = params.pool_branch(b, f_pro)?;
    let mut y = f_pro.mul(pooled.resize_bilinear(h, w)?)?;
    for block in &params.trunk {
        y = block.forward(b, y)?;
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Runs one directional pass over per-frame features, seeding the hidden state with zeros.
pub fn propagate<'t>(
    b: &Bound<'t>,
    params: &PropagationParams,
    frames: &[Var<'t>],
    direction: Direction,
) -> Result<Vec<Var<'t>>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("propagate", "empty frame sequence"))?;
    let tape = first.tape();
    let mut hidden = tape.constant(Tensor::zeros(&first.shape()));
    let mut out: Vec<Option<Var<'t>>> = vec![None; frames.len()];
    let order: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Forward => Box::new(0..frames.len()),
        Direction::Backward => Box::new((0..frames.len()).rev()),
    };
    for i in order {
        hidden = propagate_step(b, params, hidden, frames[i])?;
        out[i] = Some(hidden);
    }
    Ok(out.into_iter().map(|v| v.expect("every frame visited")).collect())
}

/// Forward and backward propagation parameter sets.
#[derive(Clone, Debug)]
pub struct Wbpf {
    pub forward: PropagationParams,
    pub backward: PropagationParams,
}

impl Wbpf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, resblocks: usize, rng: &mut R) -> Self {
        Self {
            forward: PropagationParams::new(store, &format!("{name}.fwd"), channels, resblocks, rng),
            backward: PropagationParams::new(store, &format!("{name}.bwd"), channels, resblocks, rng),
        }
    }

    /// Forward pass left→right, then backward pass right→left over its outputs.
    pub fn fuse_frames<'t>(&self, b: &Bound<'t>, frames: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let fwd = propagate(b, &self.forward, frames, Direction::Forward)?;
        propagate(b, &self.backward, &fwd, Direction::Backward)
    }

    /// Fuses a `[N,C,H,W]` feature sequence, returning the same shape.
    pub fn bidirectional_fuse<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::invalid("bidirectional_fuse", format!("need a non-empty [N,C,H,W] sequence, got {shape:?}")));
        }
        let frames = (0..shape[0]).map(|i| x.slice(0, i, 1)).collect::<Result<Vec<_>>>()?;
        let out = self.fuse_frames(b, &frames)?;
        Var::concat(&out, 0)
    }
}
