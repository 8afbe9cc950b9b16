//! Wavelet-aware dynamic transformer.
//!
//! Pipeline for a blurry clip `[T,3,H,W]` (extents padded to multiples of 4):
//! shallow 3D conv to `C` channels, two Haar analyses, `n1` prior-modulated
//! layers on the second-level approximation, one synthesis, bidirectional
//! propagation, `n2` layers at half resolution, a second synthesis and a 3D conv
//! back to RGB plus an optional global residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, Bound, ConvSpec, ParamId, ParamStore, Tensor, Var};
use crate::wbpf::Wbpf;

pub const LN_EPS: f64 = 1e-5;
const QK_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct WadtConfig {
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub heads: usize,
    pub prior_dim: usize,
    pub wbpf_resblocks: usize,
    pub global_residual: bool,
}

impl Default for WadtConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            n1: 2,
            n2: 1,
            heads: 1,
            prior_dim: 32,
            wbpf_resblocks: 3,
            global_residual: true,
        }
    }
}

impl WadtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(d));
        if self.heads == 0 || self.channels == 0 || self.channels % (4 * self.heads) != 0 {
            return bad(format!(
                "channels ({}) must be a positive multiple of 4*heads ({})",
                self.channels,
                4 * self.heads
            ));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return bad(format!("n1 and n2 must be at least 1, got {} and {}", self.n1, self.n2));
        }
        if self.prior_dim == 0 {
            return bad("prior_dim must be positive".into());
        }
        Ok(())
    }
}

/// Per-frame affine modulation `s(z′) ⊙ LN(F) + b(z′)` with `LN` over channels.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub scale: (ParamId, ParamId),
    pub shift: (ParamId, ParamId),
}

impl Modulation {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, channels: usize, rng: &mut R) -> Self {
        // Small projection weights around unit scale and zero shift.
        let ws = fan_in_uniform(&[channels, dim], dim, rng).scale(0.1);
        let wb = fan_in_uniform(&[channels, dim], dim, rng).scale(0.1);
        Self {
            scale: (
                store.add(format!("{name}.scale.weight"), ws),
                store.add(format!("{name}.scale.bias"), Tensor::ones(&[channels])),
            ),
            shift: (
                store.add(format!("{name}.shift.weight"), wb),
                store.add(format!("{name}.shift.bias"), Tensor::zeros(&[channels])),
            ),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, f: Var<'t>, prior: Var<'t>) -> Result<Var<'t>> {
        let (fs, zs) = (f.shape(), prior.shape());
        if fs.len() != 4 || zs.len() != 2 || fs[0] != zs[0] {
            return Err(Error::shape(
                "modulate",
                format!("feature {fs:?} vs prior {zs:?} (frame counts must agree)"),
            ));
        }
        let (h, w) = (fs[2], fs[3]);
        let s = prior.linear(b[self.scale.0], Some(b[self.scale.1]))?.expand_spatial(h, w)?;
        let sh = prior.linear(b[self.shift.0], Some(b[self.shift.1]))?.expand_spatial(h, w)?;
        s.mul(f.layernorm(&[1], LN_EPS)?)?.add(sh)
    }
}

/// Temporal (3,1,1) channel-mixing conv followed by a depthwise 3×3 conv.
#[derive(Clone, Debug)]
pub struct Projection {
    pub temporal: ParamId,
    pub spatial: ParamId,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            temporal: store.add(format!("{name}.w3"), fan_in_uniform(&[cout, cin, 3, 1, 1], cin * 3, rng)),
            spatial: store.add(format!("{name}.w2"), fan_in_uniform(&[cout, 1, 3, 3], 9, rng)),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let cout = b[self.spatial].shape()[0];
        let y = x.conv3d(b[self.temporal], None, ConvSpec::same([3, 1, 1]))?;
        y.conv2d(b[self.spatial], None, ConvSpec::same2d(3, 3).with_groups(cout))
    }
}

/// Prior-modulated multi-head channel attention with residual.
#[derive(Clone, Debug)]
pub struct WadMsa {
    pub heads: usize,
    pub modulation: Modulation,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: ParamId,
    /// Log of the per-head inverse temperature `1/γ`.
    pub log_inv_temp: ParamId,
}

impl WadMsa {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &WadtConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            heads: cfg.heads,
            modulation: Modulation::new(store, &format!("{name}.mod"), cfg.prior_dim, c, rng),
            q: Projection::new(store, &format!("{name}.q"), c, c, rng),
            k: Projection::new(store, &format!("{name}.k"), c, c, rng),
            v: Projection::new(store, &format!("{name}.v"), c, c, rng),
            out: store.add(format!("{name}.out.weight"), fan_in_uniform(&[c, c, 1, 1], c, rng)),
            log_inv_temp: store.add(format!("{name}.log_inv_temp"), Tensor::zeros(&[cfg.heads])),
        }
    }

    /// Attention maps `[T·heads, c, c]`; row `i` weights the key/value channels for query channel `i`.
    pub fn attention<'t>(&self, b: &Bound<'t>, f: Var<'t>, prior: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = f.shape();
        let (t, ch, hw) = (s[0], s[1], s[2] * s[3]);
        if ch % self.heads != 0 {
            return Err(Error::shape("wad_msa", format!("{ch} channels not divisible by {} heads", self.heads)));
        }
        let per = ch / self.heads;
        let fm = self.modulation.forward(b, f, prior)?;
        let split = |p: &Projection| -> Result<Var<'t>> { p.forward(b, fm)?.reshape(&[t * self.heads, per, hw]) };
        let q = split(&self.q)?.l2_normalize_last(QK_EPS);
        let k = split(&self.k)?.l2_normalize_last(QK_EPS);
        let v = split(&self.v)?;
        let logits = q.bmm(k, true)?.mul_head_scale(b[self.log_inv_temp].exp())?;
        Ok((logits.softmax(2)?, v))
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, f: Var<'t>, prior: Var<'t>) -> Result<Var<'t>> {
        let (attn, v) = self.attention(b, f, prior)?;
        let mixed = attn.bmm(v, false)?.reshape(&f.shape())?;
        mixed.conv2d(b[self.out], None, ConvSpec::same2d(1, 1))?.add(f)
    }
}

/// Prior-modulated gated feed-forward: `gelu(P₁ F̂) ⊙ P₂ F̂ + F̂`.
#[derive(Clone, Debug)]
pub struct WadFfn {
    pub modulation: Modulation,
    pub gate: Projection,
    pub value: Projection,
}

impl WadFfn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &WadtConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            modulation: Modulation::new(store, &format!("{name}.mod"), cfg.prior_dim, c, rng),
            gate: Projection::new(store, &format!("{name}.gate"), c, c, rng),
            value: Projection::new(store, &format!("{name}.value"), c, c, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, f: Var<'t>, prior: Var<'t>) -> Result<Var<'t>> {
        let fm = self.modulation.forward(b, f, prior)?;
        let g = self.gate.forward(b, fm)?.gelu();
        g.mul(self.value.forward(b, fm)?)?.add(fm)
    }
}

#[derive(Clone, Debug)]
pub struct WadtLayer {
    pub msa: WadMsa,
    pub ffn: WadFfn,
}

impl WadtLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &WadtConfig, rng: &mut R) -> Self {
        Self {
            msa: WadMsa::new(store, &format!("{name}.msa"), cfg, rng),
            ffn: WadFfn::new(store, &format!("{name}.ffn"), cfg, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, f: Var<'t>, prior: Var<'t>) -> Result<Var<'t>> {
        let f = self.msa.forward(b, f, prior)?;
        self.ffn.forward(b, f, prior)
    }
}

#[derive(Clone, Debug)]
pub struct Wadt {
    pub config: WadtConfig,
    pub head: (ParamId, ParamId),
    pub low: Vec<WadtLayer>,
    pub wbpf: Wbpf,
    pub mid: Vec<WadtLayer>,
    pub tail: (ParamId, ParamId),
}

/// Replicates the last row/column so both extents become multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let s = x.shape();
    let (n, h, w) = (s[0] * s[1], s[2], s[3]);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * hp * wp);
    for p in 0..n {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..hp {
            let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            out.extend((0..wp).map(|xx| row[xx.min(w - 1)]));
        }
    }
    Tensor::new(vec![s[0], s[1], hp, wp], out).expect("padded shape")
}

impl Wadt {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: WadtConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let head = (
            store.add(format!("{name}.head.weight"), fan_in_uniform(&[c, 3, 3, 3, 3], 81, rng)),
            store.add(format!("{name}.head.bias"), Tensor::zeros(&[c])),
        );
        let low = (0..config.n1)
            .map(|i| WadtLayer::new(store, &format!("{name}.low.{i}"), &config, rng))
            .collect();
        let wbpf = Wbpf::new(store, &format!("{name}.wbpf"), c, config.wbpf_resblocks, rng);
        let mid = (0..config.n2)
            .map(|i| WadtLayer::new(store, &format!("{name}.mid.{i}"), &config, rng))
            .collect();
        let tail = (
            store.add(format!("{name}.tail.weight"), fan_in_uniform(&[3, c, 3, 3, 3], c * 27, rng)),
            store.add(format!("{name}.tail.bias"), Tensor::zeros(&[3])),
        );
        Ok(Self {
            config,
            head,
            low,
            wbpf,
            mid,
            tail,
        })
    }

    /// Restores a blurry clip `[T,3,H,W]` guided by a per-frame prior `[T,D]`.
    pub fn forward<'t>(&self, b: &Bound<'t>, blur: &Tensor, prior: Var<'t>) -> Result<Var<'t>> {
        let s = blur.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("wadt_forward", format!("expected [T,3,H,W], got {s:?}")));
        }
        let zs = prior.shape();
        if zs != [s[0], self.config.prior_dim] {
            return Err(Error::shape(
                "wadt_forward",
                format!("prior {zs:?} vs {} frames of dimension {}", s[0], self.config.prior_dim),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let tape = prior.tape();
        let input = tape.constant(pad_to_multiple(blur, 4));
        let f_in = input.conv3d(b[self.head.0], Some(b[self.head.1]), ConvSpec::same([3, 3, 3]))?;
        let (f_a, f_d) = f_in.haar_analyze()?;
        let (f_aa, f_ad) = f_a.haar_analyze()?;
        let mut x = f_aa;
        for layer in &self.low {
            x = layer.forward(b, x, prior)?;
        }
        let x = Var::haar_synthesize(x, f_ad)?;
        let mut x = self.wbpf.bidirectional_fuse(b, x)?;
        for layer in &self.mid {
            x = layer.forward(b, x, prior)?;
        }
        let x = Var::haar_synthesize(x, f_d)?;
        let mut out = x.conv3d(b[self.tail.0], Some(b[self.tail.1]), ConvSpec::same([3, 3, 3]))?;
        if self.config.global_residual {
            out = out.add(input)?;
        }
        let ps = out.shape();
        if ps[2] != h {
            out = out.slice(2, 0, h)?;
        }
        if ps[3] != w {
            out = out.slice(3, 0, w)?;
        }
        Ok(out)
    }
}
