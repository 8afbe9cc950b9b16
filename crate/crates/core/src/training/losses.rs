//! Deblurring and diffusion objectives.
//!
//! All video losses take a prediction `[T,C,H,W]` on the tape and a constant target.
//! Per-frame terms are means over a frame's elements, summed over frames.

use crate::error::{Error, Result};
use crate::numerics::{avg_pool2, Tensor, Var};

fn check_video<'t>(op: &'static str, pred: Var<'t>, target: &Tensor) -> Result<Vec<usize>> {
    let s = pred.shape();
    if s.len() != 4 || s != target.shape() || s.contains(&0) {
        return Err(Error::shape(
            op,
            format!("prediction {s:?} vs target {:?}", target.shape()),
        ));
    }
    Ok(s)
}

/// `Σ_i mean|V̂_i − V_i|`.
pub fn l1_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let s = check_video("l1_loss", pred, target)?;
    let per_frame = (s[1] * s[2] * s[3]) as f64;
    let diff = pred.sub(pred.tape().constant(target.clone()))?;
    Ok(diff.abs().sum().scale(1.0 / per_frame))
}

/// Multi-scale frequency loss `Σ_i Σ_k (1/t_k) ‖FFT(V̂_i^k) − FFT(V_i^k)‖₁`.
///
/// Scale `k` is reached by `k` rounds of 2× average pooling, `t_k = H_k·W_k`,
/// and the complex L1 norm sums `|Δre| + |Δim|` over channels and bins.
pub fn msfr_loss<'t>(pred: Var<'t>, target: &Tensor, scales: usize) -> Result<Var<'t>> {
    let s = check_video("msfr_loss", pred, target)?;
    if scales == 0 {
        return Err(Error::invalid("msfr_loss", "at least one scale required"));
    }
    let min_extent = 1usize << (scales - 1);
    if s[2] < min_extent || s[3] < min_extent {
        return Err(Error::invalid(
            "msfr_loss",
            format!("{scales} scales need extents of at least {min_extent}, got {}x{}", s[2], s[3]),
        ));
    }
    let tape = pred.tape();
    let (mut p, mut g) = (pred, target.clone());
    let mut terms = Vec::with_capacity(scales);
    for k in 0..scales {
        if k > 0 {
            p = p.avg_pool2()?;
            g = avg_pool2(&g)?;
        }
        let sh = g.shape().to_vec();
        let planes = [sh[0] * sh[1], sh[2], sh[3]];
        let d = p.sub(tape.constant(g.clone()))?.reshape(&planes)?.fft2_real()?;
        terms.push(d.abs().sum().scale(1.0 / (sh[2] * sh[3]) as f64));
    }
    Var::sum_all(&terms)
}

pub struct DeblurTerms<'t> {
    pub total: Var<'t>,
    pub l1: Var<'t>,
    pub msfr: Var<'t>,
}

/// `L1 + λ·MSFR`.
pub fn deblur_loss<'t>(pred: Var<'t>, target: &Tensor, lambda: f64, scales: usize) -> Result<DeblurTerms<'t>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("deblur_loss", format!("lambda {lambda} must be finite and non-negative")));
    }
    let l1 = l1_loss(pred, target)?;
    let msfr = msfr_loss(pred, target, scales)?;
    Ok(DeblurTerms {
        total: l1.add(msfr.scale(lambda))?,
        l1,
        msfr,
    })
}

/// `Σ_i mean|z_i − ẑ_i|` over per-frame latents `[T,D]`.
pub fn diffusion_loss<'t>(z: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (z.shape(), z_hat.shape());
    if a != b || a.len() != 2 || a[1] == 0 {
        return Err(Error::shape("diffusion_loss", format!("latent {a:?} vs sample {b:?}")));
    }
    Ok(z.sub(z_hat)?.abs().sum().scale(1.0 / a[1] as f64))
}

/// `L_deblur + L_diff`.
pub fn total_loss<'t>(deblur: Var<'t>, diff: Var<'t>) -> Result<Var<'t>> {
    deblur.add(diff)
}
