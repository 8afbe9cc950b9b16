//! Single-level orthonormal 2D Haar transform applied per frame and channel.
//!
//! Subbands are packed along the channel axis: a `[T,C,H,W]` input yields an
//! approximation `[T,C,H/2,W/2]` and details `[T,3C,H/2,W/2]` stacked as
//! `LH | HL | HH`, each block holding all `C` input channels in order.
//! For a 2×2 block `(a b / c d)`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// One decomposition level with the bookkeeping needed to undo padding.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub approx: Tensor,
    pub detail: Tensor,
    pub original_hw: (usize, usize),
}

fn dims(x: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [t, c, h, w] => Ok([t, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [T,C,H,W], got {:?}", x.shape()))),
    }
}

/// Packed forward transform of even-sized planes: `[T,C,H,W] -> [T,4C,H/2,W/2]`.
fn haar_forward(src: &[f64], t: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let sub = ho * wo;
    let mut out = vec![0.0; t * 4 * c * sub];
    for ti in 0..t {
        for ci in 0..c {
            let plane = &src[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w];
            let band = |b: usize| ((ti * 4 + b) * c + ci) * sub;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..ho {
                for j in 0..wo {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let cc = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    let k = i * wo + j;
                    out[ll + k] = 0.5 * (a + b + cc + d);
                    out[lh + k] = 0.5 * (a - b + cc - d);
                    out[hl + k] = 0.5 * (a + b - cc - d);
                    out[hh + k] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    out
}

/// Packed inverse transform: `[T,4C,h,w] -> [T,C,2h,2w]`.
fn haar_inverse(src: &[f64], t: usize, c: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (h, w) = (2 * ho, 2 * wo);
    let sub = ho * wo;
    let mut out = vec![0.0; t * c * h * w];
    for ti in 0..t {
        for ci in 0..c {
            let band = |b: usize| ((ti * 4 + b) * c + ci) * sub;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let plane = &mut out[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let k = i * wo + j;
                    let (s, x, y, z) = (src[ll + k], src[lh + k], src[hl + k], src[hh + k]);
                    plane[2 * i * w + 2 * j] = 0.5 * (s + x + y + z);
                    plane[2 * i * w + 2 * j + 1] = 0.5 * (s - x + y - z);
                    plane[(2 * i + 1) * w + 2 * j] = 0.5 * (s + x - y - z);
                    plane[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (s - x - y + z);
                }
            }
        }
    }
    out
}

/// Extends odd extents by one sample, mirroring the last row/column.
fn pad_even(x: &Tensor) -> Tensor {
    let [t, c, h, w] = dims(x, "pad").expect("rank checked by caller");
    let (hp, wp) = (h + h % 2, w + w % 2);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(t * c * hp * wp);
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..hp {
            let row = &plane[i.min(h - 1) * w..(i.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            if wp > w {
                out.push(row[w - 1]);
            }
        }
    }
    Tensor::from_parts(vec![t, c, hp, wp], out)
}

fn crop(x: Tensor, h: usize, w: usize) -> Tensor {
    let [t, c, hp, wp] = dims(&x, "crop").expect("rank 4");
    if (hp, wp) == (h, w) {
        return x;
    }
    let mut out = Vec::with_capacity(t * c * h * w);
    for plane in x.data().chunks_exact(hp * wp) {
        for i in 0..h {
            out.extend_from_slice(&plane[i * wp..i * wp + w]);
        }
    }
    Tensor::from_parts(vec![t, c, h, w], out)
}

fn split_packed(packed: Vec<f64>, t: usize, c: usize, ho: usize, wo: usize) -> (Tensor, Tensor) {
    let sub = ho * wo;
    let mut approx = Vec::with_capacity(t * c * sub);
    let mut detail = Vec::with_capacity(t * 3 * c * sub);
    for frame in packed.chunks_exact(4 * c * sub) {
        approx.extend_from_slice(&frame[..c * sub]);
        detail.extend_from_slice(&frame[c * sub..]);
    }
    (
        Tensor::from_parts(vec![t, c, ho, wo], approx),
        Tensor::from_parts(vec![t, 3 * c, ho, wo], detail),
    )
}

/// Decomposes a `[T,C,H,W]` video into approximation and detail subbands.
pub fn analyze(x: &Tensor) -> Result<WaveletPyramid> {
    let [_, _, h, w] = dims(x, "analyze")?;
    if h < 2 || w < 2 {
        return Err(Error::invalid("analyze", format!("spatial extent {h}x{w} below 2x2")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "analyze" });
    }
    let padded = pad_even(x);
    let [t, c, hp, wp] = dims(&padded, "analyze")?;
    let packed = haar_forward(padded.data(), t, c, hp, wp);
    let (approx, detail) = split_packed(packed, t, c, hp / 2, wp / 2);
    Ok(WaveletPyramid {
        approx,
        detail,
        original_hw: (h, w),
    })
}

/// Exact inverse of [`analyze`], cropping any padding.
pub fn synthesize(p: &WaveletPyramid) -> Result<Tensor> {
    let [t, c, ho, wo] = dims(&p.approx, "synthesize")?;
    if p.detail.shape() != [t, 3 * c, ho, wo] {
        return Err(Error::shape(
            "synthesize",
            format!("approx {:?} inconsistent with detail {:?}", p.approx.shape(), p.detail.shape()),
        ));
    }
    let (h, w) = p.original_hw;
    if h.div_ceil(2) != ho || w.div_ceil(2) != wo {
        return Err(Error::shape(
            "synthesize",
            format!("subbands {ho}x{wo} cannot produce original extent {h}x{w}"),
        ));
    }
    let sub = ho * wo;
    let mut packed = Vec::with_capacity(t * 4 * c * sub);
    for ti in 0..t {
        packed.extend_from_slice(&p.approx.data()[ti * c * sub..(ti + 1) * c * sub]);
        packed.extend_from_slice(&p.detail.data()[ti * 3 * c * sub..(ti + 1) * 3 * c * sub]);
    }
    let full = Tensor::from_parts(vec![t, c, 2 * ho, 2 * wo], haar_inverse(&packed, t, c, ho, wo));
    Ok(crop(full, h, w))
}

impl<'t> Var<'t> {
    /// Differentiable analysis of an even-sized `[T,C,H,W]` input into `(approx, detail)`.
    pub fn haar_analyze(self) -> Result<(Var<'t>, Var<'t>)> {
        let x = self.value();
        let [t, c, h, w] = dims(&x, "haar_analyze")?;
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("haar_analyze", format!("extents {h}x{w} must be even and >= 2")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let packed = Tensor::from_parts(vec![t, 4 * c, ho, wo], haar_forward(x.data(), t, c, h, w));
        // Orthonormal: the adjoint of analysis is synthesis.
        let v = self.tape().record(packed, &[self], move |g| {
            vec![Tensor::from_parts(vec![t, c, h, w], haar_inverse(g.data(), t, c, ho, wo))]
        });
        Ok((v.slice(1, 0, c)?, v.slice(1, c, 3 * c)?))
    }

    /// Differentiable synthesis from `approx: [T,C,h,w]` and `detail: [T,3C,h,w]`.
    pub fn haar_synthesize(approx: Var<'t>, detail: Var<'t>) -> Result<Var<'t>> {
        let (sa, sd) = (approx.shape(), detail.shape());
        if sa.len() != 4 || sd != [sa[0], 3 * sa[1], sa[2], sa[3]] {
            return Err(Error::shape(
                "haar_synthesize",
                format!("approx {sa:?} inconsistent with detail {sd:?}"),
            ));
        }
        let (t, c, ho, wo) = (sa[0], sa[1], sa[2], sa[3]);
        let packed = Var::concat(&[approx, detail], 1)?;
        let y = Tensor::from_parts(vec![t, c, 2 * ho, 2 * wo], haar_inverse(packed.value().data(), t, c, ho, wo));
        Ok(approx.tape().record(y, &[packed], move |g| {
            vec![Tensor::from_parts(
                vec![t, 4 * c, ho, wo],
                haar_forward(g.data(), t, c, 2 * ho, 2 * wo),
            )]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(vals: [f64; 4]) -> Tensor {
        Tensor::new(vec![1, 1, 2, 2], vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_frame_has_only_approximation() {
        let p = analyze(&Tensor::full(&[2, 3, 4, 6], 0.7)).unwrap();
        assert!(p.approx.data().iter().all(|&v| (v - 1.4).abs() < 1e-15));
        assert!(p.detail.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_block_subbands() {
        let p = analyze(&block([1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.approx.data(), &[5.0]);
        assert_eq!(p.detail.data(), &[-1.0, -2.0, 0.0]);
    }

    #[test]
    fn approximation_only_pyramid_synthesizes_flat_block() {
        let p = WaveletPyramid {
            approx: Tensor::full(&[1, 1, 1, 1], 5.0),
            detail: Tensor::zeros(&[1, 3, 1, 1]),
            original_hw: (2, 2),
        };
        assert_eq!(synthesize(&p).unwrap().data(), &[2.5; 4]);
        let zero = WaveletPyramid {
            approx: Tensor::zeros(&[2, 2, 3, 3]),
            detail: Tensor::zeros(&[2, 6, 3, 3]),
            original_hw: (6, 5),
        };
        assert!(synthesize(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_with_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for shape in [[1, 1, 8, 8], [2, 3, 5, 7], [3, 2, 2, 3], [1, 4, 9, 2]] {
            let x = Tensor::randn(&shape, &mut rng);
            let back = synthesize(&analyze(&x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-10, "{shape:?}");
        }
    }

    #[test]
    fn parseval_on_even_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[1, 1, 8, 8], &mut rng);
        let p = analyze(&x).unwrap();
        let e = p.approx.norm_sq() + p.detail.norm_sq();
        assert!((e - x.norm_sq()).abs() / x.norm_sq() < 1e-9);
    }

    #[test]
    fn rejects_tiny_and_inconsistent_inputs() {
        assert!(analyze(&Tensor::zeros(&[1, 1, 1, 4])).is_err());
        let bad = WaveletPyramid {
            approx: Tensor::zeros(&[1, 2, 2, 2]),
            detail: Tensor::zeros(&[1, 5, 2, 2]),
            original_hw: (4, 4),
        };
        assert!(synthesize(&bad).is_err());
    }

    #[test]
    fn tape_ops_agree_with_pure_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 4, 6], &mut rng);
        let p = analyze(&x).unwrap();
        let tape = Tape::new();
        let (a, d) = tape.constant(x.clone()).haar_analyze().unwrap();
        assert_eq!(*a.value(), p.approx);
        assert_eq!(*d.value(), p.detail);
        let y = Var::haar_synthesize(a, d).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
    }
}
