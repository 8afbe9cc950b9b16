//! Two-dimensional discrete Fourier transforms backed by `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// In-place unnormalised 2D transform of a row-major `h×w` complex plane.
fn transform_plane(planner: &mut FftPlanner<f64>, buf: &mut [Complex64], h: usize, w: usize, dir: FftDirection) {
    let row_fft = planner.plan_fft(w, dir);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for (r, v) in col.iter_mut().enumerate() {
            *v = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for (r, v) in col.iter().enumerate() {
            buf[r * w + c] = *v;
        }
    }
}

/// Forward 2D DFT of a real `[H,W]` array, `X[k,l] = Σ x[m,n]·exp(-2πi(km/H + ln/W))`.
///
/// Returns the real and imaginary parts as two `[H,W]` tensors.
pub fn fft2d(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.ndim() != 2 || x.numel() == 0 {
        return Err(Error::shape("fft2d", format!("expected non-empty [H,W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_plane(&mut FftPlanner::new(), &mut buf, h, w, FftDirection::Forward);
    Ok((
        Tensor::from_parts(vec![h, w], buf.iter().map(|c| c.re).collect()),
        Tensor::from_parts(vec![h, w], buf.iter().map(|c| c.im).collect()),
    ))
}

impl<'t> Var<'t> {
    /// Batched real-input 2D DFT: `[B,H,W] -> [B,2,H,W]` with real then imaginary planes.
    pub fn fft2_real(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 3 || x.numel() == 0 {
            return Err(Error::shape("fft2_real", format!("expected non-empty [B,H,W], got {:?}", x.shape())));
        }
        let (b, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let mut planner = FftPlanner::new();
        let mut out = vec![0.0; b * 2 * hw];
        let mut buf = vec![Complex64::new(0.0, 0.0); hw];
        for bi in 0..b {
            for (c, &v) in buf.iter_mut().zip(&x.data()[bi * hw..(bi + 1) * hw]) {
                *c = Complex64::new(v, 0.0);
            }
            transform_plane(&mut planner, &mut buf, h, w, FftDirection::Forward);
            let dst = &mut out[bi * 2 * hw..(bi + 1) * 2 * hw];
            for (i, c) in buf.iter().enumerate() {
                dst[i] = c.re;
                dst[hw + i] = c.im;
            }
        }
        Ok(self.tape().record(Tensor::from_parts(vec![b, 2, h, w], out), &[self], move |g| {
            // d/dx[n] of Σ_k (g_re·Re X[k] + g_im·Im X[k]) = Re Σ_k (g_re + i·g_im)·exp(+iθ).
            let mut planner = FftPlanner::new();
            let mut buf = vec![Complex64::new(0.0, 0.0); hw];
            let mut dx = vec![0.0; b * hw];
            for bi in 0..b {
                let src = &g.data()[bi * 2 * hw..(bi + 1) * 2 * hw];
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex64::new(src[i], src[hw + i]);
                }
                transform_plane(&mut planner, &mut buf, h, w, FftDirection::Inverse);
                for (d, c) in dx[bi * hw..(bi + 1) * hw].iter_mut().zip(&buf) {
                    *d = c.re;
                }
            }
            vec![Tensor::from_parts(vec![b, h, w], dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_has_only_dc() {
        let (re, im) = fft2d(&Tensor::full(&[3, 5], 2.5)).unwrap();
        assert!((re.get(&[0, 0]) - 2.5 * 15.0).abs() < 1e-12);
        for (i, (&r, &m)) in re.data().iter().zip(im.data()).enumerate() {
            if i > 0 {
                assert!(r.abs() < 1e-12 && m.abs() < 1e-12);
            }
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(fft2d(&Tensor::zeros(&[0, 3])).is_err());
        assert!(fft2d(&Tensor::zeros(&[4])).is_err());
    }
}
