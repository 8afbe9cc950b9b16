//! Spatial pooling and bilinear resizing over `[N,C,H,W]`.

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

fn dims4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

/// Source taps for resizing `n_in -> n_out` samples with half-pixel centres.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// 2D average pooling with a `2×2` window and stride 2 on pure tensors.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = dims4(x, "avg_pool2")?;
    if h < 2 || w < 2 {
        return Err(Error::invalid("avg_pool2", format!("extent {h}x{w} below 2")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, xx) = (2 * oy, 2 * ox);
                out[(p * ho + oy) * wo + ox] =
                    0.25 * (src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = ho;
    shape[3] = wo;
    Ok(Tensor::from_parts(shape, out))
}

impl<'t> Var<'t> {
    /// `2×2` average pooling, stride 2 (odd trailing rows/columns are dropped).
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = avg_pool2(&x)?;
        let (planes, h, w) = dims4(&x, "avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(y, &[self], move |g| {
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = 0.25 * g.data()[(p * ho + oy) * wo + ox];
                        let base = p * h * w;
                        for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[base + (2 * oy + dy) * w + 2 * ox + dxx] += gv;
                        }
                    }
                }
            }
            vec![Tensor::from_parts(in_shape.clone(), dx)]
        }))
    }

    /// Global average over the spatial extents: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(self) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = dims4(&x, "mean_spatial")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::invalid("mean_spatial", "zero spatial extent"));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let y = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Ok(self.tape().record(Tensor::from_parts(vec![n, c], y), &[self], move |g| {
            let mut dx = Vec::with_capacity(planes * hw);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Tensor::from_parts(vec![n, c, h, w], dx)]
        }))
    }

    /// Max pooling with a `k×k` window, stride `s` and implicit `-inf` padding `p`.
    pub fn max_pool2d(self, k: usize, s: usize, p: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = dims4(&x, "max_pool2d")?;
        if k == 0 || s == 0 || h + 2 * p < k || w + 2 * p < k || p >= k {
            return Err(Error::invalid("max_pool2d", format!("window {k} stride {s} pad {p} on {h}x{w}")));
        }
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = vec![0usize; planes * ho * wo];
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        let iy = (oy * s + dy) as isize - p as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * s + dx) as isize - p as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (pl * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(Tensor::from_parts(shape, out), &[self], move |g| {
            let mut dx = vec![0.0; planes * h * w];
            for (&a, &gv) in argmax.iter().zip(g.data()) {
                dx[a] += gv;
            }
            vec![Tensor::from_parts(in_shape.clone(), dx)]
        }))
    }

    /// Bilinear resize to `out_h × out_w` with half-pixel centres and edge clamping.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = dims4(&x, "resize_bilinear")?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "zero extent"));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[(p * out_h + oy) * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = out_h;
        shape[3] = out_w;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(Tensor::from_parts(shape, out), &[self], move |g| {
            let mut dx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = g.data()[(p * out_h + oy) * out_w + ox];
                        d[y0 * w + x0] += gv * wy0 * wx0;
                        d[y0 * w + x1] += gv * wy0 * wx1;
                        d[y1 * w + x0] += gv * wy1 * wx0;
                        d[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Tensor::from_parts(in_shape.clone(), dx)]
        }))
    }
}
