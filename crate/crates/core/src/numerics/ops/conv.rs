//! Grouped 2D and 3D cross-correlation.
//!
//! Tensors use frames-major layout: a 2D batch is `[N, C, H, W]` and a video
//! is `[T, C, H, W]`. A 2D convolution is the 3D kernel with temporal extent 1,
//! which also makes 2D kernels shared across frames.

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// Stride, zero padding and channel grouping of a convolution, ordered `(t, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Unit stride with "same" padding for odd kernel extents `(kt, kh, kw)`.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            groups: 1,
        }
    }

    pub fn same2d(kh: usize, kw: usize) -> Self {
        Self::same([1, kh, kw])
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride2d(mut self, s: usize) -> Self {
        self.stride = [1, s, s];
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    t: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

fn geometry(x: &[usize], k: &[usize], spec: ConvSpec, op: &'static str) -> Result<Geometry> {
    if x.len() != 4 {
        return Err(Error::shape(op, format!("input must be rank 4 [T,C,H,W], got {x:?}")));
    }
    if k.len() != 5 {
        return Err(Error::shape(op, format!("kernel must be rank 5, got {k:?}")));
    }
    let g = spec.groups;
    if g == 0 || x[1] % g != 0 || k[0] % g != 0 {
        return Err(Error::shape(
            op,
            format!("groups {g} must divide input channels {} and output channels {}", x[1], k[0]),
        ));
    }
    if k[1] != x[1] / g {
        return Err(Error::shape(
            op,
            format!("kernel {k:?} expects {} input channels per group, input {x:?} has {}", k[1], x[1] / g),
        ));
    }
    if spec.stride.contains(&0) {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    let to = out_extent(x[0], k[2], spec.stride[0], spec.padding[0]);
    let ho = out_extent(x[2], k[3], spec.stride[1], spec.padding[1]);
    let wo = out_extent(x[3], k[4], spec.stride[2], spec.padding[2]);
    let (Some(to), Some(ho), Some(wo)) = (to, ho, wo) else {
        return Err(Error::shape(op, format!("kernel {k:?} larger than padded input {x:?}")));
    };
    Ok(Geometry {
        t: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: k[0],
        cin_g: k[1],
        kt: k[2],
        kh: k[3],
        kw: k[4],
        to,
        ho,
        wo,
        spec,
    })
}

/// Output columns `ox` for which `ox*s + k - p` lands inside `[0, n)`.
fn valid_range(k: usize, s: usize, p: usize, n: usize, out: usize) -> std::ops::Range<usize> {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n + p <= k { 0 } else { ((n + p - k - 1) / s + 1).min(out) };
    lo..hi.max(lo)
}

impl Geometry {
    fn out_shape(&self) -> Vec<usize> {
        vec![self.to, self.cout, self.ho, self.wo]
    }

    /// Visits every (output plane, input plane, kernel plane) triple that interacts.
    fn for_each_plane(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [st, _, _] = self.spec.stride;
        let pt = self.spec.padding[0];
        let cout_g = self.cout / self.spec.groups;
        for ot in 0..self.to {
            for oc in 0..self.cout {
                let grp = oc / cout_g;
                for icg in 0..self.cin_g {
                    let ic = grp * self.cin_g + icg;
                    for dt in 0..self.kt {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it as usize >= self.t {
                            continue;
                        }
                        let out_plane = ot * self.cout + oc;
                        let in_plane = it as usize * self.cin + ic;
                        let k_plane = (oc * self.cin_g + icg) * self.kt + dt;
                        f(out_plane, in_plane, k_plane);
                    }
                }
            }
        }
    }

    /// Calls `f(oy, iy, ky, ox_range, ix_start, kx)` for each interacting row pair.
    #[inline]
    fn rows(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>, usize, usize)) {
        let [_, sh, sw] = self.spec.stride;
        let [_, ph, pw] = self.spec.padding;
        for ky in 0..self.kh {
            let oys = valid_range(ky, sh, ph, self.h, self.ho);
            for oy in oys {
                let iy = oy * sh + ky - ph;
                for kx in 0..self.kw {
                    let oxs = valid_range(kx, sw, pw, self.w, self.wo);
                    if oxs.is_empty() {
                        continue;
                    }
                    let ix0 = oxs.start * sw + kx - pw;
                    f(oy, iy, ky, oxs, ix0, kx);
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, geo: &Geometry) -> Tensor {
    let (hw_in, hw_out, k_area) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    let sw = geo.spec.stride[2];
    let mut out = vec![0.0; geo.to * geo.cout * hw_out];
    let (xd, kd) = (x.data(), k.data());
    geo.for_each_plane(|op, ip, kp| {
        let kern = &kd[kp * k_area..(kp + 1) * k_area];
        let inp = &xd[ip * hw_in..(ip + 1) * hw_in];
        let o = &mut out[op * hw_out..(op + 1) * hw_out];
        geo.rows(|oy, iy, ky, oxs, ix0, kx| {
            let wv = kern[ky * geo.kw + kx];
            if wv == 0.0 {
                return;
            }
            let orow = &mut o[oy * geo.wo + oxs.start..oy * geo.wo + oxs.end];
            let irow = &inp[iy * geo.w..(iy + 1) * geo.w];
            if sw == 1 {
                for (ov, iv) in orow.iter_mut().zip(&irow[ix0..]) {
                    *ov += wv * iv;
                }
            } else {
                for (j, ov) in orow.iter_mut().enumerate() {
                    *ov += wv * irow[ix0 + j * sw];
                }
            }
        });
    });
    if let Some(b) = bias {
        for ot in 0..geo.to {
            for (oc, bv) in b.data().iter().enumerate() {
                let plane = (ot * geo.cout + oc) * hw_out;
                for v in &mut out[plane..plane + hw_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_parts(geo.out_shape(), out)
}

fn conv_backward(x: &Tensor, k: &Tensor, g: &Tensor, geo: &Geometry) -> (Tensor, Tensor, Tensor) {
    let (hw_in, hw_out, k_area) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    let sw = geo.spec.stride[2];
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    geo.for_each_plane(|op, ip, kp| {
        let kern = &kd[kp * k_area..(kp + 1) * k_area];
        let inp = &xd[ip * hw_in..(ip + 1) * hw_in];
        let gp = &gd[op * hw_out..(op + 1) * hw_out];
        let dxp = &mut dx[ip * hw_in..(ip + 1) * hw_in];
        let dkp = &mut dk[kp * k_area..(kp + 1) * k_area];
        geo.rows(|oy, iy, ky, oxs, ix0, kx| {
            let wv = kern[ky * geo.kw + kx];
            let grow = &gp[oy * geo.wo + oxs.start..oy * geo.wo + oxs.end];
            let irow = &inp[iy * geo.w..(iy + 1) * geo.w];
            let dxrow = &mut dxp[iy * geo.w..(iy + 1) * geo.w];
            let mut acc = 0.0;
            if sw == 1 {
                for ((gv, iv), dv) in grow.iter().zip(&irow[ix0..]).zip(&mut dxrow[ix0..]) {
                    acc += gv * iv;
                    *dv += wv * gv;
                }
            } else {
                for (j, gv) in grow.iter().enumerate() {
                    let ix = ix0 + j * sw;
                    acc += gv * irow[ix];
                    dxrow[ix] += wv * gv;
                }
            }
            dkp[ky * geo.kw + kx] += acc;
        });
    });
    let mut db = vec![0.0; geo.cout];
    for ot in 0..geo.to {
        for (oc, d) in db.iter_mut().enumerate() {
            let plane = (ot * geo.cout + oc) * hw_out;
            *d += gd[plane..plane + hw_out].iter().sum::<f64>();
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![geo.cout], db),
    )
}

fn check_bias(bias: Option<&Tensor>, cout: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [cout] => Err(Error::shape(
            op,
            format!("bias {:?} does not match {cout} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

fn as_3d_kernel(k: &Tensor, op: &'static str) -> Result<Tensor> {
    let s = k.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("kernel must be rank 4 [Cout,Cin/g,kh,kw], got {s:?}")));
    }
    k.reshape(&[s[0], s[1], 1, s[2], s[3]])
}

fn spec2d(spec: ConvSpec) -> ConvSpec {
    ConvSpec {
        stride: [1, spec.stride[1], spec.stride[2]],
        padding: [0, spec.padding[1], spec.padding[2]],
        groups: spec.groups,
    }
}

/// 3D cross-correlation of a `[T,Cin,H,W]` video with a `[Cout,Cin/g,kt,kh,kw]` kernel.
pub fn conv3d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = geometry(x.shape(), kernel.shape(), spec, "conv3d")?;
    check_bias(bias, geo.cout, "conv3d")?;
    Ok(conv_forward(x, kernel, bias, &geo))
}

/// 2D cross-correlation of `[N,Cin,H,W]` with a `[Cout,Cin/g,kh,kw]` kernel shared over `N`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let k3 = as_3d_kernel(kernel, "conv2d")?;
    let spec = spec2d(spec);
    let geo = geometry(x.shape(), k3.shape(), spec, "conv2d")?;
    check_bias(bias, geo.cout, "conv2d")?;
    Ok(conv_forward(x, &k3, bias, &geo))
}

impl<'t> Var<'t> {
    pub fn conv3d(self, kernel: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let geo = geometry(x.shape(), k.shape(), spec, "conv3d")?;
        self.conv_impl(kernel, bias, geo, (*k).clone(), "conv3d")
    }

    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        let k3 = as_3d_kernel(&kernel.value(), "conv2d")?;
        let geo = geometry(&self.shape(), k3.shape(), spec2d(spec), "conv2d")?;
        self.conv_impl(kernel, bias, geo, k3, "conv2d")
    }

    fn conv_impl(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        geo: Geometry,
        k3: Tensor,
        op: &'static str,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.map(|b| b.value());
        check_bias(b.as_deref(), geo.cout, op)?;
        let y = conv_forward(&x, &k3, b.as_deref(), &geo);
        let kshape = kernel.shape();
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape().record(y, &parents, move |g| {
            let (dx, dk, db) = conv_backward(&x, &k3, g, &geo);
            let mut out = vec![dx, dk.reshape(&kshape).expect("kernel numel")];
            if has_bias {
                out.push(db);
            }
            out
        }))
    }
}
