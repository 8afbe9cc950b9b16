//! Matrix products, softmax and normalisation layers.

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{numel, Tensor};

/// `c[m×n] += a[m×k] · b` where `b` is `[k×n]`, or `[n×k]` when `trans_b`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, trans_b: bool) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        if trans_b {
            for (j, o) in out.iter_mut().enumerate() {
                let col = &b[j * k..(j + 1) * k];
                *o += row.iter().zip(col).map(|(x, y)| x * y).sum::<f64>();
            }
        } else {
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` with `a: [m×k]`, `g: [m×n]`.
fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..n {
                let e = (src[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Group id of every element when normalising over `axes`.
fn norm_groups(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let groups = kept.iter().map(|&a| shape[a]).product::<usize>();
    let total = numel(shape);
    let mut ids = Vec::with_capacity(total);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut g = 0;
        for &a in &kept {
            g = g * shape[a] + index[a];
        }
        ids.push(g);
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (ids, groups)
}

struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    group_of: Vec<usize>,
    group_size: f64,
}

fn layernorm_forward(x: &Tensor, axes: &[usize], eps: f64) -> Result<LayerNormCache> {
    if eps <= 0.0 {
        return Err(Error::invalid("layernorm", "eps must be positive"));
    }
    if axes.is_empty() || axes.iter().any(|&a| a >= x.ndim()) {
        return Err(Error::invalid("layernorm", format!("bad axes {axes:?} for {:?}", x.shape())));
    }
    let size: usize = axes.iter().map(|&a| x.shape()[a]).product();
    if size == 0 {
        return Err(Error::invalid("layernorm", "empty normalization group"));
    }
    let (group_of, groups) = norm_groups(x.shape(), axes);
    let mut mean = vec![0.0; groups];
    for (&g, &v) in group_of.iter().zip(x.data()) {
        mean[g] += v;
    }
    for m in &mut mean {
        *m /= size as f64;
    }
    let mut var = vec![0.0; groups];
    for (&g, &v) in group_of.iter().zip(x.data()) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / size as f64 + eps).sqrt()).collect();
    let normalized = Tensor::from_parts(
        x.shape().to_vec(),
        group_of
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| (v - mean[g]) * inv_std[g])
            .collect(),
    );
    Ok(LayerNormCache {
        normalized,
        inv_std,
        group_of,
        group_size: size as f64,
    })
}

/// Normalises every group spanned by `axes` to zero mean and unit (biased) variance.
pub fn layernorm(x: &Tensor, axes: &[usize], eps: f64) -> Result<Tensor> {
    Ok(layernorm_forward(x, axes, eps)?.normalized)
}

impl<'t> Var<'t> {
    /// `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("left operand {sa:?} vs right operand {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut c, m, k, n, false);
        Ok(self.tape().record(Tensor::from_parts(vec![m, n], c), &[self, other], move |g| {
            let mut da = vec![0.0; m * k];
            // dA = G · Bᵀ, with B stored [k×n] so Bᵀ access is trans_b over rows of length n.
            gemm_acc(g.data(), b.data(), &mut da, m, n, k, true);
            let mut db = vec![0.0; k * n];
            gemm_at_acc(a.data(), g.data(), &mut db, m, k, n);
            vec![Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db)]
        }))
    }

    /// Affine map `x · wᵀ + b` for `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("input {sx:?} vs weight {sw:?}")));
        }
        let (rows, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut y = vec![0.0; rows * fout];
        gemm_acc(x.data(), w.data(), &mut y, rows, fin, fout, true);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(Error::shape("linear", format!("bias {:?} vs {fout} outputs", bv.shape())));
            }
            for r in 0..rows {
                for (o, bb) in y[r * fout..(r + 1) * fout].iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.tape().record(Tensor::from_parts(vec![rows, fout], y), &parents, move |g| {
            let mut dx = vec![0.0; rows * fin];
            gemm_acc(g.data(), w.data(), &mut dx, rows, fout, fin, false);
            let mut dw = vec![0.0; fout * fin];
            gemm_at_acc(g.data(), x.data(), &mut dw, rows, fout, fin);
            let mut out = vec![
                Tensor::from_parts(vec![rows, fin], dx),
                Tensor::from_parts(vec![fout, fin], dw),
            ];
            if has_bias {
                let mut db = vec![0.0; fout];
                for r in 0..rows {
                    for (d, gv) in db.iter_mut().zip(&g.data()[r * fout..(r + 1) * fout]) {
                        *d += gv;
                    }
                }
                out.push(Tensor::from_parts(vec![fout], db));
            }
            out
        }))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("left operand {sa:?} vs right operand {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut c[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                trans_b,
            );
        }
        Ok(self.tape().record(Tensor::from_parts(vec![batch, m, n], c), &[self, other], move |g| {
            let mut da = vec![0.0; batch * m * k];
            let mut db = vec![0.0; batch * k * n];
            for bi in 0..batch {
                let ga = &g.data()[bi * m * n..(bi + 1) * m * n];
                let aa = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
                let da_b = &mut da[bi * m * k..(bi + 1) * m * k];
                let db_b = &mut db[bi * k * n..(bi + 1) * k * n];
                if trans_b {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A.
                    gemm_acc(ga, bb, da_b, m, n, k, false);
                    gemm_at_acc(ga, aa, db_b, m, n, k);
                } else {
                    // C = A B: dA = G Bᵀ, dB = Aᵀ G.
                    gemm_acc(ga, bb, da_b, m, n, k, true);
                    gemm_at_acc(aa, ga, db_b, m, k, n);
                }
            }
            vec![
                Tensor::from_parts(sa.clone(), da),
                Tensor::from_parts(sb.clone(), db),
            ]
        }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let y = softmax(&self.value(), axis)?;
        let (outer, n, inner) = axis_split(y.shape(), axis);
        let saved = y.clone();
        Ok(self.tape().record(y, &[self], move |g| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    let dot: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
                    for i in 0..n {
                        dx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
            }
            vec![Tensor::from_parts(saved.shape().to_vec(), dx)]
        }))
    }

    /// Scales each vector along the last axis to unit length: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("rank >= 1");
        let rows = x.numel() / n.max(1);
        let inv: Vec<f64> = (0..rows)
            .map(|r| {
                let s: f64 = x.data()[r * n..(r + 1) * n].iter().map(|v| v * v).sum();
                1.0 / (s + eps).sqrt()
            })
            .collect();
        let y = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().enumerate().map(|(i, v)| v * inv[i / n]).collect(),
        );
        self.tape().record(y, &[self], move |g| {
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                let xs = &x.data()[r * n..(r + 1) * n];
                let gs = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                let s = inv[r];
                for ((d, &xv), &gv) in dx[r * n..(r + 1) * n].iter_mut().zip(xs).zip(gs) {
                    *d = gv * s - xv * dot * s * s * s;
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), dx)]
        })
    }

    /// Layer normalisation over `axes` without affine terms.
    pub fn layernorm(self, axes: &[usize], eps: f64) -> Result<Var<'t>> {
        let cache = layernorm_forward(&self.value(), axes, eps)?;
        let y = cache.normalized.clone();
        Ok(self.tape().record(y, &[self], move |g| {
            let groups = cache.inv_std.len();
            let mut mean_g = vec![0.0; groups];
            let mut mean_gx = vec![0.0; groups];
            for ((&grp, &gv), &xh) in cache.group_of.iter().zip(g.data()).zip(cache.normalized.data()) {
                mean_g[grp] += gv;
                mean_gx[grp] += gv * xh;
            }
            for (a, b) in mean_g.iter_mut().zip(mean_gx.iter_mut()) {
                *a /= cache.group_size;
                *b /= cache.group_size;
            }
            let dx = cache
                .group_of
                .iter()
                .zip(g.data())
                .zip(cache.normalized.data())
                .map(|((&grp, &gv), &xh)| cache.inv_std[grp] * (gv - mean_g[grp] - xh * mean_gx[grp]))
                .collect();
            vec![Tensor::from_parts(cache.normalized.shape().to_vec(), dx)]
        }))
    }

    /// Multiplies batch `b` of `[B,m,n]` by `scales[b % heads]` where `scales: [heads]`.
    pub fn mul_head_scale(self, scales: Var<'t>) -> Result<Var<'t>> {
        let (x, s) = (self.value(), scales.value());
        let heads = s.numel();
        if x.ndim() != 3 || s.ndim() != 1 || heads == 0 || x.shape()[0] % heads != 0 {
            return Err(Error::shape(
                "mul_head_scale",
                format!("input {:?} vs scales {:?}", x.shape(), s.shape()),
            ));
        }
        let per = x.shape()[1] * x.shape()[2];
        let y = Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * s.data()[(i / per) % heads])
                .collect(),
        );
        Ok(self.tape().record(y, &[self, scales], move |g| {
            let mut dx = vec![0.0; x.numel()];
            let mut ds = vec![0.0; heads];
            for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                let h = (i / per) % heads;
                dx[i] = gv * s.data()[h];
                ds[h] += gv * xv;
            }
            vec![
                Tensor::from_parts(x.shape().to_vec(), dx),
                Tensor::from_parts(vec![heads], ds),
            ]
        }))
    }
}
