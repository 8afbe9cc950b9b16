use crate::error::{Error, Result};
use crate::numerics::ops::linalg::axis_split;
use crate::numerics::tape::Var;
use crate::numerics::tensor::{numel, Tensor};

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let old = x.shape().to_vec();
        Ok(self
            .tape()
            .record(y, &[self], move |g| vec![g.reshape(&old).expect("same numel")]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(items: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("concat", "empty list"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let values: Vec<_> = items.iter().map(|v| v.value()).collect();
        for (i, v) in values.iter().enumerate() {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("operand {i} has shape {s:?}, first is {base:?}")));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out_shape = shape.clone();
        let in_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape().record(Tensor::from_parts(shape, out), items, move |g| {
            let mut grads: Vec<Vec<f64>> = in_shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &e) in grads.iter_mut().zip(&extents) {
                    gr.extend_from_slice(&g.data()[off..off + e * inner]);
                    off += e * inner;
                }
            }
            debug_assert_eq!(off, numel(&out_shape));
            grads
                .into_iter()
                .zip(&in_shapes)
                .map(|(d, s)| Tensor::from_parts(s.clone(), d))
                .collect()
        }))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape().record(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut dx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Tensor::from_parts(shape.clone(), dx)]
        }))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Broadcasts per-frame channel vectors `[T,C]` over an `H×W` grid, giving `[T,C,H,W]`.
    pub fn expand_spatial(self, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(Error::shape("expand_spatial", format!("expected [T,C], got {:?}", x.shape())));
        }
        let (t, c) = (x.shape()[0], x.shape()[1]);
        let hw = h * w;
        let mut out = Vec::with_capacity(t * c * hw);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        Ok(self.tape().record(Tensor::from_parts(vec![t, c, h, w], out), &[self], move |g| {
            let d = g.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
            vec![Tensor::from_parts(vec![t, c], d)]
        }))
    }
}
