use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let saved_y = y.clone();
        self.tape().record(y, &[self], move |g| {
            let dx = Tensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(saved_y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect(),
            );
            vec![dx]
        })
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, format!("left operand {a:?} vs right operand {b:?}")));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let y = self.value().add(&other.value())?;
        Ok(self.tape().record(y, &[self, other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let y = self.value().sub(&other.value())?;
        Ok(self.tape().record(y, &[self, other], |g| vec![g.clone(), g.scale(-1.0)]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y = a.mul(&b)?;
        Ok(self.tape().record(y, &[self, other], move |g| {
            vec![g.mul(&b).expect("shape"), g.mul(&a).expect("shape")]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().scale(c);
        self.tape().record(y, &[self], move |g| vec![g.scale(c)])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().map(|x| x + c);
        self.tape().record(y, &[self], |g| vec![g.clone()])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| sign(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .record(Tensor::scalar(x.sum()), &[self], move |g| vec![Tensor::full(&shape, g.item())])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds a list of scalars (or equally shaped tensors).
    pub fn sum_all(items: &[Var<'t>]) -> Result<Var<'t>> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| Error::invalid("sum_all", "empty list"))?;
        rest.iter().try_fold(*first, |acc, v| acc.add(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let g = tape.leaf_gradients(p.sum(), &[p]).unwrap();
        assert_eq!(g[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let tape = Tape::new();
        let v = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let p = tape.leaf(v.clone());
        let loss = p.square().sum().scale(0.5);
        let g = tape.leaf_gradients(loss, &[p]).unwrap();
        assert_eq!(g[0], v);
    }

    #[test]
    fn mismatched_shapes_name_operands() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("left operand [2]") && err.contains("right operand [3]"), "{err}");
    }
}
