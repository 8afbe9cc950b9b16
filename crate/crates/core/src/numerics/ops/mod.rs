//! Differentiable operations, implemented as methods on [`Var`](crate::numerics::Var).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod pool;
pub mod shape;
