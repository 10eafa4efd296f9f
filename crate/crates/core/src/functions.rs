//! Scalar and vector functions on the hold-all box, optionally time
//! dependent, given as expressions or constants. Gradients come from symbolic
//! differentiation.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::Result;
use crate::expr::Expr;
use crate::linalg::{Mat2, Vec2};

pub trait ScalarField: Send + Sync + Debug {
    fn value(&self, p: Vec2) -> f64;
    fn gradient(&self, p: Vec2) -> Vec2;
}

pub type ScalarRef = Arc<dyn ScalarField>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl ScalarField for Constant {
    fn value(&self, _: Vec2) -> f64 {
        self.0
    }
    fn gradient(&self, _: Vec2) -> Vec2 {
        [0.0, 0.0]
    }
}

/// Scalar expression in `x`, `y`.
#[derive(Debug, Clone)]
pub struct ExprScalar {
    f: Expr,
    grad: [Expr; 2],
}

impl ExprScalar {
    pub fn new(src: &str) -> Result<Self> {
        let f = Expr::parse(src, &["x", "y"])?;
        Ok(ExprScalar { grad: [f.derivative(0)?, f.derivative(1)?], f })
    }
}

impl ScalarField for ExprScalar {
    fn value(&self, p: Vec2) -> f64 {
        self.f.eval(&p)
    }
    fn gradient(&self, p: Vec2) -> Vec2 {
        [self.grad[0].eval(&p), self.grad[1].eval(&p)]
    }
}

/// Vector function of position and time, `(x, y, t) ↦ ℝ²`, with its spatial
/// Jacobian.
pub trait SpaceTimeVector: Send + Sync + Debug {
    fn value(&self, p: Vec2, t: f64) -> Vec2;
    /// `J[i][j] = ∂f_i/∂x_j`.
    fn jacobian(&self, p: Vec2, t: f64) -> Mat2;
}

pub type SpaceTimeRef = Arc<dyn SpaceTimeVector>;

/// Pair of expressions in `x`, `y`, `t`.
#[derive(Debug, Clone)]
pub struct ExprVector {
    comp: [Expr; 2],
    jac: [[Expr; 2]; 2],
}

impl ExprVector {
    pub fn new(x_src: &str, y_src: &str) -> Result<Self> {
        let vars = ["x", "y", "t"];
        let a = Expr::parse(x_src, &vars)?;
        let b = Expr::parse(y_src, &vars)?;
        Ok(ExprVector {
            jac: [[a.derivative(0)?, a.derivative(1)?], [b.derivative(0)?, b.derivative(1)?]],
            comp: [a, b],
        })
    }

    pub fn zero() -> Self {
        Self::new("0", "0").expect("literal parses")
    }
}

impl SpaceTimeVector for ExprVector {
    fn value(&self, p: Vec2, t: f64) -> Vec2 {
        let v = [p[0], p[1], t];
        [self.comp[0].eval(&v), self.comp[1].eval(&v)]
    }
    fn jacobian(&self, p: Vec2, t: f64) -> Mat2 {
        let v = [p[0], p[1], t];
        [[self.jac[0][0].eval(&v), self.jac[0][1].eval(&v)], [self.jac[1][0].eval(&v), self.jac[1][1].eval(&v)]]
    }
}

/// Scalar function of position and time with its spatial gradient.
pub trait SpaceTimeScalar: Send + Sync + Debug {
    fn value(&self, p: Vec2, t: f64) -> f64;
    fn gradient(&self, p: Vec2, t: f64) -> Vec2;
}

pub type SpaceTimeScalarRef = Arc<dyn SpaceTimeScalar>;

/// Scalar expression in `x`, `y`, `t`.
#[derive(Debug, Clone)]
pub struct ExprScalarTime {
    f: Expr,
    grad: [Expr; 2],
}

impl ExprScalarTime {
    pub fn new(src: &str) -> Result<Self> {
        let f = Expr::parse(src, &["x", "y", "t"])?;
        Ok(ExprScalarTime { grad: [f.derivative(0)?, f.derivative(1)?], f })
    }
}

impl SpaceTimeScalar for ExprScalarTime {
    fn value(&self, p: Vec2, t: f64) -> f64 {
        self.f.eval(&[p[0], p[1], t])
    }

    fn gradient(&self, p: Vec2, t: f64) -> Vec2 {
        let v = [p[0], p[1], t];
        [self.grad[0].eval(&v), self.grad[1].eval(&v)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients() {
        let f = ExprScalar::new("x^2 * y").unwrap();
        assert_eq!(f.value([2.0, 3.0]), 12.0);
        assert_eq!(f.gradient([2.0, 3.0]), [12.0, 4.0]);
        let v = ExprVector::new("x*t", "y^2").unwrap();
        assert_eq!(v.value([1.0, 2.0], 0.5), [0.5, 4.0]);
        assert_eq!(v.jacobian([1.0, 2.0], 0.5), [[0.5, 0.0], [0.0, 4.0]]);
        let s = ExprScalarTime::new("x*t + y").unwrap();
        assert_eq!(s.gradient([0.3, 0.1], 2.0), [2.0, 1.0]);
    }
}
