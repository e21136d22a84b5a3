//! Elementwise operations and their analytic derivatives.
//!
//! Binary ops require identical shapes; the only broadcasting in the engine
//! is the explicit scalar-tensor form (`add_scalar`, `mul_scalar`).

use super::{require_same_shape, GraphOp, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp<T: Scalar> {
    kind: BinaryKind,
    lhs: Tensor<T>,
    rhs: Tensor<T>,
}

impl<T: Scalar> GraphOp<T> for BinaryOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.lhs.clone(), self.rhs.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        let n = upstream.len();
        if self.lhs.tracked() {
            let mut dl = vec![T::zero(); n];
            match self.kind {
                BinaryKind::Add | BinaryKind::Sub => dl.copy_from_slice(upstream),
                BinaryKind::Mul => {
                    let rhs = self.rhs.values();
                    for i in 0..n {
                        dl[i] = upstream[i] * rhs[i];
                    }
                }
                BinaryKind::Div => {
                    let rhs = self.rhs.values();
                    for i in 0..n {
                        dl[i] = upstream[i] / rhs[i];
                    }
                }
            }
            self.lhs.accumulate_grad(&dl);
        }
        if self.rhs.tracked() {
            let mut dr = vec![T::zero(); n];
            match self.kind {
                BinaryKind::Add => dr.copy_from_slice(upstream),
                BinaryKind::Sub => {
                    for i in 0..n {
                        dr[i] = -upstream[i];
                    }
                }
                BinaryKind::Mul => {
                    let lhs = self.lhs.values();
                    for i in 0..n {
                        dr[i] = upstream[i] * lhs[i];
                    }
                }
                BinaryKind::Div => {
                    let lhs = self.lhs.values();
                    let rhs = self.rhs.values();
                    for i in 0..n {
                        dr[i] = -upstream[i] * lhs[i] / (rhs[i] * rhs[i]);
                    }
                }
            }
            self.rhs.accumulate_grad(&dr);
        }
    }
}

enum UnaryKind<T> {
    Relu,
    /// Saves the forward output; derivative is s(1-s).
    Sigmoid(Vec<T>),
    /// Saves the forward output; derivative is the output itself.
    Exp(Vec<T>),
    Log,
    Clamp {
        min: T,
        max: T,
    },
    /// y = a*x + b; derivative a.
    Affine {
        scale: T,
    },
}

struct UnaryOp<T: Scalar> {
    kind: UnaryKind<T>,
    input: Tensor<T>,
}

impl<T: Scalar> GraphOp<T> for UnaryOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if !self.input.tracked() {
            return;
        }
        let n = upstream.len();
        let mut dx = vec![T::zero(); n];
        match &self.kind {
            UnaryKind::Relu => {
                let x = self.input.values();
                for i in 0..n {
                    dx[i] = if x[i] > T::zero() {
                        upstream[i]
                    } else {
                        T::zero()
                    };
                }
            }
            UnaryKind::Sigmoid(out) => {
                for i in 0..n {
                    dx[i] = upstream[i] * out[i] * (T::one() - out[i]);
                }
            }
            UnaryKind::Exp(out) => {
                for i in 0..n {
                    dx[i] = upstream[i] * out[i];
                }
            }
            UnaryKind::Log => {
                let x = self.input.values();
                for i in 0..n {
                    dx[i] = upstream[i] / x[i];
                }
            }
            UnaryKind::Clamp { min, max } => {
                let x = self.input.values();
                for i in 0..n {
                    dx[i] = if x[i] >= *min && x[i] <= *max {
                        upstream[i]
                    } else {
                        T::zero()
                    };
                }
            }
            UnaryKind::Affine { scale } => {
                for i in 0..n {
                    dx[i] = upstream[i] * *scale;
                }
            }
        }
        self.input.accumulate_grad(&dx);
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind, name: &str) -> Result<Tensor<T>> {
        require_same_shape(self, other, name)?;
        let a = self.values();
        let b = other.values();
        let values: Vec<T> = match kind {
            BinaryKind::Add => a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect(),
            BinaryKind::Sub => a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect(),
            BinaryKind::Mul => a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect(),
            BinaryKind::Div => a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect(),
        };
        drop(a);
        drop(b);
        let shape = self.shape().to_vec();
        if self.tracked() || other.tracked() {
            Ok(Tensor::from_op(
                shape,
                values,
                Box::new(BinaryOp {
                    kind,
                    lhs: self.clone(),
                    rhs: other.clone(),
                }),
            ))
        } else {
            Tensor::from_vec(&shape, values)
        }
    }

    fn unary(&self, values: Vec<T>, kind: UnaryKind<T>) -> Tensor<T> {
        let shape = self.shape().to_vec();
        if self.tracked() {
            Tensor::from_op(
                shape,
                values,
                Box::new(UnaryOp {
                    kind,
                    input: self.clone(),
                }),
            )
        } else {
            Tensor::from_vec(&shape, values).expect("shape preserved")
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let values = self
            .values()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        Ok(self.unary(values, UnaryKind::Relu))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = self
            .values()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let kind = UnaryKind::Sigmoid(values.clone());
        Ok(self.unary(values, kind))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = self.values().iter().map(|&x| x.exp()).collect();
        let kind = UnaryKind::Exp(values.clone());
        Ok(self.unary(values, kind))
    }

    /// Natural log. Callers are responsible for clamping the input into the
    /// valid domain first (see [`Tensor::clamp`]).
    pub fn log(&self) -> Result<Tensor<T>> {
        let values = self.values().iter().map(|&x| x.ln()).collect();
        Ok(self.unary(values, UnaryKind::Log))
    }

    /// Clamp into `[min, max]`. The derivative is 1 inside the range and 0
    /// outside; values exactly at the bounds pass gradient through.
    pub fn clamp(&self, min: T, max: T) -> Result<Tensor<T>> {
        let values = self
            .values()
            .iter()
            .map(|&x| {
                if x < min {
                    min
                } else if x > max {
                    max
                } else {
                    x
                }
            })
            .collect();
        Ok(self.unary(values, UnaryKind::Clamp { min, max }))
    }

    /// Explicit scalar broadcast: `x + c`.
    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let values = self.values().iter().map(|&x| x + c).collect();
        Ok(self.unary(values, UnaryKind::Affine { scale: T::one() }))
    }

    /// Explicit scalar broadcast: `x * c`.
    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        let values = self.values().iter().map(|&x| x * c).collect();
        Ok(self.unary(values, UnaryKind::Affine { scale: c }))
    }

    /// `c - x`, used for complements like `1 - p`.
    pub fn sub_from_scalar(&self, c: T) -> Result<Tensor<T>> {
        let values = self.values().iter().map(|&x| c - x).collect();
        Ok(self.unary(values, UnaryKind::Affine { scale: -T::one() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn upstream_ones(t: &Tensor<f64>) -> Tensor<f64> {
        t.sum(None).unwrap()
    }

    #[test]
    fn add_forward_backward() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        let z = x.add(&y).unwrap();
        assert_eq!(z.to_vec(), vec![4.0, 6.0]);
        upstream_ones(&z).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn mul_product_rule() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = Tensor::param(&[1], vec![5.0]).unwrap();
        let z = x.mul(&y).unwrap();
        assert_eq!(z.to_vec(), vec![10.0]);
        upstream_ones(&z).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert_eq!(y.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        let s = x.sigmoid().unwrap();
        assert_eq!(s.to_vec(), vec![0.5]);
        upstream_ones(&s).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let y = Tensor::<f64>::zeros(&[3, 2]);
        match x.add(&y) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn div_backward() {
        let x = Tensor::param(&[2], vec![6.0, 8.0]).unwrap();
        let y = Tensor::param(&[2], vec![2.0, 4.0]).unwrap();
        let z = x.div(&y).unwrap();
        assert_eq!(z.to_vec(), vec![3.0, 2.0]);
        upstream_ones(&z).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, 0.25]);
        // d(x/y)/dy = -x/y^2
        assert_eq!(y.grad().unwrap(), vec![-1.5, -0.5]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let x = Tensor::param(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        let y = x.clamp(0.0, 1.0).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.0]);
        upstream_ones(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_ops() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul_scalar(3.0).unwrap().add_scalar(1.0).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 7.0]);
        let z = y.sub_from_scalar(10.0).unwrap();
        assert_eq!(z.to_vec(), vec![6.0, 3.0]);
        upstream_ones(&z).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-3.0, -3.0]);
    }

    #[test]
    fn untracked_inputs_produce_plain_leaves() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.relu().unwrap();
        assert!(y.is_leaf());
        assert!(!y.tracked());
    }
}
