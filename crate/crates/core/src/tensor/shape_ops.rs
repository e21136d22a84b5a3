//! Reshape, concatenation, and slicing. All preserve row-major element order.

use super::{GraphOp, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct ReshapeOp<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> GraphOp<T> for ReshapeOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if self.input.tracked() {
            self.input.accumulate_grad(upstream);
        }
    }
}

struct ConcatOp<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    axis: usize,
}

impl<T: Scalar> GraphOp<T> for ConcatOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        self.inputs.clone()
    }

    fn backward(&self, upstream: &[T]) {
        let axis = self.axis;
        let first = self.inputs[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = self.inputs.iter().map(|t| t.shape()[axis]).sum();
        let mut offset = 0usize;
        for input in &self.inputs {
            let len = input.shape()[axis];
            if input.tracked() {
                let mut dx = vec![T::zero(); input.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        let src = (o * total_axis + offset + a) * inner;
                        let dst = (o * len + a) * inner;
                        dx[dst..dst + inner].copy_from_slice(&upstream[src..src + inner]);
                    }
                }
                input.accumulate_grad(&dx);
            }
            offset += len;
        }
    }
}

struct NarrowOp<T: Scalar> {
    input: Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> GraphOp<T> for NarrowOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if !self.input.tracked() {
            return;
        }
        let shape = self.input.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let full = shape[self.axis];
        let mut dx = vec![T::zero(); self.input.numel()];
        for o in 0..outer {
            for a in 0..self.len {
                let dst = (o * full + self.start + a) * inner;
                let src = (o * self.len + a) * inner;
                dx[dst..dst + inner].copy_from_slice(&upstream[src..src + inner]);
            }
        }
        self.input.accumulate_grad(&dx);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let new_len: usize = shape.iter().product();
        if new_len != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                new_len
            )));
        }
        let values = self.to_vec();
        if self.tracked() {
            Ok(Tensor::from_op(
                shape.to_vec(),
                values,
                Box::new(ReshapeOp {
                    input: self.clone(),
                }),
            ))
        } else {
            Tensor::from_vec(shape, values)
        }
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = inputs[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        for t in &inputs[1..] {
            let s = t.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape_mismatch(&first, s, "concat"));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut values = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for input in inputs {
            let len = input.shape()[axis];
            let src = input.values();
            for o in 0..outer {
                for a in 0..len {
                    let dst = (o * total_axis + offset + a) * inner;
                    let s = (o * len + a) * inner;
                    values[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
            offset += len;
        }
        if inputs.iter().any(|t| t.tracked()) {
            Ok(Tensor::from_op(
                out_shape,
                values,
                Box::new(ConcatOp {
                    inputs: inputs.to_vec(),
                    axis,
                }),
            ))
        } else {
            Tensor::from_vec(&out_shape, values)
        }
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "narrow axis {axis} out of range for shape {shape:?}"
            )));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow range {start}..{} out of bounds for axis of size {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut values = vec![T::zero(); outer * len * inner];
        {
            let src = self.values();
            for o in 0..outer {
                for a in 0..len {
                    let s = (o * full + start + a) * inner;
                    let dst = (o * len + a) * inner;
                    values[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
        if self.tracked() {
            Ok(Tensor::from_op(
                out_shape,
                values,
                Box::new(NarrowOp {
                    input: self.clone(),
                    axis,
                    start,
                    len,
                }),
            ))
        } else {
            Tensor::from_vec(&out_shape, values)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channels() {
        let a = Tensor::<f64>::full(&[1, 3, 2, 2], 1.0);
        let b = Tensor::<f64>::full(&[1, 1, 2, 2], 2.0);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 4, 2, 2]);
        let v = c.to_vec();
        assert!(v[..12].iter().all(|&x| x == 1.0));
        assert!(v[12..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let x = Tensor::<f64>::from_vec(&[2, 6], (0..12).map(|i| i as f64).collect()).unwrap();
        let y = x.reshape(&[3, 4]).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        assert_eq!(y.to_vec(), (0..12).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn slice_then_concat_roundtrip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let x = Tensor::<f64>::from_vec(&[1, 4, 3, 2], data.clone()).unwrap();
        let lo = x.narrow(1, 0, 2).unwrap();
        let hi = x.narrow(1, 2, 2).unwrap();
        let back = Tensor::concat(&[lo, hi], 1).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let a = Tensor::<f64>::param(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::param(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        let w = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap();
        c.mul(&w).unwrap().sum(None).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![30.0]);
    }

    #[test]
    fn narrow_backward_pads_zeros() {
        let x = Tensor::<f64>::param(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.narrow(1, 1, 2).unwrap();
        y.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 2, 5, 4]);
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn reshape_count_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(x.reshape(&[4, 2]).is_err());
    }
}
