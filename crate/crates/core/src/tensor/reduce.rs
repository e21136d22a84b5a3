//! Sum and mean reductions, over all elements or a subset of axes.

use super::{GraphOp, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct ReduceOp<T: Scalar> {
    input: Tensor<T>,
    /// Maps each input flat index to its output flat index.
    index_map: IndexMap,
    /// 1 for sum, 1/count for mean.
    scale: T,
}

enum IndexMap {
    /// Full reduction: everything maps to element 0.
    All,
    /// Per-axis reduction with precomputed output strides per input dim.
    Axes { out_strides_by_in_dim: Vec<usize> },
}

impl IndexMap {
    fn out_index(&self, in_index: usize, in_shape: &[usize]) -> usize {
        match self {
            IndexMap::All => 0,
            IndexMap::Axes {
                out_strides_by_in_dim,
            } => {
                let mut rem = in_index;
                let mut out = 0;
                for d in (0..in_shape.len()).rev() {
                    let coord = rem % in_shape[d];
                    rem /= in_shape[d];
                    out += coord * out_strides_by_in_dim[d];
                }
                out
            }
        }
    }
}

impl<T: Scalar> GraphOp<T> for ReduceOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, upstream: &[T]) {
        if !self.input.tracked() {
            return;
        }
        let in_shape = self.input.shape().to_vec();
        let n = self.input.numel();
        let mut dx = vec![T::zero(); n];
        for (i, slot) in dx.iter_mut().enumerate() {
            *slot = upstream[self.index_map.out_index(i, &in_shape)] * self.scale;
        }
        self.input.accumulate_grad(&dx);
    }
}

fn reduce_geometry(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut reduced = vec![false; shape.len()];
    for &axis in axes {
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        if reduced[axis] {
            return Err(Error::InvalidArgument(format!("duplicate axis {axis}")));
        }
        reduced[axis] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    // Stride of each input dim in the output (0 for reduced dims).
    let mut out_strides_by_in_dim = vec![0usize; shape.len()];
    let mut running = 1usize;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            out_strides_by_in_dim[d] = running;
            running *= shape[d];
        }
    }
    let count: usize = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&d, _)| d)
        .product();
    Ok((out_shape, out_strides_by_in_dim, count))
}

impl<T: Scalar> Tensor<T> {
    fn reduce(&self, axes: Option<&[usize]>, mean: bool) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let (out_shape, index_map, count) = match axes {
            None => (Vec::new(), IndexMap::All, self.numel()),
            Some(axes) => {
                let (out_shape, strides, count) = reduce_geometry(&shape, axes)?;
                (
                    out_shape,
                    IndexMap::Axes {
                        out_strides_by_in_dim: strides,
                    },
                    count,
                )
            }
        };
        let out_len: usize = out_shape.iter().product();
        let mut values = vec![T::zero(); out_len];
        {
            let input = self.values();
            for (i, &v) in input.iter().enumerate() {
                values[index_map.out_index(i, &shape)] = values[index_map.out_index(i, &shape)] + v;
            }
        }
        let scale = if mean {
            T::one() / T::from_usize(count)
        } else {
            T::one()
        };
        if mean {
            for v in &mut values {
                *v = *v * scale;
            }
        }
        if self.tracked() {
            Ok(Tensor::from_op(
                out_shape,
                values,
                Box::new(ReduceOp {
                    input: self.clone(),
                    index_map,
                    scale,
                }),
            ))
        } else {
            Tensor::from_vec(&out_shape, values)
        }
    }

    /// Sum over the given axes, or over everything (`None`) to a scalar.
    pub fn sum(&self, axes: Option<&[usize]>) -> Result<Tensor<T>> {
        self.reduce(axes, false)
    }

    /// Mean over the given axes, or over everything (`None`) to a scalar.
    pub fn mean(&self, axes: Option<&[usize]>) -> Result<Tensor<T>> {
        self.reduce(axes, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_all() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = x.sum(None).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 6.0);
    }

    #[test]
    fn sum_backward_broadcasts_ones() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        x.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_constant_grid() {
        let x = Tensor::<f64>::full(&[2, 2], 5.0);
        assert_eq!(x.mean(None).unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn mean_backward_divides_by_count() {
        let x = Tensor::<f64>::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        x.mean(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn axis_sum_matches_scalar_loop_oracle() {
        // Random-ish 3x4 tensor; oracle accumulates column sums by loop.
        let data = vec![
            0.31, -1.2, 2.5, 0.07, //
            1.9, 0.44, -0.6, 3.1, //
            -0.25, 0.8, 1.1, -2.4,
        ];
        let x = Tensor::<f64>::from_vec(&[3, 4], data.clone()).unwrap();
        let s = x.sum(Some(&[0])).unwrap();
        assert_eq!(s.shape(), &[4]);
        let mut oracle = vec![0.0; 4];
        for r in 0..3 {
            for c in 0..4 {
                oracle[c] += data[r * 4 + c];
            }
        }
        assert_eq!(s.to_vec(), oracle);
    }

    #[test]
    fn axis_sum_middle_axis() {
        let x = Tensor::<f64>::from_vec(&[2, 3, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let s = x.sum(Some(&[1])).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        // oracle by explicit loops
        let mut oracle = vec![0.0; 4];
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    oracle[a * 2 + c] += (a * 6 + b * 2 + c) as f64;
                }
            }
        }
        assert_eq!(s.to_vec(), oracle);
    }

    #[test]
    fn invalid_axis_errors() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(x.sum(Some(&[2])).is_err());
        assert!(x.sum(Some(&[0, 0])).is_err());
    }

    #[test]
    fn axis_reduce_backward() {
        let x = Tensor::<f64>::param(&[2, 3], vec![1.0; 6]).unwrap();
        let s = x.mean(Some(&[1])).unwrap(); // shape [2]
        s.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0 / 3.0; 6]);
    }
}
