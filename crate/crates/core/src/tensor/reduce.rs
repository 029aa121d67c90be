use super::Tensor;
use crate::error::{shape_err, Result};

impl Tensor {
    /// Sum of all elements, accumulated in f64 in index order.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![s as f32], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op("mean_all", vec![1], vec![(s / n as f64) as f32], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, keepdim, 1.0)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return shape_err("mean_axis", format!("axis {axis} >= rank {}", self.rank()));
        }
        let n = self.dim(axis) as f32;
        self.reduce_axis("mean_axis", axis, keepdim, 1.0 / n)
    }

    fn reduce_axis(&self, op: &'static str, axis: usize, keepdim: bool, k: f32) -> Result<Tensor> {
        if axis >= self.rank() {
            return shape_err(op, format!("axis {axis} >= rank {}", self.rank()));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let n = self.dim(axis);
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for a in 0..n {
                    let src = &x[(o * n + a) * inner..(o * n + a + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                dst.iter_mut().for_each(|d| *d *= k);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        Tensor::from_op(op, shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..n {
                    gx[(o * n + a) * inner..(o * n + a + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d = s * k);
                }
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_sums() {
        let x = Tensor::new((1..=6).map(|v| v as f32).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_axis(0, false).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(x.mean_axis(1, false).unwrap().to_vec(), vec![2.0, 5.0]);
        assert_eq!(x.mean_all().unwrap().item().unwrap(), 3.5);
    }
}
