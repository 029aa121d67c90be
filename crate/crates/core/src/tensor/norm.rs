//! Layer and group normalization.

use std::rc::Rc;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

impl Tensor {
    /// Normalizes each `(outer, inner)` fibre of a tensor viewed as
    /// `[outer, n, inner]` to zero mean and unit variance over `n`.
    fn normalize_block(&self, op: &'static str, outer: usize, n: usize, inner: usize, eps: f32) -> Result<Tensor> {
        let mut y = vec![0.0f32; outer * n * inner];
        let mut inv_std = vec![0.0f32; outer * inner];
        {
            let x = self.data();
            let mut mean = vec![0.0f64; inner];
            let mut var = vec![0.0f64; inner];
            for o in 0..outer {
                mean.fill(0.0);
                var.fill(0.0);
                for a in 0..n {
                    let row = &x[(o * n + a) * inner..][..inner];
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for a in 0..n {
                    let row = &x[(o * n + a) * inner..][..inner];
                    var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (&v, &m))| {
                        let d = v as f64 - m;
                        *s += d * d;
                    });
                }
                let istd = &mut inv_std[o * inner..][..inner];
                for (i, s) in istd.iter_mut().enumerate() {
                    *s = (1.0 / (var[i] / n as f64 + eps as f64).sqrt()) as f32;
                }
                for a in 0..n {
                    let base = (o * n + a) * inner;
                    for i in 0..inner {
                        y[base + i] = ((x[base + i] as f64 - mean[i]) as f32) * istd[i];
                    }
                }
            }
        }
        let inv_std = Rc::new(inv_std);
        Tensor::from_op(op, self.shape().to_vec(), y, vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0f32; g.len()];
            let mut mg = vec![0.0f32; inner];
            let mut mgy = vec![0.0f32; inner];
            for o in 0..outer {
                mg.fill(0.0);
                mgy.fill(0.0);
                for a in 0..n {
                    let base = (o * n + a) * inner;
                    for i in 0..inner {
                        mg[i] += g[base + i];
                        mgy[i] += g[base + i] * y[base + i];
                    }
                }
                let istd = &inv_std[o * inner..][..inner];
                for a in 0..n {
                    let base = (o * n + a) * inner;
                    for i in 0..inner {
                        let (m1, m2) = (mg[i] / n as f32, mgy[i] / n as f32);
                        gx[base + i] = istd[i] * (g[base + i] - m1 - y[base + i] * m2);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over a contiguous run of `axes`, followed by an
    /// optional affine map whose parameters have the shape of those axes.
    pub fn layer_norm(
        &self,
        axes: &[usize],
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<Tensor> {
        const OP: &str = "layer_norm";
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let Some((&first, &last)) = axes.first().zip(axes.last()) else {
            return shape_err(OP, "no axes given");
        };
        if last >= self.rank() || axes.iter().enumerate().any(|(i, &a)| a != first + i) {
            return shape_err(
                OP,
                format!("axes {axes:?} must be a contiguous increasing run within rank {}", self.rank()),
            );
        }
        let shape = self.shape();
        let outer: usize = shape[..first].iter().product();
        let norm_dims = &shape[first..=last];
        let n: usize = norm_dims.iter().product();
        let inner: usize = shape[last + 1..].iter().product();
        let y = self.normalize_block(OP, outer, n, inner, eps)?;
        // Affine parameters broadcast against trailing axes.
        let mut pshape = norm_dims.to_vec();
        pshape.extend(std::iter::repeat_n(1, shape.len() - last - 1));
        let fit = |p: &Tensor, name: &str| -> Result<Tensor> {
            if p.shape() != norm_dims {
                return shape_err(OP, format!("{name} shape {:?}, expected {norm_dims:?}", p.shape()));
            }
            p.reshape(&pshape)
        };
        let y = match gamma {
            Some(gm) => y.mul(&fit(gm, "gamma")?)?,
            None => y,
        };
        match beta {
            Some(b) => y.add(&fit(b, "beta")?),
            None => Ok(y),
        }
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine
    /// parameters of shape `[C]`.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<Tensor> {
        const OP: &str = "group_norm";
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("group_norm eps must be > 0, got {eps}")));
        }
        if self.rank() < 2 {
            return shape_err(OP, format!("input {:?} must have rank >= 2", self.shape()));
        }
        let (b, c) = (self.dim(0), self.dim(1));
        if groups == 0 || c % groups != 0 {
            return shape_err(OP, format!("{c} channels not divisible into {groups} groups"));
        }
        let rest: usize = self.shape()[2..].iter().product();
        let y = self.normalize_block(OP, b * groups, (c / groups) * rest, 1, eps)?;
        let mut pshape = vec![c];
        pshape.extend(std::iter::repeat_n(1, self.rank() - 2));
        let fit = |p: &Tensor, name: &str| -> Result<Tensor> {
            if p.shape() != [c] {
                return shape_err(OP, format!("{name} shape {:?}, expected [{c}]", p.shape()));
            }
            p.reshape(&pshape)
        };
        let y = match gamma {
            Some(gm) => y.mul(&fit(gm, "gamma")?)?,
            None => y,
        };
        match beta {
            Some(bt) => y.add(&fit(bt, "beta")?),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[2, 3, 4], 5.0);
        let y = x.layer_norm(&[1], None, Some(&Tensor::zeros(&[3])), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_axis_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 8, 5], &mut rng).scale(3.0).unwrap().add_scalar(1.0).unwrap();
        let y = x.layer_norm(&[1], None, None, 1e-6).unwrap();
        let d = y.data();
        for b in 0..2 {
            for l in 0..5 {
                let col: Vec<f32> = (0..8).map(|c| d[(b * 8 + c) * 5 + l]).collect();
                let m = col.iter().sum::<f32>() / 8.0;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f32>() / 8.0;
                assert!(m.abs() < 1e-5);
                assert!((v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::ones(&[2, 3, 4]);
        assert!(x.layer_norm(&[1], None, None, 0.0).is_err());
        assert!(x.layer_norm(&[0, 2], None, None, 1e-5).is_err());
        assert!(x.layer_norm(&[3], None, None, 1e-5).is_err());
        assert!(x.layer_norm(&[2], Some(&Tensor::ones(&[3])), None, 1e-5).is_err());
        assert!(x.group_norm(2, None, None, 1e-5).is_err());
    }

    #[test]
    fn group_norm_matches_layer_norm_with_one_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4, 3], &mut rng);
        let a = x.group_norm(1, None, None, 1e-5).unwrap().to_vec();
        let b = x.layer_norm(&[1, 2], None, None, 1e-5).unwrap().to_vec();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}
