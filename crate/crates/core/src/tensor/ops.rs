//! Elementwise unary and broadcasting binary operations.

use std::rc::Rc;

use rand::Rng;

use super::broadcast::{broadcast_map, broadcast_shape};
use super::Tensor;
use crate::error::Result;

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tensor {
    /// Elementwise map with a derivative expressed through input and output.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, vec![self.clone()], move |g, y| {
            let x = input.data();
            let gx = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, k: f32) -> Result<Tensor> {
        self.unary("scale", move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, k: f32) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + k, |_, _| 1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f32::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f32::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f32::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + libm::erff(x * INV_SQRT_2)),
            |x, _| {
                let cdf = 0.5 * (1.0 + libm::erff(x * INV_SQRT_2));
                let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `elu(x) + 1`, strictly positive for every finite input.
    pub fn elu_plus_one(&self) -> Result<Tensor> {
        self.unary(
            "elu_plus_one",
            |x| if x > 0.0 { x + 1.0 } else { x.exp().max(f32::MIN_POSITIVE) },
            |x, y| if x > 0.0 { 1.0 } else { y },
        )
    }

    pub fn leaky_relu(&self, slope: f32) -> Result<Tensor> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f32) -> Result<Tensor> {
        self.unary(
            "clamp_min",
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    /// Round to nearest (ties to even) with a straight-through gradient.
    pub fn round_ste(&self) -> Result<Tensor> {
        self.unary("round_ste", f32::round_ties_even, |_, _| 1.0)
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
        da: impl Fn(f32, f32, f32) -> f32 + 'static,
        db: impl Fn(f32, f32, f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let data: Vec<f32> = {
                let (a, b) = (self.data(), other.data());
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
            };
            let (ta, tb) = (self.clone(), other.clone());
            return Tensor::from_op(op, sa.to_vec(), data, vec![self.clone(), other.clone()], move |g, y| {
                let (a, b) = (ta.data(), tb.data());
                let ga = ta.requires_grad().then(|| {
                    (0..g.len()).map(|i| g[i] * da(a[i], b[i], y[i])).collect()
                });
                let gb = tb.requires_grad().then(|| {
                    (0..g.len()).map(|i| g[i] * db(a[i], b[i], y[i])).collect()
                });
                vec![ga, gb]
            });
        }
        let out_shape = broadcast_shape(op, sa, sb)?;
        let ma = Rc::new(broadcast_map(&out_shape, sa));
        let mb = Rc::new(broadcast_map(&out_shape, sb));
        let data: Vec<f32> = {
            let (a, b) = (self.data(), other.data());
            ma.iter().zip(mb.iter()).map(|(&i, &j)| f(a[i], b[j])).collect()
        };
        let (ta, tb) = (self.clone(), other.clone());
        Tensor::from_op(op, out_shape, data, vec![self.clone(), other.clone()], move |g, y| {
            let (a, b) = (ta.data(), tb.data());
            let ga = ta.requires_grad().then(|| {
                let mut ga = vec![0.0; a.len()];
                for i in 0..g.len() {
                    ga[ma[i]] += g[i] * da(a[ma[i]], b[mb[i]], y[i]);
                }
                ga
            });
            let gb = tb.requires_grad().then(|| {
                let mut gb = vec![0.0; b.len()];
                for i in 0..g.len() {
                    gb[mb[i]] += g[i] * db(a[ma[i]], b[mb[i]], y[i]);
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |_, b, _| 1.0 / b, |_, b, y| -y / b)
    }

    /// Stochastic depth: in training mode each sample along axis 0 is
    /// dropped with probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn drop_path<R: Rng + ?Sized>(&self, p: f32, training: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(crate::Error::InvalidArgument(format!(
                "drop_path probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let b = self.dim(0);
        let keep = 1.0 - p;
        let mask: Vec<f32> = (0..b)
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut mshape = vec![1; self.rank()];
        mshape[0] = b;
        self.mul(&Tensor::new(mask, &mshape)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn activations_at_zero() {
        let z = t(&[0.0]);
        assert_eq!(z.gelu().unwrap().item().unwrap(), 0.0);
        assert_eq!(z.silu().unwrap().item().unwrap(), 0.0);
        assert_eq!(z.tanh().unwrap().item().unwrap(), 0.0);
        assert_eq!(z.elu_plus_one().unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn elu_plus_one_positive_far_left() {
        let y = t(&[-1e30, -200.0, -50.0]).elu_plus_one().unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn broadcast_add_grad_reduces() {
        let a = Tensor::param(vec![1.0; 6], &[2, 3]).unwrap();
        let b = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        a.add(&b).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn div_grad() {
        let a = Tensor::param(vec![3.0], &[1]).unwrap();
        let b = Tensor::param(vec![2.0], &[1]).unwrap();
        a.div(&b).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5]);
        assert_eq!(b.grad().unwrap(), vec![-0.75]);
    }

    #[test]
    fn round_ste_passes_gradient() {
        let x = Tensor::param(vec![0.4, 1.6, -2.5], &[3]).unwrap();
        let y = x.round_ste().unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0, -2.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn drop_path_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::ones(&[64, 2]);
        let eval = x.drop_path(0.5, false, &mut rng).unwrap();
        assert_eq!(eval.to_vec(), x.to_vec());
        let p0 = x.drop_path(0.0, true, &mut rng).unwrap();
        assert_eq!(p0.to_vec(), x.to_vec());
        let tr = x.drop_path(0.5, true, &mut rng).unwrap().to_vec();
        for s in tr.chunks(2) {
            assert!(s == [0.0, 0.0] || s == [2.0, 2.0]);
        }
        assert!(tr.contains(&0.0) && tr.contains(&2.0));
        assert!(x.drop_path(1.0, true, &mut rng).is_err());
    }
}
