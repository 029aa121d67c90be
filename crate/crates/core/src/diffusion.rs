//! Conditional DDPM over codec latents.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{no_grad, Tensor};
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// Linear schedule whose endpoints are scaled by `1000 / steps`, so a
    /// short chain destroys roughly as much signal as the 1000-step default.
    pub fn scaled_linear(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self { kind: ScheduleKind::Linear, steps, beta_start: 1e-4 * k, beta_end: (0.02 * k).min(0.999) }
    }

    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed `beta`, `alpha`, `alpha_bar` and `sigma` for `t = 1..=T`,
/// stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl VarianceSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let ok = beta_1 > 0.0 && beta_t < 1.0 && (beta_1 < beta_t || (steps == 1 && beta_1 <= beta_t));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta_1 < beta_T < 1, got {beta_1} and {beta_t}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_1],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check_t(t)?])
    }
}

/// One forward noising step `z_t = sqrt(a_t) z_{t-1} + sqrt(1 - a_t) eps`.
pub fn forward_step(s: &VarianceSchedule, z_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let a = s.alpha(t)?;
    z_prev.scale(a.sqrt() as f32)?.add(&eps.scale((1.0 - a).sqrt() as f32)?)
}

/// Closed-form marginal `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
pub fn forward_marginal(s: &VarianceSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = s.alpha_bar(t)?;
    z0.scale(ab.sqrt() as f32)?.add(&eps.scale((1.0 - ab).sqrt() as f32)?)
}

/// A conditional noise predictor `eps(z_t, z'_0, t)`.
pub trait NoiseEstimator {
    /// `z_t` and `cond` are `[B, d, L]`; `t` holds one timestep per batch element.
    fn predict(&self, z_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Marginal sample with a different timestep per batch element.
fn noisy_batch(s: &VarianceSchedule, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let b = z0.dim(0);
    if t.len() != b || eps.shape() != z0.shape() {
        return shape_err("diffusion", format!("{} timesteps for batch {b}", t.len()));
    }
    let mut bshape = vec![1; z0.rank()];
    bshape[0] = b;
    let ab = t.iter().map(|&ti| s.alpha_bar(ti)).collect::<Result<Vec<_>>>()?;
    let ca = Tensor::new(ab.iter().map(|a| a.sqrt() as f32).collect(), &bshape)?;
    let cb = Tensor::new(ab.iter().map(|a| (1.0 - a).sqrt() as f32).collect(), &bshape)?;
    z0.mul(&ca)?.add(&eps.mul(&cb)?)
}

/// Noise-prediction loss `mean((eps - eps_theta(z_t, z'_0, t))^2)` at given
/// timesteps and noise.
pub fn loss_at(
    est: &dyn NoiseEstimator,
    s: &VarianceSchedule,
    z0: &Tensor,
    cond: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if z0.shape() != cond.shape() {
        return shape_err("diffusion", format!("z0 {:?} vs condition {:?}", z0.shape(), cond.shape()));
    }
    let zt = noisy_batch(s, z0, t, eps)?;
    est.predict(&zt, cond, t)?.sub(eps)?.square()?.mean_all()
}

/// One training draw: `t ~ U{1..T}`, `eps ~ N(0, I)`, then [`loss_at`].
pub fn training_step<R: Rng + ?Sized>(
    est: &dyn NoiseEstimator,
    s: &VarianceSchedule,
    z0: &Tensor,
    cond: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let t: Vec<usize> = (0..z0.dim(0)).map(|_| rng.random_range(1..=s.steps())).collect();
    let eps = Tensor::randn(z0.shape(), rng);
    loss_at(est, s, z0, cond, &t, &eps)
}

/// Generator for stream `stream` of a master seed; streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut r = SeededRng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`. The noise at step
/// `t` comes from stream `t` of `seed` and `z_T` from stream `T + 1`, so the
/// result depends only on the seed and the estimator.
pub fn sample(est: &dyn NoiseEstimator, s: &VarianceSchedule, cond: &Tensor, seed: u64) -> Result<Tensor> {
    no_grad(|| {
        let t_max = s.steps();
        let mut z = Tensor::randn(cond.shape(), &mut stream_rng(seed, t_max as u64 + 1));
        let b = cond.dim(0);
        for t in (1..=t_max).rev() {
            let a = s.alpha(t)?;
            let ab = s.alpha_bar(t)?;
            let eps = est.predict(&z, cond, &vec![t; b])?;
            let coef = ((1.0 - a) / (1.0 - ab).sqrt()) as f32;
            let mean = z.sub(&eps.scale(coef)?)?.scale((1.0 / a.sqrt()) as f32)?;
            z = if t > 1 {
                let mut rng = stream_rng(seed, t as u64);
                let noise: Vec<f32> = (0..mean.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let noise = Tensor::new(noise, mean.shape())?;
                mean.add(&noise.scale(s.sigma(t)? as f32)?)?
            } else {
                mean
            };
        }
        Ok(z)
    })
}

/// Latent restoration: encode the degraded waveform, sample a clean latent
/// conditioned on it and decode. `latent_scale` divides codec latents
/// before diffusion. The waveform length must already be a multiple of
/// `codec.cfg.length_multiple() * 2^stages`; `pipeline::Restorer::restore`
/// pads and trims automatically.
pub fn restore(
    degraded: &Tensor,
    codec: &Codec,
    est: &dyn NoiseEstimator,
    s: &VarianceSchedule,
    latent_scale: f32,
    seed: u64,
) -> Result<Tensor> {
    no_grad(|| {
        let cond = codec.latent(degraded)?.scale(1.0 / latent_scale)?;
        let z0 = sample(est, s, &cond, seed)?;
        codec.synthesize(&z0.scale(latent_scale)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl NoiseEstimator for Zero {
        fn predict(&self, z_t: &Tensor, _: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok(Tensor::zeros(z_t.shape()))
        }
    }

    #[test]
    fn schedule_basics() {
        let s = VarianceSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha(0).is_err() && s.alpha(1001).is_err());
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(VarianceSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(VarianceSchedule::new(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(VarianceSchedule::new(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
        assert!(VarianceSchedule::new(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn single_step_sampler_algebra() {
        let s = VarianceSchedule::new(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        let cond = Tensor::zeros(&[1, 2, 3]);
        let z0 = sample(&Zero, &s, &cond, 7).unwrap();
        let z1 = Tensor::randn(&[1, 2, 3], &mut stream_rng(7, 2));
        for (a, b) in z0.data().iter().zip(z1.data().iter()) {
            assert!((a - b / 0.9f32.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn scaled_schedule_endpoints() {
        let c = ScheduleConfig::scaled_linear(50);
        assert!((c.beta_start - 2e-3).abs() < 1e-12 && (c.beta_end - 0.4).abs() < 1e-12);
        assert_eq!(ScheduleConfig::scaled_linear(1000), ScheduleConfig::default());
    }
}
