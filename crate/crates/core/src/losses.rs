//! Codec training objectives and the multi-period discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{magnitude_frames, LogMel, MelConfig, StftConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv2d, Module};
use crate::tensor::{Conv2dSpec, PadMode, Tensor};

/// How an L1 distance is reduced over its elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

fn l1(a: &Tensor, b: &Tensor, red: Reduction) -> Result<Tensor> {
    let d = a.sub(b)?.abs()?;
    match red {
        Reduction::Sum => d.sum_all(),
        Reduction::Mean => d.mean_all(),
    }
}

fn check_pair(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return shape_err(op, format!("signals differ in shape: {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

/// The three analysis resolutions `(n_fft, win, hop)` shared by the mel and
/// spectral losses.
pub fn default_resolutions() -> Vec<StftConfig> {
    [(512, 512, 128), (1024, 1024, 256), (2048, 2048, 512)]
        .into_iter()
        .map(|(n, w, h)| StftConfig::new(n, w, h))
        .collect()
}

/// Log-mel L1 distance at several resolutions.
#[derive(Debug, Clone)]
pub struct MultiScaleMel {
    pub scales: Vec<(LogMel, f32)>,
}

impl MultiScaleMel {
    pub fn new(scales: Vec<(LogMel, f32)>) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|(_, w)| w.is_nan() || *w <= 0.0) {
            return Err(Error::InvalidArgument("mel loss needs at least one scale with positive weight".into()));
        }
        Ok(Self { scales })
    }

    /// Mel bins 40, 80 and 160 on the default resolution ladder, unit weights.
    pub fn standard(sample_rate: u32) -> Result<Self> {
        let scales = default_resolutions()
            .into_iter()
            .zip([40, 80, 160])
            .map(|(stft, n_mel)| {
                let mel = MelConfig {
                    sample_rate,
                    n_mel,
                    f_max: sample_rate as f32 / 2.0,
                    ..MelConfig::default()
                };
                Ok((LogMel::new(stft, mel)?, 1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }

    pub fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        check_pair("mel_loss", x, x_hat)?;
        let mut total: Option<Tensor> = None;
        for (lm, w) in &self.scales {
            let s = lm.forward(x)?;
            let s_hat = lm.forward(x_hat)?;
            let term = mel_l1(&s, &s_hat)?.scale(*w)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("non-empty scales"))
    }
}

/// Mean absolute difference of two spectrograms.
pub fn mel_l1(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    check_pair("mel_l1", s, s_hat)?;
    l1(s, s_hat, Reduction::Mean)
}

/// Magnitude-spectrogram L1 summed over resolutions.
pub fn spectral_loss(x: &Tensor, x_hat: &Tensor, resolutions: &[StftConfig], red: Reduction) -> Result<Tensor> {
    check_pair("spectral_loss", x, x_hat)?;
    let mut total: Option<Tensor> = None;
    for cfg in resolutions {
        let term = l1(&magnitude_frames(x, cfg)?, &magnitude_frames(x_hat, cfg)?, red)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no spectral resolutions".into()))
}

/// `sum_l w_l * mean|real_l - fake_l|`.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor], weights: &[f32]) -> Result<Tensor> {
    if real.len() != fake.len() || real.len() != weights.len() || real.is_empty() {
        return shape_err(
            "feature_matching_loss",
            format!("{} real taps, {} fake taps, {} weights", real.len(), fake.len(), weights.len()),
        );
    }
    let mut total: Option<Tensor> = None;
    for ((r, f), &w) in real.iter().zip(fake).zip(weights) {
        check_pair("feature_matching_loss", r, f)?;
        let term = l1(r, f, Reduction::Mean)?.scale(w)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Least-squares GAN losses for one discriminator output:
/// `disc = mean((D(x) - 1)^2) + mean(D(x_hat)^2)`.
pub fn lsgan_disc_loss(real_score: &Tensor, fake_score: &Tensor) -> Result<Tensor> {
    real_score.add_scalar(-1.0)?.square()?.mean_all()?.add(&fake_score.square()?.mean_all()?)
}

/// `gen = mean((D(x_hat) - 1)^2)`.
pub fn lsgan_gen_loss(fake_score: &Tensor) -> Result<Tensor> {
    fake_score.add_scalar(-1.0)?.square()?.mean_all()
}

/// Scores and intermediate features of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

/// Generator and discriminator objectives summed over sub-discriminators.
/// The generator loss is only differentiable if `fake` was computed with
/// the generator graph attached.
pub fn adversarial_losses(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<(Tensor, Tensor)> {
    if real.len() != fake.len() || real.is_empty() {
        return shape_err("adversarial_losses", "real/fake discriminator outputs differ in count");
    }
    let mut gen = lsgan_gen_loss(&fake[0].score)?;
    let mut disc = lsgan_disc_loss(&real[0].score, &fake[0].score)?;
    for (r, f) in real.iter().zip(fake).skip(1) {
        gen = gen.add(&lsgan_gen_loss(&f.score)?)?;
        disc = disc.add(&lsgan_disc_loss(&r.score, &f.score)?)?;
    }
    Ok((gen, disc))
}

/// Coefficients of the weighted total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f32,
    pub mel: f32,
    pub spectral: f32,
    pub fm: f32,
    /// Per-layer feature-matching weight.
    pub fm_layer: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, mel: 30.0, spectral: 20.0, fm: 2.0, fm_layer: 1.0 }
    }
}

/// Unweighted loss terms of one generator step.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub adv: Tensor,
    pub mel: Tensor,
    pub spectral: Tensor,
    pub fm: Tensor,
}

/// `adv + w_mel * mel + w_spec * spectral + w_fm * fm`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    c.adv
        .scale(w.adv)?
        .add(&c.mel.scale(w.mel)?)?
        .add(&c.spectral.scale(w.spectral)?)?
        .add(&c.fm.scale(w.fm)?)
}

/// Period sub-discriminator. The waveform is folded into `[B, 1, p, N/p]`
/// so that every convolution runs along the long axis.
#[derive(Debug, Clone)]
pub struct PeriodDiscriminator {
    pub period: usize,
    pub convs: Vec<Conv2d>,
    pub post: Conv2d,
}

impl PeriodDiscriminator {
    pub fn new<R: Rng + ?Sized>(period: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i + 1 < channels.len() { 3 } else { 1 };
            let spec = Conv2dSpec { stride: (1, stride), padding: (0, 2), ..Default::default() };
            convs.push(Conv2d::new(cin, c, (1, 5), spec, rng));
            cin = c;
        }
        let post = Conv2d::new(cin, 1, (1, 3), Conv2dSpec::padded(0, 1), rng);
        Self { period, convs, post }
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let (b, n) = match x.shape() {
            [b, 1, n] => (*b, *n),
            s => return shape_err("period_discriminator", format!("expected [B, 1, N], got {s:?}")),
        };
        let p = self.period;
        let pad = (p - n % p) % p;
        let x = if pad > 0 { x.pad_last(0, pad, PadMode::Reflect)? } else { x.clone() };
        let rows = (n + pad) / p;
        let mut h = x.reshape(&[b, 1, rows, p])?.permute(&[0, 1, 3, 2])?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = c.forward(&h)?.leaky_relu(0.1)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        features.push(score.clone());
        Ok(DiscOutput { score, features })
    }
}

impl Module for PeriodDiscriminator {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{i}")), out);
        }
        self.post.visit_params(&join(prefix, "post"), out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { periods: vec![2, 3, 5], channels: vec![16, 32, 64, 64] }
    }
}

#[derive(Debug, Clone)]
pub struct MultiPeriodDiscriminator {
    pub subs: Vec<PeriodDiscriminator>,
}

impl MultiPeriodDiscriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        Self { subs: cfg.periods.iter().map(|&p| PeriodDiscriminator::new(p, &cfg.channels, rng)).collect() }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<DiscOutput>> {
        self.subs.iter().map(|d| d.forward(x)).collect()
    }

    /// Feature-matching loss across all sub-discriminators with equal layer weights.
    pub fn feature_loss(real: &[DiscOutput], fake: &[DiscOutput], layer_weight: f32) -> Result<Tensor> {
        let r: Vec<Tensor> = real.iter().flat_map(|o| o.features.iter().map(Tensor::detach)).collect();
        let f: Vec<Tensor> = fake.iter().flat_map(|o| o.features.iter().cloned()).collect();
        feature_matching_loss(&r, &f, &vec![layer_weight; r.len()])
    }
}

impl Module for MultiPeriodDiscriminator {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for d in &self.subs {
            d.visit_params(&join(prefix, &format!("period{}", d.period)), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lsgan_half_scores() {
        let half = Tensor::full(&[2, 5], 0.5);
        assert!((lsgan_disc_loss(&half, &half).unwrap().item().unwrap() - 0.5).abs() < 1e-7);
        let perfect = lsgan_disc_loss(&Tensor::ones(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(perfect.item().unwrap(), 0.0);
        assert_eq!(lsgan_gen_loss(&Tensor::ones(&[3])).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn unit_components_total() {
        let one = Tensor::scalar(1.0);
        let c = LossComponents { adv: one.clone(), mel: one.clone(), spectral: one.clone(), fm: one };
        assert_eq!(total_loss(&c, &LossWeights::default()).unwrap().item().unwrap(), 53.0);
    }

    #[test]
    fn mpd_feature_shapes_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mpd = MultiPeriodDiscriminator::new(&DiscriminatorConfig::default(), &mut rng);
        let x = Tensor::randn(&[1, 1, 1000], &mut rng).scale(0.1).unwrap();
        let a = mpd.forward(&x).unwrap();
        let b = mpd.forward(&x).unwrap();
        assert_eq!(a.len(), 3);
        for (oa, ob) in a.iter().zip(&b) {
            assert_eq!(oa.features.len(), 5);
            for (fa, fb) in oa.features.iter().zip(&ob.features) {
                assert_eq!(fa.shape(), fb.shape());
            }
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let a = Tensor::zeros(&[1, 1, 2048]);
        let b = Tensor::zeros(&[1, 1, 4096]);
        assert!(spectral_loss(&a, &b, &default_resolutions(), Reduction::Mean).is_err());
        assert!(MultiScaleMel::standard(48_000).unwrap().loss(&a, &b).is_err());
    }
}
