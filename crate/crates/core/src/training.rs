//! Losses, optimizer and the single-orientation adversarial training loop.
//!
//! The discriminator is conditional: it sees the generator input stacked with
//! either the target slice or the generator output. Adversarial terms use
//! squared errors; the generator additionally minimizes `λ·mean|pred − target|`.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nets::{Float, Network, Tensor};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_pix: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pix >= 0.0) || !self.lambda_pix.is_finite() {
            return Err(Error::Config(format!("lambda_pix must be finite and >= 0, got {}", self.lambda_pix)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_base: f64,
    pub decay_start: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    pub seed: u64,
    /// Cap on the number of training subjects.
    pub n_train: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr_base: 2e-4,
            decay_start: 50,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch: 1,
            seed: 0,
            n_train: None,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule with the same shape: constant for the first half,
    /// linear decay over the second.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            decay_start: epochs / 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} exceeds epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if self.batch != 1 {
            return Err(Error::Config(format!("only batch size 1 is supported, got {}", self.batch)));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::Config(format!("lr_base must be positive, got {}", self.lr_base)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.n_train == Some(0) {
            return Err(Error::Config("n_train must be >= 1".into()));
        }
        Ok(())
    }
}

fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mean_sq<F: Float>(x: &[F], target: f64) -> f64 {
    let t = F::of(target);
    let s = x.iter().fold(F::zero(), |a, &v| a + (v - t) * (v - t));
    s.to_f64().unwrap_or(f64::NAN) / x.len() as f64
}

/// `(L_D, L_G_adv)` for discriminator patch maps on real and generated pairs.
pub fn adversarial_losses<F: Float>(d_real: &Tensor<F>, d_fake: &Tensor<F>) -> Result<(f64, f64)> {
    same_shape(d_real, d_fake, "patch maps differ")?;
    if d_real.data.is_empty() {
        return Err(Error::Dimension("empty patch map".into()));
    }
    Ok((
        mean_sq(&d_real.data, 1.0) + mean_sq(&d_fake.data, 0.0),
        mean_sq(&d_fake.data, 1.0),
    ))
}

/// Mean absolute error.
pub fn pixel_loss<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    same_shape(pred, target, "prediction and target differ")?;
    if pred.data.is_empty() {
        return Err(Error::Dimension("empty tensors".into()));
    }
    let s = pred.data.iter().zip(&target.data).fold(F::zero(), |a, (&p, &t)| a + (p - t).abs());
    Ok(s.to_f64().unwrap_or(f64::NAN) / pred.data.len() as f64)
}

/// Learning rate for a zero-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Range(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch < cfg.decay_start {
        Ok(cfg.lr_base)
    } else {
        Ok(cfg.lr_base * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, net: &mut Network<f32>, grads: &[f32], lr: f64) -> Result<()> {
        let w = net.weights_mut()?;
        if w.len() != grads.len() || w.len() != self.m.len() {
            return Err(Error::Dimension("optimizer state does not match the network".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..w.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            w[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
        Ok(())
    }
}

/// One training example. When `base` is present the generator predicts a
/// correction and the estimate is `base + G(input)`.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub base: Option<Tensor<f32>>,
}

impl TrainPair {
    pub fn new(input: Tensor<f32>, target: Tensor<f32>) -> Self {
        TrainPair {
            input,
            target,
            base: None,
        }
    }

    pub fn with_base(mut self, base: Tensor<f32>) -> Self {
        self.base = Some(base);
        self
    }
}

/// Loss values of one generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLoss {
    pub adv: f64,
    pub pix: f64,
    pub total: f64,
}

fn add_base<F: Float>(mut y: Tensor<F>, base: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    if let Some(b) = base {
        same_shape(&y, b, "residual base does not match the generator output")?;
        y.data.iter_mut().zip(&b.data).for_each(|(v, &s)| *v += s);
    }
    Ok(y)
}

/// Generator estimate for one input, including the residual base.
pub fn predict<F: Float>(gen: &Network<F>, input: &Tensor<F>, base: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    add_base(gen.forward(input)?, base)
}

/// Generator objective `L_G_adv + λ·L1` and its gradient w.r.t. every
/// generator weight. The discriminator is held fixed.
pub fn generator_loss_grad<F: Float>(
    gen: &Network<F>,
    disc: &Network<F>,
    input: &Tensor<F>,
    target: &Tensor<F>,
    base: Option<&Tensor<F>>,
    weights: &LossWeights,
    grads: &mut [F],
) -> Result<GenLoss> {
    let (raw, gtrace) = gen.forward_trace(input)?;
    let fake = add_base(raw, base)?;
    same_shape(&fake, target, "generator output and target differ")?;
    let d_in = Tensor::concat(&[input, &fake])?;
    let (d_fake, dtrace) = disc.forward_trace(&d_in)?;
    let adv = mean_sq(&d_fake.data, 1.0);
    let pix = pixel_loss(&fake, target)?;

    let nd = F::of(2.0 / d_fake.data.len() as f64);
    let dd = Tensor {
        data: d_fake.data.iter().map(|&v| (v - F::one()) * nd).collect(),
        ..d_fake
    };
    let mut scratch = vec![F::zero(); disc.param_count()];
    let dx = disc
        .backward(&dtrace, &dd, &mut scratch, true)?
        .expect("input gradient requested");
    let mut g_fake = dx.channels(input.c, dx.c);
    let scale = F::of(weights.lambda_pix / fake.data.len() as f64);
    for ((g, &p), &t) in g_fake.data.iter_mut().zip(&fake.data).zip(&target.data) {
        let d = p - t;
        if d > F::zero() {
            *g += scale;
        } else if d < F::zero() {
            *g = *g - scale;
        }
    }
    gen.backward(&gtrace, &g_fake, grads, false)?;
    Ok(GenLoss {
        adv,
        pix,
        total: adv + weights.lambda_pix * pix,
    })
}

/// Discriminator objective on one (real, fake) pair and its gradient.
pub fn discriminator_loss_grad<F: Float>(
    disc: &Network<F>,
    input: &Tensor<F>,
    target: &Tensor<F>,
    fake: &Tensor<F>,
    grads: &mut [F],
) -> Result<f64> {
    let real_in = Tensor::concat(&[input, target])?;
    let fake_in = Tensor::concat(&[input, fake])?;
    let (d_real, rt) = disc.forward_trace(&real_in)?;
    let (d_fake, ft) = disc.forward_trace(&fake_in)?;
    let (l_d, _) = adversarial_losses(&d_real, &d_fake)?;
    let n = F::of(2.0 / d_real.data.len() as f64);
    let gr = Tensor {
        data: d_real.data.iter().map(|&v| (v - F::one()) * n).collect(),
        ..d_real
    };
    let gf = Tensor {
        data: d_fake.data.iter().map(|&v| v * n).collect(),
        ..d_fake
    };
    disc.backward(&rt, &gr, grads, false)?;
    disc.backward(&ft, &gf, grads, false)?;
    Ok(l_d)
}

/// Per-epoch means, written as one JSON line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_G_adv")]
    pub l_g_adv: f64,
    #[serde(rename = "L_pix")]
    pub l_pix: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_psnr: f64,
    pub gen: Network<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gen: Network<f32>,
    pub disc: Network<f32>,
    pub history: Vec<EpochRecord>,
    /// Generator weights at the epoch with the highest validation PSNR.
    pub best: Option<BestSnapshot>,
}

impl TrainOutcome {
    pub fn final_val_psnr(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.val_psnr)
    }
}

pub type Validator<'a> = dyn FnMut(&Network<f32>) -> Result<f64> + 'a;

fn check_finite(v: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch,
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

fn check_grads(grads: &[f32], epoch: usize, step: usize, what: &str) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            epoch,
            step,
            detail: format!("{what} gradient {i} = {}", grads[i]),
        }),
    }
}

/// Trains one generator/discriminator pair on slice pairs.
///
/// Each epoch visits every pair once in a seeded random order; per sample
/// the discriminator is updated first, then the generator. `validate` is
/// called after every epoch and its value recorded as `val_psnr`.
pub fn train_2d_model(
    pairs: &[TrainPair],
    mut gen: Network<f32>,
    mut disc: Network<f32>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut validate: Option<&mut Validator<'_>>,
    mut history_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    if gen.is_frozen() || disc.is_frozen() {
        return Err(Error::Frozen);
    }
    for p in pairs {
        if p.input.c != gen.in_channels() {
            return Err(Error::Dimension(format!(
                "generator expects {} channels, pair has {}",
                gen.in_channels(),
                p.input.c
            )));
        }
        if p.input.c + p.target.c != disc.in_channels() {
            return Err(Error::Dimension(format!(
                "discriminator expects {} channels, pair gives {}",
                disc.in_channels(),
                p.input.c + p.target.c
            )));
        }
    }

    let mut opt_g = Adam::new(gen.param_count(), cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_d = Adam::new(disc.param_count(), cfg.adam_beta1, cfg.adam_beta2);
    let mut grads_g = vec![0f32; gen.param_count()];
    let mut grads_d = vec![0f32; disc.param_count()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestSnapshot> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[seed::keys::SHUFFLE, epoch as u64])));
        let (mut sum_d, mut sum_adv, mut sum_pix) = (0.0, 0.0, 0.0);
        for (step, &i) in order.iter().enumerate() {
            let p = &pairs[i];
            let fake = predict(&gen, &p.input, p.base.as_ref())?;
            grads_d.iter_mut().for_each(|g| *g = 0.0);
            let l_d = discriminator_loss_grad(&disc, &p.input, &p.target, &fake, &mut grads_d)?;
            check_finite(l_d, epoch, step, "L_D")?;
            check_grads(&grads_d, epoch, step, "discriminator")?;
            opt_d.step(&mut disc, &grads_d, lr)?;

            grads_g.iter_mut().for_each(|g| *g = 0.0);
            let lg = generator_loss_grad(&gen, &disc, &p.input, &p.target, p.base.as_ref(), weights, &mut grads_g)?;
            check_finite(lg.total, epoch, step, "L_G")?;
            check_grads(&grads_g, epoch, step, "generator")?;
            opt_g.step(&mut gen, &grads_g, lr)?;
            sum_d += l_d;
            sum_adv += lg.adv;
            sum_pix += lg.pix;
        }
        let n = pairs.len() as f64;
        let val_psnr = match validate.as_mut() {
            Some(v) => Some(v(&gen)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            l_d: sum_d / n,
            l_g_adv: sum_adv / n,
            l_pix: sum_pix / n,
            lr,
            val_psnr,
        };
        log::info!(
            "epoch {epoch}: L_D {:.4} L_G_adv {:.4} L_pix {:.5} lr {:.2e}{}",
            rec.l_d,
            rec.l_g_adv,
            rec.l_pix,
            lr,
            val_psnr.map(|v| format!(" val {v:.2} dB")).unwrap_or_default()
        );
        if let Some(sink) = history_sink.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("<history>", e))?;
        }
        if let Some(v) = val_psnr {
            if best.as_ref().is_none_or(|b| v > b.val_psnr) {
                best = Some(BestSnapshot {
                    epoch,
                    val_psnr: v,
                    gen: gen.clone(),
                });
            }
        }
        history.push(rec);
    }
    Ok(TrainOutcome {
        gen,
        disc,
        history,
        best,
    })
}
