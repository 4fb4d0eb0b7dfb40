//! Losses, optimiser, learning-rate schedule and the training loop.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{derive_seed, si_snr, SAMPLE_RATE};
use crate::autograd::{clip_scale, Mode, Tape, Var};
use crate::dualpath::EnhancementNetwork;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// STFT geometry used inside the spectral loss.
pub const STFT_WINDOW: usize = 512;
pub const STFT_HOP: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    /// Magnitude-spectrum L1 on the speech estimate and the implied noise.
    PcmStyle,
    /// Scale-invariant SDR, offset so that its minimum is zero.
    SiSdr,
    /// Mean absolute sample error.
    L1Time,
}

/// Soft ceiling of the SI-SDR loss in dB. The loss is
/// `10·log10(1 + ‖residual‖² / (τ·‖target‖²))` with `τ = 10^(-ceiling/10)`,
/// which equals `ceiling − SI-SDR` well below the ceiling and tends to zero
/// above it, so the loss is non-negative and a perfect estimate scores 0.
pub const SI_SDR_LOSS_CEILING_DB: f64 = 30.0;

/// Loss averaged over a batch. `s_hat` is `[B, M]` (or `[M]`); `s` and `x`
/// are the clean target and the mixture of the same shape.
pub fn loss<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    kind: LossKind,
    s_hat: Var,
    s: &Tensor<S>,
    x: &Tensor<S>,
) -> Result<Var> {
    let shape = tape.shape(s_hat).to_vec();
    if shape != s.shape() || shape != x.shape() {
        return Err(Error::LengthMismatch(tape.value(s_hat).numel(), s.numel()));
    }
    let sv = tape.constant(s.clone());
    match kind {
        LossKind::L1Time => {
            let d = tape.sub(s_hat, sv)?;
            let a = tape.abs(d);
            Ok(tape.mean(a))
        }
        LossKind::PcmStyle => {
            let xv = tape.constant(x.clone());
            let mag_hat = tape.stft_magnitude(s_hat, STFT_WINDOW, STFT_HOP)?;
            let mag = tape.stft_magnitude(sv, STFT_WINDOW, STFT_HOP)?;
            let n_hat = tape.sub(xv, s_hat)?;
            let n = tape.sub(xv, sv)?;
            let nmag_hat = tape.stft_magnitude(n_hat, STFT_WINDOW, STFT_HOP)?;
            let nmag = tape.stft_magnitude(n, STFT_WINDOW, STFT_HOP)?;
            let d1 = tape.sub(mag_hat, mag)?;
            let d1 = tape.abs(d1);
            let d2 = tape.sub(nmag_hat, nmag)?;
            let d2 = tape.abs(d2);
            let m1 = tape.mean(d1);
            let m2 = tape.mean(d2);
            tape.add(m1, m2)
        }
        LossKind::SiSdr => {
            let m = *shape.last().unwrap();
            let rows = s.numel() / m;
            let row_shape = [rows, 1];
            let inv_m = S::ONE / S::from_usize(m);
            for r in s.data().chunks_exact(m) {
                let mean = r.iter().map(|v| v.to_f64()).sum::<f64>() / m as f64;
                let centred: f64 = r.iter().map(|v| (v.to_f64() - mean) * (v.to_f64() - mean)).sum();
                let raw: f64 = r.iter().map(|v| v.to_f64() * v.to_f64()).sum();
                // A constant row leaves only rounding error after centring.
                if centred <= 1e-20 * raw || raw == 0.0 {
                    return Err(Error::ZeroEnergy("target"));
                }
            }
            let centre = |tape: &mut Tape<'a, S>, v: Var| -> Result<Var> {
                let v = tape.reshape(v, &[rows, m])?;
                let sum = tape.sum_last(v);
                let mean = tape.scale(sum, inv_m);
                let mean = tape.reshape(mean, &row_shape)?;
                tape.sub(v, mean)
            };
            let e = centre(tape, s_hat)?;
            let t = centre(tape, sv)?;
            let et = tape.mul(e, t)?;
            let dot = tape.sum_last(et);
            let tt = tape.mul(t, t)?;
            let tt = tape.sum_last(tt);
            let alpha = tape.div(dot, tt)?;
            let alpha = tape.reshape(alpha, &row_shape)?;
            let target = tape.mul(t, alpha)?;
            let resid = tape.sub(e, target)?;
            let rr = tape.mul(resid, resid)?;
            let rr = tape.sum_last(rr);
            let pt = tape.mul(target, target)?;
            let pt = tape.sum_last(pt);
            let tau = libm::pow(10.0, -SI_SDR_LOSS_CEILING_DB / 10.0);
            let floor = tape.scale(pt, S::from_f64(tau));
            let ratio = tape.div(rr, floor)?;
            let ratio = tape.add_scalar(ratio, S::ONE)?;
            let db = tape.ln(ratio);
            let db = tape.scale(db, S::from_f64(10.0 / core::f64::consts::LN_10));
            Ok(tape.mean(db))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub utterance_seconds: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_flat_epochs: usize,
    pub clip_norm: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Stops after this many optimiser steps in total, validating at that point.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            utterance_seconds: 4.0,
            lr_initial: 2e-4,
            lr_final: 2e-5,
            lr_flat_epochs: 5,
            clip_norm: 3.0,
            loss: LossKind::PcmStyle,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(String::from(m)));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.utterance_seconds > 0.0) {
            return bad("utterance_seconds must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn utterance_samples(&self) -> usize {
        libm::round(self.utterance_seconds * SAMPLE_RATE as f64) as usize
    }
}

/// Learning rate for a 1-based `epoch`: flat for `lr_flat_epochs`, then
/// decaying geometrically to reach `lr_final` at the last epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    if epoch <= cfg.lr_flat_epochs || cfg.epochs <= cfg.lr_flat_epochs {
        return Ok(cfg.lr_initial);
    }
    if epoch == cfg.epochs {
        return Ok(cfg.lr_final);
    }
    let span = (cfg.epochs - cfg.lr_flat_epochs) as f64;
    let k = (epoch - cfg.lr_flat_epochs) as f64;
    Ok(cfg.lr_initial * libm::pow(cfg.lr_final / cfg.lr_initial, k / span))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    /// Updates `params` in place from `grads` (same order and sizes).
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<S>],
        names: &[String],
        grads: &[Vec<S>],
        lr: f64,
    ) -> Result<()> {
        self.begin(names, grads, params.iter().map(|p| p.numel()))?;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p.data_mut(), g, lr);
        }
        Ok(())
    }

    /// Same as [`Adam::step`] for every parameter of `module`, in visiting order.
    pub fn step_module<S: Scalar, M: Module<S>>(
        &mut self,
        module: &mut M,
        names: &[String],
        grads: &[Vec<S>],
        lr: f64,
    ) -> Result<()> {
        self.begin(names, grads, grads.iter().map(|g| g.len()))?;
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            self.update(i, p.data_mut(), &grads[i], lr);
            i += 1;
        });
        Ok(())
    }

    fn begin<S: Scalar>(&mut self, names: &[String], grads: &[Vec<S>], sizes: impl Iterator<Item = usize>) -> Result<()> {
        for (g, name) in grads.iter().zip(names) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        if self.m.is_empty() {
            self.m = sizes.map(|n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        Ok(())
    }

    fn update<S: Scalar>(&mut self, i: usize, w: &mut [S], g: &[S], lr: f64) {
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((w, &gi), mi), vi) in w.iter_mut().zip(g).zip(self.m[i].iter_mut()).zip(self.v[i].iter_mut()) {
            let gi = gi.to_f64();
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w = S::from_f64(w.to_f64() - lr * (*mi / c1) / (libm::sqrt(*vi / c2) + eps));
        }
    }
}

/// A training example: mixture and clean target of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub mixture: Vec<f64>,
    pub clean: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Receives progress during [`Trainer::run`].
pub trait TrainObserver<S: Scalar> {
    fn on_step(&mut self, _stats: &StepStats) {}
    /// Called at every epoch boundary after validation.
    fn on_epoch(&mut self, _epoch: usize, _score: f64, _net: &EnhancementNetwork<S>, _improved: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoTrainObserver;

impl<S: Scalar> TrainObserver<S> for NoTrainObserver {}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub best: EnhancementNetwork<S>,
    pub best_score: f64,
    pub best_epoch: usize,
    /// Validation score at every epoch boundary.
    pub scores: Vec<f64>,
    pub final_net: EnhancementNetwork<S>,
    pub steps: usize,
}

/// Model plus optimiser state.
pub struct Trainer<S: Scalar> {
    pub net: EnhancementNetwork<S>,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    pub epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(net: EnhancementNetwork<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net, cfg, adam: Adam::default(), step: 0, epoch: 1 })
    }

    /// One optimiser step on a batch `[B, M]`.
    pub fn train_step(&mut self, mixture: &Tensor<S>, clean: &Tensor<S>, lr: f64) -> Result<StepStats> {
        let step = self.step + 1;
        let (loss_value, names, mut grads) = {
            let mut tape = Tape::new(Mode::Train, true).with_seed(derive_seed(self.cfg.seed ^ 0xD50F, step as u64));
            let y = self.net.forward(&mut tape, mixture)?;
            let l = loss(&mut tape, self.cfg.loss, y, clean, mixture)?;
            let lv = tape.value(l).data()[0].to_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence { step });
            }
            tape.backward(l)?;
            let mut names = Vec::new();
            let mut grads = Vec::new();
            for (name, p) in self.net.named_params() {
                grads.push(tape.param_grad(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![S::ZERO; p.numel()]));
                names.push(name);
            }
            (lv, names, grads)
        };
        let views: Vec<&[S]> = grads.iter().map(|g| g.as_slice()).collect();
        let (norm, scale) = clip_scale(&views, self.cfg.clip_norm);
        if scale < 1.0 {
            let s = S::from_f64(scale);
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
        self.adam.step_module(&mut self.net, &names, &grads, lr)?;
        self.step = step;
        Ok(StepStats { step, epoch: self.epoch, lr, loss: loss_value, grad_norm: norm, clip_scale: scale })
    }

    /// Mean SI-SNR (dB) of the frozen model over `set`.
    pub fn validate(&self, set: &[Example]) -> Result<f64> {
        evaluate_si_snr(&self.net, set)
    }

    /// Full training run with per-epoch validation and best-model selection.
    pub fn run(
        &mut self,
        train_set: &[Example],
        val_set: &[Example],
        obs: &mut dyn TrainObserver<S>,
    ) -> Result<TrainOutcome<S>> {
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Empty);
        }
        let len = self.cfg.utterance_samples();
        let bsz = self.cfg.batch_size;
        let mut best: Option<(f64, usize, EnhancementNetwork<S>)> = None;
        let mut scores = Vec::new();
        'epochs: for epoch in 1..=self.cfg.epochs {
            self.epoch = epoch;
            let lr = lr_at_epoch(&self.cfg, epoch)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64));
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            let mut stop = false;
            for batch in order.chunks(bsz) {
                let (mix, clean) = make_batch::<S>(train_set, batch, len, &mut rng);
                let stats = self.train_step(&mix, &clean, lr)?;
                obs.on_step(&stats);
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    stop = true;
                    break;
                }
            }
            let mut snapshot = self.net.clone();
            snapshot.freeze();
            let score = evaluate_si_snr(&snapshot, val_set)?;
            scores.push(score);
            let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
            if improved {
                best = Some((score, epoch, snapshot.clone()));
            }
            obs.on_epoch(epoch, score, &snapshot, improved)?;
            if stop {
                break 'epochs;
            }
        }
        let (best_score, best_epoch, best) = best.expect("at least one epoch ran");
        let mut final_net = self.net.clone();
        final_net.freeze();
        Ok(TrainOutcome { best, best_score, best_epoch, scores, final_net, steps: self.step })
    }
}

/// Crops (random offset) or zero-pads each example to `len` samples.
pub fn make_batch<S: Scalar>(set: &[Example], idx: &[usize], len: usize, rng: &mut ChaCha8Rng) -> (Tensor<S>, Tensor<S>) {
    let mut mix = Vec::with_capacity(idx.len() * len);
    let mut clean = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        let ex = &set[i];
        let n = ex.mixture.len();
        let off = if n > len { rng.random_range(0..=n - len) } else { 0 };
        for k in 0..len {
            let j = off + k;
            mix.push(S::from_f64(if j < n { ex.mixture[j] } else { 0.0 }));
            clean.push(S::from_f64(if j < n { ex.clean[j] } else { 0.0 }));
        }
    }
    let shape = [idx.len(), len];
    (Tensor::new(shape, mix).expect("batch shape"), Tensor::new(shape, clean).expect("batch shape"))
}

/// Mean SI-SNR of a frozen network's output over `set`.
pub fn evaluate_si_snr<S: Scalar>(net: &EnhancementNetwork<S>, set: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in set {
        let x: Vec<S> = ex.mixture.iter().map(|&v| S::from_f64(v)).collect();
        let y: Vec<f64> = net.enhance(&x)?.into_iter().map(|v| v.to_f64()).collect();
        total += si_snr(&y, &ex.clean)?;
    }
    Ok(total / set.len() as f64)
}
