mod common;

use common::{op_error, rand_tensor, rng};
use dpsarnn_core::autograd::{clip_grad_norm, clip_scale};
use dpsarnn_core::train::*;
use dpsarnn_core::{Error, Mode, Tape, Tensor};

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn lr_schedule_endpoints() {
    let c = cfg();
    for e in 1..=5 {
        assert_eq!(lr_at_epoch(&c, e).unwrap(), 2e-4);
    }
    assert!((lr_at_epoch(&c, 15).unwrap() - 2e-5).abs() < 1e-12);
    assert!((lr_at_epoch(&c, 10).unwrap() - 2e-4 * 0.1f64.powf(0.5)).abs() < 1e-9);
    assert!((lr_at_epoch(&c, 10).unwrap() - 6.325e-5).abs() < 1e-8);
    for e in 6..=15 {
        assert!(lr_at_epoch(&c, e).unwrap() < lr_at_epoch(&c, e - 1).unwrap());
    }
    // Constant ratio between consecutive decayed epochs.
    let q = 0.1f64.powf(0.1);
    for e in 6..=15 {
        let r = lr_at_epoch(&c, e).unwrap() / lr_at_epoch(&c, e - 1).unwrap();
        assert!((r - q).abs() < 1e-12);
    }
    assert!(matches!(lr_at_epoch(&c, 0), Err(Error::EpochOutOfRange { epoch: 0, epochs: 15 })));
    assert!(matches!(lr_at_epoch(&c, 16), Err(Error::EpochOutOfRange { epoch: 16, .. })));
}

#[test]
fn config_validation() {
    assert!(cfg().validate().is_ok());
    assert_eq!(cfg().utterance_samples(), 64_000);
    assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
    assert!(TrainConfig { clip_norm: -1.0, ..cfg() }.validate().is_err());
    assert!(TrainConfig { lr_final: 0.0, ..cfg() }.validate().is_err());
}

#[test]
fn adam_first_step_is_lr() {
    let mut w = Tensor::new([3], vec![1.0f64, -2.0, 0.5]).unwrap();
    let mut adam = Adam::default();
    let names = vec!["w".to_string()];
    adam.step(&mut [&mut w], &names, &[vec![0.3, -7.0, 1e-3]], 0.01).unwrap();
    let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
    for (a, b) in w.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn adam_constant_gradient_is_monotone() {
    let mut w = Tensor::new([2], vec![0.0f64, 0.0]).unwrap();
    let mut adam = Adam::default();
    let names = vec!["w".to_string()];
    let mut prev = w.data().to_vec();
    for _ in 0..100 {
        adam.step(&mut [&mut w], &names, &[vec![2.0, -0.5]], 1e-3).unwrap();
        assert!(w.data()[0] < prev[0] && w.data()[1] > prev[1]);
        prev = w.data().to_vec();
    }
}

#[test]
fn adam_minimises_bowl() {
    let mut r = rng(3);
    let mut w = rand_tensor(&[10], -1.0, 1.0, &mut r);
    let mut adam = Adam::default();
    let names = vec!["w".to_string()];
    for _ in 0..2000 {
        let g: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        adam.step(&mut [&mut w], &names, &[g], 1e-2).unwrap();
    }
    let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "norm {norm}");
}

#[test]
fn adam_rejects_nan() {
    let mut a = Tensor::new([1], vec![1.0f64]).unwrap();
    let mut b = Tensor::new([2], vec![1.0f64, 2.0]).unwrap();
    let names = vec!["a".to_string(), "blocks.0.intra.lin_rnn.weight".to_string()];
    let e = Adam::default().step(&mut [&mut a, &mut b], &names, &[vec![0.1], vec![0.2, f64::NAN]], 1e-3);
    match e {
        Err(Error::NonFiniteGradient { name }) => assert_eq!(name, names[1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn clip_to_three() {
    // Norm 6 split over two tensors.
    let mut g = vec![Tensor::new([2], vec![3.0f64, 3.0]).unwrap(), Tensor::new([2], vec![3.0f64, -3.0]).unwrap()];
    let s = clip_grad_norm(&mut g, 3.0);
    assert!((s - 0.5).abs() < 1e-15);
    let n = g.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((n - 3.0).abs() < 1e-9);
    let small = [0.1f64, 0.2];
    assert_eq!(clip_scale(&[&small], 3.0).1, 1.0);
}

fn signals(m: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let s = rand_tensor(&[m], -0.5, 0.5, &mut r);
    let x = rand_tensor(&[m], -0.5, 0.5, &mut r);
    let sh = rand_tensor(&[m], -0.5, 0.5, &mut r);
    (sh, s, x)
}

fn loss_value(kind: LossKind, sh: &Tensor<f64>, s: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new(Mode::Eval, false);
    let v = tape.constant(sh.clone());
    let l = loss(&mut tape, kind, v, s, x).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn perfect_estimate_has_zero_loss() {
    let (sh, s, x) = signals(1500, 1);
    for kind in [LossKind::L1Time, LossKind::PcmStyle, LossKind::SiSdr] {
        assert!(loss_value(kind, &s, &s, &x).abs() < 1e-9, "{kind:?}");
        assert!(loss_value(kind, &sh, &s, &x) > 0.0);
    }
}

#[test]
fn si_sdr_loss_scale_invariant() {
    let (sh, s, x) = signals(800, 2);
    let s2 = Tensor::from_fn([800], |i| 2.0 * s.data()[i]);
    assert!((loss_value(LossKind::SiSdr, &s2, &s, &x) - loss_value(LossKind::SiSdr, &s, &s, &x)).abs() < 1e-9);
    let sh3 = Tensor::from_fn([800], |i| 3.0 * sh.data()[i]);
    assert!((loss_value(LossKind::SiSdr, &sh3, &s, &x) - loss_value(LossKind::SiSdr, &sh, &s, &x)).abs() < 1e-9);
    // Far below the ceiling the loss equals the ceiling minus SI-SNR.
    let si = dpsarnn_core::audio::si_snr(sh.data(), s.data()).unwrap();
    assert!(si < -20.0);
    let expect = SI_SDR_LOSS_CEILING_DB - si;
    assert!((loss_value(LossKind::SiSdr, &sh, &s, &x) - expect).abs() < 1e-3 * expect);
}

#[test]
fn loss_errors() {
    let (sh, s, x) = signals(600, 3);
    let mut tape = Tape::new(Mode::Eval, false);
    let v = tape.constant(sh.clone());
    let short = Tensor::zeros([500]);
    assert!(matches!(loss(&mut tape, LossKind::L1Time, v, &short, &x), Err(Error::LengthMismatch(..))));
    let flat = Tensor::from_fn([600], |_| 0.2);
    assert!(matches!(loss(&mut tape, LossKind::SiSdr, v, &flat, &x), Err(Error::ZeroEnergy("target"))));
    assert!(loss(&mut tape, LossKind::SiSdr, v, &s, &x).is_ok());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (sh, s, x) = signals(1024, 4);
    for kind in [LossKind::PcmStyle, LossKind::SiSdr, LossKind::L1Time] {
        let (s, x) = (s.clone(), x.clone());
        let err = op_error(std::slice::from_ref(&sh), &move |t, v| loss(t, kind, v[0], &s, &x).unwrap());
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn batched_loss_is_mean_of_rows() {
    let (a, s1, x1) = signals(700, 5);
    let (b, s2, x2) = signals(700, 6);
    let cat = |p: &Tensor<f64>, q: &Tensor<f64>| Tensor::new([2, 700], [p.data(), q.data()].concat()).unwrap();
    for kind in [LossKind::SiSdr, LossKind::L1Time, LossKind::PcmStyle] {
        let both = loss_value(kind, &cat(&a, &b), &cat(&s1, &s2), &cat(&x1, &x2));
        let mean = 0.5 * (loss_value(kind, &a, &s1, &x1) + loss_value(kind, &b, &s2, &x2));
        assert!((both - mean).abs() < 1e-9 * mean.abs().max(1.0), "{kind:?}");
    }
}
