mod common;

use common::{rand_tensor, rng};
use dpsarnn_core::nn::{BiLstm, LayerNorm, Linear, Lstm, LstmState, Module};
use dpsarnn_core::{Error, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn identity_linear_passes_input_through() {
    let lin = Linear::<f64> {
        weight: Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        bias: Tensor::zeros([3]),
    };
    let x = rand_tensor(&[4, 3], -1.0, 1.0, &mut rng(1));
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = lin.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn layer_norm_examples() {
    let ln = LayerNorm::<f64>::new(4);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::full([4], 1.0));
    let y = ln.forward(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let ln2 = LayerNorm::<f64>::new(2);
    let x = tape.constant(Tensor::new([2], vec![-1.0, 1.0]).unwrap());
    let y = ln2.forward(&mut tape, x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip([-1.0, 1.0]) {
        assert!((a - b).abs() < 1e-4);
    }

    let ln1 = LayerNorm::<f64>::new(1);
    let x = tape.constant(Tensor::new([1], vec![3.0]).unwrap());
    let (g, b) = (tape.param(&ln1.gain), tape.param(&ln1.bias));
    assert_eq!(tape.layer_norm(x, g, b, 0.0).unwrap_err(), Error::DivisionByZero);
}

fn random_lstm(input: usize, hidden: usize, seed: u64) -> Lstm<f32> {
    Lstm::new(input, hidden, &mut rng(seed))
}

#[test]
fn step_by_step_matches_whole_sequence_bitwise() {
    let lstm = random_lstm(5, 7, 3);
    let x: Vec<f32> = rand_tensor(&[9, 5], -1.0, 1.0, &mut rng(4)).data().iter().map(|&v| v as f32).collect();
    let (full, fin) = lstm.run(&x, &LstmState::zeros(1, 7)).unwrap();
    let mut st = LstmState::zeros(1, 7);
    let mut steps = Vec::new();
    for t in 0..9 {
        let (h, next) = lstm.step(&x[t * 5..(t + 1) * 5], &st).unwrap();
        steps.extend(h);
        st = next;
    }
    assert_eq!(steps, full);
    assert_eq!(st, fin);
    // T = 1 is one step.
    let (one, _) = lstm.run(&x[..5], &LstmState::zeros(1, 7)).unwrap();
    assert_eq!(&one[..], &full[..7]);
}

#[test]
fn empty_sequence_and_numeric_fault() {
    let lstm = random_lstm(2, 3, 5);
    assert_eq!(lstm.run(&[], &LstmState::zeros(1, 3)).unwrap_err(), Error::EmptySequence);
    let bad = LstmState { h: vec![0.0, f32::NAN, 0.0], c: vec![0.0; 3] };
    assert_eq!(lstm.run(&[0.1, 0.2, 0.3, 0.4], &bad).unwrap_err(), Error::NumericFault { step: 0 });
    let x = [0.1, 0.2, f32::NAN, 0.4, 0.5, 0.6];
    assert_eq!(lstm.run(&x, &LstmState::zeros(1, 3)).unwrap_err(), Error::NumericFault { step: 1 });
}

#[test]
fn hidden_output_is_bounded() {
    let lstm = random_lstm(3, 4, 6);
    let x: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 50.0).collect();
    let (y, st) = lstm.run(&x, &LstmState::zeros(1, 4)).unwrap();
    assert!(y.iter().all(|v| v.abs() < 1.0));
    assert!(st.is_finite());
}

#[test]
fn palindromic_input_with_tied_directions_is_mirrored() {
    let mut r = rng(7);
    let mut bi = BiLstm::<f64>::zeros(2, 6);
    bi.init(&mut r);
    bi.bwd = bi.fwd.clone();
    let a = rand_tensor(&[2], -1.0, 1.0, &mut r);
    let b = rand_tensor(&[2], -1.0, 1.0, &mut r);
    let x = Tensor::concat(&[&a, &b, &a], 0).unwrap().reshape([3, 2]).unwrap();
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let y = bi.forward(&mut tape, xv).unwrap();
    let y = tape.value(y).data();
    for t in 0..3 {
        let fwd = &y[t * 6..t * 6 + 3];
        let bwd = &y[(2 - t) * 6 + 3..(2 - t) * 6 + 6];
        for (p, q) in fwd.iter().zip(bwd) {
            assert!((p - q).abs() < 1e-14);
        }
    }
}

#[test]
fn bidirectional_output_width_is_h() {
    let bi = BiLstm::<f32>::zeros(128, 256);
    assert_eq!(bi.output_size(), 256);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros([4, 128]));
    let y = bi.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), &[4, 256]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_weight_mean_is_centered() {
    // 100 000 draws from U(-1/sqrt(in), 1/sqrt(in)).
    let lin = Linear::<f64>::new(400, 250, &mut rng(8));
    let w = lin.weight.data();
    assert_eq!(w.len(), 100_000);
    let bound = 1.0 / 20.0;
    let sigma_mean = bound / 3f64.sqrt() / (w.len() as f64).sqrt();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 3.0 * sigma_mean, "{mean}");
    assert!(w.iter().all(|v| v.abs() <= bound));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_run_with_carry_equals_monolithic(seed in 0u64..1000, t in 2usize..12, split in 1usize..11) {
        let split = split.min(t - 1);
        let lstm = random_lstm(3, 5, seed);
        let x: Vec<f32> = rand_tensor(&[t, 3], -2.0, 2.0, &mut rng(seed + 1)).data().iter().map(|&v| v as f32).collect();
        let (full, fin) = lstm.run(&x, &LstmState::zeros(1, 5)).unwrap();
        let (a, mid) = lstm.run(&x[..split * 3], &LstmState::zeros(1, 5)).unwrap();
        let (b, end) = lstm.run(&x[split * 3..], &mid).unwrap();
        prop_assert_eq!([a, b].concat(), full);
        prop_assert_eq!(end, fin);
    }

    #[test]
    fn lstm_registry_count_matches_formula(i in 1usize..40, h in 1usize..40) {
        prop_assert_eq!(Lstm::<f32>::zeros(i, h).num_params(), Lstm::<f32>::expected_params(i, h));
    }
}
