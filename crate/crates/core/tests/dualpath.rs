mod common;

use common::{rand_tensor, rng};
use dpsarnn_core::dualpath::{
    chunk_frames, frames_from_signal, ola_chunks, ola_frames, param_count, DpSarnnBlock, EnhancementNetwork,
    ModelConfig,
};
use dpsarnn_core::nn::Module;
use dpsarnn_core::sarnn::{SarnnBlock, SarnnSpec};
use dpsarnn_core::{Error, Mode, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn seq(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64).collect()
}

#[test]
fn framing_examples() {
    let x = seq(16);
    let f = frames_from_signal(&x, 16, 8).unwrap();
    assert_eq!(f.shape(), &[1, 16]);
    assert_eq!(f.data(), &x[..]);

    let x = seq(24);
    let f = frames_from_signal(&x, 16, 8).unwrap();
    assert_eq!(f.shape(), &[2, 16]);
    assert_eq!(&f.data()[16..], &x[8..24]);

    let x = vec![0.0f64; 64_000];
    assert_eq!(frames_from_signal(&x, 16, 8).unwrap().shape()[0], 7999);
    assert!(frames_from_signal(&x, 0, 8).is_err());
    assert!(frames_from_signal::<f64>(&[], 16, 8).is_err());
}

#[test]
fn chunking_examples() {
    let frames = Tensor::new([5, 1], seq(5)).unwrap();
    let g = chunk_frames(&frames, 3, 2).unwrap();
    assert_eq!(g.data.shape(), &[2, 3, 1]);
    assert_eq!(g.data.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
    assert_eq!(g.pad_frames, 0);

    let frames = Tensor::new([4, 1], seq(4)).unwrap();
    let g = chunk_frames(&frames, 3, 2).unwrap();
    assert_eq!(g.data.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 0.0]);
    assert_eq!(g.pad_frames, 1);

    let frames = Tensor::<f64>::zeros([7999, 1]);
    let g = chunk_frames(&frames, 63, 31).unwrap();
    assert_eq!(g.num_chunks(), 257);
    assert_eq!(g.pad_frames, 0);
}

#[test]
fn constant_chunks_give_constant_output() {
    let g = Tensor::full([4, 5, 3], 2.5f64);
    let f = ola_chunks(&g, 11, 2).unwrap();
    assert!(f.data().iter().all(|&v| v == 2.5));
    assert!(ola_chunks(&g, 20, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_and_chunk_roundtrips_are_exact(
        size in 1usize..40, shift_frac in 0.0f64..1.0, len in 1usize..300, feat in 1usize..4, seed in 0u64..1000,
    ) {
        let shift = 1 + ((size - 1) as f64 * shift_frac) as usize;
        let mut r = rng(seed);
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = frames_from_signal(&x, size, shift).unwrap();
        let y = ola_frames(&f, len, shift).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let frames = rand_tensor(&[len, feat], -1.0, 1.0, &mut r);
        let g = chunk_frames(&frames, size, shift).unwrap();
        let back = ola_chunks(&g.data, len, shift).unwrap();
        for (a, b) in frames.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn toy_cfg(causal: bool) -> ModelConfig {
    let base = if causal { ModelConfig::paper_causal() } else { ModelConfig::paper_noncausal() };
    ModelConfig { width: 8, hidden: 8, blocks: 3, chunk_len: 5, chunk_shift: 2, dropout: 0.0, ..base }
}

#[test]
fn dp_block_preserves_shape_and_handles_single_chunk() {
    let cfg = toy_cfg(true);
    let mut net = EnhancementNetwork::<f64>::new(&cfg, 1).unwrap();
    net.freeze();
    let blk = &net.blocks[0];
    let x = rand_tensor(&[4, 5, 8], -1.0, 1.0, &mut rng(2));
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let y = blk.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(y), &[4, 5, 8]);

    // J = 1: the inter block sees length-1 sequences.
    let x1 = rand_tensor(&[1, 5, 8], -1.0, 1.0, &mut rng(3));
    let xv = tape.constant(x1);
    let y = blk.forward(&mut tape, xv).unwrap();
    let (h, _) = blk.intra.forward(&mut tape, xv, None).unwrap();
    let h = tape.reshape(h, &[5, 1, 8]).unwrap();
    let (want, _) = blk.inter.forward(&mut tape, h, None).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(want).data());
}

#[test]
fn causal_dp_block_ignores_later_chunks() {
    let cfg = toy_cfg(true);
    let mut net = EnhancementNetwork::<f32>::new(&cfg, 4).unwrap();
    net.freeze();
    let blk = &net.blocks[1];
    let x = rand_tensor(&[6, 5, 8], -1.0, 1.0, &mut rng(5)).cast::<f32>();
    let run = |blk: &DpSarnnBlock<f32>, x: Tensor<f32>| {
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let y = blk.forward(&mut tape, xv).unwrap();
        tape.value(y).clone()
    };
    let base = run(blk, x.clone());
    for j in 0..5 {
        let mut p = x.clone();
        p.data_mut()[(j + 1) * 40..].iter_mut().for_each(|v| *v = -*v * 2.0);
        let y = run(blk, p);
        for i in 0..(j + 1) * 40 {
            assert!((y.data()[i] - base.data()[i]).abs() <= 1e-6);
        }
    }
}

#[test]
fn dense_connectivity_widths() {
    let net = EnhancementNetwork::<f32>::zeros(&ModelConfig::paper_causal()).unwrap();
    assert_eq!(net.proj.len(), 5);
    for (i, p) in net.proj.iter().enumerate() {
        assert_eq!(p.input_size(), (i + 2) * 128);
        assert_eq!(p.output_size(), 128);
    }
    assert_eq!(net.lin_in.input_size(), 16);
    assert_eq!(net.lin_out.output_size(), 16);
}

#[test]
fn full_causal_parameter_budget() {
    let n = param_count(&ModelConfig::paper_causal()).unwrap() as f64;
    assert!((n - 6.49e6).abs() / 6.49e6 <= 0.10, "{n}");
    let intra = SarnnBlock::<f32>::zeros(SarnnSpec {
        width: 128,
        hidden: 256,
        bidirectional: true,
        causal: false,
        attention: true,
        dropout_p: 0.05,
    });
    assert_eq!(intra.num_params(), 478_720);
}

#[test]
fn output_length_matches_input() {
    let cfg = ModelConfig { width: 8, hidden: 8, blocks: 1, ..ModelConfig::paper_causal() };
    let mut net = EnhancementNetwork::<f32>::new(&cfg, 6).unwrap();
    net.freeze();
    for m in [512, 64_000] {
        let x: Vec<f32> = (0..m).map(|i| ((i * 37) % 101) as f32 / 101.0 - 0.5).collect();
        assert_eq!(net.enhance(&x).unwrap().len(), m);
    }
    assert_eq!(net.enhance(&[0.0; 15]).unwrap_err(), Error::TooShort { len: 15, frame: 16 });
}

#[test]
fn network_is_causal_at_chunk_granularity() {
    let cfg = toy_cfg(true);
    let mut net = EnhancementNetwork::<f32>::new(&cfg, 7).unwrap();
    net.freeze();
    let hop = cfg.chunk_hop_samples();
    let span = cfg.chunk_samples();
    let mut r = rng(8);
    let x: Vec<f32> = (0..400).map(|_| r.random_range(-0.5..0.5)).collect();
    let base = net.enhance(&x).unwrap();
    for j in 0..8 {
        let mut p = x.clone();
        for v in &mut p[(j * hop + span).min(400)..] {
            *v += r.random_range(-1.0..1.0);
        }
        let y = net.enhance(&p).unwrap();
        for i in 0..((j + 1) * hop).min(400) {
            assert!((y[i] - base[i]).abs() <= 1e-6, "j={j} i={i}");
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = toy_cfg(false);
    let a = EnhancementNetwork::<f32>::new(&cfg, 42).unwrap();
    let b = EnhancementNetwork::<f32>::new(&cfg, 42).unwrap();
    let c = EnhancementNetwork::<f32>::new(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let names: Vec<String> = a.named_params().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n == "blocks.2.inter.attn.qprime"));
    assert!(names.iter().any(|n| n == "proj.2.weight"));
    let forget = a.named_params().into_iter().find(|(n, _)| n == "blocks.0.intra.rnn.fwd.bias").unwrap().1;
    assert!(forget.data()[4..8].iter().all(|&v| v == 1.0));
}

#[test]
fn network_gradients_flow_to_every_parameter() {
    let cfg = ModelConfig { dropout: 0.05, ..toy_cfg(true) };
    let net = EnhancementNetwork::<f64>::new(&cfg, 9).unwrap();
    let x = rand_tensor(&[2, 120], -0.5, 0.5, &mut rng(10));
    let mut tape = Tape::new(Mode::Train, true).with_seed(1);
    let y = net.forward(&mut tape, &x).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    for (name, p) in net.named_params() {
        let g = tape.param_grad(p).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn offline_enhancement_matches_single_tape_forward_bitwise() {
    for causal in [true, false] {
        let cfg = toy_cfg(causal);
        let mut net = EnhancementNetwork::<f32>::new(&cfg, 31).unwrap();
        net.freeze();
        let mut r = rng(32);
        let x: Vec<f32> = (0..3001).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut tape = Tape::inference();
        let y = net.forward(&mut tape, &Tensor::new([x.len()], x.clone()).unwrap()).unwrap();
        assert_eq!(net.enhance(&x).unwrap(), tape.value(y).data(), "causal={causal}");
    }
}
