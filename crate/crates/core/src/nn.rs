//! Parameterised layers: linear maps, layer normalisation and LSTMs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{LstmCarry, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recurrent state `(h, c)` of one or more LSTM sequences, laid out
/// sequence-major with `hidden` entries per sequence.
pub type LstmState<S> = LstmCarry<S>;

impl<S: Scalar> LstmCarry<S> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: vec![S::ZERO; batch * hidden], c: vec![S::ZERO; batch * hidden] }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// Visits named parameters in a fixed order.
///
/// The order defines checkpoint layout and the parameter vector used by the
/// optimizer, so implementations must never reorder fields.
pub trait Module<S: Scalar> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform<S: Scalar>(t: &mut Tensor<S>, bound: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = S::from_f64(rng.random_range(-bound..bound));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `[out, in]`
    pub weight: Tensor<S>,
    /// `[out]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros([output, input]), bias: Tensor::zeros([output]) }
    }

    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(input, output);
        l.init(rng);
        l
    }

    pub fn input_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Uniform in `±1/√in` for weight and bias.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / libm::sqrt(self.input_size() as f64);
        uniform(&mut self.weight, bound, rng);
        uniform(&mut self.bias, bound, rng);
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, Some(b))
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(n: usize) -> Self {
        Self { gain: Tensor::full([n], S::ONE), bias: Tensor::zeros([n]) }
    }

    pub fn init(&mut self) {
        self.gain.data_mut().iter_mut().for_each(|v| *v = S::ONE);
        self.bias.data_mut().iter_mut().for_each(|v| *v = S::ZERO);
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, S::from_f64(LN_EPS))
    }
}

impl<S: Scalar> Module<S> for LayerNorm<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Single-layer LSTM with gates stacked as input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<S> {
    /// `[4H, in]`
    pub w_ih: Tensor<S>,
    /// `[4H, H]`
    pub w_hh: Tensor<S>,
    /// `[4H]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Lstm<S> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros([4 * hidden, input]),
            w_hh: Tensor::zeros([4 * hidden, hidden]),
            bias: Tensor::zeros([4 * hidden]),
        }
    }

    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(input, hidden);
        l.init(rng);
        l
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    /// `4·(in·H + H² + H)`.
    pub fn expected_params(input: usize, hidden: usize) -> usize {
        4 * (input * hidden + hidden * hidden + hidden)
    }

    /// Uniform in `±1/√H`, then the forget-gate bias set to one.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let h = self.hidden_size();
        let bound = 1.0 / libm::sqrt(h as f64);
        uniform(&mut self.w_ih, bound, rng);
        uniform(&mut self.w_hh, bound, rng);
        uniform(&mut self.bias, bound, rng);
        self.bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = S::ONE);
    }

    /// Runs the sequences in `x: [.., T, in]`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        init: Option<&LstmState<S>>,
        reverse: bool,
    ) -> Result<(Var, LstmState<S>)> {
        let s = tape.shape(x);
        if s.len() < 2 {
            return Err(Error::Rank { op: "lstm", expected: 2, shape: s.to_vec() });
        }
        if s[s.len() - 2] == 0 {
            return Err(Error::EmptySequence);
        }
        let wih = tape.param(&self.w_ih);
        let whh = tape.param(&self.w_hh);
        let b = tape.param(&self.bias);
        tape.lstm(x, wih, whh, b, init, reverse)
    }

    /// Whole single sequence `x: [T, in]` (flattened, row-major) without a tape.
    pub fn run(&self, x: &[S], init: &LstmState<S>) -> Result<(Vec<S>, LstmState<S>)> {
        let input = self.input_size();
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        if !x.len().is_multiple_of(input) {
            return Err(Error::LengthMismatch(x.len(), input));
        }
        let steps = x.len() / input;
        let mut tape = Tape::inference();
        let xv = tape.constant(Tensor::new([steps, input], x.to_vec())?);
        let (y, st) = self.forward(&mut tape, xv, Some(init), false)?;
        Ok((tape.value(y).data().to_vec(), st))
    }

    /// One time step for a batch of sequences: `x_t` holds `batch·in` values.
    pub fn step(&self, x_t: &[S], state: &LstmState<S>) -> Result<(Vec<S>, LstmState<S>)> {
        let input = self.input_size();
        let batch = state.h.len() / self.hidden_size();
        if x_t.len() != batch * input || state.c.len() != state.h.len() {
            return Err(Error::LengthMismatch(x_t.len(), batch * input));
        }
        let mut tape = Tape::inference();
        let xv = tape.constant(Tensor::new([batch, 1, input], x_t.to_vec())?);
        let (y, st) = self.forward(&mut tape, xv, Some(state), false)?;
        Ok((tape.value(y).data().to_vec(), st))
    }
}

impl<S: Scalar> Module<S> for Lstm<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Two LSTMs of `H/2` units, one reading forward and one backward in time;
/// outputs are concatenated as `[forward, backward]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm<S> {
    pub fwd: Lstm<S>,
    pub bwd: Lstm<S>,
}

impl<S: Scalar> BiLstm<S> {
    /// `hidden` is the concatenated output width and must be even.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { fwd: Lstm::zeros(input, hidden / 2), bwd: Lstm::zeros(input, hidden / 2) }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.fwd.init(rng);
        self.bwd.init(rng);
    }

    pub fn output_size(&self) -> usize {
        self.fwd.hidden_size() + self.bwd.hidden_size()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var) -> Result<Var> {
        let (f, _) = self.fwd.forward(tape, x, None, false)?;
        let (b, _) = self.bwd.forward(tape, x, None, true)?;
        tape.concat_last(&[f, b])
    }
}

impl<S: Scalar> Module<S> for BiLstm<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
    }
}

/// Recurrent layer of a SARNN block.
#[derive(Clone, Debug, PartialEq)]
pub enum Rnn<S> {
    Uni(Lstm<S>),
    Bi(BiLstm<S>),
}

impl<S: Scalar> Rnn<S> {
    pub fn output_size(&self) -> usize {
        match self {
            Rnn::Uni(l) => l.hidden_size(),
            Rnn::Bi(b) => b.output_size(),
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        matches!(self, Rnn::Bi(_))
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Rnn::Uni(l) => l.init(rng),
            Rnn::Bi(b) => b.init(rng),
        }
    }

    /// Returns the final state for the unidirectional case.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        init: Option<&LstmState<S>>,
    ) -> Result<(Var, Option<LstmState<S>>)> {
        match self {
            Rnn::Uni(l) => {
                let (y, st) = l.forward(tape, x, init, false)?;
                Ok((y, Some(st)))
            }
            Rnn::Bi(b) => {
                if init.is_some() {
                    return Err(Error::StateOnBidirectional);
                }
                Ok((b.forward(tape, x)?, None))
            }
        }
    }
}

impl<S: Scalar> Module<S> for Rnn<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        match self {
            Rnn::Uni(l) => l.visit(prefix, f),
            Rnn::Bi(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            Rnn::Uni(l) => l.visit_mut(prefix, f),
            Rnn::Bi(b) => b.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_hand_example() {
        let l = Linear::<f64> {
            weight: Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(),
            bias: Tensor::new([1], vec![0.5]).unwrap(),
        };
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = l.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);
        let bad = tape.constant(Tensor::zeros([3]));
        assert!(l.forward(&mut tape, bad).is_err());
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let l = Lstm::<f64>::zeros(3, 4);
        let x: Vec<f64> = (0..15).map(|i| i as f64 - 7.0).collect();
        let (y, st) = l.run(&x, &LstmState::zeros(1, 4)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(st.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_param_count_matches_formula() {
        for &(i, h) in &[(1, 1), (8, 16), (128, 128), (128, 256)] {
            assert_eq!(Lstm::<f32>::zeros(i, h).num_params(), Lstm::<f32>::expected_params(i, h));
        }
    }

    #[test]
    fn forget_bias_is_one_and_init_is_reproducible() {
        let a = Lstm::<f64>::new(5, 6, &mut rng(9));
        let b = Lstm::<f64>::new(5, 6, &mut rng(9));
        assert_eq!(a, b);
        assert!(a.bias.data()[6..12].iter().all(|&v| v == 1.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.w_hh.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn state_on_bidirectional_is_rejected() {
        let r = Rnn::Bi(BiLstm::<f64>::zeros(2, 4));
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([3, 2]));
        let st = LstmState::zeros(1, 2);
        assert_eq!(r.forward(&mut tape, x, Some(&st)).unwrap_err(), Error::StateOnBidirectional);
    }
}
