#![allow(dead_code)]

use dpsarnn_core::nn::Module;
use dpsarnn_core::{Mode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Module without parameters, for checks that only involve inputs.
#[derive(Clone)]
pub struct NoParams;

impl Module<f64> for NoParams {
    fn visit<'s>(&'s self, _: &str, _: &mut dyn FnMut(String, &'s Tensor<f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(String, &mut Tensor<f64>)) {}
}

/// Scalar objective `sum(out ⊙ R)` for a fixed pseudo-random `R`, so that
/// every output element contributes with a distinct weight.
fn objective<'a>(tape: &mut Tape<'a, f64>, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(0x5eed);
    let w = rand_tensor(&shape, -1.0, 1.0, &mut r);
    let wv = tape.constant(w);
    let p = tape.mul(out, wv).unwrap();
    tape.sum(p)
}

fn eval<M: Module<f64>>(
    m: &M,
    inputs: &[Tensor<f64>],
    f: &dyn for<'a> Fn(&'a M, &mut Tape<'a, f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new(Mode::Train, false).with_seed(7);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(m, &mut tape, &vars);
    let l = objective(&mut tape, out);
    tape.value(l).data()[0]
}

/// Maximum relative error between the analytic gradient and central finite
/// differences, over every parameter of `m` and every entry of `inputs`
/// listed in `diff_inputs`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// entries whose true gradient is essentially zero from amplifying
/// round-off.
pub fn max_rel_error<M: Module<f64> + Clone>(
    m: &M,
    inputs: &[Tensor<f64>],
    diff_inputs: &[usize],
    f: &dyn for<'a> Fn(&'a M, &mut Tape<'a, f64>, &[Var]) -> Var,
) -> f64 {
    const FLOOR: f64 = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);

    let mut tape = Tape::new(Mode::Train, true).with_seed(7);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(m, &mut tape, &vars);
    let l = objective(&mut tape, out);
    tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    // Parameters of the module.
    let named = m.named_params();
    let analytic: Vec<Vec<f64>> = named
        .iter()
        .map(|(_, t)| tape.param_grad(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for (pi, (_, t)) in named.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut idx = 0;
            plus.visit_mut("", &mut |_, t| {
                if idx == pi {
                    t.data_mut()[e] += STEP;
                }
                idx += 1;
            });
            idx = 0;
            minus.visit_mut("", &mut |_, t| {
                if idx == pi {
                    t.data_mut()[e] -= STEP;
                }
                idx += 1;
            });
            let n = (eval(&plus, inputs, f) - eval(&minus, inputs, f)) / (2.0 * STEP);
            worst = worst.max(rel(analytic[pi][e], n));
        }
    }
    for &ii in diff_inputs {
        let g = tape.grad(vars[ii]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[ii].numel()]);
        for e in 0..inputs[ii].numel() {
            let mut p = inputs.to_vec();
            p[ii].data_mut()[e] += STEP;
            let mut q = inputs.to_vec();
            q[ii].data_mut()[e] -= STEP;
            let n = (eval(m, &p, f) - eval(m, &q, f)) / (2.0 * STEP);
            worst = worst.max(rel(g[e], n));
        }
    }
    worst
}

/// Gradient check for an op over its inputs only.
pub fn op_error(inputs: &[Tensor<f64>], f: &dyn for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Var) -> f64 {
    let all: Vec<usize> = (0..inputs.len()).collect();
    max_rel_error(&NoParams, inputs, &all, &|_, t, v| f(t, v))
}
