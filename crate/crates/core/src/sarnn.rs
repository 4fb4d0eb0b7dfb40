//! The self-attention RNN block: layer-normed RNN, gated single-headed
//! attention and a GELU feedforward network joined by residual connections.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_row, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt};
use crate::nn::{join, BiLstm, LayerNorm, Linear, Lstm, LstmState, Module, Rnn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gated attention. The three trainable vectors are stored as `[1, N]` rows
/// and broadcast over time.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<S> {
    pub qprime: Tensor<S>,
    pub kprime: Tensor<S>,
    pub vprime: Tensor<S>,
    pub lin_q: Linear<S>,
    pub lin_v1: Linear<S>,
    pub lin_v2: Linear<S>,
    pub frozen_v_gate: Option<Tensor<S>>,
    pub causal: bool,
}

/// Query, key and value after gating, each `[.., T, N]`.
pub struct Projected {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl<S: Scalar> AttentionBlock<S> {
    pub fn zeros(n: usize, causal: bool) -> Self {
        Self {
            qprime: Tensor::zeros([1, n]),
            kprime: Tensor::zeros([1, n]),
            vprime: Tensor::zeros([1, n]),
            lin_q: Linear::zeros(n, n),
            lin_v1: Linear::zeros(n, n),
            lin_v2: Linear::zeros(n, n),
            frozen_v_gate: None,
            causal,
        }
    }

    pub fn width(&self) -> usize {
        self.qprime.numel()
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for t in [&mut self.qprime, &mut self.kprime, &mut self.vprime] {
            t.data_mut().iter_mut().for_each(|v| *v = S::ZERO);
        }
        self.lin_q.init(rng);
        self.lin_v1.init(rng);
        self.lin_v2.init(rng);
        self.frozen_v_gate = None;
    }

    fn v_gate<'a>(&'a self, tape: &mut Tape<'a, S>) -> Result<Var> {
        match tape.mode() {
            Mode::Train => {
                let vp = tape.param(&self.vprime);
                let a = self.lin_v1.forward(tape, vp)?;
                let a = tape.sigmoid(a);
                let b = self.lin_v2.forward(tape, vp)?;
                let b = tape.tanh(b);
                tape.mul(a, b)
            }
            Mode::Eval => {
                let g = self.frozen_v_gate.as_ref().ok_or(Error::FreezeRequired)?;
                Ok(tape.param(g))
            }
        }
    }

    /// Stores the value gate so evaluation no longer depends on `lin_v1`/`lin_v2`.
    pub fn freeze_v_gate(&mut self) {
        let gate = {
            let mut tape = Tape::new(Mode::Train, false);
            let g = self.v_gate(&mut tape).expect("value gate shapes are fixed at construction");
            tape.value(g).clone()
        };
        self.frozen_v_gate = Some(gate);
    }

    pub fn project<'a>(&'a self, tape: &mut Tape<'a, S>, q: Var, kv: Var) -> Result<Projected> {
        if tape.shape(q) != tape.shape(kv) {
            return Err(Error::Dimension { op: "attention", lhs: tape.shape(q).to_vec(), rhs: tape.shape(kv).to_vec() });
        }
        let qp = tape.param(&self.qprime);
        let qg = tape.sigmoid(qp);
        let lq = self.lin_q.forward(tape, q)?;
        let qr = tape.mul(lq, qg)?;
        let kp = tape.param(&self.kprime);
        let kg = tape.sigmoid(kp);
        let kr = tape.mul(kv, kg)?;
        let vg = self.v_gate(tape)?;
        let vr = tape.mul(kv, vg)?;
        Ok(Projected { q: qr, k: kr, v: vr })
    }

    fn scale(&self) -> S {
        S::from_f64(1.0 / libm::sqrt(self.width() as f64))
    }

    /// Both gates applied outside the products: the logits are
    /// `(q_r ⊙ k_gate)·kvᵀ` and the output is `(W·kv) ⊙ v_gate`, equal to
    /// `q_r·k_rᵀ` and `W·v_r`. Only the ungated `kv` rows need caching.
    fn factored<'a>(&'a self, tape: &mut Tape<'a, S>, q: Var, kv: Var) -> Result<(Var, Var)> {
        if tape.shape(q) != tape.shape(kv) {
            return Err(Error::Dimension { op: "attention", lhs: tape.shape(q).to_vec(), rhs: tape.shape(kv).to_vec() });
        }
        let qp = tape.param(&self.qprime);
        let qg = tape.sigmoid(qp);
        let lq = self.lin_q.forward(tape, q)?;
        let qr = tape.mul(lq, qg)?;
        let kp = tape.param(&self.kprime);
        let kg = tape.sigmoid(kp);
        let qk = tape.mul(qr, kg)?;
        let vg = self.v_gate(tape)?;
        Ok((qk, vg))
    }

    /// Attention output together with the weight matrices `[.., T, T]`.
    pub fn forward_with_weights<'a>(&'a self, tape: &mut Tape<'a, S>, q: Var, kv: Var) -> Result<(Var, Var)> {
        let (qk, vg) = self.factored(tape, q, kv)?;
        let logits = tape.matmul_ex(qk, kv, true)?;
        let mut logits = tape.scale(logits, self.scale());
        if self.causal {
            logits = tape.causal_mask(logits, 0)?;
        }
        let w = tape.softmax_rows(logits)?;
        let mixed = tape.matmul(w, kv)?;
        Ok((tape.mul(mixed, vg)?, w))
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, q: Var, kv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, q, kv)?.0)
    }

    /// Incremental causal attention for one new time step of `B` independent
    /// sequences, `q` and `kv` of shape `[B, 1, N]`. The new `kv` rows are
    /// appended to `cache` before attending over it.
    pub fn attend_cached<'a>(&'a self, tape: &mut Tape<'a, S>, q: Var, kv: Var, cache: &mut KvCache<S>) -> Result<Var> {
        let n = self.width();
        let (qk, vg) = self.factored(tape, q, kv)?;
        let (qd, kd) = (tape.value(qk).data(), tape.value(kv).data());
        let batch = qd.len() / n;
        if cache.rows.len() != batch {
            return Err(Error::LengthMismatch(cache.rows.len(), batch));
        }
        let scale = self.scale();
        let mut out = vec![S::ZERO; batch * n];
        let mut w = Vec::new();
        for b in 0..batch {
            let rows = &mut cache.rows[b];
            rows.extend_from_slice(&kd[b * n..(b + 1) * n]);
            if let Some(cap) = cache.max_context {
                let len = rows.len() / n;
                if len > cap {
                    rows.drain(..(len - cap) * n);
                }
            }
            let ctx = rows.len() / n;
            w.clear();
            w.resize(ctx, S::ZERO);
            gemm_nt(1, ctx, n, &qd[b * n..(b + 1) * n], n, rows, n, &mut w, ctx, false);
            w.iter_mut().for_each(|v| *v *= scale);
            if !softmax_row(&mut w) {
                return Err(Error::DegenerateRow { row: b });
            }
            gemm_nn(1, n, ctx, &w, ctx, rows, n, &mut out[b * n..(b + 1) * n], n, false);
        }
        let shape = tape.shape(qk).to_vec();
        let mixed = tape.constant(Tensor::new(shape, out)?);
        tape.mul(mixed, vg)
    }
}

impl<S: Scalar> Module<S> for AttentionBlock<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        f(join(prefix, "qprime"), &self.qprime);
        f(join(prefix, "kprime"), &self.kprime);
        f(join(prefix, "vprime"), &self.vprime);
        self.lin_q.visit(&join(prefix, "lin_q"), f);
        self.lin_v1.visit(&join(prefix, "lin_v1"), f);
        self.lin_v2.visit(&join(prefix, "lin_v2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "qprime"), &mut self.qprime);
        f(join(prefix, "kprime"), &mut self.kprime);
        f(join(prefix, "vprime"), &mut self.vprime);
        self.lin_q.visit_mut(&join(prefix, "lin_q"), f);
        self.lin_v1.visit_mut(&join(prefix, "lin_v1"), f);
        self.lin_v2.visit_mut(&join(prefix, "lin_v2"), f);
    }
}

/// Cached ungated key/value rows per independent sequence, oldest first.
/// Keys and values differ only by their gate vectors, so one row serves both.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<S> {
    pub rows: Vec<Vec<S>>,
    pub max_context: Option<usize>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(batch: usize, max_context: Option<usize>) -> Self {
        Self { rows: vec![Vec::new(); batch], max_context }
    }

    /// Number of cached rows for sequence `b`.
    pub fn context_len(&self, b: usize, width: usize) -> usize {
        self.rows[b].len() / width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<S> {
    pub ln: LayerNorm<S>,
    pub lin1: Linear<S>,
    pub lin2: Linear<S>,
    pub dropout_p: f64,
}

impl<S: Scalar> FeedForward<S> {
    /// Hidden layer of width `4n`.
    pub fn zeros(n: usize, dropout_p: f64) -> Self {
        Self { ln: LayerNorm::new(n), lin1: Linear::zeros(n, 4 * n), lin2: Linear::zeros(4 * n, n), dropout_p }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.ln.init();
        self.lin1.init(rng);
        self.lin2.init(rng);
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var) -> Result<Var> {
        let h = self.ln.forward(tape, x)?;
        let h = self.lin1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout_p);
        self.lin2.forward(tape, h)
    }
}

impl<S: Scalar> Module<S> for FeedForward<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        self.ln.visit(&join(prefix, "ln"), f);
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.lin1.visit_mut(&join(prefix, "lin1"), f);
        self.lin2.visit_mut(&join(prefix, "lin2"), f);
    }
}

/// Attention and feedforward stages; absent in the attention-free ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStage<S> {
    pub ln_q: LayerNorm<S>,
    pub ln_kv: LayerNorm<S>,
    pub attn: AttentionBlock<S>,
    pub ff: FeedForward<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SarnnBlock<S> {
    pub ln_in: LayerNorm<S>,
    pub rnn: Rnn<S>,
    pub lin_rnn: Linear<S>,
    pub stage: Option<AttentionStage<S>>,
}

/// Construction parameters for a [`SarnnBlock`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SarnnSpec {
    pub width: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub causal: bool,
    pub attention: bool,
    pub dropout_p: f64,
}

impl<S: Scalar> SarnnBlock<S> {
    /// All-zero parameters apart from unit layer-norm gains.
    pub fn zeros(spec: SarnnSpec) -> Self {
        let n = spec.width;
        let rnn = if spec.bidirectional {
            Rnn::Bi(BiLstm::zeros(n, spec.hidden))
        } else {
            Rnn::Uni(Lstm::zeros(n, spec.hidden))
        };
        let stage = spec.attention.then(|| AttentionStage {
            ln_q: LayerNorm::new(n),
            ln_kv: LayerNorm::new(n),
            attn: AttentionBlock::zeros(n, spec.causal),
            ff: FeedForward::zeros(n, spec.dropout_p),
        });
        Self { ln_in: LayerNorm::new(n), lin_rnn: Linear::zeros(rnn.output_size(), n), rnn, stage }
    }

    pub fn new(spec: SarnnSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(spec);
        b.init(rng);
        b
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.ln_in.init();
        self.rnn.init(rng);
        self.lin_rnn.init(rng);
        if let Some(s) = &mut self.stage {
            s.ln_q.init();
            s.ln_kv.init();
            s.attn.init(rng);
            s.ff.init(rng);
        }
    }

    pub fn width(&self) -> usize {
        self.lin_rnn.output_size()
    }

    pub fn freeze(&mut self) {
        if let Some(s) = &mut self.stage {
            s.attn.freeze_v_gate();
        }
    }

    /// Processes `x: [.., T, N]`. `init` is accepted only by unidirectional
    /// blocks; the final recurrent state is returned for those.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        init: Option<&LstmState<S>>,
    ) -> Result<(Var, Option<LstmState<S>>)> {
        self.forward_inner(tape, x, init, None)
    }

    /// One time step `x: [B, 1, N]` of a causal unidirectional block, with
    /// recurrent state and attention cache carried across calls.
    pub fn step<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        state: &LstmState<S>,
        cache: &mut KvCache<S>,
    ) -> Result<(Var, LstmState<S>)> {
        if self.rnn.is_bidirectional() {
            return Err(Error::StateOnBidirectional);
        }
        let (y, st) = self.forward_inner(tape, x, Some(state), Some(cache))?;
        Ok((y, st.expect("unidirectional blocks return state")))
    }

    fn forward_inner<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        init: Option<&LstmState<S>>,
        cache: Option<&mut KvCache<S>>,
    ) -> Result<(Var, Option<LstmState<S>>)> {
        let h = self.ln_in.forward(tape, x)?;
        let (h, state) = self.rnn.forward(tape, h, init)?;
        let y = self.lin_rnn.forward(tape, h)?;
        let Some(stage) = &self.stage else {
            return Ok((y, state));
        };
        let q = stage.ln_q.forward(tape, y)?;
        let kv = stage.ln_kv.forward(tape, y)?;
        let a = match cache {
            None => stage.attn.forward(tape, q, kv)?,
            Some(cache) => stage.attn.attend_cached(tape, q, kv, cache)?,
        };
        let z = tape.add(q, a)?;
        let f = stage.ff.forward(tape, z)?;
        Ok((tape.add(z, f)?, state))
    }
}

impl<S: Scalar> Module<S> for SarnnBlock<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        self.ln_in.visit(&join(prefix, "ln_in"), f);
        self.rnn.visit(&join(prefix, "rnn"), f);
        self.lin_rnn.visit(&join(prefix, "lin_rnn"), f);
        if let Some(s) = &self.stage {
            s.ln_q.visit(&join(prefix, "ln_q"), f);
            s.ln_kv.visit(&join(prefix, "ln_kv"), f);
            s.attn.visit(&join(prefix, "attn"), f);
            s.ff.visit(&join(prefix, "ff"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.ln_in.visit_mut(&join(prefix, "ln_in"), f);
        self.rnn.visit_mut(&join(prefix, "rnn"), f);
        self.lin_rnn.visit_mut(&join(prefix, "lin_rnn"), f);
        if let Some(s) = &mut self.stage {
            s.ln_q.visit_mut(&join(prefix, "ln_q"), f);
            s.ln_kv.visit_mut(&join(prefix, "ln_kv"), f);
            s.attn.visit_mut(&join(prefix, "attn"), f);
            s.ff.visit_mut(&join(prefix, "ff"), f);
        }
    }
}
