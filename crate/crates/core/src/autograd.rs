//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in creation order, so the tape is always
//! topologically sorted. [`Tape::backward`] replays the backward rules in
//! reverse and accumulates gradients additively. Operations whose inputs do
//! not require gradients record nothing beyond their value.

use alloc::borrow::Cow;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::activation;
use crate::fft::Fft;
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::{swap_axes_12, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, value gates recomputed from their trainable vectors.
    Train,
    /// Dropout off, frozen value gates.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Gelu,
    Exp,
    Ln,
    Abs,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How an operand of a broadcasting op maps onto the output index space.
#[derive(Clone, Debug)]
enum Layout {
    Same,
    Scalar,
    /// Operand repeats every `n` output elements.
    Suffix(usize),
    Map(Vec<usize>),
}

impl Layout {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Scalar => 0,
            Layout::Suffix(n) => i % n,
            Layout::Map(m) => m[i],
        }
    }
}

struct LstmSaved<S> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    batch: usize,
    steps: usize,
    hidden: usize,
    input: usize,
    gates: Vec<S>,
    cells: Vec<S>,
    h0: Vec<S>,
    c0: Vec<S>,
}

enum Op<S> {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var, la: Layout, lb: Layout },
    Unary { kind: Unary, a: Var },
    Scale { a: Var, c: S },
    SumAll { a: Var },
    SumLast { a: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax { a: Var },
    CausalMask { a: Var, offset: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Lstm(Box<LstmSaved<S>>),
    Transpose12 { a: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { a: Var },
    Dropout { a: Var, mask: Vec<S> },
    OverlapAdd { a: Var, chunks: usize, len: usize, feat: usize, shift: usize, out_len: usize, inv_count: Vec<S> },
    StftMag { a: Var, window: usize, hop: usize, frames: usize, spectra: Vec<S> },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Final recurrent state returned by [`Tape::lstm`].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCarry<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

/// Records a computation over tensors and differentiates it.
///
/// Parameters are borrowed for the lifetime of the tape rather than copied.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Vec<S>>>,
    params: BTreeMap<usize, Var>,
    mode: Mode,
    track_params: bool,
    backward_done: bool,
    rng: ChaCha8Rng,
}

fn dims_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

fn layout_for(out: &[usize], inp: &[usize]) -> Layout {
    let on: usize = out.iter().product();
    let inn: usize = inp.iter().product();
    if inn == on {
        return Layout::Same;
    }
    if inn == 1 {
        return Layout::Scalar;
    }
    let mut stripped = inp;
    while stripped.len() > 1 && stripped[0] == 1 {
        stripped = &stripped[1..];
    }
    if out.ends_with(stripped) {
        return Layout::Suffix(inn);
    }
    // General right-aligned broadcast.
    let r = out.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        let d = if i + inp.len() >= r { inp[i + inp.len() - r] } else { 1 };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let mut map = Vec::with_capacity(on);
    let mut idx = vec![0usize; r];
    for _ in 0..on {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Layout::Map(map)
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let m = shape[r - 2];
    let n = shape[r - 1];
    (shape[..r - 2].iter().product(), m, n)
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: Vec<S>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += *b),
        None => *slot = Some(contrib),
    }
}

fn hann<S: Scalar>(n: usize) -> Vec<S> {
    let tau = 2.0 * core::f64::consts::PI / n as f64;
    (0..n).map(|i| S::from_f64(0.5 - 0.5 * libm::cos(tau * i as f64))).collect()
}

/// Number of windows of `size` taken every `shift` from `len` items,
/// with the tail zero-padded: `ceil(max(len - size, 0) / shift) + 1`.
pub fn window_count(len: usize, size: usize, shift: usize) -> usize {
    len.saturating_sub(size).div_ceil(shift) + 1
}

/// One row of softmax in place. Fails when the row has no finite entry.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) -> bool {
    let mut max = S::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return false;
    }
    row.iter_mut().for_each(|v| *v -= max);
    activation::exp(row);
    let mut sum = S::ZERO;
    for &v in row.iter() {
        sum += v;
    }
    let inv = S::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

impl<'a, S: Scalar> Tape<'a, S> {
    /// New tape. With `track_params` set, parameters registered through
    /// [`Tape::param`] require gradients.
    pub fn new(mode: Mode, track_params: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            mode,
            track_params,
            backward_done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Gradient-free evaluation tape.
    pub fn inference() -> Self {
        Self::new(Mode::Eval, false)
    }

    /// Seeds the generator used by dropout.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), op, requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_owned(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a borrowed parameter; repeated registration returns the same handle.
    pub fn param(&mut self, p: &'a Tensor<S>) -> Var {
        let key = p as *const Tensor<S> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(p), Op::Leaf, self.track_params);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient with respect to a parameter registered through [`Tape::param`].
    pub fn param_grad(&self, p: &Tensor<S>) -> Option<&[S]> {
        let key = p as *const Tensor<S> as usize;
        self.params.get(&key).and_then(|&v| self.grad(v))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| dims_err("broadcast", sa, sb))?;
        let la = layout_for(&out_shape, sa);
        let lb = layout_for(&out_shape, sb);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<S> = match (&la, &lb) {
            (Layout::Same, Layout::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Layout::Same, Layout::Suffix(m)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in da.chunks_exact(*m) {
                    out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => (0..n).map(|i| f(da[la.index(i)], db[lb.index(i)])).collect(),
        };
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_owned(value, Op::Binary { kind, a, b, la, lb }, rg))
    }

    /// Broadcasting addition (numpy-style, right-aligned).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let d = value.data_mut();
        match kind {
            Unary::Sigmoid => activation::sigmoid(d),
            Unary::Tanh => activation::tanh(d),
            Unary::Gelu => activation::gelu(d),
            Unary::Exp => activation::exp(d),
            Unary::Ln => d.iter_mut().for_each(|x| *x = x.ln()),
            Unary::Abs => d.iter_mut().for_each(|x| *x = x.abs()),
            Unary::Sqrt => d.iter_mut().for_each(|x| *x = x.sqrt()),
        }
        let rg = self.rg(&[a]);
        self.push_owned(value, Op::Unary { kind, a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push_owned(value, Op::Scale { a, c }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push_owned(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, S::ONE / S::from_usize(n))
    }

    /// Sums over the last dimension: `[.., N] -> [..]` (rank 1 gives `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let data: Vec<S> = t.data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        self.push_owned(Tensor::new(shape, data).expect("sum_last shape"), Op::SumLast { a }, rg)
    }

    // ---- linear algebra -----------------------------------------------

    /// `x·Wᵀ + b` over the last dimension of `x`. `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(dims_err("linear", sx, sw));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.value(b).numel() != out {
                return Err(dims_err("linear bias", sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut data = vec![S::ZERO; rows * out];
        gemm_nt(rows, out, inp, self.value(x).data(), inp, self.value(w).data(), inp, &mut data, out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in data.chunks_exact_mut(out) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push_owned(Tensor::new(shape, data)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over the last two dimensions. With `trans_b`,
    /// computes `a·bᵀ`. Leading (batch) dimensions must match exactly.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dims_err("matmul", sa, sb));
        }
        let (batch, m, k) = split_last2(sa);
        let (_, b0, b1) = split_last2(sb);
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if kb != k {
            return Err(dims_err("matmul", sa, sb));
        }
        let mut data = vec![S::ZERO; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let (ao, bo, co) = (i * m * k, i * k * n, i * m * n);
            let c = &mut data[co..co + m * n];
            if trans_b {
                gemm_nt(m, n, k, &da[ao..], k, &db[bo..], k, c, n, false);
            } else {
                gemm_nn(m, n, k, &da[ao..], k, &db[bo..], n, c, n, false);
            }
        }
        let mut shape = sa.to_vec();
        let r = shape.len();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push_owned(Tensor::new(shape, data)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    // ---- normalisation and attention helpers ---------------------------

    /// Softmax over the last dimension. `-inf` entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.last_dim();
        for (r, row) in value.data_mut().chunks_exact_mut(n).enumerate() {
            if !softmax_row(row) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push_owned(value, Op::Softmax { a }, rg))
    }

    /// Sets logits `[.., Tq, Tk]` at key positions `j > offset + i` to `-inf`.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let mut value = self.value(a).clone();
        if value.rank() < 2 {
            return Err(Error::Rank { op: "causal_mask", expected: 2, shape: value.shape().to_vec() });
        }
        let (_, tq, tk) = split_last2(value.shape());
        for mat in value.data_mut().chunks_exact_mut(tq * tk) {
            for i in 0..tq {
                for j in (offset + i + 1).min(tk)..tk {
                    mat[i * tk + j] = S::NEG_INFINITY;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push_owned(value, Op::CausalMask { a, offset }, rg))
    }

    /// Layer normalisation over the last dimension with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(dims_err("layer_norm", sx, self.shape(gain)));
        }
        if eps < S::ZERO || (eps == S::ZERO && n == 1) {
            return Err(Error::DivisionByZero);
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / n;
        let inv_n = S::ONE / S::from_usize(n);
        let mut xhat = vec![S::ZERO; xd.len()];
        let mut rstd = vec![S::ZERO; rows];
        let mut out = vec![S::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * g[i] + b[i];
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let op = if rg { Op::LayerNorm { x, gain, bias, xhat, rstd } } else { Op::Leaf };
        Ok(self.push_owned(value, op, rg))
    }

    /// Runs an LSTM over `x: [.., T, in]`, treating every leading index as an
    /// independent sequence. Gate layout in the `4H` dimension is
    /// input, forget, cell candidate, output. `init` gives `(h0, c0)` with
    /// `batch·H` entries each; zeros otherwise. With `reverse`, time runs
    /// from the last step to the first and outputs stay aligned with inputs.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        init: Option<&LstmCarry<S>>,
        reverse: bool,
    ) -> Result<(Var, LstmCarry<S>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Rank { op: "lstm", expected: 2, shape: sx });
        }
        let (batch, steps, input) = split_last2(&sx);
        let swih = self.shape(w_ih);
        let g4 = swih[0];
        let hidden = g4 / 4;
        if swih.len() != 2 || swih[1] != input || !g4.is_multiple_of(4) {
            return Err(dims_err("lstm input weights", &sx, swih));
        }
        if self.shape(w_hh) != [g4, hidden] || self.value(bias).numel() != g4 {
            return Err(dims_err("lstm recurrent weights", swih, self.shape(w_hh)));
        }
        let (h0, c0) = match init {
            Some(s) => {
                if s.h.len() != batch * hidden || s.c.len() != batch * hidden {
                    return Err(dims_err("lstm state", &[batch, hidden], &[s.h.len()]));
                }
                (s.h.clone(), s.c.clone())
            }
            None => (vec![S::ZERO; batch * hidden], vec![S::ZERO; batch * hidden]),
        };

        let xd = self.value(x).data();
        let wih = self.value(w_ih).data();
        let whh = self.value(w_hh).data();
        let bd = self.value(bias).data();
        let rows = batch * steps;
        let mut gates = vec![S::ZERO; rows * g4];
        gemm_nt(rows, g4, input, xd, input, wih, input, &mut gates, g4, false);
        for row in gates.chunks_exact_mut(g4) {
            row.iter_mut().zip(bd).for_each(|(v, &b)| *v += b);
        }
        let mut cells = vec![S::ZERO; rows * hidden];
        let mut out = vec![S::ZERO; rows * hidden];
        let mut h = h0.clone();
        let mut c = c0.clone();
        let mut rec = vec![S::ZERO; batch * g4];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            gemm_nt(batch, g4, hidden, &h, hidden, whh, hidden, &mut rec, g4, false);
            let mut finite = true;
            for bi in 0..batch {
                let row = (bi * steps + t) * g4;
                let z = &mut gates[row..row + g4];
                let r = &rec[bi * g4..(bi + 1) * g4];
                for (zv, &rv) in z.iter_mut().zip(r) {
                    *zv += rv;
                }
                let (zi, rest) = z.split_at_mut(hidden);
                let (zf, rest) = rest.split_at_mut(hidden);
                let (zg, zo) = rest.split_at_mut(hidden);
                activation::sigmoid(zi);
                activation::sigmoid(zf);
                activation::tanh(zg);
                activation::sigmoid(zo);
                let hb = &mut h[bi * hidden..(bi + 1) * hidden];
                let cb = &mut c[bi * hidden..(bi + 1) * hidden];
                let orow = (bi * steps + t) * hidden;
                for j in 0..hidden {
                    cb[j] = zf[j] * cb[j] + zi[j] * zg[j];
                    hb[j] = cb[j];
                }
                activation::tanh(hb);
                for j in 0..hidden {
                    hb[j] = zo[j] * hb[j];
                    finite &= cb[j].is_finite() && hb[j].is_finite();
                }
                cells[orow..orow + hidden].copy_from_slice(cb);
                out[orow..orow + hidden].copy_from_slice(hb);
            }
            if !finite {
                return Err(Error::NumericFault { step: s });
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = hidden;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, w_ih, w_hh, bias]);
        let op = if rg {
            Op::Lstm(Box::new(LstmSaved {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                batch,
                steps,
                hidden,
                input,
                gates,
                cells,
                h0,
                c0,
            }))
        } else {
            Op::Leaf
        };
        let var = self.push_owned(value, op, rg);
        Ok((var, LstmCarry { h, c }))
    }

    // ---- shape manipulation --------------------------------------------

    /// Swaps the third-to-last and second-to-last axes.
    pub fn transpose_12(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose_12()?;
        let rg = self.rg(&[a]);
        Ok(self.push_owned(value, Op::Transpose12 { a }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&ts, axis)?;
        let rg = self.rg(xs);
        Ok(self.push_owned(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty)?;
        let axis = self.value(first).rank() - 1;
        self.concat(xs, axis)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push_owned(value, Op::Reshape { a }, rg))
    }

    /// Inverted dropout: active only in [`Mode::Train`] with `p > 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<S> = (0..n).map(|_| if self.rng.random::<f64>() < p { S::ZERO } else { keep }).collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("dropout shape");
        let rg = self.rg(&[a]);
        self.push_owned(value, Op::Dropout { a, mask }, rg)
    }

    /// Overlap-add of `x: [.., chunks, len, feat]` with hop `shift` into
    /// `[.., out_len, feat]`, dividing each position by its number of
    /// contributing entries. Positions at or beyond `out_len` are dropped.
    pub fn overlap_add(&mut self, x: Var, shift: usize, out_len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(Error::Rank { op: "overlap_add", expected: 3, shape: sx });
        }
        let r = sx.len();
        let (chunks, len, feat) = (sx[r - 3], sx[r - 2], sx[r - 1]);
        if shift == 0 || shift > len {
            return Err(Error::Geometry(alloc::format!("shift {shift} with window {len}")));
        }
        let mut count = vec![0usize; out_len];
        for j in 0..chunks {
            for k in 0..len {
                let t = j * shift + k;
                if t < out_len {
                    count[t] += 1;
                }
            }
        }
        if let Some(t) = count.iter().position(|&c| c == 0) {
            return Err(Error::Geometry(alloc::format!(
                "position {t} of {out_len} not covered by {chunks} windows of {len} every {shift}"
            )));
        }
        let inv_count: Vec<S> = count.iter().map(|&c| S::ONE / S::from_usize(c)).collect();
        let outer: usize = sx[..r - 3].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![S::ZERO; outer * out_len * feat];
        for o in 0..outer {
            let src = &xd[o * chunks * len * feat..(o + 1) * chunks * len * feat];
            let dst = &mut out[o * out_len * feat..(o + 1) * out_len * feat];
            for j in 0..chunks {
                for k in 0..len {
                    let t = j * shift + k;
                    if t >= out_len {
                        break;
                    }
                    let s = &src[(j * len + k) * feat..(j * len + k + 1) * feat];
                    dst[t * feat..(t + 1) * feat].iter_mut().zip(s).for_each(|(d, &v)| *d += v);
                }
            }
            for t in 0..out_len {
                dst[t * feat..(t + 1) * feat].iter_mut().for_each(|d| *d *= inv_count[t]);
            }
        }
        let mut shape = sx[..r - 3].to_vec();
        shape.push(out_len);
        shape.push(feat);
        let rg = self.rg(&[x]);
        Ok(self.push_owned(
            Tensor::new(shape, out)?,
            Op::OverlapAdd { a: x, chunks, len, feat, shift, out_len, inv_count },
            rg,
        ))
    }

    /// Magnitude spectrogram of `x: [.., M]` with a periodic Hann window of
    /// `window` samples (a power of two) and hop `hop`, giving
    /// `[.., frames, window/2 + 1]`. The tail is zero-padded.
    pub fn stft_magnitude(&mut self, x: Var, window: usize, hop: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if !window.is_power_of_two() || hop == 0 {
            return Err(Error::Geometry(alloc::format!("stft window {window} hop {hop}")));
        }
        let m = *sx.last().unwrap();
        let frames = window_count(m, window, hop);
        let bins = window / 2 + 1;
        let outer = self.value(x).numel() / m;
        let fft = Fft::<S>::new(window);
        let win = hann::<S>(window);
        let xd = self.value(x).data();
        let mut spectra = vec![S::ZERO; outer * frames * bins * 2];
        let mut mag = vec![S::ZERO; outer * frames * bins];
        let mut re = vec![S::ZERO; window];
        let mut im = vec![S::ZERO; window];
        for o in 0..outer {
            let sig = &xd[o * m..(o + 1) * m];
            for f in 0..frames {
                let start = f * hop;
                for n in 0..window {
                    re[n] = if start + n < m { sig[start + n] * win[n] } else { S::ZERO };
                    im[n] = S::ZERO;
                }
                fft.process(&mut re, &mut im, false);
                let base = (o * frames + f) * bins;
                for k in 0..bins {
                    spectra[(base + k) * 2] = re[k];
                    spectra[(base + k) * 2 + 1] = im[k];
                    mag[base + k] = (re[k] * re[k] + im[k] * im[k]).sqrt();
                }
            }
        }
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(frames);
        shape.push(bins);
        let rg = self.rg(&[x]);
        Ok(self.push_owned(Tensor::new(shape, mag)?, Op::StftMag { a: x, window, hop, frames, spectra }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a scalar `loss`, populating gradients of every
    /// node that requires one. A tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank { op: "backward", expected: 0, shape: lv.shape().to_vec() });
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedLoss);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, v: Var, contrib: Vec<S>) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut self.grads[v.0], contrib);
        }
    }

    fn backward_node(&mut self, idx: usize, g: &[S]) {
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, la, lb } => {
                let (a, b) = (*a, *b);
                let da = self.value(a).data();
                let db = self.value(b).data();
                let want_a = self.requires_grad(a);
                let want_b = self.requires_grad(b);
                let mut ga = vec![S::ZERO; if want_a { da.len() } else { 0 }];
                let mut gb = vec![S::ZERO; if want_b { db.len() } else { 0 }];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (la.index(i), lb.index(i));
                    let (x, y) = (da[ia], db[ib]);
                    let (pa, pb) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                    };
                    if want_a {
                        ga[ia] += pa;
                    }
                    if want_b {
                        gb[ib] += pb;
                    }
                }
                if want_a {
                    self.send(a, ga);
                }
                if want_b {
                    self.send(b, gb);
                }
            }
            Op::Unary { kind: Unary::Gelu, a } => {
                let mut d = self.value(*a).data().to_vec();
                activation::gelu_grad(&mut d);
                d.iter_mut().zip(g).for_each(|(v, &gi)| *v *= gi);
                self.send(*a, d);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = self.nodes[idx].value.data();
                let contrib = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xv, &yv))| {
                        gi * match kind {
                            Unary::Sigmoid => yv * (S::ONE - yv),
                            Unary::Tanh => S::ONE - yv * yv,
                            Unary::Gelu => unreachable!("handled above"),
                            Unary::Exp => yv,
                            Unary::Ln => S::ONE / xv,
                            Unary::Abs => {
                                if xv > S::ZERO {
                                    S::ONE
                                } else if xv < S::ZERO {
                                    -S::ONE
                                } else {
                                    S::ZERO
                                }
                            }
                            Unary::Sqrt => S::from_f64(0.5) / yv,
                        }
                    })
                    .collect();
                self.send(*a, contrib);
            }
            Op::Scale { a, c } => {
                let contrib = g.iter().map(|&v| v * *c).collect();
                self.send(*a, contrib);
            }
            Op::SumAll { a } => {
                let n = self.value(*a).numel();
                self.send(*a, vec![g[0]; n]);
            }
            Op::SumLast { a } => {
                let n = self.value(*a).last_dim();
                let contrib = g.iter().flat_map(|&v| core::iter::repeat_n(v, n)).collect();
                self.send(*a, contrib);
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let sw = self.shape(w);
                let (out, inp) = (sw[0], sw[1]);
                let rows = g.len() / out;
                if self.requires_grad(x) {
                    let mut dx = vec![S::ZERO; rows * inp];
                    gemm_nn(rows, inp, out, g, out, self.value(w).data(), inp, &mut dx, inp, false);
                    self.send(x, dx);
                }
                if self.requires_grad(w) {
                    let mut dw = vec![S::ZERO; out * inp];
                    gemm_tn(out, inp, rows, g, out, self.value(x).data(), inp, &mut dw, inp, false);
                    self.send(w, dw);
                }
                if let Some(b) = *b {
                    if self.requires_grad(b) {
                        let mut db = vec![S::ZERO; out];
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        self.send(b, db);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (*a, *b);
                let (batch, m, k) = split_last2(self.shape(a));
                let n = g.len() / (batch * m);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let mut ga_out = None;
                let mut gb_out = None;
                if self.requires_grad(a) {
                    let mut ga = vec![S::ZERO; batch * m * k];
                    for i in 0..batch {
                        let (go, bo, ao) = (i * m * n, i * k * n, i * m * k);
                        let dst = &mut ga[ao..ao + m * k];
                        if *trans_b {
                            // C = A·Bᵀ, B: [n, k] -> dA = dC·B
                            gemm_nn(m, k, n, &g[go..], n, &db[bo..], k, dst, k, false);
                        } else {
                            // C = A·B, B: [k, n] -> dA = dC·Bᵀ
                            gemm_nt(m, k, n, &g[go..], n, &db[bo..], n, dst, k, false);
                        }
                    }
                    ga_out = Some(ga);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![S::ZERO; batch * k * n];
                    for i in 0..batch {
                        let (go, bo, ao) = (i * m * n, i * k * n, i * m * k);
                        let dst = &mut gb[bo..bo + k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ·A
                            gemm_tn(n, k, m, &g[go..], n, &da[ao..], k, dst, k, false);
                        } else {
                            // dB[k, n] = Aᵀ·dC
                            gemm_tn(k, n, m, &da[ao..], k, &g[go..], n, dst, n, false);
                        }
                    }
                    gb_out = Some(gb);
                }
                if let Some(ga) = ga_out {
                    self.send(a, ga);
                }
                if let Some(gb) = gb_out {
                    self.send(b, gb);
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.last_dim();
                let mut dx = vec![S::ZERO; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let dotp: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dotp);
                    }
                }
                self.send(*a, dx);
            }
            Op::CausalMask { a, offset } => {
                let (_, tq, tk) = split_last2(self.shape(*a));
                let mut dx = g.to_vec();
                for mat in dx.chunks_exact_mut(tq * tk) {
                    for i in 0..tq {
                        for j in (offset + i + 1).min(tk)..tk {
                            mat[i * tk + j] = S::ZERO;
                        }
                    }
                }
                self.send(*a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                let rows = rstd.len();
                let inv_n = S::ONE / S::from_usize(n);
                if self.requires_grad(*x) {
                    let mut dx = vec![S::ZERO; rows * n];
                    let mut dxh = vec![S::ZERO; n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for i in 0..n {
                            dxh[i] = gr[i] * gd[i];
                        }
                        let m1 = dxh.iter().copied().sum::<S>() * inv_n;
                        let m2 = dxh.iter().zip(xr).map(|(&p, &q)| p * q).sum::<S>() * inv_n;
                        for i in 0..n {
                            dx[r * n + i] = rstd[r] * (dxh[i] - m1 - xr[i] * m2);
                        }
                    }
                    self.send(*x, dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![S::ZERO; n];
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for i in 0..n {
                            dg[i] += gr[i] * xr[i];
                        }
                    }
                    self.send(*gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![S::ZERO; n];
                    for gr in g.chunks_exact(n) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                    self.send(*bias, db);
                }
            }
            Op::Lstm(saved) => self.backward_lstm(idx, saved, g),
            Op::Transpose12 { a } => {
                let s = self.shape(*a);
                let r = s.len();
                let (p, q, f) = (s[r - 3], s[r - 2], s[r - 1]);
                let mut dx = vec![S::ZERO; g.len()];
                // Gradient has the transposed layout [.., q, p, f].
                swap_axes_12(g, &mut dx, q, p, f);
                self.send(*a, dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inners: Vec<usize> = xs.iter().map(|&v| self.shape(v)[*axis..].iter().product()).collect();
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (&v, &inner) in xs.iter().zip(&inners) {
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let s = o * total + offset;
                            dx.extend_from_slice(&g[s..s + inner]);
                        }
                        self.send(v, dx);
                    }
                    offset += inner;
                }
            }
            Op::Reshape { a } => self.send(*a, g.to_vec()),
            Op::Dropout { a, mask } => {
                let dx = g.iter().zip(mask).map(|(&v, &m)| v * m).collect();
                self.send(*a, dx);
            }
            Op::OverlapAdd { a, chunks, len, feat, shift, out_len, inv_count } => {
                let n = self.value(*a).numel();
                let block = chunks * len * feat;
                let outer = n / block;
                let mut dx = vec![S::ZERO; n];
                for o in 0..outer {
                    let src = &g[o * out_len * feat..(o + 1) * out_len * feat];
                    let dst = &mut dx[o * block..(o + 1) * block];
                    for j in 0..*chunks {
                        for k in 0..*len {
                            let t = j * shift + k;
                            if t >= *out_len {
                                break;
                            }
                            let d = &mut dst[(j * len + k) * feat..(j * len + k + 1) * feat];
                            d.iter_mut()
                                .zip(&src[t * feat..(t + 1) * feat])
                                .for_each(|(dv, &sv)| *dv = sv * inv_count[t]);
                        }
                    }
                }
                self.send(*a, dx);
            }
            Op::StftMag { a, window, hop, frames, spectra } => {
                let m = self.value(*a).last_dim();
                let n = self.value(*a).numel();
                let outer = n / m;
                let bins = window / 2 + 1;
                let fft = Fft::<S>::new(*window);
                let win = hann::<S>(*window);
                let mut dx = vec![S::ZERO; n];
                let mut re = vec![S::ZERO; *window];
                let mut im = vec![S::ZERO; *window];
                for o in 0..outer {
                    for f in 0..*frames {
                        let base = (o * frames + f) * bins;
                        re.iter_mut().for_each(|v| *v = S::ZERO);
                        im.iter_mut().for_each(|v| *v = S::ZERO);
                        for k in 0..bins {
                            let (xr, xi) = (spectra[(base + k) * 2], spectra[(base + k) * 2 + 1]);
                            let mag = (xr * xr + xi * xi).sqrt();
                            if mag > S::ZERO {
                                let w = g[base + k] / mag;
                                re[k] = w * xr;
                                im[k] = w * xi;
                            }
                        }
                        fft.process(&mut re, &mut im, true);
                        let start = f * hop;
                        for t in 0..*window {
                            if start + t < m {
                                dx[o * m + start + t] += re[t] * win[t];
                            }
                        }
                    }
                }
                self.send(*a, dx);
            }
        }
        self.nodes[idx].op = op;
    }

    fn backward_lstm(&mut self, idx: usize, s: &LstmSaved<S>, g: &[S]) {
        let (batch, steps, hidden, input) = (s.batch, s.steps, s.hidden, s.input);
        let g4 = 4 * hidden;
        let rows = batch * steps;
        let y = self.nodes[idx].value.data();
        let whh = self.value(s.w_hh).data();
        let order = |k: usize| if s.reverse { steps - 1 - k } else { k };
        let mut dz = vec![S::ZERO; rows * g4];
        let mut hprev = vec![S::ZERO; rows * hidden];
        let mut dh_next = vec![S::ZERO; batch * hidden];
        let mut dc_next = vec![S::ZERO; batch * hidden];
        let mut tcs = vec![S::ZERO; hidden];
        for k in (0..steps).rev() {
            let t = order(k);
            for bi in 0..batch {
                let row = bi * steps + t;
                let (cp, hp): (&[S], &[S]) = if k == 0 {
                    (&s.c0[bi * hidden..(bi + 1) * hidden], &s.h0[bi * hidden..(bi + 1) * hidden])
                } else {
                    let pr = bi * steps + order(k - 1);
                    (&s.cells[pr * hidden..(pr + 1) * hidden], &y[pr * hidden..(pr + 1) * hidden])
                };
                hprev[row * hidden..(row + 1) * hidden].copy_from_slice(hp);
                let gt = &s.gates[row * g4..(row + 1) * g4];
                let ct = &s.cells[row * hidden..(row + 1) * hidden];
                let dzr = &mut dz[row * g4..(row + 1) * g4];
                tcs.copy_from_slice(ct);
                activation::tanh(&mut tcs);
                for j in 0..hidden {
                    let (ig, fg, gg, og) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                    let dh = g[row * hidden + j] + dh_next[bi * hidden + j];
                    let tc = tcs[j];
                    let d_o = dh * tc;
                    let dc = dh * og * (S::ONE - tc * tc) + dc_next[bi * hidden + j];
                    dc_next[bi * hidden + j] = dc * fg;
                    dzr[j] = dc * gg * ig * (S::ONE - ig);
                    dzr[hidden + j] = dc * cp[j] * fg * (S::ONE - fg);
                    dzr[2 * hidden + j] = dc * ig * (S::ONE - gg * gg);
                    dzr[3 * hidden + j] = d_o * og * (S::ONE - og);
                }
            }
            // dh_{t-1} = dz_t · W_hh; rows for step t are strided by steps·4H.
            gemm_nn(batch, hidden, g4, &dz[t * g4..], steps * g4, whh, hidden, &mut dh_next, hidden, false);
        }
        if self.requires_grad(s.w_hh) {
            let mut dw = vec![S::ZERO; g4 * hidden];
            gemm_tn(g4, hidden, rows, &dz, g4, &hprev, hidden, &mut dw, hidden, false);
            self.send(s.w_hh, dw);
        }
        if self.requires_grad(s.w_ih) {
            let mut dw = vec![S::ZERO; g4 * input];
            gemm_tn(g4, input, rows, &dz, g4, self.value(s.x).data(), input, &mut dw, input, false);
            self.send(s.w_ih, dw);
        }
        if self.requires_grad(s.bias) {
            let mut db = vec![S::ZERO; g4];
            for r in dz.chunks_exact(g4) {
                db.iter_mut().zip(r).for_each(|(d, &v)| *d += v);
            }
            self.send(s.bias, db);
        }
        if self.requires_grad(s.x) {
            let mut dx = vec![S::ZERO; rows * input];
            gemm_nn(rows, input, g4, &dz, g4, self.value(s.w_ih).data(), input, &mut dx, input, false);
            self.send(s.x, dx);
        }
    }
}

/// Global L2 norm of a gradient set and the factor `min(1, max_norm / norm)`.
pub fn clip_scale<S: Scalar>(grads: &[&[S]], max_norm: f64) -> (f64, f64) {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v.to_f64() * v.to_f64()).sum();
    let norm = libm::sqrt(sq);
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    (norm, scale)
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the scale factor applied.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let views: Vec<&[S]> = grads.iter().map(|g| g.data()).collect();
    let (_, scale) = clip_scale(&views, max_norm);
    if scale < 1.0 {
        let s = S::from_f64(scale);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    scale
}
