//! Framing, chunking, the dual-path block and the densely connected
//! enhancement network with overlap-add reconstruction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{window_count, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, LstmState, Module};
use crate::sarnn::{KvCache, SarnnBlock, SarnnSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Frame size L in samples.
    pub frame_len: usize,
    /// Frame shift R in samples.
    pub frame_shift: usize,
    /// Chunk length K in frames.
    pub chunk_len: usize,
    /// Chunk shift P in frames.
    pub chunk_shift: usize,
    /// Feature width N.
    pub width: usize,
    /// RNN hidden width H (split in halves for bidirectional layers).
    pub hidden: usize,
    pub blocks: usize,
    pub causal: bool,
    pub dropout: f64,
    /// `false` removes attention and feedforward stages from every block.
    pub attention: bool,
    /// Streaming cap on cached attention rows per position.
    pub max_context: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper_causal()
    }
}

impl ModelConfig {
    /// Causal configuration with 63-frame chunks.
    pub fn paper_causal() -> Self {
        Self {
            frame_len: 16,
            frame_shift: 8,
            chunk_len: 63,
            chunk_shift: 31,
            width: 128,
            hidden: 256,
            blocks: 6,
            causal: true,
            dropout: 0.05,
            attention: true,
            max_context: None,
        }
    }

    /// Non-causal configuration with 126-frame chunks.
    pub fn paper_noncausal() -> Self {
        Self { chunk_len: 126, chunk_shift: 63, causal: false, ..Self::paper_causal() }
    }

    /// Small model used for overfitting and unit-scale experiments.
    pub fn toy() -> Self {
        Self { width: 16, hidden: 16, blocks: 2, ..Self::paper_causal() }
    }

    /// Desk-scale enhancement model.
    pub fn reduced() -> Self {
        Self { width: 32, hidden: 64, blocks: 4, ..Self::paper_causal() }
    }

    /// Mid-size model for the real-time benchmark.
    pub fn realtime() -> Self {
        Self { width: 64, hidden: 128, blocks: 4, ..Self::paper_causal() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("frame_len", self.frame_len),
            ("frame_shift", self.frame_shift),
            ("chunk_len", self.chunk_len),
            ("chunk_shift", self.chunk_shift),
            ("width", self.width),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.frame_shift > self.frame_len {
            return bad(format!("frame_shift {} exceeds frame_len {}", self.frame_shift, self.frame_len));
        }
        if self.chunk_shift > self.chunk_len {
            return bad(format!("chunk_shift {} exceeds chunk_len {}", self.chunk_shift, self.chunk_len));
        }
        if !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden {} must be even for bidirectional layers", self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_context == Some(0) {
            return bad(String::from("max_context must be positive when set"));
        }
        Ok(())
    }

    /// Samples spanned by one chunk: `(K - 1)·R + L`.
    pub fn chunk_samples(&self) -> usize {
        (self.chunk_len - 1) * self.frame_shift + self.frame_len
    }

    /// Samples between consecutive chunks: `P·R`.
    pub fn chunk_hop_samples(&self) -> usize {
        self.chunk_shift * self.frame_shift
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        window_count(samples, self.frame_len, self.frame_shift)
    }

    pub fn num_chunks(&self, frames: usize) -> usize {
        window_count(frames, self.chunk_len, self.chunk_shift)
    }

    fn intra_spec(&self) -> SarnnSpec {
        SarnnSpec {
            width: self.width,
            hidden: self.hidden,
            bidirectional: true,
            causal: false,
            attention: self.attention,
            dropout_p: self.dropout,
        }
    }

    fn inter_spec(&self) -> SarnnSpec {
        SarnnSpec { bidirectional: !self.causal, causal: self.causal, ..self.intra_spec() }
    }
}

/// Splits `x` into `T` frames of `len` samples every `shift`, zero-padding the tail.
pub fn frames_from_signal<S: Scalar>(x: &[S], len: usize, shift: usize) -> Result<Tensor<S>> {
    if len == 0 || shift == 0 {
        return Err(Error::Config(format!("frame size {len} and shift {shift} must be positive")));
    }
    if x.is_empty() {
        return Err(Error::Empty);
    }
    let t = window_count(x.len(), len, shift);
    Ok(Tensor::from_fn([t, len], |i| {
        let s = (i / len) * shift + i % len;
        if s < x.len() {
            x[s]
        } else {
            S::ZERO
        }
    }))
}

/// Frames `[T, F]` grouped into `J` overlapping chunks of `K` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkGrid<S> {
    /// `[J, K, F]`
    pub data: Tensor<S>,
    pub frames: usize,
    pub pad_frames: usize,
}

impl<S: Scalar> ChunkGrid<S> {
    pub fn num_chunks(&self) -> usize {
        self.data.shape()[0]
    }
}

pub fn chunk_frames<S: Scalar>(frames: &Tensor<S>, len: usize, shift: usize) -> Result<ChunkGrid<S>> {
    if len == 0 || shift == 0 || shift > len {
        return Err(Error::Config(format!("chunk length {len} and shift {shift} need 1 <= shift <= length")));
    }
    if frames.rank() != 2 {
        return Err(Error::Rank { op: "chunk_frames", expected: 2, shape: frames.shape().to_vec() });
    }
    let (t, f) = (frames.shape()[0], frames.shape()[1]);
    let j = window_count(t, len, shift);
    let src = frames.data();
    let data = Tensor::from_fn([j, len, f], |i| {
        let frame = (i / (len * f)) * shift + (i / f) % len;
        if frame < t {
            src[frame * f + i % f]
        } else {
            S::ZERO
        }
    });
    Ok(ChunkGrid { data, frames: t, pad_frames: (j - 1) * shift + len - t })
}

/// Count-normalised overlap-add of chunks `[J, K, F]` back to `[T, F]`.
pub fn ola_chunks<S: Scalar>(grid: &Tensor<S>, frames: usize, shift: usize) -> Result<Tensor<S>> {
    let mut tape = Tape::inference();
    let g = tape.constant(grid.clone());
    let y = tape.overlap_add(g, shift, frames)?;
    Ok(tape.value(y).clone())
}

/// Count-normalised overlap-add of frames `[T, L]` back to `samples` values.
pub fn ola_frames<S: Scalar>(frames: &Tensor<S>, samples: usize, shift: usize) -> Result<Vec<S>> {
    if frames.rank() != 2 {
        return Err(Error::Rank { op: "ola_frames", expected: 2, shape: frames.shape().to_vec() });
    }
    let (t, l) = (frames.shape()[0], frames.shape()[1]);
    let mut tape = Tape::inference();
    let f = tape.constant(frames.clone().reshape([t, l, 1])?);
    let y = tape.overlap_add(f, shift, samples)?;
    Ok(tape.value(y).data().to_vec())
}

/// Intra-chunk SARNN followed by inter-chunk SARNN.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSarnnBlock<S> {
    pub intra: SarnnBlock<S>,
    pub inter: SarnnBlock<S>,
}

/// Carried inter-chunk state for one block: an LSTM state and an attention
/// cache for each of the `K` intra-chunk positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<S> {
    pub lstm: LstmState<S>,
    pub cache: KvCache<S>,
}

impl<S: Scalar> DpSarnnBlock<S> {
    /// `x: [.., J, K, N] -> [.., J, K, N]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var) -> Result<Var> {
        let (h, _) = self.intra.forward(tape, x, None)?;
        let h = tape.transpose_12(h)?;
        let (h, _) = self.inter.forward(tape, h, None)?;
        tape.transpose_12(h)
    }

    /// One chunk `x: [K, N]` with carried inter-chunk state (causal blocks only).
    pub fn step<'a>(&'a self, tape: &mut Tape<'a, S>, x: Var, state: &mut BlockState<S>) -> Result<Var> {
        if !self.inter.stage.as_ref().is_none_or(|s| s.attn.causal) || self.inter.rnn.is_bidirectional() {
            return Err(Error::StateOnNonCausal);
        }
        let (k, n) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, _) = self.intra.forward(tape, x, None)?;
        let h = tape.reshape(h, &[k, 1, n])?;
        let (h, lstm) = self.inter.step(tape, h, &state.lstm, &mut state.cache)?;
        state.lstm = lstm;
        tape.reshape(h, &[k, n])
    }
}

impl<S: Scalar> Module<S> for DpSarnnBlock<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        self.intra.visit(&join(prefix, "intra"), f);
        self.inter.visit(&join(prefix, "inter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.intra.visit_mut(&join(prefix, "intra"), f);
        self.inter.visit_mut(&join(prefix, "inter"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementNetwork<S> {
    pub config: ModelConfig,
    pub lin_in: Linear<S>,
    pub blocks: Vec<DpSarnnBlock<S>>,
    /// `proj[b - 1]` maps the `(b + 1)·N` wide concatenation feeding block `b` to `N`.
    pub proj: Vec<Linear<S>>,
    pub lin_out: Linear<S>,
}

impl<S: Scalar> EnhancementNetwork<S> {
    /// Zero-initialised network (layer-norm gains are one).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.width;
        let blocks = (0..config.blocks)
            .map(|_| DpSarnnBlock {
                intra: SarnnBlock::zeros(config.intra_spec()),
                inter: SarnnBlock::zeros(config.inter_spec()),
            })
            .collect();
        let proj = (1..config.blocks).map(|b| Linear::zeros((b + 1) * n, n)).collect();
        Ok(Self {
            config: config.clone(),
            lin_in: Linear::zeros(config.frame_len, n),
            blocks,
            proj,
            lin_out: Linear::zeros(n, config.frame_len),
        })
    }

    /// Randomly initialised network, reproducible by `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.init_params(seed);
        Ok(net)
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lin_in.init(&mut rng);
        for b in &mut self.blocks {
            b.intra.init(&mut rng);
            b.inter.init(&mut rng);
        }
        for p in &mut self.proj {
            p.init(&mut rng);
        }
        self.lin_out.init(&mut rng);
    }

    /// Stores the value gates of every attention block for evaluation.
    pub fn freeze(&mut self) {
        for b in &mut self.blocks {
            b.intra.freeze();
            b.inter.freeze();
        }
    }

    fn dense<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        x: Var,
        mut block: impl FnMut(&'a DpSarnnBlock<S>, &mut Tape<'a, S>, Var, usize) -> Result<Var>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.blocks.len() + 1);
        outs.push(self.lin_in.forward(tape, x)?);
        for (b, blk) in self.blocks.iter().enumerate() {
            let inp = if b == 0 {
                outs[0]
            } else {
                let cat = tape.concat_last(&outs)?;
                self.proj[b - 1].forward(tape, cat)?
            };
            let y = block(blk, tape, inp, b)?;
            outs.push(y);
        }
        self.lin_out.forward(tape, *outs.last().unwrap())
    }

    /// Maps chunked frames `[.., J, K, L]` to output frames of the same shape.
    pub fn forward_chunks<'a>(&'a self, tape: &mut Tape<'a, S>, chunks: Var) -> Result<Var> {
        self.dense(tape, chunks, |blk, tape, x, _| blk.forward(tape, x))
    }

    /// Frames and chunks each signal of a batch `[B, M]` into `[B, J, K, L]`,
    /// returning the grid and the frame count `T`.
    fn chunk_grid(&self, x: &Tensor<S>) -> Result<(Tensor<S>, usize)> {
        let c = &self.config;
        let m = x.last_dim();
        if m < c.frame_len {
            return Err(Error::TooShort { len: m, frame: c.frame_len });
        }
        let batch = x.numel() / m;
        let t = c.num_frames(m);
        let j = c.num_chunks(t);
        let mut grids = Vec::with_capacity(batch * j * c.chunk_len * c.frame_len);
        for sig in x.data().chunks_exact(m) {
            let frames = frames_from_signal(sig, c.frame_len, c.frame_shift)?;
            grids.extend_from_slice(chunk_frames(&frames, c.chunk_len, c.chunk_shift)?.data.data());
        }
        Ok((Tensor::new([batch, j, c.chunk_len, c.frame_len], grids)?, t))
    }

    /// Output frames `[B, J, K, L]` back to signals `[B, M]`.
    fn reconstruct<'a>(&self, tape: &mut Tape<'a, S>, y: Var, t: usize, m: usize) -> Result<Var> {
        let c = &self.config;
        let batch = tape.shape(y)[0];
        let f = tape.overlap_add(y, c.chunk_shift, t)?;
        let f = tape.reshape(f, &[batch, t, c.frame_len, 1])?;
        tape.overlap_add(f, c.frame_shift, m)
    }

    /// Enhances a batch of equal-length signals `[B, M]` (or a single `[M]`).
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, S>, x: &Tensor<S>) -> Result<Var> {
        let m = x.last_dim();
        let (grid, t) = self.chunk_grid(x)?;
        let g = tape.constant(grid);
        let y = self.forward_chunks(tape, g)?;
        let s = self.reconstruct(tape, y, t, m)?;
        let mut shape = x.shape().to_vec();
        if shape.is_empty() {
            shape.push(m);
        }
        tape.reshape(s, &shape)
    }

    /// Offline enhancement of one signal without gradients.
    ///
    /// Performs the same operations as [`EnhancementNetwork::forward`], so the
    /// result is identical, but evaluates each intra- and inter-chunk pass on
    /// its own tape. Only the block outputs are kept between passes, which
    /// bounds memory on long inputs.
    pub fn enhance(&self, x: &[S]) -> Result<Vec<S>> {
        fn pass<'a, S: Scalar>(
            inputs: &'a [Tensor<S>],
            f: impl FnOnce(&mut Tape<'a, S>, &[Var]) -> Result<Var>,
        ) -> Result<Tensor<S>> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
            let y = f(&mut tape, &vars)?;
            Ok(tape.value(y).clone())
        }
        let (grid, t) = self.chunk_grid(&Tensor::new([x.len()], x.to_vec())?)?;
        let mut outs = alloc::vec![pass(core::slice::from_ref(&grid), |tape, v| self.lin_in.forward(tape, v[0]))?];
        for (b, blk) in self.blocks.iter().enumerate() {
            let projected = match b {
                0 => None,
                _ => Some(pass(&outs, |tape, v| {
                    let cat = tape.concat_last(v)?;
                    self.proj[b - 1].forward(tape, cat)
                })?),
            };
            let inp = projected.as_ref().unwrap_or(&outs[0]);
            let h = pass(core::slice::from_ref(inp), |tape, v| {
                let (h, _) = blk.intra.forward(tape, v[0], None)?;
                tape.transpose_12(h)
            })?;
            let y = pass(core::slice::from_ref(&h), |tape, v| {
                let (h, _) = blk.inter.forward(tape, v[0], None)?;
                tape.transpose_12(h)
            })?;
            outs.push(y);
        }
        let s = pass(core::slice::from_ref(outs.last().unwrap()), |tape, v| {
            let y = self.lin_out.forward(tape, v[0])?;
            self.reconstruct(tape, y, t, x.len())
        })?;
        Ok(s.into_data())
    }

    /// Fresh per-block streaming state.
    pub fn stream_state(&self) -> Result<Vec<BlockState<S>>> {
        if !self.config.causal {
            return Err(Error::StreamingUnsupported);
        }
        let k = self.config.chunk_len;
        let h = self.config.hidden;
        Ok((0..self.blocks.len())
            .map(|_| BlockState { lstm: LstmState::zeros(k, h), cache: KvCache::new(k, self.config.max_context) })
            .collect())
    }

    /// Runs one chunk `[K, L]` of frames through a causal network, updating
    /// `state`, and returns the output frames `[K, L]`.
    pub fn step_chunk(&self, chunk: &Tensor<S>, state: &mut [BlockState<S>]) -> Result<Tensor<S>> {
        if !self.config.causal {
            return Err(Error::StreamingUnsupported);
        }
        if state.len() != self.blocks.len() {
            return Err(Error::LengthMismatch(state.len(), self.blocks.len()));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(chunk.clone());
        let y = self.dense(&mut tape, x, |blk, tape, x, b| blk.step(tape, x, &mut state[b]))?;
        Ok(tape.value(y).clone())
    }
}

impl<S: Scalar> Module<S> for EnhancementNetwork<S> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<S>)) {
        self.lin_in.visit(&join(prefix, "lin_in"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        for (i, p) in self.proj.iter().enumerate() {
            p.visit(&join(prefix, &format!("proj.{}", i + 1)), f);
        }
        self.lin_out.visit(&join(prefix, "lin_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.lin_in.visit_mut(&join(prefix, "lin_in"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        for (i, p) in self.proj.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("proj.{}", i + 1)), f);
        }
        self.lin_out.visit_mut(&join(prefix, "lin_out"), f);
    }
}

/// Exact trainable-parameter count of a configuration.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(EnhancementNetwork::<f32>::zeros(config)?.num_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_causal_parameter_count() {
        assert_eq!(param_count(&ModelConfig::paper_causal()).unwrap(), 6_863_632);
    }

    #[test]
    fn chunk_geometry_of_full_causal_config() {
        let c = ModelConfig::paper_causal();
        assert_eq!(c.chunk_samples(), 512);
        assert_eq!(c.chunk_hop_samples(), 248);
        assert_eq!(c.num_frames(64_000), 7999);
        assert_eq!(c.num_chunks(7999), 257);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let c = ModelConfig { frame_shift: 17, ..ModelConfig::paper_causal() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { chunk_shift: 0, ..ModelConfig::paper_causal() };
        assert!(c.validate().is_err());
        assert!(ModelConfig::paper_noncausal().validate().is_ok());
    }
}
