//! Chunk-by-chunk causal inference with carried state.
//!
//! A chunk `j` spans samples `[j·P·R, j·P·R + (K-1)·R + L)` and is processed
//! as soon as its last sample arrives. After chunk `j`, every frame below
//! `(j+1)·P` and every sample below `(j+1)·P·R` has received all of its
//! overlap-add contributions, so those samples are emitted. The arithmetic
//! mirrors the offline forward pass operation for operation, which makes
//! streamed output bit-identical to offline output when no context cap is set.

use alloc::vec;
use alloc::vec::Vec;

use crate::dualpath::{BlockState, EnhancementNetwork, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hooks around the network computation of each chunk, e.g. for timing.
pub trait ChunkObserver {
    fn before_chunk(&mut self, _index: usize) {}
    fn after_chunk(&mut self, _index: usize) {}
}

/// Observer that does nothing.
pub struct NoObserver;

impl ChunkObserver for NoObserver {}

/// Number of windows `w` with `w·shift <= pos < w·shift + size` and `w < limit`.
fn coverage(pos: usize, size: usize, shift: usize, limit: usize) -> usize {
    let hi = (pos / shift).min(limit.saturating_sub(1));
    let lo = if pos + 1 >= size { (pos + 1 - size).div_ceil(shift) } else { 0 };
    if limit == 0 || lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

pub struct StreamEngine<'n, S: Scalar> {
    net: &'n EnhancementNetwork<S>,
    states: Vec<BlockState<S>>,
    /// Pending input samples, starting at absolute index `in_base`.
    input: Vec<S>,
    in_base: usize,
    pushed: usize,
    next_chunk: usize,
    /// Frame sums, starting at absolute frame `frame_base`.
    frame_sum: Vec<S>,
    frame_base: usize,
    /// Sample sums, starting at absolute sample `emitted`.
    sample_sum: Vec<S>,
    emitted: usize,
    closed: bool,
}

impl<'n, S: Scalar> StreamEngine<'n, S> {
    /// Fails for non-causal networks.
    pub fn new(net: &'n EnhancementNetwork<S>) -> Result<Self> {
        let states = net.stream_state()?;
        Ok(Self {
            net,
            states,
            input: Vec::new(),
            in_base: 0,
            pushed: 0,
            next_chunk: 0,
            frame_sum: Vec::new(),
            frame_base: 0,
            sample_sum: Vec::new(),
            emitted: 0,
            closed: false,
        })
    }

    fn cfg(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn chunks_processed(&self) -> usize {
        self.next_chunk
    }

    pub fn samples_pushed(&self) -> usize {
        self.pushed
    }

    pub fn samples_emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Per-block carried state.
    pub fn states(&self) -> &[BlockState<S>] {
        &self.states
    }

    /// Largest attention context held by any position of any block.
    pub fn max_context_len(&self) -> usize {
        let n = self.cfg().width;
        self.states
            .iter()
            .flat_map(|s| (0..s.cache.rows.len()).map(move |b| s.cache.context_len(b, n)))
            .max()
            .unwrap_or(0)
    }

    /// Samples held in buffers, a proxy for steady-state memory use.
    pub fn buffered_len(&self) -> usize {
        self.input.len() + self.frame_sum.len() + self.sample_sum.len()
    }

    pub fn push(&mut self, samples: &[S]) -> Result<Vec<S>> {
        self.push_observed(samples, &mut NoObserver)
    }

    pub fn push_observed(&mut self, samples: &[S], obs: &mut dyn ChunkObserver) -> Result<Vec<S>> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.input.extend_from_slice(samples);
        self.pushed += samples.len();
        let (span, hop) = (self.cfg().chunk_samples(), self.cfg().chunk_hop_samples());
        let (p, r) = (self.cfg().chunk_shift, self.cfg().frame_shift);
        let mut out = Vec::new();
        while self.next_chunk * hop + span <= self.pushed {
            let j = self.next_chunk;
            self.process_chunk(j, usize::MAX, obs)?;
            self.finalize_frames((j + 1) * p, usize::MAX, usize::MAX);
            out.extend(self.emit((j + 1) * p * r, usize::MAX));
            self.drop_input((j + 1) * hop);
        }
        Ok(out)
    }

    /// Completes the stream: pads the final chunks and emits the remaining
    /// samples so that the total output length equals the input length.
    pub fn flush(&mut self) -> Result<Vec<S>> {
        self.flush_observed(&mut NoObserver)
    }

    pub fn flush_observed(&mut self, obs: &mut dyn ChunkObserver) -> Result<Vec<S>> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.closed = true;
        let m = self.pushed;
        if m == 0 {
            return Ok(Vec::new());
        }
        let t = self.cfg().num_frames(m);
        let j_total = self.cfg().num_chunks(t);
        while self.next_chunk < j_total {
            let j = self.next_chunk;
            self.process_chunk(j, t, obs)?;
        }
        self.finalize_frames(t, j_total, m);
        Ok(self.emit(m, t))
    }

    fn sample(&self, idx: usize) -> S {
        if idx >= self.in_base && idx - self.in_base < self.input.len() {
            self.input[idx - self.in_base]
        } else {
            S::ZERO
        }
    }

    /// Builds, runs and accumulates chunk `j`. Frames at or beyond
    /// `frame_limit` are zero and their outputs discarded.
    fn process_chunk(&mut self, j: usize, frame_limit: usize, obs: &mut dyn ChunkObserver) -> Result<()> {
        let c = self.cfg().clone();
        let (k, l, r) = (c.chunk_len, c.frame_len, c.frame_shift);
        let first = j * c.chunk_shift;
        let chunk = Tensor::from_fn([k, l], |i| {
            let frame = first + i / l;
            if frame < frame_limit {
                self.sample(frame * r + i % l)
            } else {
                S::ZERO
            }
        });
        obs.before_chunk(j);
        let y = self.net.step_chunk(&chunk, &mut self.states)?;
        obs.after_chunk(j);
        let need = (first + k - self.frame_base) * l;
        if self.frame_sum.len() < need {
            self.frame_sum.resize(need, S::ZERO);
        }
        for kk in 0..k {
            let frame = first + kk;
            if frame >= frame_limit {
                break;
            }
            let off = (frame - self.frame_base) * l;
            for (d, &v) in self.frame_sum[off..off + l].iter_mut().zip(&y.data()[kk * l..(kk + 1) * l]) {
                *d += v;
            }
        }
        self.next_chunk += 1;
        Ok(())
    }

    /// Normalises frames below `upto` and overlap-adds them into the sample sums.
    fn finalize_frames(&mut self, upto: usize, chunk_limit: usize, sample_limit: usize) {
        let c = self.cfg().clone();
        let (l, r) = (c.frame_len, c.frame_shift);
        while self.frame_base < upto {
            let t = self.frame_base;
            let inv = S::ONE / S::from_usize(coverage(t, c.chunk_len, c.chunk_shift, chunk_limit));
            let start = t * r;
            let need = (start + l).min(sample_limit) - self.emitted;
            if self.sample_sum.len() < need {
                self.sample_sum.resize(need, S::ZERO);
            }
            for i in 0..l {
                let s = start + i;
                if s >= sample_limit {
                    break;
                }
                self.sample_sum[s - self.emitted] += self.frame_sum[i] * inv;
            }
            self.frame_sum.drain(..l.min(self.frame_sum.len()));
            self.frame_base += 1;
        }
    }

    fn emit(&mut self, upto: usize, frame_limit: usize) -> Vec<S> {
        let c = self.cfg().clone();
        let n = upto - self.emitted;
        let mut out = vec![S::ZERO; n];
        for (i, o) in out.iter_mut().enumerate() {
            let s = self.emitted + i;
            let inv = S::ONE / S::from_usize(coverage(s, c.frame_len, c.frame_shift, frame_limit));
            *o = self.sample_sum[i] * inv;
        }
        self.sample_sum.drain(..n);
        self.emitted = upto;
        out
    }

    fn drop_input(&mut self, before: usize) {
        if before > self.in_base {
            let n = (before - self.in_base).min(self.input.len());
            self.input.drain(..n);
            self.in_base += n;
        }
    }
}
