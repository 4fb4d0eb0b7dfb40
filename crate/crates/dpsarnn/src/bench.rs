//! Per-chunk latency measurement of the streaming path.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{ensure, Result};
use dpsarnn_core::audio::{synth_noise, NoiseKind, SAMPLE_RATE};
use dpsarnn_core::dualpath::EnhancementNetwork;
use dpsarnn_core::stream::{ChunkObserver, StreamEngine};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reference mean time per chunk of the causal 6-block model on
/// [`REFERENCE_CPU`], in ms.
pub const REFERENCE_MEAN_MS: f64 = 7.9;
pub const REFERENCE_CPU: &str = "Xeon E5-2680 v4 @ 2.4 GHz";

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// Network computation per chunk.
    pub network_ms: Vec<f64>,
    /// Whole `push` call per chunk, including framing and overlap-add.
    pub total_ms: Vec<f64>,
    pub chunk_duration_ms: f64,
    pub chunk_shift_ms: f64,
    pub params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        if xs.is_empty() {
            return Stats { mean: 0.0, p95: 0.0, max: 0.0 };
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Stats { mean: v.iter().sum::<f64>() / v.len() as f64, p95: v[rank - 1], max: v[v.len() - 1] }
    }
}

impl LatencyReport {
    pub fn chunks(&self) -> usize {
        self.total_ms.len()
    }

    pub fn network(&self) -> Stats {
        Stats::of(&self.network_ms)
    }

    pub fn total(&self) -> Stats {
        Stats::of(&self.total_ms)
    }

    /// Mean and p95 of the full per-chunk time are both below the chunk shift.
    pub fn realtime_pass(&self) -> bool {
        let t = self.total();
        t.mean < self.chunk_shift_ms && t.p95 < self.chunk_shift_ms
    }

    pub fn machine_lines(&self) -> String {
        let (n, t) = (self.network(), self.total());
        let mut s = String::new();
        writeln!(s, "chunks={}", self.chunks()).unwrap();
        writeln!(s, "params={}", self.params).unwrap();
        writeln!(s, "chunk_duration_ms={}", self.chunk_duration_ms).unwrap();
        writeln!(s, "chunk_shift_ms={}", self.chunk_shift_ms).unwrap();
        writeln!(s, "mean_ms={:.4}", t.mean).unwrap();
        writeln!(s, "p95_ms={:.4}", t.p95).unwrap();
        writeln!(s, "max_ms={:.4}", t.max).unwrap();
        writeln!(s, "network_mean_ms={:.4}", n.mean).unwrap();
        writeln!(s, "network_p95_ms={:.4}", n.p95).unwrap();
        writeln!(s, "network_max_ms={:.4}", n.max).unwrap();
        writeln!(s, "reference_mean_ms={REFERENCE_MEAN_MS}").unwrap();
        writeln!(s, "realtime_pass={}", u8::from(self.realtime_pass())).unwrap();
        s
    }

    pub fn human(&self) -> String {
        let (n, t) = (self.network(), self.total());
        format!(
            "{} chunks of {:.0} ms every {:.1} ms, {} parameters\n\
             per chunk (total):   mean {:.3} ms  p95 {:.3} ms  max {:.3} ms\n\
             per chunk (network): mean {:.3} ms  p95 {:.3} ms  max {:.3} ms\n\
             reference: {REFERENCE_MEAN_MS} ms mean on {REFERENCE_CPU} (causal 6-block model)\n\
             real-time: {}\n",
            self.chunks(),
            self.chunk_duration_ms,
            self.chunk_shift_ms,
            self.params,
            t.mean,
            t.p95,
            t.max,
            n.mean,
            n.p95,
            n.max,
            if self.realtime_pass() { "PASS" } else { "FAIL" },
        )
    }
}

struct Timer {
    start: Option<Instant>,
    times: Vec<f64>,
}

impl ChunkObserver for Timer {
    fn before_chunk(&mut self, _: usize) {
        self.start = Some(Instant::now());
    }

    fn after_chunk(&mut self, _: usize) {
        if let Some(s) = self.start.take() {
            self.times.push(s.elapsed().as_secs_f64() * 1e3);
        }
    }
}

/// Streams `seconds` of seeded noise through `net` one chunk hop at a time.
/// The first `warmup` chunks are excluded, leaving
/// `floor(seconds·16000 / hop) − warmup` timed chunks.
pub fn bench(net: &EnhancementNetwork<f32>, seconds: f64, warmup: usize, seed: u64) -> Result<LatencyReport> {
    ensure!(seconds >= 1.0, "bench needs at least one second of audio");
    ensure!(warmup >= 1, "bench needs at least one warm-up chunk");
    let cfg = &net.config;
    let (span, hop) = (cfg.chunk_samples(), cfg.chunk_hop_samples());
    let chunks = (seconds * SAMPLE_RATE as f64 / hop as f64).floor() as usize;
    ensure!(chunks > warmup, "warm-up covers the whole run");
    let len = (chunks - 1) * hop + span;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = synth_noise(len, NoiseKind::White, &mut rng).into_iter().map(|v| (0.1 * v) as f32).collect();

    let mut engine = StreamEngine::new(net)?;
    let mut timer = Timer { start: None, times: Vec::with_capacity(chunks) };
    let mut total = Vec::with_capacity(chunks);
    let mut pos = 0;
    while pos < len {
        let n = if pos == 0 { span } else { hop };
        let t0 = Instant::now();
        let before = engine.chunks_processed();
        engine.push_observed(&noise[pos..pos + n], &mut timer)?;
        if engine.chunks_processed() > before {
            total.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        pos += n;
    }
    ensure!(total.len() == chunks, "expected {chunks} chunks, processed {}", total.len());
    Ok(LatencyReport {
        network_ms: timer.times.split_off(warmup),
        total_ms: total.split_off(warmup),
        chunk_duration_ms: span as f64 * 1e3 / SAMPLE_RATE as f64,
        chunk_shift_ms: hop as f64 * 1e3 / SAMPLE_RATE as f64,
        params: dpsarnn_core::nn::Module::num_params(net),
    })
}
