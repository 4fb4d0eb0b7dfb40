use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dpsarnn::config::RunConfig;
use dpsarnn::core::dualpath::{param_count, EnhancementNetwork};
use dpsarnn::core::stream::StreamEngine;
use dpsarnn::{bench, checkpoint, pipeline};

#[derive(Parser)]
#[command(name = "dpsarnn", version, about = "Time-domain speech enhancement with dual-path self-attention RNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic noisy/clean pairs and a manifest.
    SynthData {
        #[arg(long)]
        count: usize,
        /// Length of every pair in seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.log, epoch{E}.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training set directory (or manifest file).
        #[arg(long)]
        data: PathBuf,
        /// Validation set directory (or manifest file).
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a WAV file.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Process chunk by chunk as a live stream would (causal models only).
        #[arg(long)]
        streaming: bool,
    },
    /// Enhance raw little-endian float32 samples from stdin to stdout.
    Stream {
        #[arg(long)]
        model: PathBuf,
    },
    /// Measure per-chunk streaming latency.
    Bench {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        model: Option<PathBuf>,
        /// Benchmark a randomly initialised model of this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the exact number of trainable parameters.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// SI-SNR improvement per noise/SNR cell over a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn stream(model: PathBuf) -> Result<()> {
    let net = checkpoint::load(&model)?;
    let mut engine = StreamEngine::new(&net)?;
    let mut input = BufReader::new(std::io::stdin().lock());
    let mut output = BufWriter::new(std::io::stdout().lock());
    let write = |out: &mut BufWriter<_>, ys: Vec<f32>| -> Result<()> {
        for y in ys {
            out.write_all(&y.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    };
    let mut buf = vec![0u8; 4 * 248];
    let mut pending: Vec<u8> = Vec::new();
    loop {
        let n = input.read(&mut buf).context("reading standard input")?;
        if n == 0 {
            break;
        }
        pending.extend_from_slice(&buf[..n]);
        let whole = pending.len() / 4 * 4;
        let samples: Vec<f32> = pending[..whole].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        pending.drain(..whole);
        let ys = engine.push(&samples)?;
        write(&mut output, ys)?;
    }
    if !pending.is_empty() {
        bail!("input ended inside a sample ({} trailing bytes)", pending.len());
    }
    let ys = engine.flush()?;
    write(&mut output, ys)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { count, duration, seed, out } => {
            let entries = pipeline::synth_data(count, duration, seed, &out)?;
            println!("wrote {} pairs to {}", entries.len(), out.display());
        }
        Command::Train { config, data, val, out } => {
            let cfg = RunConfig::load(&config)?;
            let o = pipeline::train(&cfg, &data, &val, &out)?;
            println!("steps={}", o.steps);
            println!("best_epoch={}", o.best_epoch);
            println!("best_val_si_snr={:.4}", o.best_score);
        }
        Command::Enhance { model, input, output, streaming } => {
            pipeline::enhance_file(&model, &input, &output, streaming)?;
        }
        Command::Stream { model } => stream(model)?,
        Command::Bench { model, config, seconds, warmup, seed } => {
            let net = match (model, config) {
                (Some(m), _) => checkpoint::load(&m)?,
                (None, Some(c)) => {
                    let mut net = EnhancementNetwork::<f32>::new(&RunConfig::load(&c)?.model, seed)?;
                    net.freeze();
                    net
                }
                (None, None) => unreachable!("clap requires one of --model and --config"),
            };
            if net.config.max_context.is_some() {
                println!("note: attention context is capped; streamed output differs from offline output");
            }
            let report = bench::bench(&net, seconds, warmup, seed)?;
            print!("{}", report.human());
            print!("{}", report.machine_lines());
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", param_count(&cfg.model)?);
        }
        Command::Eval { model, manifest } => {
            print!("{}", pipeline::evaluate_manifest(&model, &manifest)?.render());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
