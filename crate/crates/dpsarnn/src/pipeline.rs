//! File-level workflows behind the command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpsarnn_core::audio::{si_snr, synth_dataset};
use dpsarnn_core::dualpath::EnhancementNetwork;
use dpsarnn_core::stream::StreamEngine;
use dpsarnn_core::train::{Example, StepStats, TrainObserver, TrainOutcome, Trainer};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::manifest::{self, Entry};
use crate::wav::{read_wav, write_wav, Codec};

/// Writes `count` synthetic pairs as float32 WAV files plus a manifest.
pub fn synth_data(count: usize, duration_s: f64, seed: u64, out: &Path) -> Result<Vec<Entry>> {
    let pairs = synth_dataset(count, duration_s, seed)?;
    for sub in ["mix", "clean"] {
        std::fs::create_dir_all(out.join(sub)).with_context(|| format!("cannot create {}", out.join(sub).display()))?;
    }
    let mut entries = Vec::with_capacity(count);
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:05}.wav");
        let (mix, clean) = (PathBuf::from("mix").join(&name), PathBuf::from("clean").join(&name));
        write_wav(out.join(&mix), p.mixture.samples(), Codec::Float32)?;
        write_wav(out.join(&clean), p.clean.samples(), Codec::Float32)?;
        entries.push(Entry { mixture: mix, clean, snr_db: p.snr_db, seed: p.seed, kind: p.kind.name().into() });
    }
    std::fs::write(out.join(manifest::FILE_NAME), manifest::render(&entries))?;
    Ok(entries)
}

/// Reads every pair of a manifest. Samples are rounded to single precision,
/// the precision of the network.
pub fn load_examples(entries: &[Entry]) -> Result<Vec<Example>> {
    entries
        .iter()
        .map(|e| {
            let (mix, _) = read_wav(&e.mixture)?;
            let (clean, _) = read_wav(&e.clean)?;
            if mix.len() != clean.len() {
                bail!("{} and {} differ in length", e.mixture.display(), e.clean.display());
            }
            let round = |x: &[f64]| x.iter().map(|&v| v as f32 as f64).collect();
            Ok(Example { mixture: round(mix.samples()), clean: round(clean.samples()) })
        })
        .collect()
}

struct FileObserver {
    log: BufWriter<File>,
    out: PathBuf,
    error: Option<anyhow::Error>,
}

impl TrainObserver<f32> for FileObserver {
    fn on_step(&mut self, s: &StepStats) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.log, "{}\t{}\t{:e}\t{}", s.step, s.epoch, s.lr, s.loss) {
                self.error = Some(e.into());
            }
        }
    }

    fn on_epoch(&mut self, epoch: usize, _: f64, net: &EnhancementNetwork<f32>, improved: bool) -> dpsarnn_core::Result<()> {
        let mut write = || -> Result<()> {
            self.log.flush()?;
            checkpoint::save(self.out.join(format!("epoch{epoch}.ckpt")), net)?;
            if improved {
                checkpoint::save(self.out.join("best.ckpt"), net)?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            self.error.get_or_insert(e);
        }
        Ok(())
    }
}

/// Trains from manifests, writing `train.log`, `epoch{E}.ckpt`, `best.ckpt`
/// and `config.toml` into `out`.
pub fn train(cfg: &RunConfig, data: &Path, val: &Path, out: &Path) -> Result<TrainOutcome<f32>> {
    let train_set = load_examples(&manifest::load(data)?)?;
    let val_set = load_examples(&manifest::load(val)?)?;
    train_examples(cfg, &train_set, &val_set, out)
}

pub fn train_examples(cfg: &RunConfig, train_set: &[Example], val_set: &[Example], out: &Path) -> Result<TrainOutcome<f32>> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let log = File::create(out.join("train.log")).context("cannot create train.log")?;
    let mut obs = FileObserver { log: BufWriter::new(log), out: out.to_path_buf(), error: None };
    writeln!(obs.log, "step\tepoch\tlr\tloss")?;
    let net = EnhancementNetwork::<f32>::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let outcome = trainer.run(train_set, val_set, &mut obs);
    obs.log.flush()?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    Ok(outcome?)
}

pub fn enhance_samples(net: &EnhancementNetwork<f32>, x: &[f64], streaming: bool) -> Result<Vec<f64>> {
    let x: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let y = if streaming {
        let mut engine = StreamEngine::new(net)?;
        let mut y = engine.push(&x)?;
        y.extend(engine.flush()?);
        y
    } else {
        net.enhance(&x)?
    };
    Ok(y.into_iter().map(f64::from).collect())
}

pub fn enhance_file(model: &Path, input: &Path, output: &Path, streaming: bool) -> Result<()> {
    let net = checkpoint::load(model)?;
    let (x, codec) = read_wav(input)?;
    let y = enhance_samples(&net, x.samples(), streaming)?;
    write_wav(output, &y, codec)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellResult {
    pub count: usize,
    pub input_si_snr: f64,
    pub output_si_snr: f64,
}

impl CellResult {
    fn add(&mut self, input: f64, output: f64) {
        self.count += 1;
        self.input_si_snr += input;
        self.output_si_snr += output;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.count.max(1) as f64;
        let (i, o) = (self.input_si_snr / n, self.output_si_snr / n);
        (i, o, o - i)
    }

    pub fn improvement(&self) -> f64 {
        self.mean().2
    }
}

/// SI-SNR results grouped by (noise kind, SNR), plus the overall mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTable {
    pub cells: BTreeMap<(String, i64), CellResult>,
    pub overall: CellResult,
}

impl EvalTable {
    pub fn render(&self) -> String {
        let mut s = String::from("noise\tsnr_db\tcount\tinput_si_snr\toutput_si_snr\tsi_snr_i\n");
        let mut row = |label: &str, snr: &str, c: &CellResult| {
            let (i, o, d) = c.mean();
            writeln!(s, "{label}\t{snr}\t{}\t{i:.3}\t{o:.3}\t{d:.3}", c.count).unwrap();
        };
        for ((kind, snr), c) in &self.cells {
            row(kind, &snr.to_string(), c);
        }
        row("average", "all", &self.overall);
        s
    }
}

pub fn evaluate(net: &EnhancementNetwork<f32>, entries: &[Entry], examples: &[Example]) -> Result<EvalTable> {
    let mut table = EvalTable::default();
    for (e, ex) in entries.iter().zip(examples) {
        let y = enhance_samples(net, &ex.mixture, false)?;
        let input = si_snr(&ex.mixture, &ex.clean)?;
        let output = si_snr(&y, &ex.clean)?;
        table.cells.entry((e.kind.clone(), e.snr_db.round() as i64)).or_default().add(input, output);
        table.overall.add(input, output);
    }
    Ok(table)
}

pub fn evaluate_manifest(model: &Path, manifest_path: &Path) -> Result<EvalTable> {
    let net = checkpoint::load(model)?;
    let entries = manifest::load(manifest_path)?;
    let examples = load_examples(&entries)?;
    evaluate(&net, &entries, &examples)
}
