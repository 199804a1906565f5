//! Append-only run artifacts: `runlog.jsonl` events and the `losses.csv`
//! loss log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use dgfnet_core::metrics::SourceScore;
use dgfnet_core::train::StepRecord;
use serde::Serialize;

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const LOSSES_FILE: &str = "losses.csv";
const LOSSES_HEADER: &str = "step,epoch,loss,mean_sigma";

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Start {
        name: String,
        fusion: String,
        resumed_at: u64,
    },
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        mean_sigma: Option<f64>,
        elapsed_s: f64,
    },
    Checkpoint {
        step: u64,
        path: String,
    },
    Eval {
        step: u64,
        epoch: Option<usize>,
        examples: usize,
        sdr_db: f64,
        sir_db: f64,
        sar_db: f64,
        elapsed_s: f64,
    },
    Gate {
        example_id: usize,
        class_id: usize,
        mean_sigma: f64,
    },
    Abort {
        step: u64,
        error: String,
        last_checkpoint: Option<String>,
    },
    Finish {
        steps: u64,
        elapsed_s: f64,
    },
}

impl Event {
    pub fn eval(step: u64, epoch: Option<usize>, examples: usize, mean: SourceScore, elapsed_s: f64) -> Self {
        Event::Eval {
            step,
            epoch,
            examples,
            sdr_db: mean.sdr,
            sir_db: mean.sir,
            sar_db: mean.sar,
            elapsed_s,
        }
    }
}

pub struct RunLog {
    events: File,
    losses: File,
    started: Instant,
}

impl RunLog {
    /// Opens the logs of `dir` for appending. When resuming after `step`
    /// completed steps, later loss rows are dropped first so the log has no
    /// repeats.
    pub fn open(dir: &Path, resume_at: Option<u64>) -> anyhow::Result<Self> {
        let losses_path = dir.join(LOSSES_FILE);
        match resume_at {
            Some(step) if losses_path.exists() => truncate_losses(&losses_path, step)?,
            _ => std::fs::write(&losses_path, format!("{LOSSES_HEADER}\n"))?,
        }
        let events_path = dir.join(RUNLOG_FILE);
        if resume_at.is_none() {
            File::create(&events_path)?;
        }
        let open = |p: &PathBuf| {
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))
        };
        Ok(Self {
            events: open(&events_path)?,
            losses: open(&losses_path)?,
            started: Instant::now(),
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn event(&mut self, e: &Event) -> std::io::Result<()> {
        writeln!(self.events, "{}", serde_json::to_string(e).expect("events always serialize"))
    }

    pub fn step(&mut self, r: &StepRecord) -> std::io::Result<()> {
        let sigma = r.mean_sigma.map(|s| s.to_string()).unwrap_or_default();
        writeln!(self.losses, "{},{},{},{}", r.step, r.epoch, r.loss, sigma)?;
        self.event(&Event::Step {
            step: r.step,
            epoch: r.epoch,
            loss: r.loss,
            mean_sigma: r.mean_sigma,
            elapsed_s: self.elapsed(),
        })
    }
}

fn truncate_losses(path: &Path, step: u64) -> anyhow::Result<()> {
    let reader = BufReader::new(File::open(path)?);
    let mut kept = format!("{LOSSES_HEADER}\n");
    for line in reader.lines().skip(1) {
        let line = line?;
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .with_context(|| format!("malformed loss row `{line}`"))?;
        if s <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

/// Reads `(step, loss)` pairs back from a loss log.
pub fn read_losses(path: &Path) -> anyhow::Result<Vec<(u64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.records()
        .map(|r| {
            let r = r?;
            Ok((r[0].parse()?, r[2].parse()?))
        })
        .collect()
}
