use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dgfnet_cli::commands::{self, AblateOptions, GateOptions, GenDataOptions, MixtureInput, Scorer, TrainOptions, MODEL_FILE};
use dgfnet_cli::config::{resolve_output, CONFIG_FILE};
use dgfnet_cli::ExperimentConfig;
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::metrics::LONG_TAPS;
use dgfnet_core::Error;

#[derive(Parser)]
#[command(name = "dgfnet", version, about = "Audio-visual source separation experiments")]
#[command(after_help = "Relative output paths resolve against $DGFNET_OUT_ROOT when it is set.\n\
Exit codes: 0 success, 2 contract violation, 3 numeric failure, 4 IO or format error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and score it on the test split.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Continue the run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Skip the final test-split evaluation.
        #[arg(long)]
        no_eval: bool,
    },
    /// Score a checkpoint (or a reference masker) on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = ScorerArg::Model)]
        scorer: ScorerArg,
        /// Use the 512-tap distortion filter instead of the 1-tap one.
        #[arg(long)]
        long_filter: bool,
        /// Scores CSV; defaults to eval.csv (or eval_<scorer>.csv) in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the Baseline, +Mul, +DGFM and DGFNet arms.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Training examples used to compare initial and final loss.
        #[arg(long, default_value_t = 16)]
        probe: usize,
    },
    /// Gate histogram, decile heatmaps and per-example gate records.
    AnalyzeGates {
        #[command(flatten)]
        run: RunArgs,
        /// Analyse the freshly initialised model instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
        /// Also dump every gate field to sigma_fields.ckpt.
        #[arg(long)]
        dump_fields: bool,
        /// Only the first N test examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Output directory; defaults to <run>/gates.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate the requested classes from a mixture.
    Separate {
        #[command(flatten)]
        run: RunArgs,
        /// Mixture WAV file.
        #[arg(long, conflicts_with = "example", required_unless_present = "example")]
        wav: Option<PathBuf>,
        /// Test-split example index.
        #[arg(long)]
        example: Option<usize>,
        /// Class ids to extract, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        classes: Vec<usize>,
        /// Output directory; defaults to <run>/separated.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write dataset manifests and optional WAV exports.
    GenData {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Export WAVs for the first N examples of each split.
        #[arg(long, default_value_t = 0)]
        wavs: usize,
        /// Output directory; defaults to <output_dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a preset config as TOML.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: desk or full.
    #[arg(long)]
    preset: Option<String>,
    /// Override the fusion mode: baseline, mul, dgfm or dgfm+attention.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::desk(),
        };
        if let Some(f) = &self.fusion {
            cfg.model.fusion = FusionMode::parse(f)?;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding config.toml and model.ckpt.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of <run>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn dir(&self) -> PathBuf {
        resolve_output(&self.run)
    }

    fn load(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let dir = self.dir();
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE)).with_context(|| format!("run directory {}", dir.display()))?;
        let ckpt = self.checkpoint.clone().unwrap_or_else(|| dir.join(MODEL_FILE));
        Ok((cfg, ckpt))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Model,
    Mixture,
    Oracle,
}

fn print_score(label: &str, s: dgfnet_core::metrics::SourceScore) {
    println!("{label}: SDR {:.2} dB  SIR {:.2} dB  SAR {:.2} dB", s.sdr, s.sir, s.sar);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { exp, resume, no_eval } => {
            let cfg = exp.load()?;
            let out = commands::train(
                &cfg,
                &TrainOptions {
                    resume,
                    final_eval: !no_eval,
                    probe_examples: 0,
                    quiet: false,
                },
            )?;
            println!("checkpoint: {}", out.checkpoint.display());
            if let Some(r) = out.report {
                print_score("test", r.mean);
            }
        }
        Command::Eval { run, scorer, long_filter, out } => {
            let (mut cfg, ckpt) = run.load()?;
            if long_filter {
                cfg.eval.filter_taps = LONG_TAPS;
            }
            let (scorer, default_name) = match scorer {
                ScorerArg::Model => (Scorer::Model, "eval.csv"),
                ScorerArg::Mixture => (Scorer::Mixture, "eval_mixture.csv"),
                ScorerArg::Oracle => (Scorer::Oracle, "eval_oracle.csv"),
            };
            let out = out.unwrap_or_else(|| run.dir().join(default_name));
            let report = commands::eval(&cfg, Some(&ckpt), scorer, &out)?;
            print_score("test", report.mean);
            println!("scores: {}", out.display());
        }
        Command::Ablate { exp, probe } => {
            let cfg = exp.load()?;
            let out = commands::ablate(
                &cfg,
                &AblateOptions {
                    probe_examples: probe,
                    ..AblateOptions::default()
                },
            )?;
            for a in &out.arms {
                print_score(a.fusion.label(), a.score);
            }
            println!("table: {}", out.csv.display());
        }
        Command::AnalyzeGates {
            run,
            untrained,
            dump_fields,
            limit,
            out,
        } => {
            let (cfg, ckpt) = run.load()?;
            let out = out.unwrap_or_else(|| run.dir().join("gates"));
            let ckpt = (!untrained).then_some(ckpt);
            let a = commands::analyze_gates(&cfg, ckpt.as_deref(), &out, &GateOptions { dump_fields, limit })?;
            println!(
                "{} gate records, mean σ in [{:.4}, {:.4}], {:.1}% within [0.45, 0.55]",
                a.summary.records,
                a.summary.min_sigma,
                a.summary.max_sigma,
                100.0 * a.summary.near_half
            );
            println!("outputs: {}", out.display());
        }
        Command::Separate {
            run,
            wav,
            example,
            classes,
            out,
        } => {
            let (cfg, ckpt) = run.load()?;
            let input = match (wav, example) {
                (Some(w), _) => MixtureInput::Wav(w),
                (None, Some(i)) => MixtureInput::Example(i),
                (None, None) => anyhow::bail!(Error::Contract("give --wav or --example".into())),
            };
            let out = out.unwrap_or_else(|| run.dir().join("separated"));
            for s in commands::separate(&cfg, &ckpt, &input, &classes, &out)? {
                println!("class {}: {} {}", s.class, s.wav.display(), s.png.display());
            }
        }
        Command::GenData { exp, wavs, out } => {
            let cfg = exp.load()?;
            let out = out.unwrap_or_else(|| cfg.run_dir().join("data"));
            for p in commands::gen_data(&cfg, &out, &GenDataOptions { wav_examples: wavs })? {
                println!("{}", p.display());
            }
        }
        Command::Config { preset } => print!("{}", ExperimentConfig::preset(&preset)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
