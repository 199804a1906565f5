mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{tiny, write_config};
use dgfnet_cli::commands::{
    self, ablate, analyze_gates, gen_data, separate, train, AblateOptions, GateOptions, GenDataOptions, MixtureInput, Scorer,
    TrainOptions, HISTOGRAM_BINS, LAST_CHECKPOINT, MODEL_FILE,
};
use dgfnet_cli::config::{ExperimentConfig, CONFIG_FILE, OUT_ROOT_VAR};
use dgfnet_cli::runlog::{read_losses, LOSSES_FILE, RUNLOG_FILE};
use dgfnet_core::data::read_manifest;
use dgfnet_core::dsp::write_wav;
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::metrics::{bss_eval, mixture_baseline};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgfnet"))
}

fn quiet() -> TrainOptions {
    TrainOptions {
        quiet: true,
        ..TrainOptions::default()
    }
}

#[test]
fn presets_validate_and_round_trip() {
    for cfg in [ExperimentConfig::desk(), ExperimentConfig::full()] {
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    let full = ExperimentConfig::full();
    assert_eq!(full.data.synth.clip_len, 65_536);
    assert_eq!((full.spectral.log_bins, full.spectral.frames()), (256, 256));
    assert_eq!((full.train.batch_size, full.train.epochs), (20, 100));
}

#[test]
fn invalid_configs_are_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), FusionMode::Mul);
    cfg.data.k = 0;
    let path = dir.path().join("bad.toml");
    write_config(&cfg, &path);
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&path, "name = 3").unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["train", "--preset", "huge"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = tiny(dir.path(), FusionMode::Mul);
    cfg.data.synth.clip_len = 4000;
    assert!(cfg.validate().is_err());
}

#[test]
fn missing_run_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", "--run"]).arg(dir.path().join("nowhere")).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn training_is_deterministic_and_echoes_its_config() {
    let root = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    for run in ["a", "b"] {
        let cfg = tiny(&root.path().join(run), FusionMode::Dgfm);
        outcomes.push(train(&cfg, &quiet()).unwrap());
    }
    let (a, b) = (&outcomes[0], &outcomes[1]);
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 8);
    assert!(a.records.iter().all(|r| r.mean_sigma.is_some()));
    let bytes = |p: &Path| fs::read(p).unwrap();
    assert_eq!(bytes(&a.run_dir.join(LOSSES_FILE)), bytes(&b.run_dir.join(LOSSES_FILE)));
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));

    // re-running from the echoed config reproduces the run
    let mut echoed = ExperimentConfig::load(&a.run_dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, tiny(&a.run_dir, FusionMode::Dgfm));
    echoed.output_dir = root.path().join("c");
    let c = train(&echoed, &quiet()).unwrap();
    assert_eq!(bytes(&c.checkpoint), bytes(&a.checkpoint));

    let losses = read_losses(&a.run_dir.join(LOSSES_FILE)).unwrap();
    assert_eq!(losses.len(), 8);
    assert_eq!(losses[3], (a.records[3].step, a.records[3].loss));
    assert_eq!(a.records[0].step, 1);
    let events = fs::read_to_string(a.run_dir.join(RUNLOG_FILE)).unwrap();
    for line in events.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(events.lines().next().unwrap().contains("\"event\":\"start\""));
    assert!(events.lines().last().unwrap().contains("\"event\":\"finish\""));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let full = train(&tiny(&root.path().join("full"), FusionMode::Mul), &quiet()).unwrap();

    let mut cfg = tiny(&root.path().join("split"), FusionMode::Mul);
    cfg.train.epochs = 1;
    train(&cfg, &quiet()).unwrap();
    cfg.train.epochs = 2;
    let resumed = train(
        &cfg,
        &TrainOptions {
            resume: true,
            ..quiet()
        },
    )
    .unwrap();
    assert_eq!(resumed.records, full.records[4..].to_vec());
    let bytes = |p: &Path| fs::read(p).unwrap();
    assert_eq!(bytes(&resumed.checkpoint), bytes(&full.checkpoint));
    assert_eq!(
        bytes(&resumed.run_dir.join(LOSSES_FILE)),
        bytes(&full.run_dir.join(LOSSES_FILE))
    );

    cfg.train.lr = 1.0;
    let err = train(
        &cfg,
        &TrainOptions {
            resume: true,
            ..quiet()
        },
    )
    .unwrap_err();
    assert_eq!(commands::exit_code(&err), 2);
}

#[test]
fn divergence_aborts_with_the_last_good_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), FusionMode::Dgfm);
    cfg.train.lr = 1e150;
    cfg.train.checkpoint_every = 1;
    let path = root.path().join("cfg.toml");
    write_config(&cfg, &path);
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let last = root.path().join(LAST_CHECKPOINT);
    assert!(last.exists());
    assert!(!root.path().join(MODEL_FILE).exists());
    let restored = commands::load_trainer(&cfg, Some(&last)).unwrap();
    assert!(restored.store.to_map().values().all(|t| t.is_finite()));
    let log = fs::read_to_string(root.path().join(RUNLOG_FILE)).unwrap();
    assert!(log.lines().last().unwrap().contains("\"event\":\"abort\""));
}

#[test]
fn eval_csv_schema_and_reference_scorers() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), FusionMode::Baseline);
    let run = train(
        &cfg,
        &TrainOptions {
            final_eval: true,
            ..quiet()
        },
    )
    .unwrap();
    let text = fs::read_to_string(run.run_dir.join("eval.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "example_id,source_class,sdr_db,sir_db,sar_db");
    assert_eq!(lines.len(), 1 + 4 * 2 + 1);
    assert!(lines.last().unwrap().starts_with("mean,all,"));

    let mix = commands::eval(&cfg, None, Scorer::Mixture, &root.path().join("mix.csv")).unwrap();
    let oracle = commands::eval(&cfg, None, Scorer::Oracle, &root.path().join("oracle.csv")).unwrap();
    assert!(oracle.mean.sdr > mix.mean.sdr + 5.0);
    let err = commands::eval(&cfg, None, Scorer::Model, &root.path().join("m.csv")).unwrap_err();
    assert_eq!(commands::exit_code(&err), 2);

    let out = bin()
        .args(["eval", "--scorer", "oracle", "--run"])
        .arg(&run.run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.run_dir.join("eval_oracle.csv").exists());
}

#[test]
fn mismatched_checkpoint_is_a_format_error() {
    let root = tempfile::tempdir().unwrap();
    let run = train(&tiny(&root.path().join("mul"), FusionMode::Mul), &quiet()).unwrap();
    let other = tiny(root.path(), FusionMode::Dgfm);
    let err = commands::load_trainer(&other, Some(&run.checkpoint)).err().unwrap();
    assert_eq!(commands::exit_code(&err), 4);
}

#[test]
fn gate_analysis_requires_gated_fusion() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), FusionMode::Mul);
    let err = analyze_gates(&cfg, None, root.path(), &GateOptions::default()).unwrap_err();
    assert_eq!(commands::exit_code(&err), 2);

    let run = train(&cfg, &quiet()).unwrap();
    let out = bin().args(["analyze-gates", "--run"]).arg(&run.run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn untrained_gates_sit_at_one_half() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), FusionMode::DgfmAttention);
    cfg.data.test_examples = 20;
    let a = analyze_gates(
        &cfg,
        None,
        root.path(),
        &GateOptions {
            dump_fields: true,
            limit: None,
        },
    )
    .unwrap();
    assert_eq!(a.records.len(), 40);
    assert_eq!(a.histogram.len(), HISTOGRAM_BINS);
    assert_eq!(a.histogram.iter().sum::<usize>(), 40);
    assert!(a.summary.near_half > 0.99);
    assert!(a.summary.min_sigma > 0.0 && a.summary.max_sigma < 1.0);
    assert!(a.summary.high_decile_mean > a.summary.low_decile_mean);
    assert_eq!(a.summary.map_shape, [8, 8]);
    for f in ["gate_records.csv", "gate_histogram.csv", "gate_low_decile.png", "gate_high_decile.png", "gate_summary.json", "sigma_fields.ckpt"] {
        assert!(root.path().join(f).exists(), "{f}");
    }
    let img = image::open(root.path().join("gate_low_decile.png")).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));
    let records = fs::read_to_string(root.path().join("gate_records.csv")).unwrap();
    assert_eq!(records.lines().next().unwrap(), "example_id,class_id,mean_sigma");
    let fields = dgfnet_core::checkpoint::load(&root.path().join("sigma_fields.ckpt")).unwrap();
    assert_eq!(fields.len(), 40);
}

#[test]
fn separation_outputs_and_preconditions() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(&root.path().join("run"), FusionMode::DgfmAttention);
    let run = train(&cfg, &quiet()).unwrap();
    let out = root.path().join("sep");
    let input = MixtureInput::Example(1);

    for classes in [vec![], vec![8]] {
        let err = separate(&cfg, &run.checkpoint, &input, &classes, &out).unwrap_err();
        assert_eq!(commands::exit_code(&err), 2);
    }
    let first = separate(&cfg, &run.checkpoint, &input, &[0, 5], &out).unwrap();
    assert_eq!(first.len(), 2);
    for s in &first {
        assert!(s.wav.exists() && s.png.exists());
    }
    let bytes: Vec<Vec<u8>> = first.iter().map(|s| fs::read(&s.wav).unwrap()).collect();
    let again = separate(&cfg, &run.checkpoint, &input, &[0, 5], &out).unwrap();
    for (s, b) in again.iter().zip(&bytes) {
        assert_eq!(&fs::read(&s.wav).unwrap(), b);
    }

    let status = bin()
        .args(["separate", "--example", "0", "--classes", "", "--run"])
        .arg(&run.run_dir)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn single_source_separation_beats_the_mixture_baseline() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(&root.path().join("run"), FusionMode::DgfmAttention);
    let run = train(&cfg, &quiet()).unwrap();
    let ex = cfg.test_split().example(&cfg.data.synth, 0).unwrap();
    let (class, source) = (ex.labels[0], &ex.sources[0]);
    let wav = root.path().join("solo.wav");
    write_wav(&wav, source).unwrap();
    let out = separate(&cfg, &run.checkpoint, &MixtureInput::Wav(wav.clone()), &[class], &root.path().join("sep")).unwrap();
    // the WAV round trip quantises, so score against what was read back
    let (solo, _) = commands::load_mixture(&cfg, &MixtureInput::Wav(wav)).unwrap();
    let got = bss_eval(&[out[0].waveform.clone()], &[solo], 1).unwrap()[0];
    let baseline = mixture_baseline(&ex.mixture, &ex.sources, 1).unwrap()[0];
    assert!(got.sdr >= baseline.sdr, "{} < {}", got.sdr, baseline.sdr);
}

#[test]
fn ablation_table_has_four_labelled_arms() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), FusionMode::DgfmAttention);
    let out = ablate(
        &cfg,
        &AblateOptions {
            probe_examples: 8,
            quiet: true,
            ..AblateOptions::default()
        },
    )
    .unwrap();
    let mut rdr = csv::Reader::from_path(&out.csv).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["method", "sdr_db", "sir_db", "sar_db", "status"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["Baseline", "+Mul", "+DGFM", "DGFNet"]);
    for r in &rows {
        assert_eq!(&r[4], "ok");
        for i in 1..4 {
            assert!(r[i].parse::<f64>().unwrap().is_finite());
        }
    }
    for a in &out.arms {
        assert!(a.final_loss < a.initial_loss, "{}: {} -> {}", a.fusion.label(), a.initial_loss, a.final_loss);
    }
    assert!(root.path().join("dgfm+attention").join(MODEL_FILE).exists());
}

#[test]
fn failing_ablation_arm_flags_partial_results() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(root.path(), FusionMode::DgfmAttention);
    cfg.train.lr = 1e150;
    let err = ablate(
        &cfg,
        &AblateOptions {
            quiet: true,
            ..AblateOptions::default()
        },
    )
    .unwrap_err();
    assert_eq!(commands::exit_code(&err), 3);
    let text = fs::read_to_string(root.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("Baseline,,,,") && lines[1].contains("failed"));
    assert!(lines[4].ends_with("not run"));
}

#[test]
fn gen_data_writes_manifests_under_the_output_root() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Path::new("relative/run"), FusionMode::Mul);
    cfg.data.test_examples = 3;
    let path = root.path().join("cfg.toml");
    write_config(&cfg, &path);
    let out = bin()
        .env(OUT_ROOT_VAR, root.path())
        .args(["gen-data", "--wavs", "2", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = root.path().join("relative/run/data");
    let test = read_manifest(&fs::read_to_string(data.join("test_manifest.jsonl")).unwrap()).unwrap();
    assert_eq!(test.len(), 3);
    assert_eq!(test[0].wavs.len(), 3);
    assert!(test[2].wavs.is_empty());
    assert!(data.join(&test[1].wavs[2]).exists());
    assert_eq!(test[0].classes, cfg.test_split().example(&cfg.data.synth, 0).unwrap().labels);

    let direct = gen_data(&cfg, &root.path().join("direct"), &GenDataOptions::default()).unwrap();
    assert_eq!(fs::read(&direct[1]).unwrap().len(), {
        let mut t = test.clone();
        t.iter_mut().for_each(|r| r.wavs.clear());
        dgfnet_core::data::write_manifest(&t).len()
    });
}
