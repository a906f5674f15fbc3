//! `ecgcrnn`: prepare the dataset, train the network, evaluate, classify
//! records, and run or replay the streaming service.
//!
//! Every subcommand reads a flat `key = value` config file (`--config`)
//! with flags taking precedence; the keys each subcommand honors are listed
//! in its `--help`. Configuration problems exit with code 2, runtime
//! failures with code 1.

mod cache;
mod config;
mod plot;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::Config;
use ecgcrnn::dsp::{self, BandPassSpec};
use ecgcrnn::eval;
use ecgcrnn::nn::{self, ModelConfig};
use ecgcrnn::pipeline::{AugmentationConfig, LabeledSignal, WindowConfig};
use ecgcrnn::record_io::{self, DatasetManifest, EcgRecord, SplitAssignment};
use ecgcrnn::stream::{self, ServeConfig, StreamConfig};
use ecgcrnn::train::{self, TrainConfig};

/// Marker for errors that should exit with code 2.
#[derive(Debug)]
struct ConfigProblem(String);

impl fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn config_problem<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigProblem(msg.into()).into())
}

#[derive(Parser)]
#[command(
    name = "ecgcrnn",
    version,
    about = "Single-lead ECG rhythm classification: preprocessing, training, evaluation, and streaming inference"
)]
struct Cli {
    /// Flat `key = value` config file; command-line flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (config key `seed`, default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (config key `out_dir`, default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse records, preprocess, split train/test, and cache the results.
    #[command(long_about = "Parse MAT records and REFERENCE.csv, band-pass filter (zero phase), \
        downsample, scale by the training-set standard deviation mean, write the split file, the \
        preprocessed cache, and a dataset report.\n\nConfig keys: data_dir, out_dir, seed, \
        train_size (default 7000), source_fs (300), target_fs (200), low_cut (0.5), high_cut \
        (40), filter_order (2)")]
    Prepare {
        /// Directory with `<id>.mat` files plus `REFERENCE.csv`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Training-set size for the stratified split.
        #[arg(long)]
        train_size: Option<usize>,
    },
    /// Train the network on the prepared cache.
    #[command(long_about = "Run the optimization loop over the cached records: augmented \
        duration-sorted batches, Adam, halve-on-plateau schedule, checkpoint at the best \
        test accuracy.\n\nConfig keys: data_dir, out_dir, seed, epochs (200), batch_size (50), \
        lr (0.001), dropout (0.5), flip_prob (0.5), resample_prob (0.8), stretch (0.05), \
        augment (true), window_len (512), stride (256), model_divisor (1)")]
    Train,
    /// Compute metrics for a checkpoint on a cached split part.
    #[command(long_about = "Evaluate a checkpoint: confusion matrix, per-class \
        sensitivity/specificity/F1, accuracy, and the challenge score, as JSON and a text \
        table.\n\nConfig keys: data_dir, out_dir, checkpoint (default: best checkpoint in \
        out_dir), batch_size (1), split_part (test), window_len, stride")]
    Evaluate {
        /// Checkpoint file (default: `best.bin` pointer in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation batch size; 1 avoids all zero-padding.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Classify one record file or a directory of records.
    #[command(long_about = "Classify MAT or raw (fs=<Hz> header) records with a checkpoint; \
        writes per-record class probabilities as CSV. Scaling uses the prepare metadata when \
        present, else each signal's own standard deviation.\n\nConfig keys: out_dir, checkpoint, \
        input, source_fs (300), target_fs (200), low_cut, high_cut, filter_order, window_len, \
        stride")]
    Classify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A `.mat`/raw file, or a directory of `.mat` files.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the streaming classification service.
    #[command(long_about = "Listen for framed telemetry (4-byte big-endian length + JSON \
        payload), classify each complete group of 25 windows per session, and publish \
        predictions to `ecg/<session>/rhythm` subscribers and an NDJSON log.\n\nConfig keys: \
        out_dir, checkpoint, port (7200), group_windows (25), capacity (131072), \
        session_expiry_s (120), low_cut, high_cut, filter_order. The ECGCRNN_CHECKPOINT \
        environment variable overrides the checkpoint path.")]
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Feed a recorded file through the streaming path.
    #[command(long_about = "Replay a MAT or raw record through the identical streaming code \
        path and write the predictions as NDJSON; replays are byte-deterministic.\n\nConfig \
        keys: out_dir, checkpoint, input, replay_fs (300, for MAT input), frame_len (1000), \
        session (replay), group_windows, capacity, low_cut, high_cut, filter_order. \
        ECGCRNN_CHECKPOINT overrides the checkpoint path.")]
    Replay {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Samples per replayed telemetry frame.
        #[arg(long)]
        frame_len: Option<usize>,
    },
    /// Render the training history as an SVG image.
    #[command(
        name = "plot-history",
        long_about = "Render loss and accuracy curves from a history CSV into an SVG \
            image.\n\nConfig keys: out_dir, history (default <out_dir>/history.csv)"
    )]
    PlotHistory {
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Dump the band-pass magnitude response as CSV.
    #[command(
        name = "filter-response",
        long_about = "Write `freq_hz,magnitude` samples of the designed band-pass (single \
            pass; the zero-phase cascade applies the square).\n\nConfig keys: out_dir, low_cut, \
            high_cut, filter_order, response_fs (300), points (500)"
    )]
    FilterResponse,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<ConfigProblem>().is_some() { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => match Config::from_file(path) {
            Ok(c) => c,
            Err(e) => return config_problem(format!("{e:#}")),
        },
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out_dir", out.display().to_string());
    }

    match cli.command {
        Command::Prepare { data_dir, train_size } => {
            if let Some(d) = data_dir {
                cfg.set("data_dir", d.display().to_string());
            }
            if let Some(n) = train_size {
                cfg.set("train_size", n.to_string());
            }
            cmd_prepare(&cfg)
        }
        Command::Train => cmd_train(&cfg),
        Command::Evaluate { checkpoint, batch_size } => {
            if let Some(c) = checkpoint {
                cfg.set("checkpoint", c.display().to_string());
            }
            if let Some(b) = batch_size {
                cfg.set("batch_size", b.to_string());
            }
            cmd_evaluate(&cfg)
        }
        Command::Classify { checkpoint, input } => {
            if let Some(c) = checkpoint {
                cfg.set("checkpoint", c.display().to_string());
            }
            if let Some(i) = input {
                cfg.set("input", i.display().to_string());
            }
            cmd_classify(&cfg)
        }
        Command::Serve { checkpoint, port } => {
            if let Some(c) = checkpoint {
                cfg.set("checkpoint", c.display().to_string());
            }
            if let Some(p) = port {
                cfg.set("port", p.to_string());
            }
            cmd_serve(&cfg)
        }
        Command::Replay { checkpoint, input, frame_len } => {
            if let Some(c) = checkpoint {
                cfg.set("checkpoint", c.display().to_string());
            }
            if let Some(i) = input {
                cfg.set("input", i.display().to_string());
            }
            if let Some(f) = frame_len {
                cfg.set("frame_len", f.to_string());
            }
            cmd_replay(&cfg)
        }
        Command::PlotHistory { history } => {
            if let Some(h) = history {
                cfg.set("history", h.display().to_string());
            }
            cmd_plot_history(&cfg)
        }
        Command::FilterResponse => cmd_filter_response(&cfg),
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str_or("out_dir", "out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn bandpass_spec(cfg: &Config, fs: f64) -> Result<BandPassSpec> {
    Ok(BandPassSpec {
        low_cut: cfg.f64_or("low_cut", 0.5)?,
        high_cut: cfg.f64_or("high_cut", 40.0)?,
        order: cfg.usize_or("filter_order", 2)?,
        fs,
    })
}

fn window_config(cfg: &Config) -> Result<WindowConfig> {
    Ok(WindowConfig {
        window_len: cfg.usize_or("window_len", 512)?,
        stride: cfg.usize_or("stride", 256)?,
    })
}

/// Filter (zero phase), then resample to the target rate.
fn preprocess(
    samples: &[f64],
    coeffs: &dsp::IirCoefficients,
    source_fs: f64,
    target_fs: f64,
) -> Result<Vec<f64>> {
    let filtered = dsp::filtfilt(coeffs, samples)?;
    Ok(dsp::resample(&filtered, source_fs, target_fs)?)
}

fn load_manifest_dir(data_dir: &Path) -> Result<DatasetManifest> {
    let reference = data_dir.join("REFERENCE.csv");
    if !reference.is_file() {
        return config_problem(format!("{} not found", reference.display()));
    }
    let text = std::fs::read_to_string(&reference)?;
    let mut manifest = record_io::load_manifest(&text)?;
    manifest.source_dir = Some(data_dir.to_path_buf());
    Ok(manifest)
}

fn cmd_prepare(cfg: &Config) -> Result<()> {
    let data_dir = match cfg.path("data_dir") {
        Some(d) if d.is_dir() => d,
        Some(d) => return config_problem(format!("data_dir {} is not a directory", d.display())),
        None => return config_problem("config key `data_dir` is required"),
    };
    let out = out_dir(cfg)?;
    let seed = cfg.u64_or("seed", 0)?;
    let source_fs = cfg.f64_or("source_fs", 300.0)?;
    let target_fs = cfg.f64_or("target_fs", 200.0)?;
    let train_size = cfg.usize_or("train_size", 7000)?;

    let manifest = load_manifest_dir(&data_dir)?;
    if manifest.is_empty() {
        return config_problem(format!("{} lists no records", data_dir.join("REFERENCE.csv").display()));
    }

    let spec = bandpass_spec(cfg, source_fs)?;
    let coeffs = dsp::design_bandpass(&spec)?;

    // Parse and preprocess every record; report every failure before bailing.
    let results: Vec<(String, Result<EcgRecord>)> = manifest
        .entries
        .par_iter()
        .map(|(id, label)| {
            let run = || -> Result<EcgRecord> {
                let path = data_dir.join(format!("{id}.mat"));
                let bytes = std::fs::read(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let raw = record_io::parse_mat4(&bytes)
                    .with_context(|| format!("parsing {}", path.display()))?;
                let record = EcgRecord::new(id.clone(), source_fs, raw, Some(*label))?;
                let processed = preprocess(&record.samples, &coeffs, source_fs, target_fs)?;
                Ok(EcgRecord::new(id.clone(), target_fs, processed, Some(*label))?)
            };
            (id.clone(), run())
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (id, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(e) => {
                failures += 1;
                eprintln!("record {id}: {e:#}");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} record(s) failed to parse or preprocess");
    }

    let split = record_io::stratified_split(&manifest, train_size, seed)?;
    let split_path = out.join("split.tsv");
    std::fs::write(&split_path, record_io::render_split(&manifest, &split))?;

    // Scale everything by the mean of the training-set standard deviations.
    let train_records: Vec<EcgRecord> =
        records.iter().filter(|r| split.train.contains(&r.id)).cloned().collect();
    let scale = dsp::training_scale(&train_records)?;
    for r in &mut records {
        for v in &mut r.samples {
            *v /= scale.value;
        }
    }

    let cache_dir = out.join("cache");
    std::fs::create_dir_all(&cache_dir)?;
    for r in &records {
        cache::write_record(&cache_dir.join(format!("{}.pre", r.id)), r.fs, &r.samples)?;
    }

    let breakdown = record_io::class_breakdown(&manifest)?;
    let report = dataset_report(&records, &breakdown, &split);
    std::fs::write(out.join("report.txt"), &report)?;
    print!("{report}");

    let metadata = serde_json::json!({
        "cache_version": cache::CACHE_VERSION,
        "seed": seed,
        "train_size": train_size,
        "scale": scale.value,
        "source_fs": source_fs,
        "target_fs": target_fs,
        "low_cut": spec.low_cut,
        "high_cut": spec.high_cut,
        "filter_order": spec.order,
        "class_counts": breakdown.counts,
    });
    std::fs::write(out.join("metadata.json"), serde_json::to_string_pretty(&metadata)?)?;
    println!(
        "prepared {} records -> {} (split {}/{}, scale {:.6})",
        records.len(),
        out.display(),
        split.train.len(),
        split.test.len(),
        scale.value
    );
    Ok(())
}

fn dataset_report(
    records: &[EcgRecord],
    breakdown: &record_io::ClassBreakdown,
    split: &SplitAssignment,
) -> String {
    use ecgcrnn::record_io::RhythmClass;
    let mut duration_sum = [0.0f64; 4];
    for r in records {
        if let Some(label) = r.label {
            duration_sum[label.index()] += r.duration_s();
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22}{:>7}{:>13}{:>19}\n",
        "Class", "Count", "Proportion", "Mean duration [s]"
    ));
    for class in RhythmClass::ALL {
        let k = class.index();
        let count = breakdown.counts[k];
        let mean_dur = if count > 0 { duration_sum[k] / count as f64 } else { 0.0 };
        out.push_str(&format!(
            "{:<22}{:>7}{:>12.2}%{:>19.2}\n",
            class.name(),
            count,
            breakdown.proportions[k] * 100.0,
            mean_dur
        ));
    }
    let total_dur: f64 = duration_sum.iter().sum();
    out.push_str(&format!(
        "{:<22}{:>7}{:>12.2}%{:>19.2}\n",
        "Total",
        breakdown.total,
        100.0,
        total_dur / breakdown.total as f64
    ));
    out.push_str(&format!("Split: {} train / {} test\n", split.train.len(), split.test.len()));
    out
}

/// Loads cached records and splits them according to the split file.
fn load_cached_split(cfg: &Config) -> Result<(Vec<LabeledSignal>, Vec<LabeledSignal>)> {
    let data_dir = match cfg.path("data_dir") {
        Some(d) => d,
        None => return config_problem("config key `data_dir` is required"),
    };
    let out = out_dir(cfg)?;
    let manifest = load_manifest_dir(&data_dir)?;
    let split_path = out.join("split.tsv");
    if !split_path.is_file() {
        return config_problem(format!("{} not found; run `prepare` first", split_path.display()));
    }
    let split = record_io::parse_split(&std::fs::read_to_string(&split_path)?, 0)?;
    let cache_dir = out.join("cache");

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, label) in &manifest.entries {
        let (_fs, samples) = cache::read_record(&cache_dir.join(format!("{id}.pre")))?;
        let signal = LabeledSignal { id: id.clone(), samples, label: *label };
        if split.train.contains(id) {
            train.push(signal);
        } else if split.test.contains(id) {
            test.push(signal);
        } else {
            bail!("record {id} missing from the split file");
        }
    }
    Ok((train, test))
}

fn model_config(cfg: &Config, dropout: f64) -> Result<ModelConfig> {
    let divisor = cfg.usize_or("model_divisor", 1)?;
    let mut model =
        if divisor > 1 { ModelConfig::shrunken(divisor) } else { ModelConfig::default() };
    model.dropout = dropout;
    model.window_len = cfg.usize_or("window_len", 512)?;
    Ok(model)
}

fn cmd_train(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let (train_records, test_records) = load_cached_split(cfg)?;
    let dropout = cfg.f64_or("dropout", 0.5)?;
    let stretch = cfg.f64_or("stretch", 0.05)?;
    let config = TrainConfig {
        epochs: cfg.usize_or("epochs", 200)?,
        batch_size: cfg.usize_or("batch_size", 50)?,
        initial_lr: cfg.f64_or("lr", 0.001)?,
        dropout,
        seed: cfg.u64_or("seed", 0)?,
        augmentation: AugmentationConfig {
            flip_prob: cfg.f64_or("flip_prob", 0.5)?,
            resample_prob: cfg.f64_or("resample_prob", 0.8)?,
            stretch_min: -stretch,
            stretch_max: stretch,
            enabled: cfg.bool_or("augment", true)?,
        },
        window: window_config(cfg)?,
        model: model_config(cfg, dropout)?,
    };

    println!(
        "training on {} records, testing on {} ({} epochs, batch {})",
        train_records.len(),
        test_records.len(),
        config.epochs,
        config.batch_size
    );
    let outcome = train::train(&train_records, &test_records, &config, Some(&out))?;
    if let Some(best) = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch) {
        println!(
            "best epoch {}: test accuracy {:.4}, test loss {:.4}",
            best.epoch, best.test_acc, best.test_loss
        );
    }
    println!("history: {}", out.join("history.csv").display());
    println!("best checkpoint: {}", train::resolve_best(&out)?.display());
    Ok(())
}

fn checkpoint_path(cfg: &Config, out: &Path, env_override: bool) -> Result<PathBuf> {
    if env_override {
        if let Ok(path) = std::env::var("ECGCRNN_CHECKPOINT") {
            return Ok(PathBuf::from(path));
        }
    }
    if let Some(path) = cfg.path("checkpoint") {
        return Ok(path);
    }
    train::resolve_best(out).map_err(|_| {
        ConfigProblem(format!(
            "no checkpoint: set `checkpoint` or train into {} first",
            out.display()
        ))
        .into()
    })
}

fn cmd_evaluate(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = checkpoint_path(cfg, &out, false)?;
    let (params, meta) = nn::load_checkpoint(&ckpt)?;
    println!("checkpoint {} (epoch {})", ckpt.display(), meta.epoch);

    let (train_records, test_records) = load_cached_split(cfg)?;
    let records = match cfg.str_or("split_part", "test") {
        "train" => train_records,
        "test" => test_records,
        other => return config_problem(format!("split_part {other:?} (use train|test)")),
    };
    let batch_size = cfg.usize_or("batch_size", 1)?;
    let run = train::evaluate(&params, &records, batch_size, &window_config(cfg)?)?;

    let pred: Vec<_> = run.predictions.iter().map(|p| p.predicted).collect();
    let truth: Vec<_> = run.predictions.iter().map(|p| p.truth).collect();
    let cm = eval::confusion(&pred, &truth)?;
    let metrics = eval::class_metrics(&cm)?;
    let score = eval::cinc_score_from_metrics(&metrics)?;

    let json = eval::metrics_json(&cm, &metrics, score);
    std::fs::write(out.join("metrics.json"), &json)?;
    let table = eval::metrics_table(&metrics, score);
    std::fs::write(out.join("metrics.txt"), &table)?;
    println!("{table}");
    println!("mean cross-entropy: {:.4}", run.loss);
    println!("metrics: {}", out.join("metrics.json").display());
    Ok(())
}

fn cmd_classify(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = checkpoint_path(cfg, &out, false)?;
    let (params, _) = nn::load_checkpoint(&ckpt)?;
    let input = match cfg.path("input") {
        Some(p) if p.exists() => p,
        Some(p) => return config_problem(format!("input {} does not exist", p.display())),
        None => return config_problem("config key `input` is required"),
    };
    let source_fs = cfg.f64_or("source_fs", 300.0)?;
    let target_fs = cfg.f64_or("target_fs", 200.0)?;
    let wcfg = window_config(cfg)?;

    // Prefer the training-set scale recorded by `prepare`.
    let metadata_path = out.join("metadata.json");
    let train_scale: Option<f64> = std::fs::read_to_string(&metadata_path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("scale").and_then(|s| s.as_f64()));
    if train_scale.is_none() {
        log::info!("no prepare metadata found; scaling each signal by its own deviation");
    }

    let mut inputs = Vec::new();
    if input.is_dir() {
        for entry in std::fs::read_dir(&input)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("mat") {
                inputs.push(path);
            }
        }
        inputs.sort();
    } else {
        inputs.push(input);
    }
    if inputs.is_empty() {
        return config_problem("no .mat files found in the input directory");
    }

    let mut csv = String::from("record_id,class,prob_normal,prob_afib,prob_other,prob_noise\n");
    for path in &inputs {
        let (fs, raw) = stream::load_replay_signal(path, source_fs as u32)?;
        let coeffs = dsp::design_bandpass(&bandpass_spec(cfg, fs as f64)?)?;
        let processed = preprocess(&raw, &coeffs, fs as f64, target_fs)?;
        let scaled: Vec<f64> = match train_scale {
            Some(s) => processed.iter().map(|v| v / s).collect(),
            None => dsp::standardize_per_signal(&processed)?,
        };
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
        let tensor = ecgcrnn::pipeline::extract_windows(id, &scaled, 0, &wcfg)?;
        let (probs, _) = nn::model_forward(&tensor, &params, nn::Phase::Eval)?;
        let class = train::argmax_class(&probs);
        csv.push_str(&format!(
            "{id},{},{},{},{},{}\n",
            class.token(),
            probs[0],
            probs[1],
            probs[2],
            probs[3]
        ));
        println!("{id}: {} (windows: {})", class.name(), tensor.nw);
    }
    let csv_path = out.join("predictions.csv");
    std::fs::write(&csv_path, csv)?;
    println!("predictions: {}", csv_path.display());
    Ok(())
}

fn stream_config(cfg: &Config) -> Result<StreamConfig> {
    Ok(StreamConfig {
        group_windows: cfg.usize_or("group_windows", 25)?,
        window: window_config(cfg)?,
        fs_out: cfg.f64_or("target_fs", 200.0)?,
        low_cut: cfg.f64_or("low_cut", 0.5)?,
        high_cut: cfg.f64_or("high_cut", 40.0)?,
        filter_order: cfg.usize_or("filter_order", 2)?,
        capacity: cfg.usize_or("capacity", 1 << 17)?,
        margin: cfg.usize_or("margin", 512)?,
    })
}

fn cmd_serve(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = checkpoint_path(cfg, &out, true)?;
    if !ckpt.is_file() {
        return config_problem(format!("checkpoint {} not found", ckpt.display()));
    }
    let (params, meta) = nn::load_checkpoint(&ckpt)?;
    let port = cfg.u32_or("port", 7200)? as u16;
    let config = ServeConfig {
        addr: format!("0.0.0.0:{port}").parse()?,
        stream: stream_config(cfg)?,
        prediction_log: Some(out.join("predictions.ndjson")),
        session_expiry: std::time::Duration::from_secs(cfg.u64_or("session_expiry_s", 120)?),
    };
    println!(
        "serving checkpoint {} (epoch {}) on port {port}; predictions logged to {}",
        ckpt.display(),
        meta.epoch,
        out.join("predictions.ndjson").display()
    );
    let handle = stream::serve(config, params)?;
    handle.wait();
    Ok(())
}

fn cmd_replay(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let ckpt = checkpoint_path(cfg, &out, true)?;
    let (params, _) = nn::load_checkpoint(&ckpt)?;
    let input = match cfg.path("input") {
        Some(p) if p.is_file() => p,
        Some(p) => return config_problem(format!("input {} is not a file", p.display())),
        None => return config_problem("config key `input` is required"),
    };
    let default_fs = cfg.u32_or("replay_fs", 300)?;
    let frame_len = cfg.usize_or("frame_len", 1000)?;
    let session = cfg.str_or("session", "replay");

    let (fs, samples) = stream::load_replay_signal(&input, default_fs)?;
    let predictions =
        stream::replay(&params, &stream_config(cfg)?, session, fs, &samples, frame_len)?;

    let ndjson_path = out.join("replay.ndjson");
    let mut f = std::fs::File::create(&ndjson_path)?;
    for p in &predictions {
        writeln!(f, "{}", stream::prediction_message(p).to_json())?;
    }
    println!(
        "replayed {} samples at {fs} Hz -> {} prediction(s) -> {}",
        samples.len(),
        predictions.len(),
        ndjson_path.display()
    );
    Ok(())
}

fn cmd_plot_history(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let history_path = cfg.path("history").unwrap_or_else(|| out.join("history.csv"));
    if !history_path.is_file() {
        return config_problem(format!("history file {} not found", history_path.display()));
    }
    let rows = plot::parse_history_csv(&std::fs::read_to_string(&history_path)?)?;
    let svg = plot::render_history_svg(&rows);
    let svg_path = out.join("history.svg");
    std::fs::write(&svg_path, svg)?;
    println!("plotted {} epochs -> {}", rows.len(), svg_path.display());
    Ok(())
}

fn cmd_filter_response(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let fs = cfg.f64_or("response_fs", 300.0)?;
    let spec = bandpass_spec(cfg, fs)?;
    let coeffs = dsp::design_bandpass(&spec)?;
    let points = cfg.usize_or("points", 500)?.max(2);

    let mut csv = String::from("freq_hz,magnitude\n");
    for i in 0..points {
        let f = fs / 2.0 * i as f64 / (points - 1) as f64;
        csv.push_str(&format!("{f},{}\n", coeffs.magnitude_at(f, fs)));
    }
    let path = out.join("filter_response.csv");
    std::fs::write(&path, csv)?;
    println!(
        "band-pass {}-{} Hz order {} at {fs} Hz -> {}",
        spec.low_cut,
        spec.high_cut,
        spec.order,
        path.display()
    );
    Ok(())
}
