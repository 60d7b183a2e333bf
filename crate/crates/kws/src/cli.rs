//! The `kws` command line: feature extraction, dataset synthesis, training,
//! streaming detection, evaluation, and model accounting. Everything here is
//! a thin shell over the library; diagnostics go to standard error, data to
//! standard output or `--out` paths.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training
//! divergence.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::{
    self, default_thresholds, synth::SynthConfig, EvalScores, EvalSet, HitWindow,
};
use crate::frontend::{self, MelConfig};
use crate::labeling::{self, KeywordSpec, LabelMode};
use crate::scoring::{self, ScoreMethod};
use crate::topology::{
    builtin_config, count_macs, count_params, receptive_field, MacConvention, Model, ModelConfig,
    BUILTIN_CONFIG_NAMES,
};
use crate::training::{self, Recipe, TrainConfig};
use crate::wav;

#[derive(Parser)]
#[command(
    name = "kws",
    about = "Streaming keyword spotting: log-mel front-end, SVDF network, ROC harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract 40-dim log-mel frames from WAV or raw PCM16 on stdin.
    Features(FeaturesArgs),
    /// Generate a seeded synthetic dataset (WAV files + JSONL manifest).
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Run streaming detection over audio, emitting scores and events.
    Stream(StreamArgs),
    /// Evaluate a model: ROC sweep, FR at a target FA/h, latency.
    Eval(EvalArgs),
    /// Report parameter count, MACs, and receptive field of a config.
    Count(CountArgs),
}

#[derive(Args)]
struct FeaturesArgs {
    /// Input WAV (PCM16, mono, 16 kHz). Omit to read raw PCM16 from stdin.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Emit CSV (timestamp_ms,e0..e39) instead of raw little-endian f32.
    #[arg(long)]
    csv: bool,
    /// Output path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for audio/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keyword utterance count.
    #[arg(long, default_value_t = 100)]
    pos: usize,
    /// Negative utterance count.
    #[arg(long, default_value_t = 100)]
    neg: usize,
    /// Background noise sigma.
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    /// Negative utterance duration range in ms.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    negative_ms: Option<Vec<u64>>,
    /// Keyword spec TOML; defaults to the built-in wake phrase.
    #[arg(long)]
    keyword: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSONL with alignments).
    #[arg(long)]
    manifest: PathBuf,
    /// Builtin config name or a ModelConfig TOML path.
    #[arg(long)]
    config: String,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Training config TOML; flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, value_parser = parse_recipe)]
    recipe: Option<Recipe>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    adaptation_rate: Option<f32>,
    #[arg(long)]
    encoder_init: Option<PathBuf>,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Positive-label widening in frames for binary targets.
    #[arg(long, default_value_t = 10)]
    extra_positives: usize,
    /// Keyword spec TOML; defaults to the built-in wake phrase.
    #[arg(long)]
    keyword: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input WAV; omit to read raw PCM16 from stdin.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    threshold: f32,
    #[arg(long, default_value_t = 1000)]
    suppression_ms: u64,
    /// Score CSV destination ('-' for stdout).
    #[arg(long, default_value = "-")]
    scores: String,
    /// Event JSONL destination ('-' for stdout).
    #[arg(long, default_value = "-")]
    events: String,
    /// Keyword spec TOML for subword models.
    #[arg(long)]
    keyword: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file; optional when replaying a score cache.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluation manifest; optional when replaying a score cache.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reuse cached score streams instead of running detection.
    #[arg(long)]
    cache_in: Option<PathBuf>,
    /// Write score streams for later replay.
    #[arg(long)]
    cache_out: Option<PathBuf>,
    /// JSON report destination ('-' for stdout).
    #[arg(long, default_value = "-")]
    report: String,
    /// ROC curve CSV (threshold,fa_per_hour,fr_rate) for plotting.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    target_fa: f64,
    #[arg(long, default_value_t = 1000)]
    suppression_ms: u64,
    #[arg(long, default_value_t = 100)]
    hit_before_ms: u64,
    #[arg(long, default_value_t = 750)]
    hit_after_ms: u64,
    /// Accept a negative set too short to resolve the FA target.
    #[arg(long)]
    allow_short_negatives: bool,
    /// Worker threads for scoring (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    keyword: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Builtin config name or a ModelConfig TOML path.
    #[arg(long)]
    config: String,
}

fn parse_recipe(s: &str) -> std::result::Result<Recipe, String> {
    match s {
        "one_stage" => Ok(Recipe::OneStage),
        "two_stage" => Ok(Recipe::TwoStage),
        _ => Err(format!("unknown recipe '{s}' (one_stage, two_stage)")),
    }
}

/// Entry point used by the `kws` binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Features(args) => cmd_features(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Stream(args) => cmd_stream(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Count(args) => cmd_count(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 1,
                Error::Diverged { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn load_pcm(wav_path: Option<&Path>) -> Result<Vec<f32>> {
    match wav_path {
        Some(path) => {
            let (samples, rate) = wav::read_wav(path)?;
            if rate != 16_000 {
                return Err(Error::Data(format!(
                    "{}: sample rate {rate} != 16000 (resampling is out of scope)",
                    path.display()
                )));
            }
            Ok(samples)
        }
        None => {
            let mut bytes = Vec::new();
            std::io::stdin()
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io("<stdin>", e))?;
            Ok(wav::pcm16_bytes_to_f32(&bytes))
        }
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => Ok(Box::new(
            fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn out_target(spec: &str) -> Option<PathBuf> {
    if spec == "-" {
        None
    } else {
        Some(PathBuf::from(spec))
    }
}

fn load_keyword(path: Option<&Path>) -> Result<KeywordSpec> {
    match path {
        Some(p) => KeywordSpec::load(p),
        None => Ok(KeywordSpec::ok_google()),
    }
}

fn load_model_config(spec: &str) -> Result<ModelConfig> {
    if BUILTIN_CONFIG_NAMES.contains(&spec) {
        return builtin_config(spec);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "'{spec}' is neither a builtin config ({}) nor a readable file",
            BUILTIN_CONFIG_NAMES.join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{spec}: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn cmd_features(args: FeaturesArgs) -> Result<()> {
    let pcm = load_pcm(args.wav.as_deref())?;
    let frames = frontend::stream_frames(&pcm, &MelConfig::default())?;
    eprintln!("extracted {} frames from {} samples", frames.len(), pcm.len());
    let mut out = open_out(args.out.as_deref())?;
    let io_err = |e: std::io::Error| Error::io("<output>", e);
    if args.csv {
        frontend::write_frames_csv(&frames, &mut out).map_err(io_err)?;
    } else {
        frontend::write_frames_f32le(&frames, &mut out).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = load_keyword(args.keyword.as_deref())?;
    let mut cfg = SynthConfig {
        seed: args.seed,
        noise_level: args.noise,
        ..SynthConfig::default()
    };
    if let Some(range) = &args.negative_ms {
        cfg.negative_ms = (range[0], range[1]);
    }
    eprintln!(
        "synth config: {}",
        toml::to_string(&cfg).unwrap_or_default().replace('\n', " ")
    );
    let out = evaluation::synth::generate_dataset(&args.out, &spec, &cfg, args.pos, args.neg)?;
    eprintln!(
        "wrote {} positives, {} negatives ({:.2} h negative audio) to {}",
        out.positives,
        out.negatives,
        out.negative_ms as f64 / 3_600_000.0,
        out.manifest_path.display()
    );
    println!("{}", out.manifest_path.display());
    Ok(())
}

/// Flags > config file > builtin defaults.
fn effective_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.train_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.recipe {
        cfg.recipe = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.adaptation_rate {
        cfg.adaptation_rate = v;
    }
    if let Some(v) = &args.encoder_init {
        cfg.encoder_init = Some(v.clone());
    }
    if args.freeze_encoder {
        cfg.freeze_encoder = true;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = Some(v);
    }
    if let Some(v) = &args.checkpoint_dir {
        cfg.checkpoint_dir = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let model_config = load_model_config(&args.config)?;
    let spec = load_keyword(args.keyword.as_deref())?;
    let cfg = effective_train_config(&args)?;
    eprintln!(
        "effective training config:\n{}",
        toml::to_string(&cfg).unwrap_or_default()
    );

    let mel = MelConfig::default();
    let ctx = model_config.context;
    let binary_targets = matches!(
        model_config.layers.last(),
        Some(crate::topology::LayerSpec::Softmax { classes: 2 })
    );

    let report = match cfg.recipe {
        Recipe::OneStage => {
            let mode = if binary_targets {
                LabelMode::Keyword { spec: &spec, extra_positives: args.extra_positives }
            } else {
                LabelMode::Subword { spec: &spec }
            };
            let data = labeling::sequences_from_manifest(&args.manifest, &mel, &ctx, mode)?;
            eprintln!("loaded {} training sequences", data.len());
            let mut model = Model::new(model_config, cfg.seed)?;
            let report = training::train(&mut model, &data, &cfg)?;
            model.save(&args.out)?;
            report
        }
        Recipe::TwoStage => {
            if !binary_targets {
                return Err(Error::Config(
                    "two_stage needs a binary final softmax; the encoder head is added internally"
                        .into(),
                ));
            }
            let encoder_data = labeling::sequences_from_manifest(
                &args.manifest,
                &mel,
                &ctx,
                LabelMode::Subword { spec: &spec },
            )?;
            let decoder_data = labeling::sequences_from_manifest(
                &args.manifest,
                &mel,
                &ctx,
                LabelMode::Keyword { spec: &spec, extra_positives: args.extra_positives },
            )?;
            eprintln!(
                "loaded {} encoder / {} decoder sequences",
                encoder_data.len(),
                decoder_data.len()
            );
            let outcome = training::train_two_stage(
                &model_config,
                spec.num_classes,
                &encoder_data,
                &decoder_data,
                &cfg,
                &cfg,
            )?;
            outcome.model.save(&args.out)?;
            eprintln!(
                "encoder stage final loss {:.6}",
                outcome.encoder_report.final_loss
            );
            outcome.decoder_report
        }
    };

    eprintln!("saved model to {}", args.out.display());
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?
    );
    Ok(())
}

fn score_method_for(model: &Model, keyword: Option<&Path>) -> Result<ScoreMethod> {
    if model.output_classes() == 2 {
        Ok(ScoreMethod::PositiveClass)
    } else {
        let spec = load_keyword(keyword)?;
        Ok(ScoreMethod::SmoothedPosterior {
            class_sequence: spec.class_sequence(),
            window: ScoreMethod::DEFAULT_WINDOW,
        })
    }
}

fn cmd_stream(args: StreamArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let method = score_method_for(&model, args.keyword.as_deref())?;
    let pcm = load_pcm(args.wav.as_deref())?;
    let (points, events) = scoring::detect_stream(
        &model,
        &pcm,
        MelConfig::default(),
        method,
        args.threshold,
        args.suppression_ms,
    )?;
    eprintln!(
        "{} score points, {} events at threshold {}",
        points.len(),
        events.len(),
        args.threshold
    );

    let io_err = |e: std::io::Error| Error::io("<output>", e);
    let mut scores_out = open_out(out_target(&args.scores).as_deref())?;
    writeln!(scores_out, "timestamp_ms,score").map_err(io_err)?;
    for p in &points {
        writeln!(scores_out, "{},{}", p.timestamp_ms, p.score).map_err(io_err)?;
    }
    drop(scores_out);

    let mut events_out = open_out(out_target(&args.events).as_deref())?;
    for e in &events {
        let line = serde_json::to_string(e).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(events_out, "{line}").map_err(io_err)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    positives: usize,
    negative_hours: f64,
    target_fa_per_hour: f64,
    operating_point: Option<evaluation::OperatingPoint>,
    operating_point_error: Option<String>,
    latency_in_window_fraction: Option<f64>,
    roc: Vec<evaluation::RocPoint>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scores: EvalScores = match &args.cache_in {
        Some(path) => EvalScores::load(path)?,
        None => {
            let (model_path, manifest) = match (&args.model, &args.manifest) {
                (Some(m), Some(d)) => (m, d),
                _ => {
                    return Err(Error::InvalidArgument(
                        "eval needs --model and --manifest (or --cache-in)".into(),
                    ))
                }
            };
            let model = Model::load(model_path)?;
            let spec = load_keyword(args.keyword.as_deref())?;
            let method = score_method_for(&model, args.keyword.as_deref())?;
            let set = EvalSet::from_manifest(manifest, &spec)?;
            eprintln!(
                "scoring {} utterances ({:.2} h negative audio)",
                set.utterances.len(),
                set.negative_hours()
            );
            evaluation::score_eval_set(&model, &MelConfig::default(), &method, &set, args.jobs)?
        }
    };
    if let Some(path) = &args.cache_out {
        scores.save(path)?;
        eprintln!("cached score streams to {}", path.display());
    }

    let window = HitWindow { before_ms: args.hit_before_ms, after_ms: args.hit_after_ms };
    let thresholds = default_thresholds();
    let roc = evaluation::roc_curve(&scores, &thresholds, args.suppression_ms, window)?;
    let operating = evaluation::fr_at_fa(
        &scores,
        args.target_fa,
        &thresholds,
        args.suppression_ms,
        window,
        args.allow_short_negatives,
    );
    let (operating_point, operating_point_error, latency_fraction) = match operating {
        Ok(op) => {
            let latency =
                evaluation::latency_at_threshold(&scores, op.threshold, args.suppression_ms, window);
            (Some(op), None, Some(latency.in_window_fraction()))
        }
        Err(e) => (None, Some(e.to_string()), None),
    };

    if let Some(path) = &args.roc_csv {
        let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(out, "threshold,fa_per_hour,fr_rate").map_err(|e| Error::io(path, e))?;
        for p in &roc {
            writeln!(out, "{},{},{}", p.threshold, p.fa_per_hour, p.fr_rate)
                .map_err(|e| Error::io(path, e))?;
        }
    }

    let report = EvalReport {
        positives: scores.positives(),
        negative_hours: scores.negative_hours(),
        target_fa_per_hour: args.target_fa,
        operating_point,
        operating_point_error,
        latency_in_window_fraction: latency_fraction,
        roc,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = open_out(out_target(&args.report).as_deref())?;
    writeln!(out, "{json}").map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<()> {
    let config = load_model_config(&args.config)?;
    let params = count_params(&config)?;
    let per_inference = count_macs(&config, MacConvention::PerInference)?;
    let per_frame = count_macs(&config, MacConvention::Per10MsFrame)?;
    let field = receptive_field(&config);
    println!("config: {}", config.name);
    println!(
        "context: left={} right={} stride={} (input dim {})",
        config.context.left,
        config.context.right,
        config.context.stride,
        config.input_dim()
    );
    println!("parameters: {params}");
    println!("macs_per_inference: {per_inference}");
    println!("macs_per_10ms_frame: {per_frame}");
    println!(
        "receptive_field: {} inference steps ({} ms) + {} left context frames",
        field.svdf_steps, field.svdf_ms, field.left_context_frames
    );
    Ok(())
}
