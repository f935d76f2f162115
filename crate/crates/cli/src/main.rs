mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use manifest::{beside, ManifestWriter};
use stylehead::annotation::{annotate_corpus, read_au_tables, write_records, AuLookup, DropConfig, EmotionFile};
use stylehead::discriminators::pretrain_sync;
use stylehead::matfile;
use stylehead::metrics::evaluate;
use stylehead::synthdata::{make_dataset, read_corpus, write_corpus, Split, WorldConfig};
use stylehead::textstyle::pretrain_backbone;
use stylehead::trainer::{
    run_training, Checkpoint, InferenceModel, RunOptions, StageSelect, SyncCheckpoint, TextCheckpoint, TrainConfig,
};

#[derive(Parser)]
#[command(name = "stylehead", version, about = "Text-guided speaking-style animation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of audio, expression sequences and captions.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Caption clips from per-frame AU intensity tables and emotion groups.
    Annotate {
        #[arg(long)]
        au_tables: PathBuf,
        #[arg(long)]
        emotions: PathBuf,
        #[arg(long)]
        lookup: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        drop_emotion: f64,
        #[arg(long, default_value_t = 0.0)]
        drop_au: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Pretrain the lip-sync discriminator.
    PretrainSync {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the text backbone.
    PretrainText {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Skip pretraining; the backbone keeps its random initialization.
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Two-stage training.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        text_checkpoint: Option<PathBuf>,
        #[arg(long)]
        sync_checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate an expression sequence from a caption and an audio file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        audio: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = usize::MAX)]
        max_clips: usize,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot expression channels of a sequence file to PNG.
    Plot {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 320)]
        height: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// An error caused by the invocation rather than by the program.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<stylehead::Error>() {
            return if e.is_user_error() { 1 } else { 2 };
        }
    }
    2
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
            Ok(TrainConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?)
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, frames, seed, out } => {
            let world = WorldConfig::default();
            let m = ManifestWriter::start(
                out.join("manifest.json"),
                "gen-data",
                Some(seed),
                json!({ "n": n, "frames": frames, "world": world }),
                &[],
            )?;
            let corpus = make_dataset(&world, n, frames, seed)?;
            let files = write_corpus(&out, &corpus, seed)?;
            m.finish(&files)?;
            println!("wrote {} clips to {}", corpus.samples.len(), out.display());
        }
        Command::Annotate { au_tables, emotions, lookup, drop_emotion, drop_au, seed, out } => {
            let drop = DropConfig { emotion: drop_emotion, au: drop_au };
            let mut inputs = vec![au_tables.as_path(), emotions.as_path()];
            inputs.extend(lookup.as_deref());
            let m = ManifestWriter::start(beside(&out), "annotate", Some(seed), json!({ "drop": drop }), &inputs)?;
            let tables = read_au_tables(&au_tables)?;
            let emo = EmotionFile::load(&emotions)?;
            let lookup = match &lookup {
                Some(p) => AuLookup::load(p)?,
                None => AuLookup::default(),
            };
            let records = annotate_corpus(&tables, &emo.table, &emo.clips, &lookup, seed, drop)?;
            write_records(&out, &records)?;
            m.finish(std::slice::from_ref(&out))?;
            println!("annotated {} clips into {}", records.len(), out.display());
        }
        Command::PretrainSync { corpus, config, epochs, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            if let Some(e) = epochs {
                cfg.sync_pretrain.epochs = e;
            }
            let mut inputs = vec![corpus.as_path()];
            inputs.extend(config.as_deref());
            let m = ManifestWriter::start(beside(&out), "pretrain-sync", Some(seed), to_value(&cfg.sync_pretrain), &inputs)?;
            let data = read_corpus(&corpus)?;
            let (d, report) = pretrain_sync(&data, &cfg.sync_pretrain, seed)?;
            SyncCheckpoint::new(&d, report.clone()).save(&out)?;
            m.finish(std::slice::from_ref(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::PretrainText { corpus, config, iterations, no_clip, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            if let Some(i) = iterations {
                cfg.text_pretrain.iterations = i;
            }
            let skip = no_clip || cfg.ablations.no_clip;
            let mut inputs = vec![corpus.as_path()];
            inputs.extend(config.as_deref());
            let settings = json!({ "text_pretrain": cfg.text_pretrain, "no_clip": skip });
            let m = ManifestWriter::start(beside(&out), "pretrain-text", Some(seed), settings, &inputs)?;
            let data = read_corpus(&corpus)?;
            let (backbone, report) = pretrain_backbone(&data, &cfg.text_pretrain, seed, skip)?;
            TextCheckpoint::new(&backbone, report.clone()).save(&out)?;
            m.finish(std::slice::from_ref(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train { corpus, config, stage, text_checkpoint, sync_checkpoint, resume, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut inputs = vec![corpus.as_path()];
            inputs.extend(config.as_deref());
            inputs.extend(text_checkpoint.as_deref());
            inputs.extend(sync_checkpoint.as_deref());
            inputs.extend(resume.as_deref());
            let m = ManifestWriter::start(out.join("manifest.json"), "train", Some(cfg.seed), to_value(&cfg), &inputs)?;
            let resolved = out.join("config.toml");
            std::fs::write(&resolved, cfg.to_toml()).with_context(|| format!("writing {}", resolved.display()))?;
            let data = read_corpus(&corpus)?;
            let mut outputs = vec![resolved];
            let backbone = match &text_checkpoint {
                Some(p) => TextCheckpoint::load(p)?.backbone()?,
                None => {
                    let (b, report) = pretrain_backbone(&data, &cfg.text_pretrain, cfg.seed, cfg.ablations.no_clip)?;
                    let p = out.join("text_backbone.json");
                    TextCheckpoint::new(&b, report).save(&p)?;
                    outputs.push(p);
                    b
                }
            };
            let d_sync = match &sync_checkpoint {
                Some(p) => SyncCheckpoint::load(p)?.discriminator()?,
                None => {
                    let (d, report) = pretrain_sync(&data, &cfg.sync_pretrain, cfg.seed)?;
                    let p = out.join("sync_discriminator.json");
                    SyncCheckpoint::new(&d, report).save(&p)?;
                    outputs.push(p);
                    d
                }
            };
            let options = RunOptions {
                stage: Some(match stage {
                    StageArg::One => StageSelect::One,
                    StageArg::Two => StageSelect::Two,
                    StageArg::All => StageSelect::All,
                }),
                out_dir: Some(out.clone()),
                resume: resume.as_deref().map(Checkpoint::load).transpose()?,
            };
            let (_, report) = run_training(&data, &cfg, backbone, d_sync, options)?;
            let summary = json!({
                "start_iteration": report.start_iteration,
                "end_iteration": report.end_iteration,
                "initial_validation_cos": report.initial_validation_cos,
                "final_validation_cos": report.final_validation_cos,
                "seconds": report.seconds,
                "checkpoints": report.checkpoints,
            });
            let summary_path = out.join("train_summary.json");
            std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
                .with_context(|| format!("writing {}", summary_path.display()))?;
            outputs.extend(report.checkpoints.iter().cloned());
            outputs.extend(report.log.iter().cloned());
            outputs.push(summary_path);
            m.finish(&outputs)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Infer { checkpoint, text, audio, out } => {
            let m = ManifestWriter::start(
                beside(&out),
                "infer",
                None,
                json!({ "text": text }),
                &[checkpoint.as_path(), audio.as_path()],
            )?;
            let model = InferenceModel::load(&checkpoint)?;
            let audio_mat = matfile::read(&audio)?;
            let style = model.style_codes(&[text.as_str()])?.row(0).to_vec();
            let seq = model.generate_with_style(&style, &audio_mat)?;
            matfile::write(&out, &seq)?;
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".style.json");
            let sidecar = out.with_file_name(name);
            let body = serde_json::to_string_pretty(&json!({ "text": text, "style": style }))?;
            std::fs::write(&sidecar, body).with_context(|| format!("writing {}", sidecar.display()))?;
            m.finish(&[out.clone(), sidecar])?;
            println!("wrote {} frames to {}", seq.nrows(), out.display());
        }
        Command::Eval { checkpoint, corpus, split, max_clips, label, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let settings = json!({ "split": split, "max_clips": max_clips, "label": label });
            let m = ManifestWriter::start(beside(&out), "eval", None, settings, &[checkpoint.as_path(), corpus.as_path()])?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = InferenceModel::from_checkpoint(&ckpt)?;
            let d_sync = ckpt.d_sync()?;
            let data = read_corpus(&corpus)?;
            let label = label.unwrap_or_else(|| ckpt.config.ablations.label());
            let report = evaluate(&model, &d_sync, &data, split, max_clips, &label)?;
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            m.finish(std::slice::from_ref(&out))?;
            println!("{text}");
        }
        Command::Plot { sequence, channels, width, height, out } => {
            if width < 64 || height < 64 {
                bail!(user("plot needs at least 64x64 pixels"));
            }
            let settings = json!({ "channels": channels, "width": width, "height": height });
            let m = ManifestWriter::start(beside(&out), "plot", None, settings, &[sequence.as_path()])?;
            let seq = matfile::read(&sequence)?;
            if seq.nrows() == 0 {
                bail!(user(format!("{}: sequence has no frames", sequence.display())));
            }
            if let Some(&bad) = channels.iter().find(|&&c| c >= seq.ncols()) {
                bail!(user(format!("channel {bad} out of range: sequence has {} channels", seq.ncols())));
            }
            let img = plot::plot_channels(&seq, &channels, width, height);
            img.save(&out).with_context(|| format!("writing {}", out.display()))?;
            m.finish(std::slice::from_ref(&out))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
