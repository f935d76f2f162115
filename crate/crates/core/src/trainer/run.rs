use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{param_norms, train_step, Checkpoint, Models, StepRecord, TrainConfig, TrainState};
use crate::discriminators::SyncDiscriminator;
use crate::error::{Error, Result};
use crate::losses::loss_cos;
use crate::synthdata::{Corpus, Sample, Split};
use crate::textstyle::{encode_text_style, TextBackbone};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelect {
    One,
    Two,
    All,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub stage: Option<StageSelect>,
    /// Receives the JSON-lines log, checkpoints and failure dumps.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Stage { iteration: usize, stage: u8 },
    Step(StepRecord),
    Validation { iteration: usize, cos: f64 },
    Checkpoint { iteration: usize, path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub start_iteration: usize,
    pub end_iteration: usize,
    pub initial_validation_cos: Option<f64>,
    pub final_validation_cos: Option<f64>,
    pub seconds: f64,
    pub checkpoints: Vec<PathBuf>,
    pub log: Option<PathBuf>,
    pub steps: Vec<StepRecord>,
}

fn validation_clips<'a>(corpus: &'a Corpus, config: &TrainConfig) -> Vec<&'a Sample> {
    corpus.split(Split::Val).into_iter().take(config.validation_clips).collect()
}

/// Mean `1 - cos(s_t, s_v)` over validation clips using their full
/// captions. `None` when the run has no video style encoder.
pub fn validation_cos(models: &Models, corpus: &Corpus, config: &TrainConfig) -> Result<Option<f64>> {
    let Some(video) = &models.video else { return Ok(None) };
    let clips = validation_clips(corpus, config);
    if clips.is_empty() {
        return Err(Error::Invalid("corpus has no validation clips".into()));
    }
    let mut total = 0.0;
    for chunk in clips.chunks(32) {
        let sentences: Vec<&str> = chunk.iter().map(|s| s.sentence.as_str()).collect();
        let s_t = encode_text_style(&models.backbone, models.adapter.as_ref(), &sentences, config.beta)?;
        let seqs: Vec<_> = chunk.iter().map(|s| &s.expression).collect();
        let s_v = video.encode(&seqs)?;
        for (a, b) in s_t.rows().into_iter().zip(s_v.rows()) {
            total += loss_cos(&a.to_vec(), &b.to_vec())?;
        }
    }
    Ok(Some(total / clips.len() as f64))
}

struct Log {
    out: Option<BufWriter<File>>,
}

impl Log {
    fn open(dir: Option<&Path>, append: bool) -> Result<(Self, Option<PathBuf>)> {
        let Some(dir) = dir else { return Ok((Self { out: None }, None)) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok((Self { out: Some(BufWriter::new(file)) }, Some(path)))
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(rec).expect("log record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }
}

fn dump_failure(dir: &Path, state: &TrainState, err: &Error) -> Result<PathBuf> {
    let m = &state.models;
    let mut norms = serde_json::Map::new();
    let mut add = |name: &str, params: &crate::nn::ParamSet| {
        norms.insert(name.to_string(), serde_json::json!(param_norms(params)));
    };
    if let Some(a) = &m.adapter {
        add("adapter", &a.params);
    }
    if let Some(v) = &m.video {
        add("video", &v.params);
    }
    add("audio", &m.audio.params);
    add("decoder", &m.decoder.params);
    add("d_tem", &m.d_tem.params);
    let dump = serde_json::json!({ "iteration": state.iteration, "error": err.to_string(), "param_norms": norms });
    let path = dir.join(format!("failure_{:06}.json", state.iteration));
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("dump serializes")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Run stage 1, stage 2 or both, starting fresh from the pretrained
/// modules or from `options.resume`.
pub fn run_training(
    corpus: &Corpus,
    config: &TrainConfig,
    backbone: TextBackbone,
    d_sync: SyncDiscriminator,
    options: RunOptions,
) -> Result<(TrainState, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let resumed = options.resume.is_some();
    let mut state = match options.resume {
        Some(ckpt) => {
            if &ckpt.config != config {
                return Err(Error::Config("resume checkpoint was written with a different configuration".into()));
            }
            ckpt.restore()?
        }
        None => TrainState::new(config, backbone, d_sync)?,
    };
    let s1 = config.schedule.stage1_iterations;
    let end = match options.stage.unwrap_or(StageSelect::All) {
        StageSelect::One => s1,
        StageSelect::Two | StageSelect::All => config.schedule.total(),
    };
    if options.stage == Some(StageSelect::Two) && state.iteration < s1 {
        return Err(Error::Config(format!(
            "stage 2 starts at iteration {s1}; resume from a checkpoint written at the end of stage 1"
        )));
    }
    let dir = options.out_dir.as_deref();
    let (mut log, log_path) = Log::open(dir, resumed)?;
    let start = state.iteration;
    let initial = if start == 0 { validation_cos(&state.models, corpus, config)? } else { None };
    if let Some(cos) = initial {
        log.write(&LogRecord::Validation { iteration: 0, cos })?;
    }

    let mut steps = Vec::with_capacity(end.saturating_sub(start));
    let mut checkpoints = Vec::new();
    while state.iteration < end {
        let it = state.iteration;
        if it == 0 || it == s1 {
            log.write(&LogRecord::Stage { iteration: it, stage: config.schedule.stage(it) })?;
        }
        let rec = match train_step(&mut state, corpus, config) {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                if let Some(dir) = dir {
                    dump_failure(dir, &state, &e)?;
                }
                return Err(e);
            }
        };
        log.write(&LogRecord::Step(rec.clone()))?;
        steps.push(rec);
        let done = state.iteration;
        if let Some(dir) = dir {
            if done % config.checkpoint_every == 0 || done == end {
                let path = dir.join(format!("checkpoint_{done:06}.json"));
                Checkpoint::capture(&state, config).save(&path)?;
                log.write(&LogRecord::Checkpoint { iteration: done, path: path.display().to_string() })?;
                checkpoints.push(path);
            }
        }
    }
    let final_cos = validation_cos(&state.models, corpus, config)?;
    if let Some(cos) = final_cos {
        log.write(&LogRecord::Validation { iteration: state.iteration, cos })?;
    }
    log.flush()?;
    let report = TrainReport {
        start_iteration: start,
        end_iteration: state.iteration,
        initial_validation_cos: initial,
        final_validation_cos: final_cos,
        seconds: started.elapsed().as_secs_f64(),
        checkpoints,
        log: log_path,
        steps,
    };
    Ok((state, report))
}
