//! Two-stage training: the decoder is first driven only by video style
//! codes, then by text style codes with a probability that ramps up over
//! the second stage. The text path is aligned to the video path throughout.

mod checkpoint;
mod inference;
mod run;

pub use checkpoint::{Checkpoint, SyncCheckpoint, TextCheckpoint, CHECKPOINT_FORMAT};
pub use inference::InferenceModel;
pub use run::{run_training, validation_cos, LogRecord, RunOptions, StageSelect, TrainReport};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{build_caption, DropConfig};
use crate::animation::{generate_batch, AnimationConfig, AudioEncoder, Decoder};
use crate::discriminators::{
    pretrain_sync, SyncDiscriminator, SyncPretrainConfig, SyncPretrainReport, TemporalConfig, TemporalDiscriminator,
};
use crate::error::{Error, Result};
use crate::losses::{
    loss_cos_var, loss_rec_var, loss_sync_var, loss_tem_d_var, loss_tem_g_var, total_loss, total_loss_var,
    LossBreakdown, LossTerms, LossWeights, DEFAULT_MU,
};
use crate::nn::{Adam, AdamConfig, ParamSet};
use crate::seed::rng_for;
use crate::synthdata::{Corpus, Sample, Split};
use crate::tape::{Mat, Tape};
use crate::textstyle::{
    blend_var, pretrain_backbone, Adapter, BlendConfig, TextBackbone, TextPretrainConfig, TextPretrainReport, DEFAULT_BETA,
};
use crate::videostyle::{VideoStyleConfig, VideoStyleEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleSource {
    Video,
    Text,
}

/// Stage lengths and the linear ramp of the text-selection probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub p_start: f64,
    pub p_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { stage1_iterations: 2000, stage2_iterations: 4000, p_start: 0.0, p_end: 0.5 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iterations == 0 || self.stage2_iterations == 0 {
            return Err(Error::Config("stage lengths must be at least 1".into()));
        }
        let ok = |p: f64| (0.0..=0.5).contains(&p);
        if !ok(self.p_start) || !ok(self.p_end) || self.p_start > self.p_end {
            return Err(Error::Config(format!(
                "p must ramp upward within [0, 0.5], got {} -> {}",
                self.p_start, self.p_end
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.stage1_iterations + self.stage2_iterations
    }

    /// 1 or 2.
    pub fn stage(&self, iteration: usize) -> u8 {
        if iteration < self.stage1_iterations {
            1
        } else {
            2
        }
    }

    /// Probability of choosing the text code at `iteration`.
    pub fn p(&self, iteration: usize) -> f64 {
        if iteration < self.stage1_iterations {
            return 0.0;
        }
        let k = (iteration - self.stage1_iterations).min(self.stage2_iterations - 1);
        let frac = if self.stage2_iterations == 1 { 1.0 } else { k as f64 / (self.stage2_iterations - 1) as f64 };
        self.p_start + (self.p_end - self.p_start) * frac
    }
}

/// Stage 1 always yields video; stage 2 yields text with probability
/// `schedule.p(iteration)`. One uniform draw is consumed in either case.
pub fn select_style_source(iteration: usize, schedule: &Schedule, rng: &mut impl Rng) -> StyleSource {
    let u: f64 = rng.random();
    if schedule.stage(iteration) == 2 && u < schedule.p(iteration) {
        StyleSource::Text
    } else {
        StyleSource::Video
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Train on captions that carry only the emotion label.
    pub sim_anno: bool,
    /// Use the backbone embedding directly as the text style code.
    pub no_adapter: bool,
    /// Skip backbone pretraining (the backbone stays at its random init).
    pub no_clip: bool,
    /// No video style encoder: text codes drive the decoder from the start.
    pub no_vg: bool,
}

impl Ablations {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.sim_anno {
            parts.push("sim_anno");
        }
        if self.no_adapter {
            parts.push("no_adapter");
        }
        if self.no_clip {
            parts.push("no_clip");
        }
        if self.no_vg {
            parts.push("no_vg");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: Schedule,
    /// Clips per iteration; each clip is one full-length window.
    pub batch: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub weights: LossWeights,
    pub mu: f64,
    pub beta: f64,
    pub drop: DropConfig,
    /// Keep updating the video style encoder in stage 2.
    pub train_video_in_stage2: bool,
    /// Block the alignment gradient from reaching the video encoder.
    pub detach_video_in_cos: bool,
    pub checkpoint_every: usize,
    pub validation_clips: usize,
    pub ablations: Ablations,
    pub animation: AnimationConfig,
    pub video: VideoStyleConfig,
    pub temporal: TemporalConfig,
    pub text_pretrain: TextPretrainConfig,
    pub sync_pretrain: SyncPretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: Schedule::default(),
            batch: 16,
            lr_generator: 1e-3,
            lr_discriminator: 1e-4,
            weights: LossWeights::default(),
            mu: DEFAULT_MU,
            beta: DEFAULT_BETA,
            drop: DropConfig { emotion: 0.25, au: 0.25 },
            train_video_in_stage2: true,
            detach_video_in_cos: false,
            checkpoint_every: 1000,
            validation_clips: 128,
            ablations: Ablations::default(),
            animation: AnimationConfig::default(),
            video: VideoStyleConfig::default(),
            temporal: TemporalConfig::default(),
            text_pretrain: TextPretrainConfig::default(),
            sync_pretrain: SyncPretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.drop.validate()?;
        BlendConfig { beta: self.beta }.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0,1], got {}", self.mu)));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        let a = &self.animation;
        if a.style_dim != self.video.style_dim || a.style_dim != self.text_pretrain.backbone.style_dim {
            return Err(Error::Config("text, video and decoder style dimensions must agree".into()));
        }
        if a.expr_dim != self.video.expr_dim || a.expr_dim != self.temporal.expr_dim {
            return Err(Error::Config("expression dimensions must agree across modules".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Every network used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub backbone: TextBackbone,
    pub adapter: Option<Adapter>,
    pub video: Option<VideoStyleEncoder>,
    pub audio: AudioEncoder,
    pub decoder: Decoder,
    pub d_tem: TemporalDiscriminator,
    pub d_sync: SyncDiscriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub adapter: Option<Adam>,
    pub video: Option<Adam>,
    pub audio: Adam,
    pub decoder: Adam,
    pub d_tem: Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub models: Models,
    pub optimizers: Optimizers,
    /// Next iteration to run.
    pub iteration: usize,
}

impl TrainState {
    /// Fresh trainable modules around a frozen backbone and a frozen sync
    /// discriminator.
    pub fn new(config: &TrainConfig, backbone: TextBackbone, d_sync: SyncDiscriminator) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::Contract("training needs a frozen text backbone".into()));
        }
        if d_sync.config.window > config.temporal.length {
            return Err(Error::Config("sync window longer than a training clip".into()));
        }
        let seed = config.seed;
        let adapter = (!config.ablations.no_adapter)
            .then(|| Adapter::new(config.animation.style_dim, &mut rng_for(seed, "init/adapter")));
        let video = (!config.ablations.no_vg)
            .then(|| VideoStyleEncoder::new(config.video, &mut rng_for(seed, "init/video")));
        let audio = AudioEncoder::new(config.animation, &mut rng_for(seed, "init/audio"));
        let decoder = Decoder::new(config.animation, &mut rng_for(seed, "init/decoder"));
        let d_tem = TemporalDiscriminator::new(config.temporal.clone(), &mut rng_for(seed, "init/d_tem"))?;
        let g = AdamConfig::with_lr(config.lr_generator);
        let optimizers = Optimizers {
            adapter: adapter.as_ref().map(|a| Adam::new(g, &a.params)),
            video: video.as_ref().map(|v| Adam::new(g, &v.params)),
            audio: Adam::new(g, &audio.params),
            decoder: Adam::new(g, &decoder.params),
            d_tem: Adam::new(AdamConfig::with_lr(config.lr_discriminator), &d_tem.params),
        };
        Ok(Self {
            models: Models { backbone, adapter, video, audio, decoder, d_tem, d_sync },
            optimizers,
            iteration: 0,
        })
    }
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub stage: u8,
    pub style_source: StyleSource,
    pub p: f64,
    pub losses: LossBreakdown,
    pub d_tem: f64,
}

/// Caption used for a training clip: emotion label only under `sim_anno`,
/// otherwise the full annotation with random clause dropping.
pub fn training_caption(sample: &Sample, corpus: &Corpus, config: &TrainConfig, rng: &mut impl Rng) -> Result<String> {
    let labels = corpus.labels_for(sample);
    let levels = if config.ablations.sim_anno { &[][..] } else { &sample.meta.au_levels[..] };
    let drop = if config.ablations.sim_anno { DropConfig::NONE } else { config.drop };
    Ok(build_caption(&sample.meta.subject, labels, levels, &corpus.lookup, rng, drop)?.sentence)
}

fn stack<'a>(mats: impl Iterator<Item = &'a Mat>) -> Result<Mat> {
    let views: Vec<_> = mats.map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Run iteration `state.iteration`: one generator update on a batch drawn
/// from the train split, then one temporal-discriminator update.
pub fn train_step(state: &mut TrainState, corpus: &Corpus, config: &TrainConfig) -> Result<StepRecord> {
    let it = state.iteration;
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Invalid("corpus has no training clips".into()));
    }
    let frames = corpus.world.frames;
    if frames != config.temporal.length {
        return Err(Error::Config(format!(
            "clips have {frames} frames but the temporal discriminator expects {}",
            config.temporal.length
        )));
    }
    let mut rng = rng_for(config.seed, &format!("train/{it}"));
    let stage = config.schedule.stage(it);
    let p = config.schedule.p(it);
    let source = if config.ablations.no_vg {
        StyleSource::Text
    } else {
        select_style_source(it, &config.schedule, &mut rng)
    };
    let batch = config.batch.min(train.len());
    let picks: Vec<&Sample> = sample(&mut rng, train.len(), batch).into_iter().map(|i| train[i]).collect();
    let captions: Vec<String> =
        picks.iter().map(|s| training_caption(s, corpus, config, &mut rng)).collect::<Result<_>>()?;
    let caption_refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    let e_t = state.models.backbone.encode(&caption_refs)?;
    let audio = stack(picks.iter().map(|s| &s.audio))?;
    let gt = stack(picks.iter().map(|s| &s.expression))?;

    let m = &state.models;
    let mut tape = Tape::new();
    let pa = m.adapter.as_ref().map(|a| a.params.bind(&mut tape, true));
    let video_trainable = stage == 1 || config.train_video_in_stage2;
    let pv = m.video.as_ref().map(|v| v.params.bind(&mut tape, video_trainable));
    let pe = m.audio.params.bind(&mut tape, true);
    let pd = m.decoder.params.bind(&mut tape, true);
    let ptem = m.d_tem.params.bind(&mut tape, false);
    let psync = m.d_sync.params.bind(&mut tape, false);

    let e_t_var = tape.constant(e_t);
    let s_t = match (&m.adapter, &pa) {
        (Some(a), Some(pa)) => {
            let e_s = a.forward(&mut tape, pa, e_t_var);
            blend_var(&mut tape, e_s, e_t_var, config.beta)
        }
        _ => e_t_var,
    };
    let gt_var = tape.constant(gt.clone());
    let s_v = match (&m.video, &pv) {
        (Some(v), Some(pv)) => Some(v.forward(&mut tape, pv, gt_var, batch, frames)?),
        _ => None,
    };
    let style = match (source, s_v) {
        (StyleSource::Video, Some(sv)) => sv,
        _ => s_t,
    };
    let audio_var = tape.constant(audio);
    let pred = generate_batch(&mut tape, &m.audio, &pe, &m.decoder, &pd, audio_var, style, batch, frames);

    let rec = loss_rec_var(&mut tape, pred, gt_var, batch, config.mu);
    let cos = match s_v {
        Some(sv) => {
            let target = if config.detach_video_in_cos { tape.detach(sv) } else { sv };
            loss_cos_var(&mut tape, s_t, target)
        }
        None => tape.scalar_constant(0.0),
    };
    let scores = m.d_sync.aligned_scores(&mut tape, &psync, pred, audio_var, batch, frames);
    let sync = loss_sync_var(&mut tape, scores);
    let fake = m.d_tem.forward(&mut tape, &ptem, pred, batch)?;
    let tem = loss_tem_g_var(&mut tape, fake);
    let total = total_loss_var(&mut tape, rec, cos, sync, tem, config.weights);

    let terms = LossTerms { rec: tape.scalar(rec), cos: tape.scalar(cos), sync: tape.scalar(sync), tem: tape.scalar(tem) };
    let losses = total_loss(terms, config.weights)?;
    if !tape.scalar(total).is_finite() || !losses.total.is_finite() {
        return Err(Error::NonFinite {
            iteration: it,
            detail: format!("generator losses {}", serde_json::to_string(&losses).unwrap_or_default()),
        });
    }
    let pred_value = tape.value(pred).clone();
    let grads = tape.backward(total);

    let m = &mut state.models;
    let o = &mut state.optimizers;
    if let (Some(a), Some(pa), Some(opt)) = (m.adapter.as_mut(), &pa, o.adapter.as_mut()) {
        opt.update(&mut a.params, &pa.grads(&tape, &grads));
    }
    if video_trainable {
        if let (Some(v), Some(pv), Some(opt)) = (m.video.as_mut(), &pv, o.video.as_mut()) {
            opt.update(&mut v.params, &pv.grads(&tape, &grads));
        }
    }
    o.audio.update(&mut m.audio.params, &pe.grads(&tape, &grads));
    o.decoder.update(&mut m.decoder.params, &pd.grads(&tape, &grads));

    let d_tem = update_temporal(&mut m.d_tem, &mut o.d_tem, gt, pred_value, batch, it)?;
    state.iteration += 1;
    Ok(StepRecord { iteration: it, stage, style_source: source, p, losses, d_tem })
}

fn update_temporal(d: &mut TemporalDiscriminator, opt: &mut Adam, real: Mat, fake: Mat, clips: usize, it: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = d.params.bind(&mut tape, true);
    let r = tape.constant(real);
    let f = tape.constant(fake);
    let rs = d.forward(&mut tape, &p, r, clips)?;
    let fs = d.forward(&mut tape, &p, f, clips)?;
    let loss = loss_tem_d_var(&mut tape, rs, fs);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite { iteration: it, detail: "temporal discriminator loss".into() });
    }
    let grads = tape.backward(loss);
    opt.update(&mut d.params, &p.grads(&tape, &grads));
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: TextBackbone,
    pub text_report: TextPretrainReport,
    pub d_sync: SyncDiscriminator,
    pub sync_report: SyncPretrainReport,
}

/// Pretrain (or, under `no_clip`, only initialize) and freeze the text
/// backbone, and pretrain the sync discriminator.
pub fn pretrain_modules(corpus: &Corpus, config: &TrainConfig) -> Result<Pretrained> {
    let (backbone, text_report) =
        pretrain_backbone(corpus, &config.text_pretrain, config.seed, config.ablations.no_clip)?;
    let (d_sync, sync_report) = pretrain_sync(corpus, &config.sync_pretrain, config.seed)?;
    Ok(Pretrained { backbone, text_report, d_sync, sync_report })
}

/// Euclidean norm of every parameter tensor, for diagnostics.
pub fn param_norms(params: &ParamSet) -> Vec<(String, f64)> {
    params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, v)| (n.clone(), v.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect()
}
