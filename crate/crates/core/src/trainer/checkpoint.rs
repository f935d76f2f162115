//! JSON checkpoint files for the pretrained modules and for training runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Models, Optimizers, TrainConfig, TrainState};
use crate::animation::{AudioEncoder, Decoder};
use crate::discriminators::{SyncConfig, SyncDiscriminator, SyncPretrainReport, TemporalDiscriminator};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamRecord, ParamSet, TensorRecord};
use crate::textstyle::{Adapter, BackboneConfig, TextBackbone, TextPretrainReport, Tokenizer};
use crate::videostyle::VideoStyleEncoder;

pub const CHECKPOINT_FORMAT: u32 = 1;

type Tensors = BTreeMap<String, TensorRecord>;

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn load_into(params: &mut ParamSet, tensors: Option<&Tensors>, what: &str) -> Result<()> {
    let tensors = tensors.ok_or_else(|| Error::Invalid(format!("checkpoint has no {what} tensors")))?;
    params.load_record(tensors).map_err(|e| Error::Invalid(format!("{what}: {e}")))
}

fn check_format(version: u32, path: &Path) -> Result<()> {
    if version != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unsupported checkpoint format {version}")));
    }
    Ok(())
}

/// A pretrained, frozen text backbone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextCheckpoint {
    pub format: u32,
    pub config: BackboneConfig,
    pub tokenizer: Tokenizer,
    pub tensors: Tensors,
    pub report: TextPretrainReport,
}

impl TextCheckpoint {
    pub fn new(backbone: &TextBackbone, report: TextPretrainReport) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            config: backbone.config,
            tokenizer: backbone.tokenizer.clone(),
            tensors: backbone.params.to_record(),
            report,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        check_format(c.format, path)?;
        Ok(c)
    }

    pub fn backbone(&self) -> Result<TextBackbone> {
        TextBackbone::restore(self.tokenizer.clone(), self.config, &self.tensors, true)
    }
}

/// A pretrained, frozen sync discriminator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyncCheckpoint {
    pub format: u32,
    pub config: SyncConfig,
    pub tensors: Tensors,
    pub report: SyncPretrainReport,
}

impl SyncCheckpoint {
    pub fn new(d: &SyncDiscriminator, report: SyncPretrainReport) -> Self {
        Self { format: CHECKPOINT_FORMAT, config: d.config.clone(), tensors: d.params.to_record(), report }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        check_format(c.format, path)?;
        Ok(c)
    }

    pub fn discriminator(&self) -> Result<SyncDiscriminator> {
        let mut d = SyncDiscriminator::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut d.params, Some(&self.tensors), "sync discriminator")?;
        Ok(d)
    }
}

/// Complete training state: every module, every optimizer, and the
/// configuration that produced them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    /// Next iteration to run.
    pub iteration: usize,
    pub config: TrainConfig,
    pub backbone_config: BackboneConfig,
    pub tokenizer: Tokenizer,
    pub sync_config: SyncConfig,
    pub tensors: BTreeMap<String, Tensors>,
    pub optimizers: BTreeMap<String, AdamRecord>,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, config: &TrainConfig) -> Self {
        let m = &state.models;
        let o = &state.optimizers;
        let mut tensors = BTreeMap::new();
        let mut optimizers = BTreeMap::new();
        tensors.insert("backbone".to_string(), m.backbone.params.to_record());
        tensors.insert("d_sync".to_string(), m.d_sync.params.to_record());
        let mut put = |name: &str, params: &ParamSet, opt: &Adam| {
            tensors.insert(name.to_string(), params.to_record());
            optimizers.insert(name.to_string(), opt.to_record(params));
        };
        if let (Some(a), Some(opt)) = (&m.adapter, &o.adapter) {
            put("adapter", &a.params, opt);
        }
        if let (Some(v), Some(opt)) = (&m.video, &o.video) {
            put("video", &v.params, opt);
        }
        put("audio", &m.audio.params, &o.audio);
        put("decoder", &m.decoder.params, &o.decoder);
        put("d_tem", &m.d_tem.params, &o.d_tem);
        Self {
            format: CHECKPOINT_FORMAT,
            iteration: state.iteration,
            config: config.clone(),
            backbone_config: m.backbone.config,
            tokenizer: m.backbone.tokenizer.clone(),
            sync_config: m.d_sync.config.clone(),
            tensors,
            optimizers,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        check_format(c.format, path)?;
        c.config.validate()?;
        Ok(c)
    }

    fn module(&self, name: &str) -> Option<&Tensors> {
        self.tensors.get(name)
    }

    fn optimizer(&self, name: &str, params: &ParamSet) -> Result<Adam> {
        let rec = self.optimizers.get(name).ok_or_else(|| Error::Invalid(format!("checkpoint has no {name} optimizer")))?;
        Adam::from_record(rec, params).map_err(|e| Error::Invalid(format!("{name} optimizer: {e}")))
    }

    pub fn backbone(&self) -> Result<TextBackbone> {
        let tensors = self.module("backbone").ok_or_else(|| Error::Invalid("checkpoint has no backbone".into()))?;
        TextBackbone::restore(self.tokenizer.clone(), self.backbone_config, tensors, true)
    }

    pub fn d_sync(&self) -> Result<SyncDiscriminator> {
        let mut d = SyncDiscriminator::new(self.sync_config.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut d.params, self.module("d_sync"), "d_sync")?;
        Ok(d)
    }

    pub fn adapter(&self) -> Result<Option<Adapter>> {
        if self.config.ablations.no_adapter {
            return Ok(None);
        }
        let mut a = Adapter::new(self.config.animation.style_dim, &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut a.params, self.module("adapter"), "adapter")?;
        Ok(Some(a))
    }

    pub fn audio_encoder(&self) -> Result<AudioEncoder> {
        let mut e = AudioEncoder::new(self.config.animation, &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut e.params, self.module("audio"), "audio encoder")?;
        Ok(e)
    }

    pub fn decoder(&self) -> Result<Decoder> {
        let mut d = Decoder::new(self.config.animation, &mut ChaCha8Rng::seed_from_u64(0));
        load_into(&mut d.params, self.module("decoder"), "decoder")?;
        Ok(d)
    }

    /// Rebuild the full training state for resuming.
    pub fn restore(&self) -> Result<TrainState> {
        let cfg = &self.config;
        let mut zero = ChaCha8Rng::seed_from_u64(0);
        let adapter = self.adapter()?;
        let video = if cfg.ablations.no_vg {
            None
        } else {
            let mut v = VideoStyleEncoder::new(cfg.video, &mut zero);
            load_into(&mut v.params, self.module("video"), "video encoder")?;
            Some(v)
        };
        let audio = self.audio_encoder()?;
        let decoder = self.decoder()?;
        let mut d_tem = TemporalDiscriminator::new(cfg.temporal.clone(), &mut zero)?;
        load_into(&mut d_tem.params, self.module("d_tem"), "d_tem")?;
        let optimizers = Optimizers {
            adapter: adapter.as_ref().map(|a| self.optimizer("adapter", &a.params)).transpose()?,
            video: video.as_ref().map(|v| self.optimizer("video", &v.params)).transpose()?,
            audio: self.optimizer("audio", &audio.params)?,
            decoder: self.optimizer("decoder", &decoder.params)?,
            d_tem: self.optimizer("d_tem", &d_tem.params)?,
        };
        let models = Models { backbone: self.backbone()?, adapter, video, audio, decoder, d_tem, d_sync: self.d_sync()? };
        Ok(TrainState { models, optimizers, iteration: self.iteration })
    }
}
