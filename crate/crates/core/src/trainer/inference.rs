use std::path::Path;

use super::Checkpoint;
use crate::animation::{generate_sequence, AudioEncoder, Decoder};
use crate::error::{Error, Result};
use crate::tape::Mat;
use crate::textstyle::{encode_text_style, Adapter, TextBackbone};
use crate::videostyle;

/// Text-driven generator: caption + audio to expression sequence. Holds no
/// video style encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub backbone: TextBackbone,
    pub adapter: Option<Adapter>,
    pub audio: AudioEncoder,
    pub decoder: Decoder,
    pub beta: f64,
}

impl InferenceModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            backbone: ckpt.backbone()?,
            adapter: ckpt.adapter()?,
            audio: ckpt.audio_encoder()?,
            decoder: ckpt.decoder()?,
            beta: ckpt.config.beta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Style codes for a batch of captions, one row each.
    pub fn style_codes(&self, captions: &[&str]) -> Result<Mat> {
        encode_text_style(&self.backbone, self.adapter.as_ref(), captions, self.beta)
    }

    pub fn generate_with_style(&self, style: &[f64], audio: &Mat) -> Result<Mat> {
        let before = videostyle::forward_calls();
        let out = generate_sequence(&self.audio, &self.decoder, audio, style)?;
        assert_eq!(videostyle::forward_calls(), before, "inference must not run the video style encoder");
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { iteration: 0, detail: "generated sequence".into() });
        }
        Ok(out)
    }

    /// Expression sequence for `caption` spoken over `audio`.
    pub fn generate(&self, caption: &str, audio: &Mat) -> Result<Mat> {
        let before = videostyle::forward_calls();
        let style = self.style_codes(&[caption])?;
        let out = self.generate_with_style(style.row(0).as_slice().expect("contiguous row"), audio)?;
        assert_eq!(videostyle::forward_calls(), before, "inference must not run the video style encoder");
        Ok(out)
    }
}
