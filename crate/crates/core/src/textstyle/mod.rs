//! Text-to-style encoder: a frozen sentence backbone, a residual adapter,
//! and the blend `s_t = beta * e_s + (1 - beta) * e_t`.

mod backbone;
mod pretrain;
mod tokenizer;

pub use backbone::{BackboneConfig, TextBackbone};
pub use pretrain::{
    caption_vocabulary, paraphrase_retrieval, pretrain_backbone, style_features, StyleTower, TextPretrainConfig,
    TextPretrainReport,
};
pub use tokenizer::{split_words, Tokenizer, Tokens, DEFAULT_MAX_LEN, PAD};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const DEFAULT_BETA: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub beta: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// `beta * e_s + (1 - beta) * e_t`, elementwise.
pub fn blend(e_s: &[f64], e_t: &[f64], beta: f64) -> Result<Vec<f64>> {
    if e_s.len() != e_t.len() {
        return Err(Error::Shape(format!("blend of {} and {} dimensional embeddings", e_s.len(), e_t.len())));
    }
    BlendConfig { beta }.validate()?;
    Ok(e_s.iter().zip(e_t).map(|(s, t)| beta * s + (1.0 - beta) * t).collect())
}

pub fn blend_var(tape: &mut Tape, e_s: Var, e_t: Var, beta: f64) -> Var {
    let a = tape.scale(e_s, beta);
    let b = tape.scale(e_t, 1.0 - beta);
    tape.add(a, b)
}

/// Bottleneck `D -> D/4 -> D` with a tanh in between. The output layer
/// starts at zero, so a fresh adapter emits `e_s = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub params: ParamSet,
    down: Linear,
    up: Linear,
}

impl Adapter {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let hidden = (dim / 4).max(1);
        let down = Linear::new(&mut params, "adapter.down", dim, hidden, rng);
        let up = Linear::zeros(&mut params, "adapter.up", hidden, dim);
        Self { params, down, up }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, e_t: Var) -> Var {
        let h = self.down.forward(tape, p, e_t);
        let h = tape.tanh(h);
        self.up.forward(tape, p, h)
    }

    pub fn apply(&self, e_t: &Mat) -> Mat {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(e_t.clone());
        let out = self.forward(&mut tape, &p, x);
        tape.value(out).clone()
    }
}

/// Text style codes for a batch of sentences. With `adapter = None` the
/// code is the raw backbone embedding.
pub fn encode_text_style(
    backbone: &TextBackbone,
    adapter: Option<&Adapter>,
    sentences: &[&str],
    beta: f64,
) -> Result<Mat> {
    BlendConfig { beta }.validate()?;
    let e_t = backbone.encode(sentences)?;
    Ok(match adapter {
        Some(a) => {
            let e_s = a.apply(&e_t);
            &e_s * beta + &e_t * (1.0 - beta)
        }
        None => e_t,
    })
}
