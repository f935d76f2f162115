//! Audio encoder and style-modulated expression decoder.
//!
//! Each output frame depends on the audio frames `t-w ..= t+w` (edge
//! frames replicated at clip boundaries) and on the clip's style code.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnimationConfig {
    pub audio_dim: usize,
    pub expr_dim: usize,
    pub style_dim: usize,
    /// Half-length `w` of the audio window.
    pub window: usize,
    pub encoder_hidden: usize,
    pub feature_dim: usize,
    pub decoder_hidden: usize,
}

impl Default for AnimationConfig {
    fn default() -> Self {
        Self {
            audio_dim: 8,
            expr_dim: 16,
            style_dim: 32,
            window: DEFAULT_WINDOW,
            encoder_hidden: 64,
            feature_dim: 32,
            decoder_hidden: 64,
        }
    }
}

impl AnimationConfig {
    pub fn window_len(&self) -> usize {
        2 * self.window + 1
    }
}

/// Row indices that expand `frames` rows into per-frame windows of
/// `2w+1` rows, clamping at both ends. `offset` shifts every index.
pub fn window_indices(frames: usize, w: usize, offset: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(frames * (2 * w + 1));
    for t in 0..frames {
        for k in 0..=2 * w {
            let src = (t + k).saturating_sub(w).min(frames - 1);
            idx.push(offset + src);
        }
    }
    idx
}

/// Flattened audio windows, `T x (2w+1)*D_a`, row-major over the window.
pub fn audio_windows(audio: &Mat, w: usize) -> Mat {
    let (t, d) = audio.dim();
    let idx = window_indices(t, w, 0);
    let flat: Vec<f64> = idx.iter().flat_map(|&i| audio.row(i).to_vec()).collect();
    Mat::from_shape_vec((t, (2 * w + 1) * d), flat).expect("window layout")
}

/// Two-layer tanh MLP over a flattened audio window.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder {
    pub config: AnimationConfig,
    pub params: ParamSet,
    hidden: Linear,
    out: Linear,
}

impl AudioEncoder {
    pub fn new(config: AnimationConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let input = config.window_len() * config.audio_dim;
        let hidden = Linear::new(&mut params, "audio.hidden", input, config.encoder_hidden, rng);
        let out = Linear::new(&mut params, "audio.out", config.encoder_hidden, config.feature_dim, rng);
        Self { config, params, hidden, out }
    }

    /// Features for stacked flattened windows (`N x (2w+1)*D_a`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, windows: Var) -> Var {
        let h = self.hidden.forward(tape, p, windows);
        let h = tape.tanh(h);
        let f = self.out.forward(tape, p, h);
        tape.tanh(f)
    }

    /// Feature vector of one `(2w+1) x D_a` window.
    pub fn encode_window(&self, window: &Mat) -> Result<Vec<f64>> {
        let want = (self.config.window_len(), self.config.audio_dim);
        if window.dim() != want {
            return Err(Error::Shape(format!("audio window must be {want:?}, got {:?}", window.dim())));
        }
        let flat = window.to_shape((1, want.0 * want.1)).expect("contiguous").to_owned();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(flat);
        let f = self.forward(&mut tape, &p, x);
        Ok(tape.value(f).row(0).to_vec())
    }
}

/// Feature-wise affine modulation `h * (1 + gamma(s)) + beta(s)`; both maps
/// start at zero, i.e. as the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Film {
    gamma: Linear,
    beta: Linear,
}

impl Film {
    fn new(params: &mut ParamSet, name: &str, style_dim: usize, width: usize) -> Self {
        Self {
            gamma: Linear::zeros(params, &format!("{name}.gamma"), style_dim, width),
            beta: Linear::zeros(params, &format!("{name}.beta"), style_dim, width),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, h: Var, s: Var) -> Var {
        let g = self.gamma.forward(tape, p, s);
        let g = tape.offset(g, 1.0);
        let b = self.beta.forward(tape, p, s);
        let hg = tape.mul(h, g);
        tape.add(hg, b)
    }
}

/// `f_a -> hidden -> hidden -> D_e`, with style modulation on both hidden
/// layers before their tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: AnimationConfig,
    pub params: ParamSet,
    first: Linear,
    second: Linear,
    out: Linear,
    film_first: Film,
    film_second: Film,
}

impl Decoder {
    pub fn new(config: AnimationConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let h = config.decoder_hidden;
        let first = Linear::new(&mut params, "decoder.first", config.feature_dim, h, rng);
        let second = Linear::new(&mut params, "decoder.second", h, h, rng);
        let out = Linear::new(&mut params, "decoder.out", h, config.expr_dim, rng);
        let film_first = Film::new(&mut params, "decoder.film_first", config.style_dim, h);
        let film_second = Film::new(&mut params, "decoder.film_second", config.style_dim, h);
        Self { config, params, first, second, out, film_first, film_second }
    }

    /// Frames for features `f` (`N x D_f`) and per-row styles (`N x D_s`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var, s: Var) -> Var {
        let h = self.first.forward(tape, p, f);
        let h = self.film_first.apply(tape, p, h, s);
        let h = tape.tanh(h);
        let h = self.second.forward(tape, p, h);
        let h = self.film_second.apply(tape, p, h, s);
        let h = tape.tanh(h);
        self.out.forward(tape, p, h)
    }

    pub fn decode_frame(&self, f: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.config.feature_dim || s.len() != self.config.style_dim {
            return Err(Error::Shape(format!(
                "decoder expects {}-d features and {}-d style, got {} and {}",
                self.config.feature_dim,
                self.config.style_dim,
                f.len(),
                s.len()
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let fv = tape.constant(Mat::from_shape_vec((1, f.len()), f.to_vec()).expect("row"));
        let sv = tape.constant(Mat::from_shape_vec((1, s.len()), s.to_vec()).expect("row"));
        let out = self.forward(&mut tape, &p, fv, sv);
        Ok(tape.value(out).row(0).to_vec())
    }
}

/// Generate `clips` sequences of `frames` frames on the tape. `audio` holds
/// the clips' audio stacked row-wise; `styles` has one row per clip.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    tape: &mut Tape,
    encoder: &AudioEncoder,
    pe: &Bound,
    decoder: &Decoder,
    pd: &Bound,
    audio: Var,
    styles: Var,
    clips: usize,
    frames: usize,
) -> Var {
    let cfg = encoder.config;
    let idx: Vec<usize> = (0..clips).flat_map(|c| window_indices(frames, cfg.window, c * frames)).collect();
    let rows = tape.gather_rows(audio, Rc::new(idx));
    let windows = tape.reshape(rows, clips * frames, cfg.window_len() * cfg.audio_dim);
    let f = encoder.forward(tape, pe, windows);
    let style_idx: Vec<usize> = (0..clips).flat_map(|c| std::iter::repeat_n(c, frames)).collect();
    let s = tape.gather_rows(styles, Rc::new(style_idx));
    decoder.forward(tape, pd, f, s)
}

/// One expression frame per audio frame for a single style code.
pub fn generate_sequence(encoder: &AudioEncoder, decoder: &Decoder, audio: &Mat, style: &[f64]) -> Result<Mat> {
    let cfg = encoder.config;
    if audio.nrows() == 0 || audio.ncols() != cfg.audio_dim {
        return Err(Error::Shape(format!("audio must be Tx{} with T >= 1, got {:?}", cfg.audio_dim, audio.dim())));
    }
    if style.len() != cfg.style_dim {
        return Err(Error::Shape(format!("style code must have {} entries, got {}", cfg.style_dim, style.len())));
    }
    let mut tape = Tape::new();
    let pe = encoder.params.bind(&mut tape, false);
    let pd = decoder.params.bind(&mut tape, false);
    let a = tape.constant(audio.clone());
    let s = tape.constant(Mat::from_shape_vec((1, style.len()), style.to_vec()).expect("row"));
    let out = generate_batch(&mut tape, encoder, &pe, decoder, &pd, a, s, 1, audio.nrows());
    Ok(tape.value(out).clone())
}
