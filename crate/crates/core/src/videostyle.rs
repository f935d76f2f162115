//! Video style encoder: expression sequence to style code. Used only as a
//! training-time teacher for the text path.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Bound, Linear, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const MIN_FRAMES: usize = 8;

thread_local! {
    static FORWARD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of forward passes run by any video style encoder on this thread.
pub fn forward_calls() -> usize {
    FORWARD_CALLS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoStyleConfig {
    pub expr_dim: usize,
    pub hidden: usize,
    pub style_dim: usize,
}

impl Default for VideoStyleConfig {
    fn default() -> Self {
        Self { expr_dim: 16, hidden: 32, style_dim: 32 }
    }
}

/// Per-frame MLP with sinusoidal positions, one single-head self-attention
/// layer with a residual connection, attention-weighted pooling over time,
/// and a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoStyleEncoder {
    pub config: VideoStyleConfig,
    pub params: ParamSet,
    frame_in: Linear,
    frame_mid: Linear,
    query: Linear,
    /// No key bias: a per-query constant shift cancels in the softmax.
    key: usize,
    value: Linear,
    /// Pooling-score weights, also bias-free for the same reason.
    pool_score: usize,
    projection: Linear,
}

impl VideoStyleEncoder {
    pub fn new(config: VideoStyleConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let h = config.hidden;
        let frame_in = Linear::new(&mut params, "video.frame_in", config.expr_dim, h, rng);
        let frame_mid = Linear::new(&mut params, "video.frame_mid", h, h, rng);
        let query = Linear::new(&mut params, "video.query", h, h, rng);
        let key = params.add_normal("video.key.w", (h, h), 1.0, rng);
        let value = Linear::new(&mut params, "video.value", h, h, rng);
        let pool_score = params.add_normal("video.pool_score.w", (h, 1), 1.0, rng);
        let projection = Linear::new(&mut params, "video.projection", h, config.style_dim, rng);
        Self { config, params, frame_in, frame_mid, query, key, value, pool_score, projection }
    }

    /// Style codes (`clips x style_dim`) for `clips` sequences of `frames`
    /// frames stacked row-wise in `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, clips: usize, frames: usize) -> Result<Var> {
        if frames < MIN_FRAMES {
            return Err(Error::TooShort { got: frames, need: MIN_FRAMES });
        }
        if tape.shape(x) != (clips * frames, self.config.expr_dim) {
            return Err(Error::Shape(format!(
                "expected {}x{} stacked frames, got {:?}",
                clips * frames,
                self.config.expr_dim,
                tape.shape(x)
            )));
        }
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        let h = self.config.hidden;
        let pe = positional_encoding(frames, h);
        let pe_all = Mat::from_shape_fn((clips * frames, h), |(r, c)| pe[[r % frames, c]]);

        let a = self.frame_in.forward(tape, p, x);
        let a = tape.tanh(a);
        let pos = tape.constant(pe_all);
        let a = tape.add(a, pos);
        let a = self.frame_mid.forward(tape, p, a);
        let a = tape.tanh(a);

        let q = self.query.forward(tape, p, a);
        let k = tape.matmul(a, p[self.key]);
        let v = self.value.forward(tape, p, a);
        let scale = 1.0 / (h as f64).sqrt();
        let mut pooled = Vec::with_capacity(clips);
        for c in 0..clips {
            let (qc, kc, vc, ac) = (
                tape.slice_rows(q, c * frames, frames),
                tape.slice_rows(k, c * frames, frames),
                tape.slice_rows(v, c * frames, frames),
                tape.slice_rows(a, c * frames, frames),
            );
            let kt = tape.transpose(kc);
            let logits = tape.matmul(qc, kt);
            let logits = tape.scale(logits, scale);
            let att = tape.softmax_rows(logits);
            let mixed = tape.matmul(att, vc);
            let hc = tape.add(ac, mixed);
            let score = tape.matmul(hc, p[self.pool_score]);
            let score = tape.transpose(score);
            let w = tape.softmax_rows(score);
            pooled.push(tape.matmul(w, hc));
        }
        let pooled = tape.concat_rows(&pooled);
        Ok(self.projection.forward(tape, p, pooled))
    }

    /// Style codes for equally long sequences, one row each.
    pub fn encode(&self, seqs: &[&Mat]) -> Result<Mat> {
        let frames = seqs.first().map(|s| s.nrows()).unwrap_or(0);
        if seqs.iter().any(|s| s.nrows() != frames) {
            return Err(Error::Shape("all sequences in a batch must have equal length".into()));
        }
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(stacked);
        let out = self.forward(&mut tape, &p, x, seqs.len(), frames)?;
        Ok(tape.value(out).clone())
    }
}
