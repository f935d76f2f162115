//! Temporal patch discriminator and lip-sync discriminator.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cosine_rows, Adam, AdamConfig, Bound, Linear, ParamSet};
use crate::seed::rng_for;
use crate::synthdata::{Corpus, Sample, Split};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub expr_dim: usize,
    pub length: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            expr_dim: 16,
            length: 64,
            layers: vec![
                ConvSpec { kernel: 4, stride: 2, out_channels: 32 },
                ConvSpec { kernel: 4, stride: 2, out_channels: 32 },
                ConvSpec { kernel: 3, stride: 1, out_channels: 1 },
            ],
        }
    }
}

impl TemporalConfig {
    /// Output length of each layer, in order.
    pub fn lengths(&self) -> Result<Vec<usize>> {
        let mut len = self.length;
        let mut out = Vec::new();
        for l in &self.layers {
            if len < l.kernel || l.stride == 0 {
                return Err(Error::Config(format!("conv layer {l:?} does not fit length {len}")));
            }
            len = (len - l.kernel) / l.stride + 1;
            out.push(len);
        }
        Ok(out)
    }

    pub fn patch_count(&self) -> Result<usize> {
        Ok(*self.lengths()?.last().ok_or_else(|| Error::Config("no conv layers".into()))?)
    }
}

/// Stack of strided 1-D convolutions over time (channels = expression
/// parameters), tanh between layers, one unbounded score per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalDiscriminator {
    pub config: TemporalConfig,
    pub params: ParamSet,
    convs: Vec<Linear>,
}

impl TemporalDiscriminator {
    pub fn new(config: TemporalConfig, rng: &mut impl Rng) -> Result<Self> {
        config.lengths()?;
        let mut params = ParamSet::new();
        let mut channels = config.expr_dim;
        let mut convs = Vec::new();
        for (i, l) in config.layers.iter().enumerate() {
            convs.push(Linear::new(&mut params, &format!("tem.conv{i}"), l.kernel * channels, l.out_channels, rng));
            channels = l.out_channels;
        }
        Ok(Self { config, params, convs })
    }

    /// Patch scores (`clips * patches x 1`) for `clips` sequences stacked
    /// row-wise in `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, clips: usize) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        if cols != self.config.expr_dim || rows != clips * self.config.length {
            return Err(Error::Shape(format!(
                "temporal discriminator expects {} frames x {} channels per clip, got {rows}x{cols} for {clips} clips",
                self.config.length, self.config.expr_dim
            )));
        }
        let lengths = self.config.lengths()?;
        let mut h = x;
        let mut len_in = self.config.length;
        for (i, (spec, conv)) in self.config.layers.iter().zip(&self.convs).enumerate() {
            let len_out = lengths[i];
            let channels = tape.shape(h).1;
            let mut idx = Vec::with_capacity(clips * len_out * spec.kernel);
            for c in 0..clips {
                for o in 0..len_out {
                    for k in 0..spec.kernel {
                        idx.push(c * len_in + o * spec.stride + k);
                    }
                }
            }
            let cols = tape.gather_rows(h, Rc::new(idx));
            let cols = tape.reshape(cols, clips * len_out, spec.kernel * channels);
            h = conv.forward(tape, p, cols);
            if i + 1 < self.convs.len() {
                h = tape.tanh(h);
            }
            len_in = len_out;
        }
        Ok(h)
    }

    pub fn scores(&self, seq: &Mat) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(seq.clone());
        let out = self.forward(&mut tape, &p, x, 1)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    pub window: usize,
    pub expr_dim: usize,
    pub mouth_start: usize,
    pub mouth_len: usize,
    pub audio_dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { window: 5, expr_dim: 16, mouth_start: 0, mouth_len: 4, audio_dim: 8, hidden: 32, embed: 16 }
    }
}

/// Row indices of every aligned window of `window` frames, flattened, for
/// a clip starting at `offset`.
pub fn sync_window_indices(frames: usize, window: usize, offset: usize) -> Vec<usize> {
    (0..=frames - window).flat_map(|s| (s..s + window).map(move |t| offset + t)).collect()
}

/// Embeds a mouth-channel window and an audio window separately; the
/// logit is `a * cos(e_expr, e_audio) + b` and the score its sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncDiscriminator {
    pub config: SyncConfig,
    pub params: ParamSet,
    expr_hidden: Linear,
    expr_out: Linear,
    audio_hidden: Linear,
    audio_out: Linear,
    logit_scale: usize,
    logit_bias: usize,
}

impl SyncDiscriminator {
    pub fn new(config: SyncConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let w = config.window;
        let expr_hidden = Linear::new(&mut params, "sync.expr_hidden", w * config.mouth_len, config.hidden, rng);
        let expr_out = Linear::new(&mut params, "sync.expr_out", config.hidden, config.embed, rng);
        let audio_hidden = Linear::new(&mut params, "sync.audio_hidden", w * config.audio_dim, config.hidden, rng);
        let audio_out = Linear::new(&mut params, "sync.audio_out", config.hidden, config.embed, rng);
        let logit_scale = params.add("sync.logit_scale", Mat::from_elem((1, 1), 5.0));
        let logit_bias = params.add_zeros("sync.logit_bias", (1, 1));
        Self { config, params, expr_hidden, expr_out, audio_hidden, audio_out, logit_scale, logit_bias }
    }

    /// Logits for flattened window pairs: `expr` is `N x window*mouth_len`,
    /// `audio` is `N x window*audio_dim`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, expr: Var, audio: Var) -> Var {
        let e = self.expr_hidden.forward(tape, p, expr);
        let e = tape.tanh(e);
        let e = self.expr_out.forward(tape, p, e);
        let a = self.audio_hidden.forward(tape, p, audio);
        let a = tape.tanh(a);
        let a = self.audio_out.forward(tape, p, a);
        let cos = cosine_rows(tape, e, a);
        let z = tape.mul(cos, p[self.logit_scale]);
        tape.add(z, p[self.logit_bias])
    }

    /// Flatten windows of full expression frames and audio frames that
    /// start at the given rows of `expr` / `audio`.
    pub fn gather_windows(
        &self,
        tape: &mut Tape,
        expr: Var,
        audio: Var,
        expr_starts: &[usize],
        audio_starts: &[usize],
    ) -> (Var, Var) {
        let w = self.config.window;
        let mouth = tape.slice_cols(expr, self.config.mouth_start, self.config.mouth_len);
        let ei: Vec<usize> = expr_starts.iter().flat_map(|&s| s..s + w).collect();
        let ai: Vec<usize> = audio_starts.iter().flat_map(|&s| s..s + w).collect();
        let n = expr_starts.len();
        let ew = tape.gather_rows(mouth, Rc::new(ei));
        let ew = tape.reshape(ew, n, w * self.config.mouth_len);
        let aw = tape.gather_rows(audio, Rc::new(ai));
        let aw = tape.reshape(aw, n, w * self.config.audio_dim);
        (ew, aw)
    }

    /// Scores of every aligned window of `clips` stacked clips of `frames`
    /// frames (`clips * (frames - window + 1) x 1`).
    pub fn aligned_scores(&self, tape: &mut Tape, p: &Bound, expr: Var, audio: Var, clips: usize, frames: usize) -> Var {
        let w = self.config.window;
        let starts: Vec<usize> = (0..clips).flat_map(|c| (0..=frames - w).map(move |s| c * frames + s)).collect();
        let (ew, aw) = self.gather_windows(tape, expr, audio, &starts, &starts);
        let z = self.logits(tape, p, ew, aw);
        tape.sigmoid(z)
    }

    fn check_pair(&self, expr: &Mat, audio: &Mat) -> Result<()> {
        if expr.nrows() != audio.nrows() {
            return Err(Error::Shape(format!("expression has {} frames, audio {}", expr.nrows(), audio.nrows())));
        }
        if expr.ncols() != self.config.expr_dim || audio.ncols() != self.config.audio_dim {
            return Err(Error::Shape(format!(
                "expected {} expression and {} audio channels, got {} and {}",
                self.config.expr_dim,
                self.config.audio_dim,
                expr.ncols(),
                audio.ncols()
            )));
        }
        if expr.nrows() < self.config.window {
            return Err(Error::TooShort { got: expr.nrows(), need: self.config.window });
        }
        Ok(())
    }

    /// Synchrony probability of one window pair of exactly `window` frames.
    pub fn score_pair(&self, expr_window: &Mat, audio_window: &Mat) -> Result<f64> {
        self.check_pair(expr_window, audio_window)?;
        if expr_window.nrows() != self.config.window {
            return Err(Error::Shape(format!(
                "sync windows must have {} frames, got {}",
                self.config.window,
                expr_window.nrows()
            )));
        }
        Ok(self.window_scores(expr_window, audio_window)?[0])
    }

    /// Scores of every aligned sliding window.
    pub fn window_scores(&self, expr: &Mat, audio: &Mat) -> Result<Vec<f64>> {
        self.check_pair(expr, audio)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(expr.clone());
        let a = tape.constant(audio.clone());
        let s = self.aligned_scores(&mut tape, &p, e, a, 1, expr.nrows());
        Ok(tape.value(s).iter().copied().collect())
    }

    /// Scores of windows at `expr_starts` paired with audio windows at
    /// `audio_starts` within one clip.
    pub fn shifted_scores(&self, expr: &Mat, audio: &Mat, expr_starts: &[usize], audio_starts: &[usize]) -> Result<Vec<f64>> {
        self.check_pair(expr, audio)?;
        let last = expr.nrows() - self.config.window;
        if expr_starts.iter().chain(audio_starts).any(|&s| s > last) || expr_starts.len() != audio_starts.len() {
            return Err(Error::Invalid("sync window outside the clip".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(expr.clone());
        let a = tape.constant(audio.clone());
        let (ew, aw) = self.gather_windows(&mut tape, e, a, expr_starts, audio_starts);
        let z = self.logits(&mut tape, &p, ew, aw);
        let s = tape.sigmoid(z);
        Ok(tape.value(s).iter().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncPretrainConfig {
    pub epochs: usize,
    pub clips_per_step: usize,
    pub windows_per_clip: usize,
    pub lr: f64,
    pub min_shift: usize,
    pub max_shift: usize,
    pub sync: SyncConfig,
}

impl Default for SyncPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            clips_per_step: 32,
            windows_per_clip: 4,
            lr: 1e-3,
            min_shift: 4,
            max_shift: 16,
            sync: SyncConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncPretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Held-out classification accuracy at threshold 0.5, negatives
    /// shifted by the training offset range.
    pub accuracy: f64,
    pub aligned_mean: f64,
    /// Mean score for audio shifted by at least 8 frames.
    pub shifted_mean: f64,
}

/// Start of an audio window displaced from `start` by a feasible shift in
/// `[min, max]`, in either direction.
fn negative_start(rng: &mut impl Rng, start: usize, last: usize, min: usize, max: usize) -> Option<usize> {
    let mut options = Vec::new();
    for s in min..=max {
        if start + s <= last {
            options.push(start + s);
        }
        if start >= s {
            options.push(start - s);
        }
    }
    if options.is_empty() {
        None
    } else {
        Some(options[rng.random_range(0..options.len())])
    }
}

/// Pair windows for a batch of clips. Returns stacked expression and
/// audio matrices plus positive/negative start lists and labels.
struct PairBatch {
    expr: Mat,
    audio: Mat,
    expr_starts: Vec<usize>,
    audio_starts: Vec<usize>,
    labels: Mat,
}

fn build_pairs(
    clips: &[&Sample],
    per_clip: usize,
    min_shift: usize,
    max_shift: usize,
    window: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    let frames = clips[0].expression.nrows();
    let last = frames - window;
    let expr_views: Vec<_> = clips.iter().map(|s| s.expression.view()).collect();
    let audio_views: Vec<_> = clips.iter().map(|s| s.audio.view()).collect();
    let expr = ndarray::concatenate(ndarray::Axis(0), &expr_views).map_err(|e| Error::Shape(e.to_string()))?;
    let audio = ndarray::concatenate(ndarray::Axis(0), &audio_views).map_err(|e| Error::Shape(e.to_string()))?;
    let (mut es, mut as_, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..clips.len() {
        let base = c * frames;
        for _ in 0..per_clip {
            let start = rng.random_range(0..=last);
            es.push(base + start);
            as_.push(base + start);
            labels.push(1.0);
            let neg = negative_start(rng, start, last, min_shift, max_shift)
                .ok_or_else(|| Error::Invalid(format!("clips of {frames} frames cannot hold a shifted sync window")))?;
            es.push(base + start);
            as_.push(base + neg);
            labels.push(0.0);
        }
    }
    let n = labels.len();
    Ok(PairBatch {
        expr,
        audio,
        expr_starts: es,
        audio_starts: as_,
        labels: Mat::from_shape_vec((n, 1), labels).expect("column"),
    })
}

/// Binary cross-entropy with logits: `softplus(z) - y z`, averaged.
pub fn bce_with_logits(tape: &mut Tape, z: Var, labels: Var) -> Var {
    let sp = tape.softplus(z);
    let yz = tape.mul(labels, z);
    let l = tape.sub(sp, yz);
    tape.mean_all(l)
}

/// Train a sync discriminator on aligned (positive) versus temporally
/// shifted (negative) window pairs from the train split, then evaluate
/// on held-out clips.
pub fn pretrain_sync(corpus: &Corpus, config: &SyncPretrainConfig, seed: u64) -> Result<(SyncDiscriminator, SyncPretrainReport)> {
    let train = corpus.split(Split::Train);
    let held: Vec<&Sample> = corpus.samples.iter().filter(|s| s.meta.split != Split::Train).collect();
    let window = config.sync.window;
    let frames = corpus.world.frames;
    if train.len() < 2 || held.is_empty() {
        return Err(Error::Invalid(format!(
            "sync pretraining needs at least 2 training and 1 held-out clip, got {} and {}",
            train.len(),
            held.len()
        )));
    }
    if config.min_shift == 0 || config.min_shift > config.max_shift || frames < window + config.min_shift {
        return Err(Error::Invalid(format!(
            "corpus clips of {frames} frames are too short for {window}-frame windows shifted by {}..={}",
            config.min_shift, config.max_shift
        )));
    }
    let mut d = SyncDiscriminator::new(config.sync.clone(), &mut rng_for(seed, "sync/init"));
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), &d.params);
    let per_step = config.clips_per_step.clamp(1, train.len());
    let steps_per_epoch = train.len().div_ceil(per_step);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut rng = rng_for(seed, &format!("sync/epoch/{epoch}"));
        let order = sample(&mut rng, train.len(), train.len()).into_vec();
        for chunk in order.chunks(per_step).take(steps_per_epoch) {
            let clips: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let batch =
                build_pairs(&clips, config.windows_per_clip, config.min_shift, config.max_shift, window, &mut rng)?;
            let mut tape = Tape::new();
            let p = d.params.bind(&mut tape, true);
            let e = tape.constant(batch.expr);
            let a = tape.constant(batch.audio);
            let (ew, aw) = d.gather_windows(&mut tape, e, a, &batch.expr_starts, &batch.audio_starts);
            let z = d.logits(&mut tape, &p, ew, aw);
            let y = tape.constant(batch.labels);
            let loss = bce_with_logits(&mut tape, z, y);
            final_loss = tape.scalar(loss);
            if !final_loss.is_finite() {
                return Err(Error::NonFinite { iteration: step, detail: "sync pretraining loss".into() });
            }
            let grads = tape.backward(loss);
            opt.update(&mut d.params, &p.grads(&tape, &grads));
            step += 1;
        }
    }

    let mut rng = rng_for(seed, "sync/eval");
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut aligned, mut shifted) = (Vec::new(), Vec::new());
    let last = frames - window;
    for s in &held {
        let starts: Vec<usize> = (0..4).map(|_| rng.random_range(0..=last)).collect();
        let negs: Vec<usize> = starts
            .iter()
            .map(|&st| negative_start(&mut rng, st, last, config.min_shift, config.max_shift).unwrap_or(st))
            .collect();
        let far: Vec<usize> = starts
            .iter()
            .map(|&st| negative_start(&mut rng, st, last, 8.max(config.min_shift), config.max_shift.max(8)).unwrap_or(st))
            .collect();
        let pos = d.shifted_scores(&s.expression, &s.audio, &starts, &starts)?;
        let neg = d.shifted_scores(&s.expression, &s.audio, &starts, &negs)?;
        let far = d.shifted_scores(&s.expression, &s.audio, &starts, &far)?;
        correct += pos.iter().filter(|&&x| x > 0.5).count() + neg.iter().filter(|&&x| x <= 0.5).count();
        total += pos.len() + neg.len();
        aligned.extend(pos);
        shifted.extend(far);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = SyncPretrainReport {
        steps: step,
        final_loss,
        accuracy: correct as f64 / total as f64,
        aligned_mean: mean(&aligned),
        shifted_mean: mean(&shifted),
    };
    Ok((d, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_patch_count() {
        assert_eq!(TemporalConfig::default().lengths().unwrap(), vec![31, 14, 12]);
        let d = TemporalDiscriminator::new(TemporalConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let seq = Mat::from_shape_fn((64, 16), |(t, c)| ((t + c) as f64 * 0.1).sin());
        let s = d.scores(&seq).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s, d.scores(&seq).unwrap());
        assert!(d.scores(&Mat::zeros((60, 16))).is_err());
    }

    #[test]
    fn temporal_gradcheck() {
        let cfg = TemporalConfig {
            expr_dim: 3,
            length: 12,
            layers: vec![
                ConvSpec { kernel: 4, stride: 2, out_channels: 4 },
                ConvSpec { kernel: 3, stride: 1, out_channels: 1 },
            ],
        };
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = TemporalDiscriminator::new(cfg.clone(), &mut rng).unwrap();
            let x = Mat::from_shape_fn((24, 3), |_| rng.random_range(-1.0..1.0));
            let w = Mat::from_shape_fn((2 * 3, 1), |_| rng.random_range(-1.0..1.0));
            for c in gradcheck(&d.params, |t, p| {
                let xv = t.constant(x.clone());
                let s = d.forward(t, p, xv, 2).unwrap();
                let wv = t.constant(w.clone());
                let m = t.mul(s, wv);
                let m = t.tanh(m);
                t.sum_all(m)
            }) {
                assert!(c.rel_error < 1e-4, "seed {seed} {}: {}", c.name, c.rel_error);
            }
        }
    }

    #[test]
    fn sync_scores_are_probabilities_and_batch_invariant() {
        let d = SyncDiscriminator::new(SyncConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Mat::from_shape_fn((12, 16), |_| rng.random_range(-1.0..1.0));
        let a = Mat::from_shape_fn((12, 8), |_| rng.random_range(-1.0..1.0));
        let all = d.window_scores(&e, &a).unwrap();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|s| (0.0..=1.0).contains(s)));
        let dup = d.shifted_scores(&e, &a, &[3, 3, 3], &[3, 3, 3]).unwrap();
        assert!(dup.iter().all(|&s| s == dup[0]));
        assert!((dup[0] - all[3]).abs() < 1e-12);
        let one = d.score_pair(&e.slice(ndarray::s![3..8, ..]).to_owned(), &a.slice(ndarray::s![3..8, ..]).to_owned());
        assert!((one.unwrap() - all[3]).abs() < 1e-12);
        assert!(d.score_pair(&Mat::zeros((5, 16)), &Mat::zeros((4, 8))).is_err());
        assert!(d.window_scores(&Mat::zeros((4, 16)), &Mat::zeros((4, 8))).is_err());
    }

    #[test]
    fn sync_gradcheck() {
        let cfg = SyncConfig { window: 3, expr_dim: 4, mouth_start: 0, mouth_len: 2, audio_dim: 2, hidden: 4, embed: 3 };
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = SyncDiscriminator::new(cfg.clone(), &mut rng);
            let e = Mat::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
            let a = Mat::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
            let y = Mat::from_shape_fn((6, 1), |(i, _)| (i % 2) as f64);
            for c in gradcheck(&d.params, |t, p| {
                let ev = t.constant(e.clone());
                let av = t.constant(a.clone());
                let (ew, aw) = d.gather_windows(t, ev, av, &[0, 1, 2, 3, 4, 5], &[0, 4, 2, 0, 4, 1]);
                let z = d.logits(t, p, ew, aw);
                let yv = t.constant(y.clone());
                bce_with_logits(t, z, yv)
            }) {
                assert!(c.rel_error < 1e-4, "seed {seed} {}: {}", c.name, c.rel_error);
            }
        }
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let corpus = crate::synthdata::make_dataset(&crate::synthdata::WorldConfig::default(), 6, 6, 0).unwrap();
        assert!(pretrain_sync(&corpus, &SyncPretrainConfig::default(), 0).is_err());
    }

}
