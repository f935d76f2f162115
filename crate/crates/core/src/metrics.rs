//! Evaluation metrics on expression sequences: pseudo-landmark distances,
//! image SSIM and CPBD on a simple landmark rendering, a sync-confidence
//! proxy, and AU-level agreement between captions and generated motion.

use serde::{Deserialize, Serialize};

use crate::annotation::{parse_sentence, quantize_au_level, AuLookup, Caption};
use crate::discriminators::SyncDiscriminator;
use crate::error::{Error, Result};
use crate::losses::ssim;
use crate::synthdata::{measure_au, Corpus, Sample, Split, WorldConfig};
use crate::tape::Mat;
use crate::trainer::InferenceModel;

pub const NUM_LANDMARKS: usize = 12;
pub const MOUTH_LANDMARKS: [usize; 4] = [8, 9, 10, 11];
pub const ALL_LANDMARKS: [usize; NUM_LANDMARKS] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
pub const LANDMARK_MAP_VERSION: u32 = 1;

/// Neutral layout on a 128x128 canvas: brows (0-3), eyes (4-5), nostrils
/// (6-7), mouth corners and lips (8-11).
const BASE_LAYOUT: [[f64; 2]; NUM_LANDMARKS] = [
    [40.0, 40.0],
    [56.0, 42.0],
    [72.0, 42.0],
    [88.0, 40.0],
    [48.0, 54.0],
    [80.0, 54.0],
    [58.0, 74.0],
    [70.0, 74.0],
    [50.0, 92.0],
    [64.0, 88.0],
    [78.0, 92.0],
    [64.0, 98.0],
];

/// Sparse displacement map: (landmark, axis 0=x 1=y, expression channel,
/// pixels per unit). Channels 0-3 only ever touch mouth landmarks.
const DISPLACEMENTS: &[(usize, usize, usize, f64)] = &[
    (11, 1, 0, 6.0),
    (9, 1, 0, -1.0),
    (8, 0, 1, -4.0),
    (10, 0, 1, 4.0),
    (9, 1, 2, -2.0),
    (11, 1, 2, 2.0),
    (8, 0, 2, 2.0),
    (10, 0, 2, -2.0),
    (8, 1, 3, 3.0),
    (10, 1, 3, 3.0),
    (9, 1, 3, 1.0),
    (1, 1, 4, -4.0),
    (2, 1, 4, -4.0),
    (0, 1, 5, -4.0),
    (3, 1, 5, -4.0),
    (0, 1, 6, 3.0),
    (1, 1, 6, 3.0),
    (2, 1, 6, 3.0),
    (3, 1, 6, 3.0),
    (1, 0, 6, 2.0),
    (2, 0, 6, -2.0),
    (4, 1, 7, -2.0),
    (5, 1, 7, -2.0),
    (8, 1, 7, -1.0),
    (10, 1, 7, -1.0),
    (6, 1, 8, -3.0),
    (7, 1, 8, -3.0),
    (9, 1, 8, -1.0),
    (8, 1, 9, -4.0),
    (10, 1, 9, -4.0),
    (8, 0, 9, -2.0),
    (10, 0, 9, 2.0),
    (9, 1, 10, -1.5),
    (11, 1, 10, 2.5),
    (11, 1, 11, 5.0),
    (4, 1, 14, 1.0),
    (5, 1, 14, -1.0),
    (0, 0, 15, -1.5),
    (3, 0, 15, 1.5),
];

/// Expression channels that translate the whole face (x, y).
const HEAD_SHIFT: [(usize, f64); 2] = [(12, 1.5), (13, 1.5)];

/// `(2K) x D_e` matrix of the affine landmark map; row `2k` is the x of
/// landmark `k`, row `2k+1` its y.
pub fn landmark_matrix(expr_dim: usize) -> Mat {
    let mut m = Mat::zeros((2 * NUM_LANDMARKS, expr_dim));
    for &(k, axis, ch, w) in DISPLACEMENTS {
        if ch < expr_dim {
            m[[2 * k + axis, ch]] += w;
        }
    }
    for (axis, &(ch, w)) in HEAD_SHIFT.iter().enumerate() {
        if ch < expr_dim {
            for k in 0..NUM_LANDMARKS {
                m[[2 * k + axis, ch]] += w;
            }
        }
    }
    m
}

/// `K x 2` landmark coordinates of one expression frame.
pub fn project_landmarks(frame: &[f64]) -> Mat {
    let m = landmark_matrix(frame.len());
    Mat::from_shape_fn((NUM_LANDMARKS, 2), |(k, axis)| {
        let row = m.row(2 * k + axis);
        BASE_LAYOUT[k][axis] + row.iter().zip(frame).map(|(w, x)| w * x).sum::<f64>()
    })
}

/// Mean Euclidean distance between corresponding landmarks in `subset`,
/// over all frames.
pub fn lmd(pred: &Mat, gt: &Mat, subset: &[usize]) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("sequence shapes differ: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    if pred.nrows() == 0 || subset.is_empty() || subset.iter().any(|&k| k >= NUM_LANDMARKS) {
        return Err(Error::Invalid("lmd needs frames and a valid landmark subset".into()));
    }
    let mut total = 0.0;
    for (a, b) in pred.rows().into_iter().zip(gt.rows()) {
        let la = project_landmarks(&a.to_vec());
        let lb = project_landmarks(&b.to_vec());
        for &k in subset {
            total += ((la[[k, 0]] - lb[[k, 0]]).powi(2) + (la[[k, 1]] - lb[[k, 1]]).powi(2)).sqrt();
        }
    }
    Ok(total / (pred.nrows() * subset.len()) as f64)
}

/// Grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage(Mat);

impl GrayImage {
    pub fn new(pixels: Mat) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Shape("empty image".into()));
        }
        if let Some(bad) = pixels.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self(pixels))
    }

    pub fn pixels(&self) -> &Mat {
        &self.0
    }
}

/// Windowed SSIM with dynamic range 1.
pub fn ssim_image(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ssim(&a.0, &b.0, 1.0)
}

pub const CPBD_BLOCK: usize = 64;
/// A block counts as an edge block when more than this fraction of its
/// pixels are edge pixels.
pub const CPBD_EDGE_BLOCK_FRACTION: f64 = 0.002;
pub const CPBD_BETA: f64 = 3.6;
pub const CPBD_P_JNB: f64 = 0.63;

/// Vertical Sobel edge map: squared horizontal gradient above four times
/// its mean, thinned to horizontal local maxima.
fn sobel_vertical_edges(img: &Mat) -> (Vec<Vec<bool>>, Mat) {
    let (h, w) = img.dim();
    let mut gx = Mat::zeros((h, w));
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            gx[[i, j]] = (img[[i - 1, j + 1]] + 2.0 * img[[i, j + 1]] + img[[i + 1, j + 1]])
                - (img[[i - 1, j - 1]] + 2.0 * img[[i, j - 1]] + img[[i + 1, j - 1]]);
        }
    }
    let mag = gx.mapv(|g| g * g);
    let cutoff = 4.0 * mag.mean().unwrap_or(0.0);
    let mut edges = vec![vec![false; w]; h];
    if cutoff <= 0.0 {
        return (edges, gx);
    }
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let m = mag[[i, j]];
            edges[i][j] = m > cutoff && m >= mag[[i, j - 1]] && m >= mag[[i, j + 1]];
        }
    }
    (edges, gx)
}

/// Width of the vertical edge at `(i, j)`: distance between the intensity
/// extrema on either side along the row.
fn edge_width(img: &Mat, i: usize, j: usize, rising: bool) -> usize {
    let w = img.ncols();
    let v = |c: usize| img[[i, c]];
    let (mut left, mut right) = (j, j);
    if rising {
        while left > 0 && v(left - 1) < v(left) {
            left -= 1;
        }
        while right + 1 < w && v(right + 1) > v(right) {
            right += 1;
        }
    } else {
        while left > 0 && v(left - 1) > v(left) {
            left -= 1;
        }
        while right + 1 < w && v(right + 1) < v(right) {
            right += 1;
        }
    }
    right - left
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpbdResult {
    pub value: f64,
    pub edges: usize,
    /// Set when no edge was found and the value defaulted to 0.
    pub warning: Option<String>,
}

/// Cumulative probability of blur detection. Contrast is measured on a
/// 0-255 scale; the just-noticeable blur width is 5 pixels for block
/// contrast up to 50 and 3 above.
pub fn cpbd(img: &GrayImage) -> Result<CpbdResult> {
    let px = img.pixels();
    let (h, w) = px.dim();
    if h < CPBD_BLOCK || w < CPBD_BLOCK {
        return Err(Error::Shape(format!("CPBD needs at least {CPBD_BLOCK}x{CPBD_BLOCK} pixels, got {h}x{w}")));
    }
    let (edges, gx) = sobel_vertical_edges(px);
    let mut below = 0usize;
    let mut total = 0usize;
    for bi in 0..h / CPBD_BLOCK {
        for bj in 0..w / CPBD_BLOCK {
            let rows = bi * CPBD_BLOCK..(bi + 1) * CPBD_BLOCK;
            let cols = bj * CPBD_BLOCK..(bj + 1) * CPBD_BLOCK;
            let count = rows.clone().map(|i| cols.clone().filter(|&j| edges[i][j]).count()).sum::<usize>();
            if (count as f64) <= CPBD_EDGE_BLOCK_FRACTION * (CPBD_BLOCK * CPBD_BLOCK) as f64 {
                continue;
            }
            let block = px.slice(ndarray::s![rows.clone(), cols.clone()]);
            let hi = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = block.iter().cloned().fold(f64::INFINITY, f64::min);
            let contrast = 255.0 * (hi - lo);
            let jnb = if contrast <= 50.0 { 5.0 } else { 3.0 };
            for i in rows.clone() {
                for j in cols.clone() {
                    if !edges[i][j] {
                        continue;
                    }
                    let width = edge_width(px, i, j, gx[[i, j]] > 0.0) as f64;
                    let p_blur = 1.0 - (-(width / jnb).powf(CPBD_BETA)).exp();
                    total += 1;
                    if p_blur <= CPBD_P_JNB {
                        below += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Ok(CpbdResult { value: 0.0, edges: 0, warning: Some("no edges detected; CPBD defined as 0".into()) });
    }
    Ok(CpbdResult { value: below as f64 / total as f64, edges: total, warning: None })
}

pub const RENDER_SIZE: usize = 128;
const RENDER_BACKGROUND: f64 = 0.15;
const RENDER_INK: f64 = 0.85;
const RENDER_RADIUS: f64 = 3.5;

/// Draw one frame's landmarks as anti-aliased disks.
pub fn render_frame(frame: &[f64]) -> GrayImage {
    let lm = project_landmarks(frame);
    let img = Mat::from_shape_fn((RENDER_SIZE, RENDER_SIZE), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let cover = (0..NUM_LANDMARKS)
            .map(|k| {
                let d = ((px - lm[[k, 0]]).powi(2) + (py - lm[[k, 1]]).powi(2)).sqrt();
                (RENDER_RADIUS + 0.5 - d).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max);
        RENDER_BACKGROUND + (RENDER_INK - RENDER_BACKGROUND) * cover
    });
    GrayImage(img)
}

/// Mean sync-discriminator score over every aligned window.
pub fn sync_confidence(expr: &Mat, audio: &Mat, d_sync: &SyncDiscriminator) -> Result<f64> {
    let scores = d_sync.window_scores(expr, audio)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub clauses: usize,
    pub exact: usize,
    pub within_one: usize,
}

impl FidelityReport {
    pub fn add(&mut self, other: FidelityReport) {
        self.clauses += other.clauses;
        self.exact += other.exact;
        self.within_one += other.within_one;
    }

    /// Fraction matched exactly; 1 when there is nothing to match.
    pub fn exact_rate(&self) -> f64 {
        if self.clauses == 0 {
            1.0
        } else {
            self.exact as f64 / self.clauses as f64
        }
    }

    pub fn within_one_rate(&self) -> f64 {
        if self.clauses == 0 {
            1.0
        } else {
            self.within_one as f64 / self.clauses as f64
        }
    }
}

/// Compare the caption's AU clauses with the quantized AU readout of the
/// generated sequence.
pub fn text_fidelity(caption: &Caption, generated: &Mat, world: &WorldConfig, lookup: &AuLookup) -> Result<FidelityReport> {
    let measured = measure_au(world, generated);
    let ids = lookup.au_ids();
    let mut report = FidelityReport::default();
    for clause in &caption.au_clauses {
        let k = ids
            .iter()
            .position(|id| *id == clause.au)
            .ok_or_else(|| Error::Invalid(format!("AU {} not in lookup", clause.au)))?;
        let entry = lookup.get(&clause.au).expect("id from lookup");
        let level = quantize_au_level(measured[k], entry)?;
        let diff = (level.rank() - clause.level.rank()).abs();
        report.clauses += 1;
        report.exact += usize::from(diff == 0);
        report.within_one += usize::from(diff <= 1);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub split: Split,
    pub clips: usize,
    pub ssim: f64,
    pub cpbd: f64,
    pub f_lmd: f64,
    pub m_lmd: f64,
    pub sync_conf: f64,
    pub text_fidelity: FidelityReport,
    pub text_fidelity_exact: f64,
    pub text_fidelity_within_one: f64,
}

/// Frames sampled for the image metrics of one clip.
const IMAGE_FRAME_STRIDE: usize = 8;

/// Generate every clip of `split` (up to `max_clips`) from its full caption
/// and audio, and average the metrics against ground truth.
pub fn evaluate(
    model: &InferenceModel,
    d_sync: &SyncDiscriminator,
    corpus: &Corpus,
    split: Split,
    max_clips: usize,
    label: &str,
) -> Result<EvalReport> {
    let clips: Vec<&Sample> = corpus.split(split).into_iter().take(max_clips).collect();
    if clips.is_empty() {
        return Err(Error::Invalid(format!("corpus has no {split:?} clips")));
    }
    let (mut s, mut c, mut f, mut m, mut q) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut fidelity = FidelityReport::default();
    for clip in &clips {
        let pred = model.generate(&clip.sentence, &clip.audio)?;
        let gt = &clip.expression;
        f += lmd(&pred, gt, &ALL_LANDMARKS)?;
        m += lmd(&pred, gt, &MOUTH_LANDMARKS)?;
        q += sync_confidence(&pred, &clip.audio, d_sync)?;
        let (mut ss, mut cc, mut n) = (0.0, 0.0, 0usize);
        for t in (0..pred.nrows()).step_by(IMAGE_FRAME_STRIDE) {
            let a = render_frame(&pred.row(t).to_vec());
            let b = render_frame(&gt.row(t).to_vec());
            ss += ssim_image(&a, &b)?;
            cc += cpbd(&a)?.value;
            n += 1;
        }
        s += ss / n as f64;
        c += cc / n as f64;
        let caption = parse_sentence(&clip.sentence, &corpus.lookup)?;
        fidelity.add(text_fidelity(&caption, &pred, &corpus.world, &corpus.lookup)?);
    }
    let n = clips.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        split,
        clips: clips.len(),
        ssim: s / n,
        cpbd: c / n,
        f_lmd: f / n,
        m_lmd: m / n,
        sync_conf: q / n,
        text_fidelity: fidelity,
        text_fidelity_exact: fidelity.exact_rate(),
        text_fidelity_within_one: fidelity.within_one_rate(),
    })
}

/// Pearson correlation of two equally long series; 0 if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Mean over mouth channels of the per-channel correlation between two
/// sequences.
pub fn mouth_correlation(pred: &Mat, gt: &Mat, world: &WorldConfig) -> f64 {
    let chans = world.mouth_channels.clone();
    let n = chans.len() as f64;
    chans.map(|c| pearson(&pred.column(c).to_vec(), &gt.column(c).to_vec())).sum::<f64>() / n
}

#[cfg(test)]
mod tests;
