//! Training objectives: reconstruction (L1 + SSIM), cosine alignment,
//! sync, temporal hinge, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SYNC_EPS: f64 = 1e-7;
pub const DEFAULT_MU: f64 = 0.1;
/// Lower bound on the SSIM dynamic range so constant inputs stay defined.
pub const MIN_RANGE: f64 = 1e-6;

fn check_same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    Ok(())
}

/// Window extent along each axis, clamped to the image size.
pub fn window_extent(rows: usize, cols: usize) -> (usize, usize) {
    (SSIM_WINDOW.min(rows), SSIM_WINDOW.min(cols))
}

/// Box means of every valid `wh x ww` window, via summed-area tables.
fn box_mean(x: &Mat, wh: usize, ww: usize) -> Mat {
    let (h, w) = x.dim();
    let mut sat = Mat::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += x[[i, j]];
            sat[[i + 1, j + 1]] = sat[[i, j + 1]] + row;
        }
    }
    let n = (wh * ww) as f64;
    Mat::from_shape_fn((h - wh + 1, w - ww + 1), |(i, j)| {
        (sat[[i + wh, j + ww]] - sat[[i, j + ww]] - sat[[i + wh, j]] + sat[[i, j]]) / n
    })
}

/// Mean SSIM over all valid windows with a uniform window, population
/// (co)variances and `C1 = (K1 L)^2`, `C2 = (K2 L)^2` for dynamic range `L`.
pub fn ssim(a: &Mat, b: &Mat, range: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (wh, ww) = window_extent(a.nrows(), a.ncols());
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let ma = box_mean(a, wh, ww);
    let mb = box_mean(b, wh, ww);
    let maa = box_mean(&(a * a), wh, ww);
    let mbb = box_mean(&(b * b), wh, ww);
    let mab = box_mean(&(a * b), wh, ww);
    let mut total = 0.0;
    for ((((&ua, &ub), &aa), &bb), &ab) in ma.iter().zip(&mb).zip(&maa).zip(&mbb).zip(&mab) {
        let va = aa - ua * ua;
        let vb = bb - ub * ub;
        let cov = ab - ua * ub;
        total += ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2));
    }
    Ok(total / ma.len() as f64)
}

/// Joint dynamic range of two matrices, floored at [`MIN_RANGE`].
pub fn data_range(a: &Mat, b: &Mat) -> f64 {
    let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = a.iter().chain(b.iter()).cloned().fold(f64::INFINITY, f64::min);
    (hi - lo).max(MIN_RANGE)
}

/// `mu * mean|pred - gt| + (1 - mu) * (1 - SSIM(pred, gt))`, with the SSIM
/// range taken jointly from both inputs.
pub fn loss_rec(pred: &Mat, gt: &Mat, mu: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let l1 = (pred - gt).mapv(f64::abs).mean().expect("nonempty");
    let s = ssim(pred, gt, data_range(pred, gt))?;
    Ok(mu * l1 + (1.0 - mu) * (1.0 - s))
}

fn averaging_rows(n: usize, win: usize) -> Mat {
    Mat::from_shape_fn((n - win + 1, n), |(i, j)| if j >= i && j < i + win { 1.0 / win as f64 } else { 0.0 })
}

/// Tape SSIM of one `rows x cols` pair; `range` is a `1x1` variable.
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var, range: Var) -> Var {
    let (h, w) = tape.shape(a);
    let (wh, ww) = window_extent(h, w);
    let r = tape.constant(averaging_rows(h, wh));
    let c = tape.constant(averaging_rows(w, ww).reversed_axes());
    let mean = |tape: &mut Tape, x: Var| {
        let rx = tape.matmul(r, x);
        tape.matmul(rx, c)
    };
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let (ua, ub) = (mean(tape, a), mean(tape, b));
    let (maa, mbb, mab) = (mean(tape, aa), mean(tape, bb), mean(tape, ab));

    let l2 = tape.mul(range, range);
    let c1 = tape.scale(l2, SSIM_K1 * SSIM_K1);
    let c2 = tape.scale(l2, SSIM_K2 * SSIM_K2);

    let ua2 = tape.mul(ua, ua);
    let ub2 = tape.mul(ub, ub);
    let uab = tape.mul(ua, ub);
    let va = tape.sub(maa, ua2);
    let vb = tape.sub(mbb, ub2);
    let cov = tape.sub(mab, uab);

    let n1 = tape.scale(uab, 2.0);
    let n1 = tape.add(n1, c1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add(n2, c2);
    let num = tape.mul(n1, n2);
    let d1 = tape.add(ua2, ub2);
    let d1 = tape.add(d1, c1);
    let d2 = tape.add(va, vb);
    let d2 = tape.add(d2, c2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    tape.mean_all(map)
}

/// Reconstruction loss for `clips` sequences stacked row-wise. The L1 term
/// averages over every entry; SSIM is averaged over clips with one
/// dynamic range estimated from the whole batch.
pub fn loss_rec_var(tape: &mut Tape, pred: Var, gt: Var, clips: usize, mu: f64) -> Var {
    let (rows, _) = tape.shape(pred);
    let frames = rows / clips;
    let d = tape.sub(pred, gt);
    let ad = tape.relu(d);
    let nd = tape.scale(d, -1.0);
    let nd = tape.relu(nd);
    let abs = tape.add(ad, nd);
    let l1 = tape.mean_all(abs);

    let both = tape.concat_rows(&[pred, gt]);
    let hi = tape.max_all(both);
    let lo = tape.min_all(both);
    let range = tape.sub(hi, lo);
    let range = tape.clamp_min(range, MIN_RANGE);

    let mut ssim_sum = None;
    for c in 0..clips {
        let p = tape.slice_rows(pred, c * frames, frames);
        let g = tape.slice_rows(gt, c * frames, frames);
        let s = ssim_var(tape, p, g, range);
        ssim_sum = Some(match ssim_sum {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    let mean_ssim = tape.scale(ssim_sum.expect("at least one clip"), 1.0 / clips as f64);
    let dissim = tape.scale(mean_ssim, -(1.0 - mu));
    let dissim = tape.offset(dissim, 1.0 - mu);
    let l1 = tape.scale(l1, mu);
    tape.add(l1, dissim)
}

/// `1 - cos(s_t, s_v)`; undefined (error) for a zero vector.
pub fn loss_cos(s_t: &[f64], s_v: &[f64]) -> Result<f64> {
    if s_t.len() != s_v.len() {
        return Err(Error::Shape(format!("style codes of length {} and {}", s_t.len(), s_v.len())));
    }
    let dot: f64 = s_t.iter().zip(s_v).map(|(a, b)| a * b).sum();
    let na2 = s_t.iter().map(|a| a * a).sum::<f64>();
    let nb2 = s_v.iter().map(|b| b * b).sum::<f64>();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::Invalid("cosine loss of a zero style code".into()));
    }
    let cos = (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Mean over rows of `1 - cos`.
pub fn loss_cos_var(tape: &mut Tape, s_t: Var, s_v: Var) -> Var {
    let cos = crate::nn::cosine_rows(tape, s_t, s_v);
    let m = tape.mean_all(cos);
    let neg = tape.scale(m, -1.0);
    tape.offset(neg, 1.0)
}

pub fn loss_sync(score: f64) -> f64 {
    -score.max(SYNC_EPS).ln()
}

/// Mean of `-ln(max(score, eps))` over a column of scores.
pub fn loss_sync_var(tape: &mut Tape, scores: Var) -> Var {
    let c = tape.clamp_min(scores, SYNC_EPS);
    let l = tape.ln(c);
    let m = tape.mean_all(l);
    tape.scale(m, -1.0)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn loss_tem_g(fake: &[f64]) -> f64 {
    -mean(fake)
}

pub fn loss_tem_d(real: &[f64], fake: &[f64]) -> f64 {
    let r: Vec<f64> = real.iter().map(|x| (1.0 - x).max(0.0)).collect();
    let f: Vec<f64> = fake.iter().map(|x| (1.0 + x).max(0.0)).collect();
    mean(&r) + mean(&f)
}

pub fn loss_tem_g_var(tape: &mut Tape, fake: Var) -> Var {
    let m = tape.mean_all(fake);
    tape.scale(m, -1.0)
}

pub fn loss_tem_d_var(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let r = tape.scale(real, -1.0);
    let r = tape.offset(r, 1.0);
    let r = tape.relu(r);
    let r = tape.mean_all(r);
    let f = tape.offset(fake, 1.0);
    let f = tape.relu(f);
    let f = tape.mean_all(f);
    tape.add(r, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub cos: f64,
    pub sync: f64,
    pub tem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 88.0, cos: 1.0, sync: 1.0, tem: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("rec", self.rec), ("cos", self.cos), ("sync", self.sync), ("tem", self.tem)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub cos: f64,
    pub sync: f64,
    pub tem: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cos: f64,
    pub sync: f64,
    pub tem: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let total = weights.rec * terms.rec + weights.cos * terms.cos + weights.sync * terms.sync + weights.tem * terms.tem;
    Ok(LossBreakdown { rec: terms.rec, cos: terms.cos, sync: terms.sync, tem: terms.tem, total, weights })
}

/// Weighted sum on the tape, same order of operations as [`total_loss`].
pub fn total_loss_var(tape: &mut Tape, rec: Var, cos: Var, sync: Var, tem: Var, w: LossWeights) -> Var {
    let a = tape.scale(rec, w.rec);
    let b = tape.scale(cos, w.cos);
    let c = tape.scale(sync, w.sync);
    let d = tape.scale(tem, w.tem);
    let ab = tape.add(a, b);
    let abc = tape.add(ab, c);
    tape.add(abc, d)
}
