//! Named parameter sets, dense layers, Adam, and the finite-difference
//! gradient checker shared by every trainable module.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Grads, Mat, Tape, Var};

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Gaussian init scaled by `gain / sqrt(fan_in)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        gain: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let std = gain / (shape.0 as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Mat::from_shape_fn(shape, |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> usize {
        self.add(name, Mat::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Place every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.variable(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn to_record(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), TensorRecord::from_mat(v)))
            .collect()
    }

    /// Overwrite values from a record; names and shapes must match exactly.
    pub fn load_record(&mut self, rec: &BTreeMap<String, TensorRecord>) -> Result<(), String> {
        if rec.len() != self.names.len() {
            return Err(format!("expected {} tensors, found {}", self.names.len(), rec.len()));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let r = rec.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            let m = r.to_mat().map_err(|e| format!("{name}: {e}"))?;
            if m.dim() != value.dim() {
                return Err(format!("{name}: shape {:?}, expected {:?}", m.dim(), value.dim()));
            }
            *value = m;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_mat(m: &Mat) -> Self {
        Self { shape: [m.nrows(), m.ncols()], data: m.iter().copied().collect() }
    }

    pub fn to_mat(&self) -> Result<Mat, String> {
        Mat::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| e.to_string())
    }
}

/// A [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in set order (zeros where none flowed).
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Mat> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect()
    }
}

impl Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

/// Affine layer `x W + b` addressed by parameter indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = params.add_normal(format!("{name}.w"), (fan_in, fan_out), 1.0, rng);
        let b = params.add_zeros(format!("{name}.b"), (1, fan_out));
        Self { w, b }
    }

    pub fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add_zeros(format!("{name}.w"), (fan_in, fan_out));
        let b = params.add_zeros(format!("{name}.b"), (1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let xw = tape.matmul(x, p[self.w]);
        tape.add(xw, p[self.b])
    }
}

/// Sinusoidal position table: `pe[p][2i] = sin(p / 10000^(2i/d))`,
/// `pe[p][2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Divide each row by its Euclidean norm (plus a tiny floor).
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.mul(x, x);
    let ss = tape.sum_cols(sq);
    let ss = tape.offset(ss, 1e-12);
    let norm = tape.sqrt(ss);
    tape.div(x, norm)
}

/// Row-wise cosine similarity of two equally shaped matrices (`n x 1`).
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = normalize_rows(tape, a);
    let bn = normalize_rows(tape, b);
    let prod = tape.mul(an, bn);
    tape.sum_cols(prod)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }

    pub fn to_record(&self, params: &ParamSet) -> AdamRecord {
        let pack = |ms: &[Mat]| -> BTreeMap<String, TensorRecord> {
            params.names().iter().zip(ms).map(|(n, m)| (n.clone(), TensorRecord::from_mat(m))).collect()
        };
        AdamRecord { config: self.config, step: self.step, m: pack(&self.m), v: pack(&self.v) }
    }

    pub fn from_record(rec: &AdamRecord, params: &ParamSet) -> Result<Self, String> {
        let unpack = |map: &BTreeMap<String, TensorRecord>| -> Result<Vec<Mat>, String> {
            params
                .names()
                .iter()
                .map(|n| map.get(n).ok_or_else(|| format!("optimizer state missing {n}"))?.to_mat())
                .collect()
        };
        Ok(Self { config: rec.config, step: rec.step, m: unpack(&rec.m)?, v: unpack(&rec.v)? })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamRecord {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, TensorRecord>,
    pub v: BTreeMap<String, TensorRecord>,
}

/// Result of comparing analytic and central-difference gradients for one
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` over the
    /// whole tensor (Euclidean norms).
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compare the tape gradient of `loss(params)` with central differences
/// over every scalar of every parameter.
///
/// `build` must construct a scalar loss from the bound parameters and be a
/// deterministic function of them.
pub fn gradcheck(params: &ParamSet, build: impl Fn(&mut Tape, &Bound) -> Var) -> Vec<GradCheck> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = build(&mut tape, &bound);
    let grads = tape.backward(loss);
    let analytic = bound.grads(&tape, &grads);

    let eval = |p: &ParamSet| -> f64 {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let l = build(&mut t, &b);
        t.scalar(l)
    };

    let h = 1e-6;
    let mut work = params.clone();
    let mut out = Vec::new();
    for (k, name) in params.names().iter().enumerate() {
        let mut numeric = Mat::zeros(params.values()[k].raw_dim());
        for idx in 0..numeric.len() {
            let at = (idx / numeric.ncols(), idx % numeric.ncols());
            let orig = work.values()[k][at];
            work.values_mut()[k][at] = orig + h;
            let fp = eval(&work);
            work.values_mut()[k][at] = orig - h;
            let fm = eval(&work);
            work.values_mut()[k][at] = orig;
            numeric[at] = (fp - fm) / (2.0 * h);
        }
        let diff = (&analytic[k] - &numeric).mapv(|x| x * x).sum().sqrt();
        let na = analytic[k].mapv(|x| x * x).sum().sqrt();
        let nn = numeric.mapv(|x| x * x).sum().sqrt();
        let denom = na.max(nn);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        out.push(GradCheck { name: name.clone(), rel_error, analytic_norm: na });
    }
    out
}
