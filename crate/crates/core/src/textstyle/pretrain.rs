//! Contrastive pretraining of the text backbone against a style tower.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, TextBackbone};
use super::tokenizer::{Tokenizer, DEFAULT_MAX_LEN};
use crate::annotation::{build_caption, AuLevel, AuLookup, DropConfig, EmotionTable};
use crate::error::{Error, Result};
use crate::nn::{normalize_rows, Adam, AdamConfig, Bound, Linear, ParamSet};
use crate::seed::rng_for;
use crate::synthdata::{ClipMeta, Corpus, Sample, Split, EMOTIONS};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextPretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub drop: DropConfig,
    pub backbone: BackboneConfig,
    pub max_len: usize,
}

impl Default for TextPretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 32,
            lr: 2e-3,
            temperature: 0.1,
            drop: DropConfig { emotion: 0.25, au: 0.25 },
            backbone: BackboneConfig::default(),
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPretrainReport {
    pub iterations: usize,
    pub skipped: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub retrieval_accuracy: f64,
    pub retrieval_chance: f64,
}

/// Sentences covering every word a corpus caption can contain.
pub fn caption_vocabulary(emotions: &EmotionTable, lookup: &AuLookup) -> Vec<String> {
    let mut out = vec![
        "A man is calm and speaks with lips parted.".to_string(),
        "A woman speaks with jaw dropped, lips parted and nose wrinkled.".to_string(),
        "An expressionless man.".to_string(),
        "An expressionless woman.".to_string(),
    ];
    out.extend(emotions.vocabulary.iter().cloned());
    for entry in &lookup.entries {
        for level in AuLevel::ACTIVE {
            out.extend(entry.phrase(level));
        }
    }
    out
}

/// Input of the style tower: emotion one-hot, intensity one-hot, AU bias
/// scaled to [0,1], and a one-hot of each AU's caption level.
pub fn style_features(meta: &ClipMeta, lookup: &AuLookup) -> Vec<f64> {
    let mut f = vec![0.0; EMOTIONS.len() + 3];
    f[meta.style.emotion_id] = 1.0;
    f[EMOTIONS.len() + meta.style.intensity_level as usize - 1] = 1.0;
    f.extend(meta.style.au_bias.iter().map(|b| b / 5.0));
    for entry in &lookup.entries {
        let level = meta.au_levels.iter().find(|(au, _)| *au == entry.au_id).map(|(_, l)| *l).unwrap_or(AuLevel::None);
        let mut one_hot = [0.0; 4];
        one_hot[level.rank() as usize] = 1.0;
        f.extend(one_hot);
    }
    f
}

#[derive(Clone, Debug)]
pub struct StyleTower {
    pub params: ParamSet,
    hidden: Linear,
    out: Linear,
}

impl StyleTower {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let hidden = Linear::new(&mut params, "tower.hidden", in_dim, 64, rng);
        let out = Linear::new(&mut params, "tower.out", 64, out_dim, rng);
        Self { params, hidden, out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(tape, p, x);
        let h = tape.tanh(h);
        self.out.forward(tape, p, h)
    }
}

fn caption_for(sample: &Sample, corpus: &Corpus, rng: &mut impl Rng, drop: DropConfig) -> Result<String> {
    let labels = corpus.labels_for(sample);
    Ok(build_caption(&sample.meta.subject, labels, &sample.meta.au_levels, &corpus.lookup, rng, drop)?.sentence)
}

/// Symmetric InfoNCE between row-aligned `a` and `b`.
fn info_nce(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Var {
    let n = tape.shape(a).0;
    let an = normalize_rows(tape, a);
    let bn = normalize_rows(tape, b);
    let bt = tape.transpose(bn);
    let logits = tape.matmul(an, bt);
    let logits = tape.scale(logits, 1.0 / temperature);
    let eye = tape.constant(Mat::eye(n));
    let mut total = None;
    for l in [logits, tape.transpose(logits)] {
        let sm = tape.softmax_rows(l);
        let diag = tape.mul(sm, eye);
        let diag = tape.sum_cols(diag);
        let ln = tape.ln(diag);
        let m = tape.mean_all(ln);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m),
        });
    }
    tape.scale(total.expect("two directions"), -0.5)
}

/// Fraction of held-out captions whose nearest neighbour (cosine) among
/// independently re-drawn captions of the same clips is the matching one.
pub fn paraphrase_retrieval(backbone: &TextBackbone, corpus: &Corpus, seed: u64, max_clips: usize) -> Result<(f64, f64)> {
    let held: Vec<&Sample> =
        corpus.samples.iter().filter(|s| s.meta.split != Split::Train).take(max_clips).collect();
    if held.len() < 2 {
        return Err(Error::Invalid("need at least two held-out clips for retrieval".into()));
    }
    let drop = DropConfig { emotion: 0.25, au: 0.25 };
    let mut ra = rng_for(seed, "retrieval/a");
    let mut rb = rng_for(seed, "retrieval/b");
    let a: Vec<String> = held.iter().map(|s| caption_for(s, corpus, &mut ra, drop)).collect::<Result<_>>()?;
    let b: Vec<String> = held.iter().map(|s| caption_for(s, corpus, &mut rb, drop)).collect::<Result<_>>()?;
    let ea = backbone.encode(&a.iter().map(String::as_str).collect::<Vec<_>>())?;
    let eb = backbone.encode(&b.iter().map(String::as_str).collect::<Vec<_>>())?;
    let unit = |m: Mat| {
        let norms = m.map_axis(ndarray::Axis(1), |r| r.dot(&r).sqrt().max(1e-12)).insert_axis(ndarray::Axis(1));
        &m / &norms
    };
    let sim = unit(ea).dot(&unit(eb).t());
    let hits = (0..held.len())
        .filter(|&i| {
            let row = sim.row(i);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            best == i
        })
        .count();
    Ok((hits as f64 / held.len() as f64, 1.0 / held.len() as f64))
}

/// Build a tokenizer from the corpus vocabulary, train the backbone
/// contrastively against [`StyleTower`] on train-split captions (unless
/// `skip`), and return it frozen.
pub fn pretrain_backbone(
    corpus: &Corpus,
    config: &TextPretrainConfig,
    seed: u64,
    skip: bool,
) -> Result<(TextBackbone, TextPretrainReport)> {
    config.drop.validate()?;
    let train: Vec<&Sample> = corpus.split(Split::Train);
    if train.len() < 2 {
        return Err(Error::Invalid("text pretraining needs at least two training clips".into()));
    }
    let mut vocab_src = caption_vocabulary(&corpus.emotions, &corpus.lookup);
    vocab_src.extend(corpus.samples.iter().map(|s| s.sentence.clone()));
    let tokenizer = Tokenizer::build(vocab_src.iter().map(String::as_str), config.max_len);
    let mut backbone = TextBackbone::new(tokenizer, config.backbone, &mut rng_for(seed, "text/init"));

    let feats: Vec<Vec<f64>> = train.iter().map(|s| style_features(&s.meta, &corpus.lookup)).collect();
    let tower = StyleTower::new(feats[0].len(), config.backbone.style_dim, &mut rng_for(seed, "text/tower"));
    let mut tower_params = tower.params.clone();
    let mut opt_text = Adam::new(AdamConfig::with_lr(config.lr), &backbone.params);
    let mut opt_tower = Adam::new(AdamConfig::with_lr(config.lr), &tower_params);

    let iterations = if skip { 0 } else { config.iterations };
    let batch = config.batch.min(train.len()).max(2);
    let (mut initial_loss, mut final_loss) = (f64::NAN, f64::NAN);
    for it in 0..iterations {
        let mut rng = rng_for(seed, &format!("text/step/{it}"));
        let picks = sample(&mut rng, train.len(), batch).into_vec();
        let sentences: Vec<String> =
            picks.iter().map(|&i| caption_for(train[i], corpus, &mut rng, config.drop)).collect::<Result<_>>()?;
        let tokens = backbone.tokenize_all(&sentences.iter().map(String::as_str).collect::<Vec<_>>())?;
        let x = Mat::from_shape_fn((batch, feats[0].len()), |(r, c)| feats[picks[r]][c]);

        let mut tape = Tape::new();
        let pb = backbone.params.bind(&mut tape, true);
        let pt = tower_params.bind(&mut tape, true);
        let text = backbone.forward(&mut tape, &pb, &tokens);
        let xv = tape.constant(x);
        let style = tower.forward(&mut tape, &pt, xv);
        let loss = info_nce(&mut tape, text, style, config.temperature);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: it, detail: "text pretraining loss".into() });
        }
        if it == 0 {
            initial_loss = value;
        }
        final_loss = value;
        let grads = tape.backward(loss);
        opt_text.update(&mut backbone.params, &pb.grads(&tape, &grads));
        opt_tower.update(&mut tower_params, &pt.grads(&tape, &grads));
    }

    backbone.freeze();
    let (retrieval_accuracy, retrieval_chance) = paraphrase_retrieval(&backbone, corpus, seed, 64)?;
    let report = TextPretrainReport {
        iterations,
        skipped: skip,
        initial_loss,
        final_loss,
        retrieval_accuracy,
        retrieval_chance,
    };
    Ok((backbone, report))
}
