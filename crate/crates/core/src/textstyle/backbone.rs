use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, Tokens, PAD};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Bound, Linear, ParamSet, TensorRecord};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub style_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { embed_dim: 32, hidden: 64, style_dim: 32 }
    }
}

/// Small sentence encoder: token embeddings plus sinusoidal positions, a
/// width-3 context layer, mean pooling over tokens, and a linear projection
/// to the style dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBackbone {
    pub config: BackboneConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    frozen: bool,
    embedding: usize,
    context: Linear,
    projection: Linear,
}

/// Flattened token layout for a batch of sentences.
struct BatchLayout {
    ids: Rc<Vec<usize>>,
    positions: Mat,
    prev: Rc<Vec<usize>>,
    cur: Rc<Vec<usize>>,
    next: Rc<Vec<usize>>,
    pool: Mat,
}

impl BatchLayout {
    /// Each sentence is laid out as `PAD t1 .. tn PAD` so the context
    /// gathers at the edges pick up the pad row.
    fn new(batch: &[Tokens], embed_dim: usize) -> Self {
        let n_real: usize = batch.iter().map(|t| t.ids.len()).sum();
        let n_all = n_real + 2 * batch.len();
        let longest = batch.iter().map(|t| t.ids.len()).max().unwrap_or(0);
        let pe = positional_encoding(longest, embed_dim);

        let mut ids = Vec::with_capacity(n_all);
        let mut positions = Mat::zeros((n_all, embed_dim));
        let (mut prev, mut cur, mut next) = (Vec::new(), Vec::new(), Vec::new());
        let mut pool = Mat::zeros((batch.len(), n_real));
        let mut real = 0;
        for (b, tokens) in batch.iter().enumerate() {
            let start = ids.len();
            ids.push(PAD);
            for (p, &id) in tokens.ids.iter().enumerate() {
                let at = start + 1 + p;
                ids.push(id);
                positions.row_mut(at).assign(&pe.row(p));
                prev.push(at - 1);
                cur.push(at);
                next.push(at + 1);
                pool[[b, real]] = 1.0 / tokens.ids.len() as f64;
                real += 1;
            }
            ids.push(PAD);
        }
        Self {
            ids: Rc::new(ids),
            positions,
            prev: Rc::new(prev),
            cur: Rc::new(cur),
            next: Rc::new(next),
            pool,
        }
    }
}

impl TextBackbone {
    pub fn new(tokenizer: Tokenizer, config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let embedding = params.add_normal("embedding", (tokenizer.vocab_size(), config.embed_dim), 1.0, rng);
        // add_normal scales by 1/sqrt(rows); embeddings want unit-ish entries.
        params.values_mut()[embedding].mapv_inplace(|x| x * (tokenizer.vocab_size() as f64).sqrt() * 0.5);
        let context = Linear::new(&mut params, "context", 3 * config.embed_dim, config.hidden, rng);
        let projection = Linear::new(&mut params, "projection", config.hidden, config.style_dim, rng);
        Self { config, tokenizer, params, frozen: false, embedding, context, projection }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    pub fn tokenize_all(&self, sentences: &[&str]) -> Result<Vec<Tokens>> {
        sentences.iter().map(|s| self.tokenizer.tokenize(s)).collect()
    }

    /// `B x style_dim` embeddings of a tokenized batch.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[Tokens]) -> Var {
        assert!(batch.iter().all(|t| !t.ids.is_empty()), "every sentence needs a token");
        let layout = BatchLayout::new(batch, self.config.embed_dim);
        let emb = tape.gather_rows(p[self.embedding], layout.ids.clone());
        let pos = tape.constant(layout.positions);
        let x = tape.add(emb, pos);
        let prev = tape.gather_rows(x, layout.prev);
        let cur = tape.gather_rows(x, layout.cur);
        let next = tape.gather_rows(x, layout.next);
        let ctx = tape.concat_cols(&[prev, cur, next]);
        let h = self.context.forward(tape, p, ctx);
        let h = tape.tanh(h);
        let pool = tape.constant(layout.pool);
        let pooled = tape.matmul(pool, h);
        self.projection.forward(tape, p, pooled)
    }

    /// Frozen-mode embedding of raw sentences, one row per sentence.
    pub fn encode(&self, sentences: &[&str]) -> Result<Mat> {
        if !self.frozen {
            return Err(Error::Contract("text backbone queried before it was frozen".into()));
        }
        let tokens = self.tokenize_all(sentences)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &tokens);
        Ok(tape.value(out).clone())
    }

    /// Rebuild a backbone from saved tensors.
    pub fn restore(
        tokenizer: Tokenizer,
        config: BackboneConfig,
        tensors: &BTreeMap<String, TensorRecord>,
        frozen: bool,
    ) -> Result<Self> {
        let mut fresh = Self::new(tokenizer, config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        fresh.params.load_record(tensors).map_err(|e| Error::Invalid(format!("text backbone: {e}")))?;
        fresh.frozen = frozen;
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone() -> TextBackbone {
        let tok = Tokenizer::build(["a man is happy .", "a woman speaks with lips parted ."], 32);
        let cfg = BackboneConfig { embed_dim: 6, hidden: 5, style_dim: 4 };
        TextBackbone::new(tok, cfg, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn encode_requires_frozen_backbone() {
        let mut b = backbone();
        assert!(matches!(b.encode(&["a man is happy."]), Err(Error::Contract(_))));
        b.freeze();
        let e = b.encode(&["a man is happy.", "A woman speaks with lips parted."]).unwrap();
        assert_eq!(e.dim(), (2, 4));
        assert_eq!(e, b.encode(&["a man is happy.", "A woman speaks with lips parted."]).unwrap());
    }

    #[test]
    fn batching_does_not_change_rows() {
        let mut b = backbone();
        b.freeze();
        let both = b.encode(&["a man is happy.", "a woman speaks."]).unwrap();
        let one = b.encode(&["a woman speaks."]).unwrap();
        for (x, y) in both.row(1).iter().zip(one.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = backbone();
        let tokens = b.tokenize_all(&["a man is happy.", "a woman zz speaks."]).unwrap();
        let target = Mat::from_shape_fn((2, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        for c in gradcheck(&b.params, |t, p| {
            let out = b.forward(t, p, &tokens);
            let tg = t.constant(target.clone());
            let d = t.sub(out, tg);
            let sq = t.mul(d, d);
            t.sum_all(sq)
        }) {
            // Embedding rows never used have zero gradient; rel_error is 0 then.
            assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
        }
    }
}
