//! Contrastively trained image/text dual encoder used as the semantic
//! retriever.
//!
//! Both towers are two-layer SiLU perceptrons (`in → d_e → d_e`) followed by
//! L2 normalization. Image inputs are raw feature vectors; text inputs are
//! L2-normalized bag-of-token vectors over a hashed vocabulary. Training uses
//! symmetric InfoNCE with a learnable, log-parameterized temperature.
//!
//! `RSDE` layout (little-endian):
//!
//! ```text
//! "RSDE" | version: u16 | d_img_raw: u32 | d_e: u32 | vocab: u32
//! f32 blocks, row-major, in this order:
//!   image.fc1.weight (d_img_raw×d_e), image.fc1.bias (d_e),
//!   image.fc2.weight (d_e×d_e),       image.fc2.bias (d_e),
//!   text.fc1.weight  (vocab×d_e),     text.fc1.bias  (d_e),
//!   text.fc2.weight  (d_e×d_e),       text.fc2.bias  (d_e),
//!   log_temperature (1)
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::numerics::{Matrix, Rng};
use crate::optim::Sgd;
use crate::params::{Group, ParamId, ParamSet};
use crate::semantic_store::ByteCursor;
use crate::tokenizer::{bag_of_tokens, hash_words};

pub const RSDE_MAGIC: &[u8; 4] = b"RSDE";
pub const RSDE_VERSION: u16 = 1;
pub const INITIAL_TEMPERATURE: f64 = 0.07;
/// Lower bound applied to the temperature after every update.
pub const MIN_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualEncoderDims {
    pub d_img_raw: usize,
    pub d_e: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub image_features: Vec<f64>,
    pub text_tokens: Vec<usize>,
}

impl ContrastivePair {
    /// Tokenizes `text` with the hashed whitespace tokenizer.
    pub fn from_text(image_features: Vec<f64>, text: &str, vocab: usize) -> Self {
        Self {
            image_features,
            text_tokens: hash_words(text, vocab),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    dims: DualEncoderDims,
    store: ParamSet,
    image: Mlp,
    text: Mlp,
    log_temperature: ParamId,
}

impl PartialEq for DualEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.store == other.store
    }
}

impl DualEncoder {
    pub fn new(dims: DualEncoderDims, seed: u64) -> Result<Self> {
        if dims.d_img_raw == 0 || dims.d_e == 0 || dims.vocab == 0 {
            return Err(Error::InvalidInput(format!("dual encoder dims must be positive: {dims:?}")));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamSet::new();
        let g = Group::Retriever;
        let image = Mlp::init(&mut store, "image", (dims.d_img_raw, dims.d_e, dims.d_e), g, &mut rng);
        let text = Mlp::init(&mut store, "text", (dims.vocab, dims.d_e, dims.d_e), g, &mut rng);
        let log_temperature =
            store.add("log_temperature", g, Matrix::scalar(INITIAL_TEMPERATURE.ln()));
        Ok(Self {
            dims,
            store,
            image,
            text,
            log_temperature,
        })
    }

    pub fn dims(&self) -> DualEncoderDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.store
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_temperature).data()[0].exp()
    }

    fn image_batch(&self, rows: &[&[f64]]) -> Result<Matrix> {
        for r in rows {
            if r.len() != self.dims.d_img_raw {
                return Err(Error::shape("encode_image", (1, self.dims.d_img_raw), (1, r.len())));
            }
        }
        Matrix::from_rows(rows)
    }

    fn text_batch(&self, token_lists: &[&[usize]]) -> Result<Matrix> {
        let bags = token_lists
            .iter()
            .map(|t| {
                bag_of_tokens(t, self.dims.vocab).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "token list must be nonempty with ids < {}",
                        self.dims.vocab
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&bags)
    }

    /// Unit-norm embeddings for a batch of image feature rows.
    pub fn encode_images_graph(&self, g: &mut Graph, batch: Matrix) -> Result<Var> {
        let x = g.constant(batch);
        let h = self.image.forward(g, x)?;
        g.l2_normalize_rows(h)
    }

    pub fn encode_texts_graph(&self, g: &mut Graph, bags: Matrix) -> Result<Var> {
        let x = g.constant(bags);
        let h = self.text.forward(g, x)?;
        g.l2_normalize_rows(h)
    }

    pub fn encode_image(&self, image_features: &[f64]) -> Result<Vec<f64>> {
        let batch = self.image_batch(&[image_features])?;
        let mut g = Graph::new(&self.store);
        let out = self.encode_images_graph(&mut g, batch)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn encode_text(&self, text_tokens: &[usize]) -> Result<Vec<f64>> {
        let bags = self.text_batch(&[text_tokens])?;
        let mut g = Graph::new(&self.store);
        let out = self.encode_texts_graph(&mut g, bags)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Symmetric InfoNCE over the B×B cosine matrix scaled by 1/temperature,
    /// as a `1×1` node.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[ContrastivePair]) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "contrastive batch needs at least 2 pairs, got {}",
                batch.len()
            )));
        }
        let mut seen = HashSet::new();
        for p in batch {
            let mut bag = p.text_tokens.clone();
            bag.sort_unstable();
            if !seen.insert(bag) {
                return Err(Error::InvalidInput("duplicate text in contrastive batch".into()));
            }
        }
        let images: Vec<&[f64]> = batch.iter().map(|p| p.image_features.as_slice()).collect();
        let texts: Vec<&[usize]> = batch.iter().map(|p| p.text_tokens.as_slice()).collect();
        let img = self.encode_images_graph(g, self.image_batch(&images)?)?;
        let txt = self.encode_texts_graph(g, self.text_batch(&texts)?)?;
        let txt_t = g.transpose(txt);
        let sims = g.matmul(img, txt_t)?;
        let log_t = g.param(self.log_temperature);
        let neg = g.scale(log_t, -1.0);
        let inv_t = g.exp(neg);
        let logits = g.scale_by(sims, inv_t)?;
        let diag: Vec<usize> = (0..batch.len()).collect();
        let i2t = g.cross_entropy(logits, &diag)?;
        let logits_t = g.transpose(logits);
        let t2i = g.cross_entropy(logits_t, &diag)?;
        let both = g.add(i2t, t2i)?;
        Ok(g.scale(both, 0.5))
    }

    pub fn contrastive_loss(&self, batch: &[ContrastivePair]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let loss = self.loss_graph(&mut g, batch)?;
        Ok(g.value(loss).data()[0])
    }

    /// Loss and per-parameter gradients.
    pub fn loss_and_gradients(&self, batch: &[ContrastivePair]) -> Result<(f64, Vec<Option<Matrix>>)> {
        let mut g = Graph::new(&self.store);
        let loss = self.loss_graph(&mut g, batch)?;
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)?.into_param_grads()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RSDE_MAGIC);
        out.extend_from_slice(&RSDE_VERSION.to_le_bytes());
        for d in [self.dims.d_img_raw, self.dims.d_e, self.dims.vocab] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for e in self.store.entries() {
            for &v in e.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4, "magic")? != RSDE_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"RSDE\""));
        }
        let version = cur.u16("version")?;
        if version != RSDE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dims = DualEncoderDims {
            d_img_raw: cur.u32("d_img_raw")? as usize,
            d_e: cur.u32("d_e")? as usize,
            vocab: cur.u32("vocab")? as usize,
        };
        let mut enc = Self::new(dims, 0).map_err(|e| Error::format(6, e.to_string()))?;
        let expected = enc.store.scalar_count() * 4;
        if cur.remaining() != expected {
            return Err(Error::format(
                cur.offset(),
                format!("expected {expected} parameter bytes, found {}", cur.remaining()),
            ));
        }
        for id in enc.store.ids().collect::<Vec<_>>() {
            for v in enc.store.get_mut(id).data_mut() {
                *v = cur.f32("parameter")? as f64;
            }
        }
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub dims: DualEncoderDims,
    pub epochs: usize,
    pub lr: f64,
    /// Heavy-ball momentum; `None` for plain gradient descent.
    pub momentum: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
}

/// Gradient descent on the contrastive loss over shuffled minibatches.
pub fn train_retriever(
    pairs: &[ContrastivePair],
    cfg: &RetrieverTrainConfig,
) -> Result<(DualEncoder, TrainingLog)> {
    if pairs.len() < 8 {
        return Err(Error::InvalidInput(format!(
            "retriever training needs at least 8 pairs, got {}",
            pairs.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidInput("batch size must be at least 2".into()));
    }
    let mut seen = HashSet::new();
    for p in pairs {
        let mut bag = p.text_tokens.clone();
        bag.sort_unstable();
        if !seen.insert(bag) {
            return Err(Error::InvalidInput("training pairs contain duplicate texts".into()));
        }
    }
    let mut rng = Rng::new(cfg.seed);
    let mut enc = DualEncoder::new(cfg.dims, rng.next_u64())?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<ContrastivePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grads) = enc.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite contrastive loss at epoch {epoch} (temperature {})",
                    enc.temperature()
                )));
            }
            opt.step(&mut enc.store, &grads);
            let lt = enc.store.get_mut(enc.log_temperature);
            lt.data_mut()[0] = lt.data()[0].max(MIN_TEMPERATURE.ln());
            total += loss;
            batches += 1;
        }
        log.epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok((enc, log))
}

/// Fraction of pairs whose own text is the top-1 match for their image.
pub fn recall_at_1(enc: &DualEncoder, pairs: &[ContrastivePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let images = pairs
        .iter()
        .map(|p| enc.encode_image(&p.image_features))
        .collect::<Result<Vec<_>>>()?;
    let texts = pairs
        .iter()
        .map(|p| enc.encode_text(&p.text_tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for (i, img) in images.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, txt) in texts.iter().enumerate() {
            let s: f64 = img.iter().zip(txt).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{relative_error, RELATIVE_ERROR_FLOOR};

    fn dims() -> DualEncoderDims {
        DualEncoderDims {
            d_img_raw: 6,
            d_e: 5,
            vocab: 11,
        }
    }

    fn pairs(n: usize, seed: u64) -> Vec<ContrastivePair> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| ContrastivePair {
                image_features: (0..6).map(|_| rng.normal()).collect(),
                text_tokens: vec![i % 11, (i * 3 + 1) % 11, (i / 11) % 11 + (i % 2)],
            })
            .collect()
    }

    #[test]
    fn encodings_are_unit_and_deterministic() {
        let enc = DualEncoder::new(dims(), 1).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.0, 0.5];
        let a = enc.encode_image(&x).unwrap();
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(a, enc.encode_image(&x).unwrap());
        let t = enc.encode_text(&[1, 4, 4, 7]).unwrap();
        assert!((t.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(t, enc.encode_text(&[4, 7, 1, 4]).unwrap());
        assert!(enc.encode_image(&[1.0]).is_err());
        assert!(enc.encode_text(&[]).is_err());
        assert!(enc.encode_text(&[11]).is_err());
    }

    #[test]
    fn loss_preconditions() {
        let enc = DualEncoder::new(dims(), 2).unwrap();
        let p = pairs(3, 3);
        assert!(enc.contrastive_loss(&p[..1]).is_err());
        let dup = vec![p[0].clone(), p[0].clone()];
        assert!(enc.contrastive_loss(&dup).is_err());
        assert!(enc.contrastive_loss(&p).unwrap() >= 0.0);
    }

    #[test]
    fn loss_matches_row_wise_oracle() {
        let enc = DualEncoder::new(dims(), 4).unwrap();
        let batch = pairs(4, 5);
        let img: Vec<Vec<f64>> = batch.iter().map(|p| enc.encode_image(&p.image_features).unwrap()).collect();
        let txt: Vec<Vec<f64>> = batch.iter().map(|p| enc.encode_text(&p.text_tokens).unwrap()).collect();
        let t = enc.temperature();
        let sim = |i: usize, j: usize| img[i].iter().zip(&txt[j]).map(|(a, b)| a * b).sum::<f64>() / t;
        let ce = |row: &[f64], target: usize| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[target]
        };
        let mut total = 0.0;
        for i in 0..4 {
            let row: Vec<f64> = (0..4).map(|j| sim(i, j)).collect();
            let col: Vec<f64> = (0..4).map(|j| sim(j, i)).collect();
            total += ce(&row, i) + ce(&col, i);
        }
        let want = total / 8.0;
        let got = enc.contrastive_loss(&batch).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let enc = DualEncoder::new(dims(), 6).unwrap();
        let batch = pairs(3, 7);
        let (_, grads) = enc.loss_and_gradients(&batch).unwrap();
        let mut probe = enc.clone();
        let mut worst: f64 = 0.0;
        for id in enc.params().ids() {
            let g = grads[id.index()].as_ref().unwrap();
            for i in 0..g.len() {
                let orig = probe.store.get(id).data()[i];
                let eps = 1e-5;
                probe.store.get_mut(id).data_mut()[i] = orig + eps;
                let plus = probe.contrastive_loss(&batch).unwrap();
                probe.store.get_mut(id).data_mut()[i] = orig - eps;
                let minus = probe.contrastive_loss(&batch).unwrap();
                probe.store.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                worst = worst.max(relative_error(g.data()[i], numeric));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst} (floor {RELATIVE_ERROR_FLOOR})");
    }

    #[test]
    fn encoder_gradient_of_cosine_to_target() {
        // d cos(encode_image(x), t) / d params via the graph vs finite differences
        let enc = DualEncoder::new(dims(), 8).unwrap();
        let x = Matrix::row_vector(&[0.2, -0.4, 1.1, 0.7, -0.3, 0.9]);
        let target = Matrix::new(5, 1, vec![0.6, 0.0, -0.8, 0.0, 0.0]).unwrap();
        let objective = |e: &DualEncoder| -> (f64, Vec<Option<Matrix>>) {
            let mut g = Graph::new(&e.store);
            let emb = e.encode_images_graph(&mut g, x.clone()).unwrap();
            let t = g.constant(target.clone());
            let c = g.matmul(emb, t).unwrap();
            let v = g.value(c).data()[0];
            (v, g.backward(c).unwrap().into_param_grads())
        };
        let (_, grads) = objective(&enc);
        let mut probe = enc.clone();
        for id in [enc.image.fc1.weight, enc.image.fc2.weight, enc.image.fc2.bias.unwrap()] {
            for i in 0..probe.store.get(id).len() {
                let orig = probe.store.get(id).data()[i];
                probe.store.get_mut(id).data_mut()[i] = orig + 1e-6;
                let plus = objective(&probe).0;
                probe.store.get_mut(id).data_mut()[i] = orig - 1e-6;
                let minus = objective(&probe).0;
                probe.store.get_mut(id).data_mut()[i] = orig;
                let a = grads[id.index()].as_ref().unwrap().data()[i];
                assert!(relative_error(a, (plus - minus) / 2e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn equal_similarities_give_ln_b() {
        // identical images and orthogonal-free setup: all image rows equal and
        // all text rows equal would violate uniqueness, so zero the towers'
        // output weights instead and use the bias to force equal embeddings.
        let mut enc = DualEncoder::new(dims(), 9).unwrap();
        for mlp in [enc.image.clone(), enc.text.clone()] {
            enc.store.get_mut(mlp.fc2.weight).data_mut().fill(0.0);
            enc.store.get_mut(mlp.fc2.bias.unwrap()).data_mut().fill(1.0);
        }
        for b in [2usize, 5] {
            let loss = enc.contrastive_loss(&pairs(b, 10)).unwrap();
            assert!((loss - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_batch_at_low_temperature_has_near_zero_loss() {
        // image i and text i both map to basis vector e_i
        let d = DualEncoderDims { d_img_raw: 3, d_e: 3, vocab: 3 };
        let mut enc = DualEncoder::new(d, 0).unwrap();
        for mlp in [enc.image.clone(), enc.text.clone()] {
            *enc.store.get_mut(mlp.fc1.weight) = Matrix::identity(3).scale(10.0);
            *enc.store.get_mut(mlp.fc2.weight) = Matrix::identity(3);
        }
        *enc.store.get_mut(enc.log_temperature) = Matrix::scalar(0.001f64.ln());
        let batch: Vec<ContrastivePair> = (0..3)
            .map(|i| {
                let mut f = vec![0.0; 3];
                f[i] = 1.0;
                ContrastivePair { image_features: f, text_tokens: vec![i] }
            })
            .collect();
        assert!(enc.contrastive_loss(&batch).unwrap() < 1e-6);
    }

    #[test]
    fn training_preconditions_and_zero_lr() {
        let cfg = RetrieverTrainConfig {
            dims: dims(),
            epochs: 5,
            lr: 0.0,
            momentum: None,
            batch_size: 8,
            seed: 1,
        };
        assert!(train_retriever(&pairs(4, 1), &cfg).is_err());
        let data = pairs(8, 2);
        let (enc, log) = train_retriever(&data, &cfg).unwrap();
        let mut fresh_seed = Rng::new(cfg.seed);
        let fresh = DualEncoder::new(cfg.dims, fresh_seed.next_u64()).unwrap();
        assert_eq!(enc, fresh);
        assert!(log.epoch_losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rsde_round_trip() {
        let mut enc = DualEncoder::new(dims(), 12).unwrap();
        enc.store.round_to_f32();
        let bytes = enc.to_bytes();
        assert_eq!(&bytes[..4], b"RSDE");
        let back = DualEncoder::from_bytes(&bytes).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.to_bytes(), bytes);
        assert!(DualEncoder::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
