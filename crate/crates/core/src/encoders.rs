//! Feature encoders for the two streams.
//!
//! The trainable stream uses two strided 3x3 convolutions (3 -> 16 -> C) on
//! the 16x16 render and a single-layer tanh recurrence over token
//! embeddings. The frozen stream stands in for a pretrained joint embedding:
//! a fixed random projection of centered pixels for images, and a bag of
//! token embeddings for text. A value token's embedding is the projection of
//! that value's mean render, so words and pictures share one space; template
//! words get small random vectors. The bag ignores word order and roles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::render::{self, RenderConfig, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::data::{generate_catalog, AttributeSchema, Vocab, MAX_TEXT_LEN};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CONV1_CHANNELS: usize = 16;
/// Spatial extent of the trainable encoder's output map (16 -> 8 -> 4).
pub const FEATURE_SIZE: usize = 4;

#[derive(Clone, Debug)]
pub struct TrainableEncoders {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub embed: ParamId,
    pub rnn_wx: ParamId,
    pub rnn_wh: ParamId,
    pub rnn_b: ParamId,
    vocab_len: usize,
}

impl TrainableEncoders {
    /// `channels` (image map width C) and `text_dim` (D) must agree: the
    /// editors take dot products between image positions and words.
    pub fn new(
        store: &mut ParamStore,
        vocab_len: usize,
        channels: usize,
        text_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels != text_dim {
            return Err(Error::Config(format!(
                "image channels ({channels}) must equal text width ({text_dim})"
            )));
        }
        let (c, d) = (channels, text_dim);
        Ok(Self {
            conv1_w: store.add_uniform(
                "enc.conv1.weight",
                &[CONV1_CHANNELS, IMAGE_CHANNELS, 3, 3],
                IMAGE_CHANNELS * 9,
                rng,
            ),
            conv1_b: store.add_uniform("enc.conv1.bias", &[CONV1_CHANNELS], IMAGE_CHANNELS * 9, rng),
            conv2_w: store.add_uniform("enc.conv2.weight", &[c, CONV1_CHANNELS, 3, 3], CONV1_CHANNELS * 9, rng),
            conv2_b: store.add_uniform("enc.conv2.bias", &[c], CONV1_CHANNELS * 9, rng),
            // A lookup is a linear map of a one-hot input: fan-in 1.
            embed: store.add_uniform("enc.embed", &[vocab_len, d], 1, rng),
            rnn_wx: store.add_uniform("enc.rnn.wx", &[d, d], d, rng),
            rnn_wh: store.add_uniform("enc.rnn.wh", &[d, d], d, rng),
            rnn_b: store.add_uniform("enc.rnn.bias", &[d], d, rng),
            vocab_len,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.embed,
            self.rnn_wx,
            self.rnn_wh,
            self.rnn_b,
        ]
    }

    /// `[3, 16, 16]` image -> `[C, 4, 4]` feature map.
    pub fn encode_image(&self, tape: &mut Tape, p: &Bindings, img: Var) -> Result<Var> {
        if tape.shape(img) != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return shape_err(format!("expected a 3x16x16 image, got {:?}", tape.shape(img)));
        }
        let h = tape.conv3x3_s2(img, p.var(self.conv1_w), p.var(self.conv1_b))?;
        let h = tape.tanh(h);
        let h = tape.conv3x3_s2(h, p.var(self.conv2_w), p.var(self.conv2_b))?;
        Ok(tape.tanh(h))
    }

    /// Token ids -> `[D, L]` per-step hidden states of
    /// `h_t = tanh(Wx e_t + Wh h_{t-1} + b)`, `h_0 = 0`.
    pub fn encode_text(&self, tape: &mut Tape, p: &Bindings, tokens: &[usize]) -> Result<Var> {
        let len = tokens.len();
        if !(1..=MAX_TEXT_LEN).contains(&len) {
            return Err(Error::Param(format!(
                "text length must be 1..={MAX_TEXT_LEN}, got {len}"
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_len) {
            return Err(Error::Vocab(format!("#{bad}")));
        }
        let d = tape.shape(p.var(self.rnn_b))[0];
        let e = tape.gather_rows(p.var(self.embed), tokens)?;
        let et = tape.transpose(e)?;
        let x = tape.matmul(p.var(self.rnn_wx), et)?;
        let bias = tape.reshape(p.var(self.rnn_b), &[d, 1])?;
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let xt = tape.narrow(x, 1, t, 1)?;
            let mut pre = tape.add(xt, bias)?;
            if let Some(&prev) = states.last() {
                let rec = tape.matmul(p.var(self.rnn_wh), prev)?;
                pre = tape.add(pre, rec)?;
            }
            states.push(tape.tanh(pre));
        }
        tape.concat(&states, 1)
    }
}

/// Fixed encoders of the pretrained-like stream. Never trained.
#[derive(Clone, Debug)]
pub struct FrozenEncoders {
    pub projection: ParamId,
    pub pixel_mean: ParamId,
    pub token_table: ParamId,
    vocab: Vocab,
}

const PIXELS: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

impl FrozenEncoders {
    pub fn new(store: &mut ParamStore, schema: &AttributeSchema, vocab: &Vocab, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (PIXELS as f64).sqrt();
        let projection: Vec<f64> = (0..dim * PIXELS).map(|_| scale * normal(&mut rng)).collect();

        let clean = RenderConfig {
            pixel_sigma: 0.0,
            seed: 0,
        };
        let catalog = generate_catalog(schema, 0);
        let renders: Vec<Tensor> = catalog.iter().map(|it| render::render(schema, it, clean)).collect();
        let mean = mean_of(renders.iter().map(Tensor::data), PIXELS);

        let mut table = vec![0.0; vocab.len() * dim];
        for id in 0..vocab.len() {
            let row = &mut table[id * dim..(id + 1) * dim];
            match schema.lookup(vocab.token(id)) {
                Some((a, v)) => {
                    let proto = mean_of(
                        catalog
                            .iter()
                            .filter(|it| it.values[a] == v)
                            .map(|it| renders[it.id].data()),
                        PIXELS,
                    );
                    let centered: Vec<f64> = proto.iter().zip(&mean).map(|(p, m)| p - m).collect();
                    row.copy_from_slice(&project(&projection, &centered, dim));
                }
                None => {
                    for r in row.iter_mut() {
                        *r = 0.1 * normal(&mut rng) / (dim as f64).sqrt();
                    }
                }
            }
        }
        Self {
            projection: store.add(
                "frozen.projection",
                Tensor::new(&[dim, PIXELS], projection).expect("shape"),
            ),
            pixel_mean: store.add("frozen.pixel_mean", Tensor::vector(mean)),
            token_table: store.add(
                "frozen.token_table",
                Tensor::new(&[vocab.len(), dim], table).expect("shape"),
            ),
            vocab: vocab.clone(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.projection, self.pixel_mean, self.token_table]
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.projection).shape()[0]
    }

    /// Unit-norm embedding of a `[3, 16, 16]` image.
    pub fn encode_image(&self, store: &ParamStore, img: &Tensor) -> Result<Vec<f64>> {
        if img.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return shape_err(format!("expected a 3x16x16 image, got {:?}", img.shape()));
        }
        let mean = store.get(self.pixel_mean).data();
        let centered: Vec<f64> = img.data().iter().zip(mean).map(|(x, m)| x - m).collect();
        let dim = self.dim(store);
        Ok(l2_normalized(project(
            store.get(self.projection).data(),
            &centered,
            dim,
        )))
    }

    /// Unit-norm bag of token embeddings.
    pub fn encode_text<S: AsRef<str>>(&self, store: &ParamStore, tokens: &[S]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Param("empty text".into()));
        }
        let table = store.get(self.token_table);
        let dim = table.shape()[1];
        let mut sum = vec![0.0; dim];
        for tok in tokens {
            let id = self.vocab.id(tok.as_ref())?;
            for (acc, v) in sum.iter_mut().zip(table.row(id)) {
                *acc += v;
            }
        }
        Ok(l2_normalized(sum))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

fn project(matrix: &[f64], x: &[f64], dim: usize) -> Vec<f64> {
    let n = x.len();
    (0..dim)
        .map(|r| matrix[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
