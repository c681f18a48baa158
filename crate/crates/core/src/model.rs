//! The two-stream model: a trainable conv/recurrent stream with the full
//! editor, and a frozen-encoder stream with a small gated head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::{rng_for, AttributeSchema, Vocab};
use crate::emd::{self, ClipEditorParams, EditorParams};
use crate::encoders::{FrozenEncoders, TrainableEncoders};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Trainable,
    Frozen,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Trainable => "trainable",
            Stream::Frozen => "frozen",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainable" => Ok(Stream::Trainable),
            "frozen" => Ok(Stream::Frozen),
            _ => Err(Error::Config(format!("unknown stream `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared width C = D.
    pub dim: usize,
    pub gem_p: f64,
    /// Replace the editor and weighted combiner with a plain sum of pooled features.
    pub no_emd: bool,
    pub single_stream: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            gem_p: 3.0,
            no_emd: false,
            single_stream: false,
            seed: 0,
        }
    }
}

/// Tape handles of one query through the trainable stream.
#[derive(Clone, Copy, Debug)]
pub struct QueryForward {
    pub f_comb: Var,
    /// Present unless the editor is disabled.
    pub alpha: Option<Var>,
    pub spatial: Option<Var>,
    pub word: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DwcModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub encoders: TrainableEncoders,
    pub editor: Option<EditorParams>,
    pub frozen: Option<FrozenEncoders>,
    pub clip_editor: Option<ClipEditorParams>,
}

impl DwcModel {
    pub fn new(schema: &AttributeSchema, config: ModelConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(config.gem_p > 0.0 && config.gem_p.is_finite()) {
            return Err(Error::Config(format!("gem_p must be positive, got {}", config.gem_p)));
        }
        let vocab = Vocab::new(schema);
        let mut store = ParamStore::new();
        let mut rng = rng_for(config.seed, 4);
        let d = config.dim;
        let encoders = TrainableEncoders::new(&mut store, vocab.len(), d, d, &mut rng)?;
        let editor = (!config.no_emd).then(|| EditorParams::new(&mut store, d, &mut rng));
        let (frozen, clip_editor) = if config.single_stream {
            (None, None)
        } else {
            let frozen_seed: u64 = rng_for(config.seed, 5).random();
            let frozen = FrozenEncoders::new(&mut store, schema, &vocab, d, frozen_seed);
            let head = (!config.no_emd).then(|| ClipEditorParams::new(&mut store, d, &mut rng));
            (Some(frozen), head)
        };
        Ok(Self {
            config,
            store,
            vocab,
            encoders,
            editor,
            frozen,
            clip_editor,
        })
    }

    pub fn has_frozen_stream(&self) -> bool {
        self.frozen.is_some()
    }

    /// Parameters updated when `stream` is active.
    pub fn stream_params(&self, stream: Stream) -> Vec<ParamId> {
        match stream {
            Stream::Trainable => {
                let mut ids = self.encoders.params();
                if let Some(e) = &self.editor {
                    ids.extend(e.params());
                }
                ids
            }
            Stream::Frozen => self.clip_editor.map(|c| c.params()).unwrap_or_default(),
        }
    }

    /// Puts every parameter on `tape`, tracking gradients only for `active`.
    pub fn bind(&self, tape: &mut Tape, active: Option<Stream>) -> Bindings {
        let ids = active.map(|s| self.stream_params(s)).unwrap_or_default();
        self.store.bind(tape, |id| ids.contains(&id))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        self.vocab.encode(tokens)
    }

    /// GeM-pooled trainable embedding of a target image, `[C]`.
    pub fn target(&self, tape: &mut Tape, b: &Bindings, img: &Tensor) -> Result<Var> {
        let x = tape.constant(img.clone());
        let f = self.encoders.encode_image(tape, b, x)?;
        let c = tape.shape(f)[0];
        let hw = tape.shape(f)[1] * tape.shape(f)[2];
        let flat = tape.reshape(f, &[c, hw])?;
        tape.gem(flat, self.config.gem_p)
    }

    /// Combined query feature of the trainable stream.
    pub fn query(&self, tape: &mut Tape, b: &Bindings, img: &Tensor, tokens: &[usize]) -> Result<QueryForward> {
        let x = tape.constant(img.clone());
        let f_ref = self.encoders.encode_image(tape, b, x)?;
        let f_txt = self.encoders.encode_text(tape, b, tokens)?;
        match &self.editor {
            Some(params) => {
                let out = emd::forward(tape, f_ref, f_txt, b, params, self.config.gem_p)?;
                Ok(QueryForward {
                    f_comb: out.f_comb,
                    alpha: Some(out.alpha),
                    spatial: Some(out.spatial),
                    word: Some(out.word),
                })
            }
            None => {
                let (img, txt) = emd::pool_pair(tape, f_ref, f_txt, self.config.gem_p)?;
                Ok(QueryForward {
                    f_comb: tape.add(img, txt)?,
                    alpha: None,
                    spatial: None,
                    word: None,
                })
            }
        }
    }

    fn frozen_encoders(&self) -> Result<&FrozenEncoders> {
        self.frozen
            .as_ref()
            .ok_or_else(|| Error::Contract("single-stream model has no frozen stream".into()))
    }

    pub fn frozen_image(&self, img: &Tensor) -> Result<Vec<f64>> {
        self.frozen_encoders()?.encode_image(&self.store, img)
    }

    pub fn frozen_text<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        self.frozen_encoders()?.encode_text(&self.store, tokens)
    }

    /// Combined query feature of the frozen stream from its two embeddings.
    pub fn frozen_query(&self, tape: &mut Tape, b: &Bindings, f_ref: &[f64], f_txt: &[f64]) -> Result<Var> {
        self.frozen_encoders()?;
        let r = tape.constant(Tensor::vector(f_ref.to_vec()));
        let t = tape.constant(Tensor::vector(f_txt.to_vec()));
        match &self.clip_editor {
            Some(params) => emd::clip_edit_combine(tape, r, t, b, params),
            None => tape.add(r, t),
        }
    }
}
