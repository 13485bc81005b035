//! Title encoder and contrastive projection head.
//!
//! The backbone maps a title to a sentence embedding `v` by averaging
//! learned rows of a hashed feature table. The projection head maps `v` to a
//! unit vector `z` through linear, gelu, dropout, layer norm and a second
//! linear layer.

mod checkpoint;
mod text;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, ParamId, ParamStore, Parameter, Tape, Tensor};
use crate::scalar::Scalar;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointError, NamedBlob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use text::{feature_strings, featurize, featurize_title, fnv1a64, tokenize};

pub const EMBEDDING: &str = "backbone.embedding";
pub const LINEAR1_WEIGHT: &str = "projection.linear1.weight";
pub const LINEAR1_BIAS: &str = "projection.linear1.bias";
pub const NORM_GAIN: &str = "projection.norm.gain";
pub const NORM_BIAS: &str = "projection.norm.bias";
pub const LINEAR2_WEIGHT: &str = "projection.linear2.weight";
pub const LINEAR2_BIAS: &str = "projection.linear2.bias";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("title `{0}` has no alphanumeric token")]
    EmptyTitle(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hash space size; a power of two.
    pub feature_vocab_size: usize,
    pub embed_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub use_word_features: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_vocab_size: 1 << 15,
            embed_dim: 64,
            ngram_min: 3,
            ngram_max: 5,
            use_word_features: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !self.feature_vocab_size.is_power_of_two() || self.feature_vocab_size > 1 << 31 {
            return Err(EncoderError::Config(format!(
                "feature_vocab_size {} is not a power of two below 2^32",
                self.feature_vocab_size
            )));
        }
        if !(3 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 6) {
            return Err(EncoderError::Config(format!(
                "n-gram range {}..={} must satisfy 3 <= min <= max <= 6",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.embed_dim < 8 {
            return Err(EncoderError::Config(format!("embed_dim {} < 8", self.embed_dim)));
        }
        Ok(())
    }

    fn to_header(self, out: &mut BTreeMap<String, String>) {
        out.insert("encoder.feature_vocab_size".into(), self.feature_vocab_size.to_string());
        out.insert("encoder.embed_dim".into(), self.embed_dim.to_string());
        out.insert("encoder.ngram_min".into(), self.ngram_min.to_string());
        out.insert("encoder.ngram_max".into(), self.ngram_max.to_string());
        out.insert("encoder.use_word_features".into(), self.use_word_features.to_string());
        out.insert("encoder.seed".into(), self.seed.to_string());
    }

    fn from_header(h: &BTreeMap<String, String>) -> Result<Self, EncoderError> {
        fn get<V: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<V, EncoderError> {
            h.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| EncoderError::Config(format!("checkpoint header lacks a valid `{key}`")))
        }
        let cfg = Self {
            feature_vocab_size: get(h, "encoder.feature_vocab_size")?,
            embed_dim: get(h, "encoder.embed_dim")?,
            ngram_min: get(h, "encoder.ngram_min")?,
            ngram_max: get(h, "encoder.ngram_max")?,
            use_word_features: get(h, "encoder.use_word_features")?,
            seed: get(h, "encoder.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub dropout_p: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            out_dim: 64,
            dropout_p: 0.1,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.out_dim == 0 || self.out_dim > self.hidden_dim || self.hidden_dim < 2 {
            return Err(EncoderError::Config(format!(
                "projection dims hidden={} out={} must satisfy 0 < out <= hidden, hidden >= 2",
                self.hidden_dim, self.out_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EncoderError::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Deterministic per-parameter stream: the run seed mixed with the name hash.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name))
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

fn constant<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, vec![T::of(value); n]).expect("sized from shape")
}

/// Maps a title to its sentence embedding.
///
/// This is the seam where a different backbone could be plugged in without
/// touching the sampler, the loss or the matcher.
pub trait SentenceEncoder<T> {
    fn dim(&self) -> usize;
    fn embed(&self, title: &str) -> Result<Vec<T>, EncoderError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    gain: ParamId,
    beta: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Backbone plus projection head sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveModel<T> {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub params: ParamStore<T>,
    table: ParamId,
    head: HeadIds,
}

impl<T: Scalar> ContrastiveModel<T> {
    pub fn new(encoder: EncoderConfig, projection: ProjectionConfig) -> Result<Self, EncoderError> {
        encoder.validate()?;
        projection.validate()?;
        let seed = encoder.seed;
        let (v, d, h, o) = (
            encoder.feature_vocab_size,
            encoder.embed_dim,
            projection.hidden_dim,
            projection.out_dim,
        );
        let mut params = ParamStore::new();
        let mut add = |name: &str, value: Tensor<T>| params.add(Parameter::new(name, value));
        let table = add(
            EMBEDDING,
            uniform(&[v, d], 1.0 / (d as f64).sqrt(), &mut param_rng(seed, EMBEDDING)),
        );
        let w1 = add(
            LINEAR1_WEIGHT,
            uniform(&[d, h], 1.0 / (d as f64).sqrt(), &mut param_rng(seed, LINEAR1_WEIGHT)),
        );
        let b1 = add(LINEAR1_BIAS, constant(&[h], 0.0));
        let gain = add(NORM_GAIN, constant(&[h], 1.0));
        let beta = add(NORM_BIAS, constant(&[h], 0.0));
        let w2 = add(
            LINEAR2_WEIGHT,
            uniform(&[h, o], 1.0 / (h as f64).sqrt(), &mut param_rng(seed, LINEAR2_WEIGHT)),
        );
        let b2 = add(LINEAR2_BIAS, constant(&[o], 0.0));
        Ok(Self {
            encoder,
            projection,
            params,
            table,
            head: HeadIds { w1, b1, gain, beta, w2, b2 },
        })
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    /// Ids of the projection-head parameters.
    pub fn head_ids(&self) -> [ParamId; 6] {
        let h = self.head;
        [h.w1, h.b1, h.gain, h.beta, h.w2, h.b2]
    }

    /// Records `v = f(x)` for a batch of feature bags.
    pub fn encode(&self, tape: &mut Tape<T>, bags: Vec<Vec<u32>>) -> Result<NodeId, EncoderError> {
        Ok(tape.embed_mean(self.table, bags, &self.params)?)
    }

    /// Records `z = normalize(linear2(layer_norm(dropout(gelu(linear1(v))))))`.
    pub fn project(
        &self,
        tape: &mut Tape<T>,
        v: NodeId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, EncoderError> {
        let h = self.head;
        let a = tape.affine(v, h.w1, h.b1, &self.params)?;
        let a = tape.gelu(a);
        let a = tape.dropout(a, self.projection.dropout_p, training, rng)?;
        let a = tape.layer_norm(a, h.gain, h.beta, &self.params)?;
        let w = tape.affine(a, h.w2, h.b2, &self.params)?;
        Ok(tape.l2_normalize(w)?)
    }

    /// Full forward pass; returns the node of the unit embeddings `z`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bags: Vec<Vec<u32>>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, EncoderError> {
        let v = self.encode(tape, bags)?;
        self.project(tape, v, training, rng)
    }

    pub fn backbone(&self) -> Backbone<T> {
        let mut params = ParamStore::new();
        let table = params.add(self.params.get(self.table).clone());
        Backbone {
            config: self.encoder,
            params,
            table,
        }
    }

    fn header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        self.encoder.to_header(&mut h);
        h.insert("projection.hidden_dim".into(), self.projection.hidden_dim.to_string());
        h.insert("projection.out_dim".into(), self.projection.out_dim.to_string());
        h.insert("projection.dropout_p".into(), format!("{:?}", self.projection.dropout_p));
        h.insert("kind".into(), "contrastive".into());
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.header(), &self.params, |_| true)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        let encoder = EncoderConfig::from_header(&ckpt.header)?;
        let get = |k: &str| {
            ckpt.header
                .get(k)
                .ok_or_else(|| EncoderError::Config(format!("checkpoint header lacks `{k}`")))
        };
        let parse_err = |k: &str| EncoderError::Config(format!("bad `{k}` in checkpoint header"));
        let projection = ProjectionConfig {
            hidden_dim: get("projection.hidden_dim")?.parse().map_err(|_| parse_err("projection.hidden_dim"))?,
            out_dim: get("projection.out_dim")?.parse().map_err(|_| parse_err("projection.out_dim"))?,
            dropout_p: get("projection.dropout_p")?.parse().map_err(|_| parse_err("projection.dropout_p"))?,
        };
        let mut model = Self::new(encoder, projection)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Frozen sentence encoder: the hashed feature table alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    table: ParamId,
}

impl<T: Scalar> Backbone<T> {
    pub fn table(&self) -> &Tensor<T> {
        self.params.value(self.table)
    }

    /// Mean of table rows over a feature bag.
    pub fn embed_bag(&self, bag: &[u32]) -> Result<Vec<T>, EncoderError> {
        let mut tape = Tape::new();
        let v = tape.embed_mean(self.table, vec![bag.to_vec()], &self.params)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut h = BTreeMap::new();
        self.config.to_header(&mut h);
        h.insert("kind".into(), "backbone".into());
        Checkpoint::from_store(h, &self.params, |_| true)
    }

    /// Accepts either a backbone or a full contrastive checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        let config = EncoderConfig::from_header(&ckpt.header)?;
        let mut params = ParamStore::new();
        let table = params.add(Parameter::new(
            EMBEDDING,
            Tensor::zeros(&[config.feature_vocab_size, config.embed_dim]),
        ));
        ckpt.load_into(&mut params)?;
        Ok(Self { config, params, table })
    }
}

impl<T: Scalar> SentenceEncoder<T> for Backbone<T> {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, title: &str) -> Result<Vec<T>, EncoderError> {
        self.embed_bag(&featurize_title(title, &self.config)?)
    }
}
