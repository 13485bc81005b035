//! Pair classifier over frozen sentence embeddings, and F1 scoring.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::OfferCatalog;
use crate::encoder::{featurize_title, param_rng, Backbone, Checkpoint, CheckpointError, EncoderError, SentenceEncoder};
use crate::loss::sigmoid;
use crate::numerics::{ParamId, ParamStore, Parameter, Tensor};
use crate::scalar::Scalar;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("{predictions} predictions but {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("cannot score an empty set")]
    Empty,
    #[error("pair references unknown offer {0}")]
    UnknownOffer(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `[v_i, v_j, |v_i - v_j|, v_i * v_j]`, length `4d`.
pub fn pair_features<T: Scalar>(vi: &[T], vj: &[T]) -> Result<Vec<T>, MatchError> {
    if vi.len() != vj.len() {
        return Err(MatchError::Dim(format!("{} vs {}", vi.len(), vj.len())));
    }
    let mut f = Vec::with_capacity(4 * vi.len());
    f.extend_from_slice(vi);
    f.extend_from_slice(vj);
    f.extend(vi.iter().zip(vj).map(|(&a, &b)| (a - b).abs()));
    f.extend(vi.iter().zip(vj).map(|(&a, &b)| a * b));
    Ok(f)
}

/// Single-logit linear layer over pair features.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub params: ParamStore<T>,
    weight: ParamId,
    bias: ParamId,
    dim: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Uniform fan-in init for the weight, zero bias.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = param_rng(seed, CLASSIFIER_WEIGHT);
        let bound = 1.0 / ((4 * dim) as f64).sqrt();
        let w = (0..4 * dim).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self::from_parts(w, T::zero())
    }

    pub fn from_parts(weight: Vec<T>, bias: T) -> Self {
        assert!(weight.len().is_multiple_of(4) && !weight.is_empty(), "weight length must be 4d");
        let dim = weight.len() / 4;
        let mut params = ParamStore::new();
        let weight = params.add(Parameter::new(
            CLASSIFIER_WEIGHT,
            Tensor::from_vec(&[4 * dim], weight).expect("sized"),
        ));
        let bias = params.add(Parameter::new(CLASSIFIER_BIAS, Tensor::from_vec(&[1], vec![bias]).expect("sized")));
        Self { params, weight, bias, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[T] {
        self.params.value(self.weight).data()
    }

    pub fn bias(&self) -> T {
        self.params.value(self.bias).data()[0]
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Order-averaged input: `(f(a, b) + f(b, a)) / 2`. The logit is linear
    /// in it, so this is also the gradient of the logit wrt the weight.
    pub fn symmetric_features(&self, vi: &[T], vj: &[T]) -> Result<Vec<T>, MatchError> {
        if vi.len() != self.dim || vj.len() != self.dim {
            return Err(MatchError::Dim(format!(
                "classifier expects {}, got {} and {}",
                self.dim,
                vi.len(),
                vj.len()
            )));
        }
        let half = T::of(0.5);
        let ab = pair_features(vi, vj)?;
        let ba = pair_features(vj, vi)?;
        Ok(ab.iter().zip(&ba).map(|(&x, &y)| half * (x + y)).collect())
    }

    /// `0.5 * (w . f(a, b) + w . f(b, a)) + bias`.
    pub fn logit(&self, vi: &[T], vj: &[T]) -> Result<T, MatchError> {
        if vi.len() != self.dim || vj.len() != self.dim {
            return Err(MatchError::Dim(format!(
                "classifier expects {}, got {} and {}",
                self.dim,
                vi.len(),
                vj.len()
            )));
        }
        let w = self.weight();
        let d = self.dim;
        let dot = |a: &[T], b: &[T]| -> T {
            let mut s = T::zero();
            for t in 0..d {
                s += w[t] * a[t] + w[d + t] * b[t];
            }
            s
        };
        let mut sym = T::zero();
        for t in 0..d {
            let (a, b) = (vi[t], vj[t]);
            sym += w[2 * d + t] * (a - b).abs() + w[3 * d + t] * (a * b);
        }
        // summing the two order-dependent parts in a fixed order keeps the
        // result exactly symmetric
        let (x, y) = (dot(vi, vj), dot(vj, vi));
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        Ok(T::of(0.5) * (lo + hi) + sym + self.bias())
    }

    pub fn predict(&self, vi: &[T], vj: &[T]) -> Result<T, MatchError> {
        Ok(sigmoid(self.logit(vi, vj)?))
    }

    pub fn to_checkpoint(&self, mut header: BTreeMap<String, String>) -> Checkpoint {
        header.insert("kind".into(), "classifier".into());
        header.insert("classifier.dim".into(), self.dim.to_string());
        Checkpoint::from_store(header, &self.params, |_| true)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, MatchError> {
        let dim: usize = ckpt
            .header
            .get("classifier.dim")
            .and_then(|v| v.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| MatchError::Dim("checkpoint lacks classifier.dim".into()))?;
        let mut c = Self::from_parts(vec![T::zero(); 4 * dim], T::zero());
        ckpt.load_into(&mut c.params)?;
        Ok(c)
    }
}

/// Confusion counts on the match class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Result<Self, MatchError> {
        if predictions.len() != labels.len() {
            return Err(MatchError::Length {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        Ok(c)
    }

    /// No positive predictions and no positive labels.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp + self.r#fn == 0
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.is_degenerate() { 1.0 } else { 0.0 }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.r#fn == 0 {
            if self.is_degenerate() { 1.0 } else { 0.0 }
        } else {
            self.tp as f64 / (self.tp + self.r#fn) as f64
        }
    }

    /// `2 TP / (2 TP + FP + FN)`; 1.0 in the degenerate case.
    pub fn f1(&self) -> f64 {
        if self.is_degenerate() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.r#fn) as f64
    }
}

pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64, MatchError> {
    if predictions.is_empty() {
        return Err(MatchError::Empty);
    }
    Ok(Confusion::from_predictions(predictions, labels)?.f1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    /// Set when F1 was defined by convention (nothing to find, nothing found).
    pub degenerate: bool,
    pub threshold: f64,
    pub pairs: usize,
}

impl MatchMetrics {
    pub fn from_confusion(confusion: Confusion, threshold: f64) -> Self {
        Self {
            f1: confusion.f1(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            degenerate: confusion.is_degenerate(),
            confusion,
            threshold,
            pairs: confusion.tp + confusion.fp + confusion.tn + confusion.r#fn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub left_offer_id: usize,
    pub right_offer_id: usize,
    pub label: bool,
    pub probability: f64,
    pub prediction: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MatchMetrics,
    pub predictions: Vec<PredictionRecord>,
}

/// Sentence embeddings of every offer, in offer-id order.
pub fn embed_offers<T: Scalar>(backbone: &Backbone<T>, catalog: &OfferCatalog) -> Result<Vec<Vec<T>>, MatchError> {
    catalog
        .offers
        .iter()
        .map(|o| Ok(backbone.embed_bag(&featurize_title(&o.title, &backbone.config)?)?))
        .collect()
}

/// Scores precomputed embeddings over the catalog's pairs.
pub fn evaluate_embedded<T: Scalar>(
    embeddings: &[Vec<T>],
    catalog: &OfferCatalog,
    classifier: &Classifier<T>,
    threshold: f64,
) -> Result<Evaluation, MatchError> {
    let mut predictions = Vec::with_capacity(catalog.pairs.len());
    let mut confusion = Confusion::default();
    for p in &catalog.pairs {
        let vi = embeddings.get(p.left).ok_or(MatchError::UnknownOffer(p.left))?;
        let vj = embeddings.get(p.right).ok_or(MatchError::UnknownOffer(p.right))?;
        let probability = classifier.predict(vi, vj)?.as_f64();
        let prediction = probability >= threshold;
        match (prediction, p.label) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
            (false, true) => confusion.r#fn += 1,
        }
        predictions.push(PredictionRecord {
            left_offer_id: p.left,
            right_offer_id: p.right,
            label: p.label,
            probability,
            prediction,
        });
    }
    Ok(Evaluation {
        metrics: MatchMetrics::from_confusion(confusion, threshold),
        predictions,
    })
}

/// Embeds each offer once (cached by offer id) and scores every pair.
pub fn evaluate<T: Scalar>(
    catalog: &OfferCatalog,
    backbone: &Backbone<T>,
    classifier: &Classifier<T>,
    threshold: f64,
) -> Result<Evaluation, MatchError> {
    if backbone.config.embed_dim != classifier.dim() {
        return Err(MatchError::Dim(format!(
            "backbone d = {}, classifier d = {}",
            backbone.config.embed_dim,
            classifier.dim()
        )));
    }
    let mut cache: HashMap<usize, Vec<T>> = HashMap::new();
    for p in &catalog.pairs {
        for id in [p.left, p.right] {
            if cache.contains_key(&id) {
                continue;
            }
            let offer = catalog.offers.get(id).ok_or(MatchError::UnknownOffer(id))?;
            cache.insert(id, backbone.embed(&offer.title)?);
        }
    }
    let dense: Vec<Vec<T>> = (0..catalog.offers.len())
        .map(|i| cache.remove(&i).unwrap_or_default())
        .collect();
    evaluate_embedded(&dense, catalog, classifier, threshold)
}

/// Line-delimited prediction dump.
pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<(), MatchError> {
    let io = |source| MatchError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in predictions {
        writeln!(w, "{}", serde_json::to_string(p).expect("plain record")).map_err(io)?;
    }
    w.flush().map_err(io)
}
