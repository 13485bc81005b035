use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{append_metrics, lr_at, EpochRecord, OptimizerState, Phase, Result, TrainConfig, TrainError};
use crate::data::OfferCatalog;
use crate::encoder::Backbone;
use crate::loss::bce_logit_loss;
use crate::matching::{embed_offers, evaluate_embedded, Classifier};
use crate::scalar::Scalar;

pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub batch_size: usize,
    /// Decision threshold on the match probability.
    pub threshold: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 50,
                peak_lr: 5e-5,
                patience: 10,
                ..TrainConfig::default()
            },
            batch_size: 64,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    /// Classifier of the epoch with the highest validation F1.
    pub best: Classifier<T>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub records: Vec<EpochRecord>,
}

fn check_classes(catalog: &OfferCatalog, split: &'static str) -> Result<()> {
    let pos = catalog.pairs.iter().filter(|p| p.label).count();
    if pos == 0 || pos == catalog.pairs.len() {
        return Err(TrainError::SingleClass(split));
    }
    Ok(())
}

/// Trains a linear pair classifier on frozen backbone embeddings.
///
/// The backbone is only read: every offer is embedded once up front, so no
/// gradient can reach it. Pairs are visited in a seeded order, reshuffled
/// each epoch, in consecutive batches of `batch_size`. Training stops after
/// `patience` epochs without a lower validation loss; the classifier of the
/// epoch with the best validation F1 is returned.
pub fn finetune<T: Scalar>(
    backbone: &Backbone<T>,
    train: &OfferCatalog,
    val: &OfferCatalog,
    config: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome<T>> {
    let tc = &config.train;
    tc.validate()?;
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    check_classes(train, "training")?;
    check_classes(val, "validation")?;
    let d = backbone.config.embed_dim;
    let train_emb = embed_offers(backbone, train)?;
    let val_emb = embed_offers(backbone, val)?;

    let mut clf = Classifier::<T>::new(d, tc.seed);
    let features: Vec<Vec<T>> = train
        .pairs
        .iter()
        .map(|p| clf.symmetric_features(&train_emb[p.left], &train_emb[p.right]))
        .collect::<std::result::Result<_, _>>()?;

    let n = train.pairs.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * tc.epochs;
    let mut opt = OptimizerState::new(&clf.params, tc.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let (w_id, b_id) = (clf.weight_id(), clf.bias_id());

    let mut records = Vec::new();
    let mut best = clf.clone();
    let mut best_epoch = 0;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_val_loss = f64::INFINITY;
    let mut since_improved = 0;
    let mut step = 0;
    let mut lr = 0.0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            clf.params.zero_grad();
            let scale = T::one() / T::of(chunk.len() as f64);
            let mut grad_w = vec![T::zero(); 4 * d];
            let mut grad_b = T::zero();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let p = &train.pairs[i];
                let logit = clf.logit(&train_emb[p.left], &train_emb[p.right])?;
                let (loss, g) = bce_logit_loss(logit, p.label);
                batch_loss += loss.as_f64();
                for (acc, &f) in grad_w.iter_mut().zip(&features[i]) {
                    *acc += g * f;
                }
                grad_b += g;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { phase: Phase::Finetune, epoch });
            }
            epoch_loss += batch_loss / chunk.len() as f64;
            for (dst, g) in clf.params.get_mut(w_id).grad.data_mut().iter_mut().zip(grad_w) {
                *dst = g * scale;
            }
            clf.params.get_mut(b_id).grad.data_mut()[0] = grad_b * scale;
            step += 1;
            lr = lr_at(step, total_steps, tc)?;
            opt.step(&mut clf.params, lr)?;
        }

        let mut val_loss = 0.0;
        for p in &val.pairs {
            let logit = clf.logit(&val_emb[p.left], &val_emb[p.right])?;
            val_loss += bce_logit_loss(logit, p.label).0.as_f64();
        }
        val_loss /= val.pairs.len() as f64;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { phase: Phase::Finetune, epoch });
        }
        let val_f1 = evaluate_embedded(&val_emb, val, &clf, config.threshold)?.metrics.f1;
        let record = EpochRecord {
            phase: Phase::Finetune,
            epoch,
            step,
            lr,
            train_loss: epoch_loss / batches_per_epoch as f64,
            val_loss,
            val_f1: Some(val_f1),
        };
        if let Some(dir) = out_dir {
            append_metrics(dir, &record)?;
        }
        records.push(record);
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best = clf.clone();
            if let Some(dir) = out_dir {
                best.to_checkpoint(BTreeMap::new()).save(&dir.join(CLASSIFIER_CHECKPOINT))?;
            }
        }
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= tc.patience {
                break;
            }
        }
    }
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        best_val_f1: best_f1,
        records,
    })
}
