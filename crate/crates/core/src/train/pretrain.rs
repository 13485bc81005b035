use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{append_metrics, lr_at, EpochRecord, OptimizerState, Phase, Result, TrainConfig, TrainError};
use crate::data::OfferCatalog;
use crate::encoder::{featurize_title, ContrastiveModel};
use crate::loss::{scl_loss, LossConfig};
use crate::numerics::Tape;
use crate::sampler::{epoch_plan, Batch, SamplerConfig, SamplerIndex};
use crate::scalar::Scalar;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ContrastiveModel<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub records: Vec<EpochRecord>,
}

fn bags_of<T: Scalar>(model: &ContrastiveModel<T>, catalog: &OfferCatalog) -> Result<Vec<Vec<u32>>> {
    catalog
        .offers
        .iter()
        .map(|o| Ok(featurize_title(&o.title, &model.encoder)?))
        .collect()
}

fn batch_bags(bags: &[Vec<u32>], batch: &Batch) -> Vec<Vec<u32>> {
    batch.offer_ids.iter().map(|&o| bags[o].clone()).collect()
}

/// Mean contrastive loss over a fixed plan with dropout off.
fn plan_loss<T: Scalar>(
    model: &ContrastiveModel<T>,
    bags: &[Vec<u32>],
    plan: &[Batch],
    temperature: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for batch in plan {
        let mut tape = Tape::new();
        let z = model.forward(&mut tape, batch_bags(bags, batch), false, &mut rng)?;
        total += scl_loss(tape.value(z), &batch.product_ids, temperature)?.loss.as_f64();
    }
    Ok(total / plan.len() as f64)
}

/// Contrastive pre-training of encoder and projection head.
///
/// Each epoch walks a fresh seeded epoch plan over the training catalog.
/// After each epoch the loss on a fixed validation plan is logged; the
/// parameters with the lowest validation loss are returned (and written to
/// `out_dir/pretrain.ckpt` when a directory is given).
pub fn pretrain<T: Scalar>(
    mut model: ContrastiveModel<T>,
    train: &OfferCatalog,
    val: &OfferCatalog,
    config: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome<T>> {
    let tc = &config.train;
    tc.validate()?;
    config.sampler.validate()?;
    let train_index = SamplerIndex::build(train)?;
    let val_index = SamplerIndex::build(val)?;
    let train_bags = bags_of(&model, train)?;
    let val_bags = bags_of(&model, val)?;

    let mut seeds = ChaCha8Rng::seed_from_u64(tc.seed);
    let val_plan = epoch_plan(&val_index, &config.sampler, seeds.gen())?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.gen());
    let plans = (0..tc.epochs)
        .map(|_| epoch_plan(&train_index, &config.sampler, seeds.gen()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let total_steps: usize = plans.iter().map(Vec::len).sum();

    let mut opt = OptimizerState::new(&model.params, tc.optimizer);
    let mut records = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut step = 0;
    let mut lr = 0.0;
    for (e, plan) in plans.iter().enumerate() {
        let epoch = e + 1;
        let mut epoch_loss = 0.0;
        for batch in plan {
            model.params.zero_grad();
            let mut tape = Tape::new();
            let diverged = |m: &ContrastiveModel<T>| !m.params.iter().all(|p| p.value.all_finite());
            let z = match model.forward(&mut tape, batch_bags(&train_bags, batch), true, &mut dropout_rng) {
                Ok(z) => z,
                Err(_) if diverged(&model) => return Err(TrainError::Divergence { phase: Phase::Pretrain, epoch }),
                Err(e) => return Err(e.into()),
            };
            let out = match scl_loss(tape.value(z), &batch.product_ids, config.loss.temperature) {
                Ok(out) => out,
                Err(_) if diverged(&model) => return Err(TrainError::Divergence { phase: Phase::Pretrain, epoch }),
                Err(e) => return Err(e.into()),
            };
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Divergence { phase: Phase::Pretrain, epoch });
            }
            epoch_loss += loss;
            tape.backward(z, out.grad, &mut model.params)?;
            step += 1;
            lr = lr_at(step, total_steps, tc)?;
            opt.step(&mut model.params, lr)?;
        }
        let train_loss = epoch_loss / plan.len() as f64;
        let val_loss = plan_loss(&model, &val_bags, &val_plan, config.loss.temperature)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { phase: Phase::Pretrain, epoch });
        }
        let record = EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            step,
            lr,
            train_loss,
            val_loss,
            val_f1: None,
        };
        if let Some(dir) = out_dir {
            append_metrics(dir, &record)?;
        }
        records.push(record);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
            if let Some(dir) = out_dir {
                best.to_checkpoint().save(&dir.join(PRETRAIN_CHECKPOINT))?;
            }
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        best,
        best_epoch,
        best_val_loss: best_val,
        records,
    })
}
