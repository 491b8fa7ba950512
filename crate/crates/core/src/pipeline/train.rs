use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, predict_region, refresh_region_cache, Metrics, RegionCache};
use crate::autodiff::{adam_step, stack_rows, AdamConfig, AdamState, Tensor};
use crate::data::Split;
use crate::model::{HenceModel, ModelError, Prepared, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Regions per optimizer step.
    pub batch: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Epochs without a better validation R² before stopping.
    pub patience: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Stops once an epoch's mean training loss falls below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 32, epochs: 200, patience: 20, seed: 0, max_steps: None, stop_below: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-4..=5e-2).contains(&self.lr) {
            return Err(ModelError::Config(format!("lr {} outside [1e-4, 5e-2]", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Batch-size weighted mean of the step losses.
    pub train_loss: f64,
    pub val: Metrics,
    pub val_raw: Metrics,
    /// Tag of the cache the validation pass read.
    pub val_cache_epoch: Option<usize>,
}

/// A cache rebuild. `epoch` is the epoch whose steps read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub epoch: usize,
    pub fingerprint: u64,
    /// Optimizer steps taken before the refresh.
    pub after_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub cache_epoch: Option<usize>,
    pub cache_fingerprint: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub refreshes: Vec<RefreshEvent>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_r2: Option<f64>,
}

/// Training outcome: the model holds the best-validation parameters and
/// `cache` was rebuilt under them.
#[derive(Debug, Clone)]
pub struct Trained {
    pub log: TrainLog,
    pub cache: Option<RegionCache>,
}

fn refresh(model: &HenceModel, prep: &Prepared, epoch: usize, step: usize, log: &mut TrainLog) -> Result<Option<RegionCache>> {
    if !model.has_region_level() {
        return Ok(None);
    }
    let cache = refresh_region_cache(model, prep, epoch)?;
    log.refreshes.push(RefreshEvent { epoch, fingerprint: cache.fingerprint(), after_step: step });
    Ok(Some(cache))
}

/// Minibatch Adam on the MSE of normalized labels with early stopping on
/// validation R². The region cache is rebuilt once before the first epoch
/// and after every epoch; steps within an epoch all read the same cache.
pub fn train(model: &HenceModel, prep: &Prepared, split: &Split, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    if split.val.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    for &r in split.train.iter().chain(&split.val) {
        prep.label(r).ok_or(ModelError::Unlabeled(r))?;
    }
    let params = model.params().params();
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut order = split.train.clone();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale = 0;
    let mut step = 0;

    let mut cache = refresh(model, prep, 0, step, &mut log)?;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut steps = 0;
        for batch in order.chunks(config.batch) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            model.params().zero_grad();
            let preds = batch
                .iter()
                .map(|&r| Ok(predict_region(model, prep, r, cache.as_ref())?.value))
                .collect::<Result<Vec<_>>>()?;
            let targets = batch.iter().map(|&r| prep.label(r).expect("labels checked")).collect();
            let loss = stack_rows(&preds)?.mse_loss(&Tensor::from_vec(batch.len(), 1, targets)?)?;
            loss.backward()?;
            adam_step(params, &mut adam)?;
            let value = loss.item();
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: value,
                cache_epoch: cache.as_ref().map(RegionCache::epoch),
                cache_fingerprint: cache.as_ref().map(RegionCache::fingerprint),
            });
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            steps += 1;
            step += 1;
        }
        if steps == 0 {
            break;
        }
        model.params().zero_grad();
        cache = refresh(model, prep, epoch + 1, step, &mut log)?;
        let val = evaluate(model, prep, &split.val, cache.as_ref())?;
        let train_loss = loss_sum / seen as f64;
        log.epochs.push(EpochLog {
            epoch,
            steps,
            train_loss,
            val: val.normalized,
            val_raw: val.raw,
            val_cache_epoch: cache.as_ref().map(RegionCache::epoch),
        });
        debug!("epoch {epoch}: train loss {train_loss:.6}, val r2 {:.4}", val.normalized.r2);

        let r2 = val.normalized.r2;
        if best.as_ref().is_none_or(|(b, _)| r2 > *b || (b.is_nan() && !r2.is_nan())) {
            best = Some((r2, model.params().snapshot()));
            log.best_epoch = Some(epoch);
            log.best_val_r2 = Some(r2);
            stale = 0;
        } else {
            stale += 1;
        }
        if config.stop_below.is_some_and(|t| train_loss < t) || stale >= config.patience {
            break;
        }
    }
    if let Some((_, values)) = best {
        if log.best_epoch != log.epochs.last().map(|e| e.epoch) {
            model.params().restore(&values)?;
            cache = match model.has_region_level() {
                true => Some(refresh_region_cache(model, prep, log.best_epoch.unwrap_or(0) + 1)?),
                false => None,
            };
        }
    }
    info!(
        "trained {} epochs, {} steps; best val r2 {:?} at epoch {:?}",
        log.epochs.len(),
        step,
        log.best_val_r2,
        log.best_epoch
    );
    Ok(Trained { log, cache })
}
