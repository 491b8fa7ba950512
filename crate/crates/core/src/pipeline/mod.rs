//! Forward pass over the region hierarchy, the epoch-lagged region cache,
//! training and evaluation.

mod metrics;
mod train;

use std::hash::{DefaultHasher, Hash, Hasher};

use rayon::prelude::*;

use crate::autodiff::{no_grad, stack_rows, Tensor};
use crate::egat::HeteroRecord;
use crate::graph::RegionId;
use crate::model::{HenceModel, IntraOutput, ModelError, Prepared, Result};

pub use metrics::{evaluate, metrics, predict_all, Evaluation, Metrics};
pub use train::{train, EpochLog, RefreshEvent, StepRecord, TrainConfig, TrainLog, Trained};

/// Gradient-free intra-region representations of every region, in
/// `Prepared::regions` order, computed under the parameters of one epoch.
#[derive(Debug, Clone)]
pub struct RegionCache {
    epoch: usize,
    matrix: Tensor,
}

impl RegionCache {
    pub(crate) fn from_matrix(epoch: usize, matrix: Tensor) -> Self {
        Self { epoch, matrix: matrix.detach() }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn entry(&self, prep: &Prepared, region: RegionId) -> Result<Vec<f64>> {
        let i = prep.position(region)?;
        if i >= self.len() {
            return Err(ModelError::NotCached(region));
        }
        Ok(self.matrix.row(i))
    }

    /// Hash of the exact bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.matrix.shape().hash(&mut h);
        for x in self.matrix.data().iter() {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

pub fn intra_region_representation(model: &HenceModel, prep: &Prepared, region: RegionId) -> Result<IntraOutput> {
    model.intra(prep, region)
}

fn cache_row(model: &HenceModel, prep: &Prepared, region: RegionId) -> Result<Vec<f64>> {
    no_grad(|| Ok(model.intra(prep, region)?.rep.to_vec()))
}

fn assemble(prep: &Prepared, epoch: usize, rows: Vec<Vec<f64>>) -> Result<RegionCache> {
    let d = rows.first().map_or(0, Vec::len);
    let flat = rows.concat();
    Ok(RegionCache::from_matrix(epoch, Tensor::from_vec(prep.regions.len(), d, flat)?))
}

/// Recomputes every region's intra representation under the current
/// parameters, fanning regions out over the thread pool.
pub fn refresh_region_cache(model: &HenceModel, prep: &Prepared, epoch: usize) -> Result<RegionCache> {
    let rows = prep.regions.par_iter().map(|&r| cache_row(model, prep, r)).collect::<Result<Vec<_>>>()?;
    assemble(prep, epoch, rows)
}

pub fn refresh_region_cache_serial(model: &HenceModel, prep: &Prepared, epoch: usize) -> Result<RegionCache> {
    let rows = prep.regions.iter().map(|&r| cache_row(model, prep, r)).collect::<Result<Vec<_>>>()?;
    assemble(prep, epoch, rows)
}

/// Target row of the region-level stack. Neighbours are read from `cache`;
/// the target's own row is the live `intra`, so gradients reach the target's
/// intra path and the region-level parameters but never a cached neighbour.
pub fn inter_region_representation(
    model: &HenceModel,
    prep: &Prepared,
    region: RegionId,
    intra: &Tensor,
    cache: &RegionCache,
) -> Result<(Tensor, Vec<HeteroRecord>)> {
    let local = prep.local(region)?;
    if cache.len() != prep.regions.len() {
        return Err(ModelError::NotCached(region));
    }
    let nodes = if local.members.len() > 1 {
        stack_rows(&[intra.clone(), cache.matrix.gather_rows(&local.members[1..])?])?
    } else {
        intra.clone()
    };
    model.region_stack(local, nodes)
}

/// One region's forward pass with the attention it used.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub region: RegionId,
    /// `1 x 1`, normalized label space.
    pub value: Tensor,
    pub community: Vec<HeteroRecord>,
    /// Records of the region-level stack, target rows included.
    pub region_records: Vec<HeteroRecord>,
    /// Fusion weights of the intra and inter representations.
    pub scale_beta: Option<[f64; 2]>,
}

pub fn predict_region(model: &HenceModel, prep: &Prepared, region: RegionId, cache: Option<&RegionCache>) -> Result<Prediction> {
    let intra = model.intra(prep, region)?;
    if !model.has_region_level() {
        return Ok(Prediction {
            region,
            value: model.head(&intra.rep)?,
            community: intra.records,
            region_records: Vec::new(),
            scale_beta: None,
        });
    }
    let cache = cache.ok_or(ModelError::NotCached(region))?;
    let (inter, records) = inter_region_representation(model, prep, region, &intra.rep, cache)?;
    let (v, beta) = model.fuse(&intra.rep, &inter)?;
    Ok(Prediction { region, value: model.head(&v)?, community: intra.records, region_records: records, scale_beta: Some(beta) })
}

/// The cache a model needs for inference: `None` without a region level.
pub fn inference_cache(model: &HenceModel, prep: &Prepared) -> Result<Option<RegionCache>> {
    model.has_region_level().then(|| refresh_region_cache(model, prep, 0)).transpose()
}

#[cfg(test)]
mod tests;
