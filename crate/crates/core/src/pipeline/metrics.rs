use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict_region, RegionCache};
use crate::autodiff::no_grad;
use crate::graph::RegionId;
use crate::model::{HenceModel, ModelError, Prepared, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// R², MAE and RMSE of `pred` against `truth`. R² is NaN when the targets
/// are constant.
pub fn metrics(truth: &[f64], pred: &[f64]) -> Metrics {
    assert_eq!(truth.len(), pred.len(), "metric inputs differ in length");
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let mae = truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        warn!("constant targets over {} regions: R² is undefined", truth.len());
        f64::NAN
    };
    Metrics { r2, mae, rmse: (ss_res / n).sqrt() }
}

/// Metrics in normalized label space and in raw emission units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub normalized: Metrics,
    pub raw: Metrics,
    pub regions: Vec<RegionId>,
    /// Normalized predictions, aligned with `regions`.
    pub predictions: Vec<f64>,
}

/// Normalized predictions for `regions`, computed in parallel without a graph.
pub fn predict_all(model: &HenceModel, prep: &Prepared, regions: &[RegionId], cache: Option<&RegionCache>) -> Result<Vec<f64>> {
    regions
        .par_iter()
        .map(|&r| no_grad(|| Ok(predict_region(model, prep, r, cache)?.value.item())))
        .collect()
}

pub fn evaluate(model: &HenceModel, prep: &Prepared, regions: &[RegionId], cache: Option<&RegionCache>) -> Result<Evaluation> {
    if regions.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    let truth = regions.iter().map(|&r| prep.label(r).ok_or(ModelError::Unlabeled(r))).collect::<Result<Vec<_>>>()?;
    let predictions = predict_all(model, prep, regions, cache)?;
    let raw = |v: &[f64]| v.iter().map(|&z| model.norm.label_from_model(z)).collect::<Vec<_>>();
    Ok(Evaluation {
        normalized: metrics(&truth, &predictions),
        raw: metrics(&raw(&truth), &raw(&predictions)),
        regions: regions.to_vec(),
        predictions,
    })
}
