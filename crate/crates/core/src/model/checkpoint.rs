use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HenceModel, ModelConfig, ModelError, Normalization, Result};

pub const CHECKPOINT_FORMAT: &str = "hence-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    norm: Normalization,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: (usize, usize),
    values: Vec<f64>,
}

pub fn save_checkpoint(model: &HenceModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        norm: model.norm.clone(),
        params: model
            .params()
            .params()
            .iter()
            .map(|p| StoredParam { name: p.name.clone(), shape: p.tensor.shape(), values: p.tensor.to_vec() })
            .collect(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Rebuilds the model from its configuration and overwrites every parameter.
/// The stored names and shapes must match the rebuilt layout exactly.
pub fn load_checkpoint(path: &Path) -> Result<HenceModel> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("format `{}`, expected `{CHECKPOINT_FORMAT}`", ckpt.format)));
    }
    let model = HenceModel::new(ckpt.config, ckpt.norm)?;
    let params = model.params().params();
    if params.len() != ckpt.params.len() {
        return Err(ModelError::Checkpoint(format!("{} parameters stored, model has {}", ckpt.params.len(), params.len())));
    }
    let mut values = Vec::with_capacity(params.len());
    for (p, s) in params.iter().zip(ckpt.params) {
        if p.name != s.name || p.tensor.shape() != s.shape || s.values.len() != s.shape.0 * s.shape.1 {
            return Err(ModelError::Checkpoint(format!("parameter `{}` {:?} does not match `{}` {:?}", s.name, s.shape, p.name, p.tensor.shape())));
        }
        values.push(s.values);
    }
    model.params().restore(&values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::fixture;
    use crate::model::Ablation;

    #[test]
    fn round_trip_is_bit_exact() {
        let (ds, model, prep) = fixture(Ablation::None, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params().snapshot(), model.params().snapshot());
        let r = ds.regions()[1];
        assert_eq!(back.intra(&prep, r).unwrap().rep.to_vec(), model.intra(&prep, r).unwrap().rep.to_vec());
    }

    #[test]
    fn rejects_foreign_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let (_, model, _) = fixture(Ablation::NoOdLink, 4);
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace(CHECKPOINT_FORMAT, "other");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    }
}
