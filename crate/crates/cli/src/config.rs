use std::fmt::Write as _;
use std::path::PathBuf;

use hence::graph::Pooling;
use hence::model::{Ablation, ModelConfig};
use hence::pipeline::TrainConfig;

/// Everything a `train` run needs, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub layers: usize,
    pub road_layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub pooling: Pooling,
    pub ablation: Ablation,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            layers: 3,
            road_layers: 3,
            hidden: 64,
            lr: 1e-3,
            batch: 32,
            pooling: Pooling::Mean,
            ablation: Ablation::None,
            seed: 0,
            epochs: 200,
            patience: 20,
            split: [0.7, 0.15, 0.15],
        }
    }
}

const KEYS: [&str; 13] = [
    "data_dir", "out_dir", "layers", "road_layers", "hidden", "lr", "batch", "pooling", "ablation", "seed", "epochs", "patience", "split",
];

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            config.set(key.trim(), value.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "layers" => self.layers = number(key, value)?,
            "road_layers" => self.road_layers = number(key, value)?,
            "hidden" => self.hidden = number(key, value)?,
            "lr" => self.lr = number(key, value)?,
            "batch" => self.batch = number(key, value)?,
            "pooling" => self.pooling = value.parse().map_err(|e| format!("`pooling`: {e}"))?,
            "ablation" => self.ablation = value.parse().map_err(|e| format!("`ablation`: {e}"))?,
            "seed" => self.seed = number(key, value)?,
            "epochs" => self.epochs = number(key, value)?,
            "patience" => self.patience = number(key, value)?,
            "split" => {
                let parts: Vec<f64> = value.split(',').map(|p| number(key, p.trim())).collect::<Result<_, _>>()?;
                self.split = parts.try_into().map_err(|_| "`split`: expected three comma-separated fractions".to_string())?;
            }
            other => return Err(format!("unknown key `{other}` (expected one of {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        for (name, v) in [("layers", self.layers), ("road_layers", self.road_layers)] {
            if !(2..=4).contains(&v) {
                problems.push(format!("{name} = {v} is outside 2..=4"));
            }
        }
        if self.hidden < 2 {
            problems.push(format!("hidden = {} must be at least 2", self.hidden));
        }
        if !(1e-4..=5e-2).contains(&self.lr) {
            problems.push(format!("lr = {} is outside [1e-4, 5e-2]", self.lr));
        }
        if ![8, 16, 32, 64].contains(&self.batch) {
            problems.push(format!("batch = {} is not one of 8, 16, 32, 64", self.batch));
        }
        if self.epochs == 0 || self.patience == 0 {
            problems.push("epochs and patience must be positive".into());
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            problems.push(format!("split {:?} must be positive and sum to 1", self.split));
        }
        if problems.is_empty() { Ok(()) } else { Err(problems.join("; ")) }
    }

    /// The file form; parsing it yields an equal config.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let [a, b, c] = self.split;
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "road_layers = {}", self.road_layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "pooling = {}", self.pooling);
        let _ = writeln!(s, "ablation = {}", self.ablation);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "split = {a:?},{b:?},{c:?}");
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            road_layers: self.road_layers,
            pooling: self.pooling,
            ablation: self.ablation,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig { lr: self.lr, batch: self.batch, epochs: self.epochs, patience: self.patience, seed: self.seed, ..TrainConfig::default() }
    }
}
