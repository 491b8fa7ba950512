mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hence::data::{generate_synthetic, load_dataset, split_dataset, write_dataset, DataError, Dataset, Split, SynthParams};
use hence::model::{load_checkpoint, save_checkpoint, Ablation, HenceModel, ModelError, Normalization};
use hence::pipeline::{evaluate, inference_cache, predict_all, predict_region, train, Metrics};
use log::info;
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hence", version, about = "Regional on-road carbon emission regression over road and commuting graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the CSV input format.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        regions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Intersections per side of each region's grid.
        #[arg(long, default_value_t = 6)]
        grid_side: usize,
        #[arg(long, default_value_t = 4)]
        communities: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 2.0)]
        gravity_exponent: f64,
        /// Inter-region commuting destinations per region.
        #[arg(long, default_value_t = 3)]
        destinations: usize,
    },
    /// Train a model; writes checkpoint, logs, split and effective config to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print metrics of a trained model on one split as a JSON object.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Write predictions for every region.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the fusion weights of every region and layer.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingFile(_) | DataError::Malformed { .. } | DataError::Invalid(_) | DataError::Split(_) | DataError::Synth(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownAblation(_) | ModelError::EmptyTrainSplit | ModelError::EmptySplit => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))
}

fn gen_synth(out: &Path, params: SynthParams) -> Result<(), CliError> {
    let ds = generate_synthetic(&params)?;
    write_dataset(&ds, out)?;
    info!("wrote {} regions to {}", ds.regions().len(), out.display());
    Ok(())
}

fn run_train(config: RunConfig) -> Result<(), CliError> {
    config.validate().map_err(CliError::Validation)?;
    let ds = load_dataset(&config.data_dir)?;
    let split = split_dataset(&ds, config.split, config.seed)?;
    let norm = Normalization::fit(&ds, &split.train);
    let model = HenceModel::new(config.model(), norm)?;
    let prep = model.prepare(&ds)?;
    info!(
        "training {} ({} parameters) on {}/{}/{} regions",
        config.ablation,
        model.params().scalar_count(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let trained = train(&model, &prep, &split, &config.train())?;
    let test = evaluate(&model, &prep, &split.test, trained.cache.as_ref())?;
    info!("test r2 {:.4}, mae {:.4}, rmse {:.4}", test.normalized.r2, test.normalized.mae, test.normalized.rmse);

    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join("config.txt"), config.to_file_string())?;
    write(&out.join("split.json"), to_json(&split)?)?;
    write(&out.join("train_log.json"), to_json(&trained.log)?)?;
    write(&out.join("metrics.json"), to_json(&json!({ "test": test.normalized, "test_raw": test.raw, "best_epoch": trained.log.best_epoch }))?)?;
    save_checkpoint(&model, &out.join("checkpoint.json"))?;
    info!("wrote run to {}", out.display());
    Ok(())
}

fn load(checkpoint: &Path, data: &Path) -> Result<(HenceModel, Dataset), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    Ok((model, ds))
}

fn run_eval(checkpoint: &Path, data: &Path, which: SplitName) -> Result<(), CliError> {
    let split_path = checkpoint.parent().unwrap_or(Path::new(".")).join("split.json");
    let text = fs::read_to_string(&split_path).map_err(io_err(&split_path))?;
    let split: Split = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", split_path.display())))?;
    let (model, ds) = load(checkpoint, data)?;
    let prep = model.prepare(&ds)?;
    let cache = inference_cache(&model, &prep)?;
    let (name, regions) = match which {
        SplitName::Train => ("train", &split.train),
        SplitName::Val => ("val", &split.val),
        SplitName::Test => ("test", &split.test),
    };
    let ev = evaluate(&model, &prep, regions, cache.as_ref())?;
    let Metrics { r2, mae, rmse } = ev.normalized;
    println!("{}", json!({ "split": name, "regions": regions.len(), "r2": r2, "mae": mae, "rmse": rmse, "raw": ev.raw }));
    Ok(())
}

fn run_predict(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let (model, ds) = load(checkpoint, data)?;
    let prep = model.prepare(&ds)?;
    let cache = inference_cache(&model, &prep)?;
    let preds = predict_all(&model, &prep, &prep.regions, cache.as_ref())?;
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut rows = vec![["region_id".to_string(), "prediction_raw".into(), "prediction_normalized".into()]];
    for (r, z) in prep.regions.iter().zip(preds) {
        rows.push([r.to_string(), format!("{:?}", model.norm.label_from_model(z)), format!("{z:?}")]);
    }
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io_err(out))?;
    info!("wrote {} predictions to {}", prep.regions.len(), out.display());
    Ok(())
}

/// Mean of the `N x 2` fusion weights over their rows.
fn mean_beta(beta: &[f64]) -> [f64; 2] {
    let n = (beta.len() / 2).max(1) as f64;
    let s = beta.chunks(2).fold([0.0, 0.0], |acc, b| [acc[0] + b[0], acc[1] + b[1]]);
    [s[0] / n, s[1] / n]
}

fn run_dump_attention(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let (model, ds) = load(checkpoint, data)?;
    let prep = model.prepare(&ds)?;
    let cache = inference_cache(&model, &prep)?;
    let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:?}"));
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let header = [
        "region_id", "layer", "community_beta_rn", "community_beta_od", "region_beta_rn", "region_beta_od", "beta_intra", "beta_inter",
    ];
    w.write_record(header).map_err(|e| CliError::Runtime(e.to_string()))?;
    for &r in &prep.regions {
        let p = hence::autodiff::no_grad(|| predict_region(&model, &prep, r, cache.as_ref()))?;
        let layers = p.community.len().max(p.region_records.len()).max(1);
        for l in 0..layers {
            let community = p.community.get(l).map(|rec| mean_beta(&rec.beta));
            // target row of the region graph
            let region = p.region_records.get(l).map(|rec| [rec.beta[0], rec.beta[1]]);
            let row = [
                r.to_string(),
                l.to_string(),
                fmt(community.map(|b| b[0])),
                fmt(community.map(|b| b[1])),
                fmt(region.map(|b| b[0])),
                fmt(region.map(|b| b[1])),
                fmt(p.scale_beta.map(|b| b[0])),
                fmt(p.scale_beta.map(|b| b[1])),
            ];
            w.write_record(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(io_err(out))?;
    info!("wrote attention weights of {} regions to {}", prep.regions.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth { out, regions, seed, grid_side, communities, noise_std, gravity_exponent, destinations } => gen_synth(
            &out,
            SynthParams {
                n_regions: regions,
                grid_side,
                communities,
                gravity_exponent,
                inter_region_destinations: destinations,
                noise_std,
                seed,
                ..SynthParams::default()
            },
        ),
        Command::Train { config, ablation, data, out, seed, epochs } => {
            let text = fs::read_to_string(&config).map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
            let mut run = RunConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
            if let Some(a) = ablation {
                run.ablation = a;
            }
            if let Some(d) = data {
                run.data_dir = d;
            }
            if let Some(o) = out {
                run.out_dir = o;
            }
            if let Some(s) = seed {
                run.seed = s;
            }
            if let Some(e) = epochs {
                run.epochs = e;
            }
            run_train(run)
        }
        Command::Eval { checkpoint, data, split } => run_eval(&checkpoint, &data, split),
        Command::Predict { checkpoint, data, out } => run_predict(&checkpoint, &data, &out),
        Command::DumpAttention { checkpoint, data, out } => run_dump_attention(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Validation(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
