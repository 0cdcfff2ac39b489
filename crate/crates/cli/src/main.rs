//! `suseg` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use suseg::aggregator::stack_predictions;
use suseg::checkpoint::{load_aggregator, load_isnet, save_aggregator, save_isnet};
use suseg::config::{ExperimentConfig, Profile};
use suseg::isnet::IsNetModel;
use suseg::metrics::ExperimentReport;
use suseg::patching::{to_original_grid, ScaleSetting};
use suseg::phantom::{generate_phantom, phantom_id, read_manifest, write_phantom_set};
use suseg::pipeline::{
    arm_dir, cross_validate, evaluate_run, isnet_file, predict_case, run_ensemble, train_aggregator, CvOptions,
    AGGREGATION_DIR,
};
use suseg::preprocess::WRANGE;
use suseg::train::{derive_seed, train_isnet, Case};
use suseg::{read_volume_as, write_volume, Error, ErrorClass, Volume, VolumeKind};

mod overlay;

#[derive(Parser)]
#[command(name = "suseg", version, about = "Multi-scale infection segmentation of CT volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override such as `isnet_train.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory that receives all artifacts.
    #[arg(long, env = "SUSEG_RUN_DIR", global = true, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured phantom set and its manifest.
    GenPhantom {
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network on every case of a data directory.
    TrainIsnet {
        #[arg(long)]
        data: PathBuf,
        /// Scale as `v,p`.
        #[arg(long, value_parser = parse_scale)]
        scale: ScaleSetting,
    },
    /// Predict cases with one network; writes volumes and slice overlays.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the aggregator on the predictions of the run directory's networks.
    TrainAggregator {
        #[arg(long)]
        data: PathBuf,
    },
    /// Aggregate the networks of the run directory over a data directory.
    Aggregate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score the saved predictions against a data directory's masks.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Full k-fold experiment. Without `--data` the phantom set is generated in memory.
    CrossValidate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the table stored in the run directory's metrics.json.
    Report,
}

fn parse_scale(s: &str) -> Result<ScaleSetting, String> {
    let (v, p) = s.split_once(',').ok_or("expected v,p")?;
    let v = v.trim().parse().map_err(|e| format!("v: {e}"))?;
    let p = p.trim().parse().map_err(|e| format!("p: {e}"))?;
    ScaleSetting::new(v, p).map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> suseg::Result<ExperimentConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(c.profile, c.config.as_deref(), &overrides)
}

fn load_cases(dir: &Path) -> suseg::Result<Vec<Case>> {
    read_manifest(dir)?
        .iter()
        .map(|(id, ct, gt)| Case::load(id, ct, gt))
        .collect()
}

fn mkdir(path: &Path) -> suseg::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> suseg::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Every network checkpoint of the run directory matching the configured scales.
fn load_models(run_dir: &Path, cfg: &ExperimentConfig) -> suseg::Result<Vec<IsNetModel>> {
    cfg.canonical_scales()
        .into_iter()
        .map(|sc| load_isnet(&run_dir.join(isnet_file(sc)), None))
        .collect()
}

fn save_prediction(run_dir: &Path, arm: &str, id: &str, vol: &Volume) -> suseg::Result<PathBuf> {
    let dir = run_dir.join("predictions").join(arm);
    mkdir(&dir)?;
    let path = dir.join(format!("{id}.nii.gz"));
    write_volume(vol, &path)?;
    Ok(path)
}

fn run(cli: Cli) -> suseg::Result<()> {
    let cfg = load_config(&cli.common)?;
    let run_dir = cli.common.run_dir.clone();
    match cli.command {
        Command::GenPhantom { out } => {
            let dir = out.unwrap_or(run_dir);
            let entries = write_phantom_set(&cfg.phantoms, &dir)?;
            info!("wrote {} phantoms to {}", entries.len(), dir.display());
        }
        Command::TrainIsnet { data, scale } => {
            let cases = load_cases(&data)?;
            mkdir(&run_dir)?;
            let (model, log) = train_isnet(&cases, scale, &cfg, cfg.seed)?;
            save_isnet(&model, &run_dir.join(isnet_file(scale)))?;
            let curve = serde_json::to_string_pretty(&log.epoch_losses).expect("serializable");
            write_text(&run_dir.join(format!("{}_loss.json", arm_dir(scale))), &curve)?;
        }
        Command::Predict { model, data } => {
            let model = load_isnet(&model, None)?;
            let arm = arm_dir(model.scale);
            for (id, ct_path, _) in read_manifest(&data)? {
                let ct = read_volume_as(&ct_path, VolumeKind::Ct).map_err(|e| e.in_case(&id))?;
                let pred = predict_case(&model, &ct, &id, cfg.predict_stride(model.scale))?;
                let vol = to_original_grid(&pred.data, &pred.mapping)?;
                let path = save_prediction(&run_dir, &arm, &id, &vol)?;
                let ov_dir = run_dir.join("overlays").join(&arm);
                mkdir(&ov_dir)?;
                overlay::write_overlays(&ct, &vol, cfg.threshold, WRANGE, &ov_dir, &id)?;
                info!("{id}: {}", path.display());
            }
        }
        Command::TrainAggregator { data } => {
            let cases = load_cases(&data)?;
            let models = load_models(&run_dir, &cfg)?;
            let (model, log) = train_aggregator(&cases, &models, &cfg, derive_seed(cfg.seed, &[1000]))?;
            save_aggregator(&model, &run_dir.join("aggregator.ckpt"))?;
            let curve = serde_json::to_string_pretty(&log.epoch_losses).expect("serializable");
            write_text(&run_dir.join("aggregator_loss.json"), &curve)?;
        }
        Command::Aggregate { data } => {
            let models = load_models(&run_dir, &cfg)?;
            let scales = cfg.canonical_scales();
            let agg = load_aggregator(&run_dir.join("aggregator.ckpt"), Some(&scales))?;
            for (id, ct_path, _) in read_manifest(&data)? {
                let ct = read_volume_as(&ct_path, VolumeKind::Ct).map_err(|e| e.in_case(&id))?;
                let preds = run_ensemble(&models, &ct, &id, &cfg, Some(&scales))?;
                let vol = agg.aggregate(&stack_predictions(&preds)?)?;
                let path = save_prediction(&run_dir, AGGREGATION_DIR, &id, &vol)?;
                info!("{id}: {}", path.display());
            }
        }
        Command::Evaluate { data } => {
            let cases: Vec<(String, PathBuf)> = read_manifest(&data)?.into_iter().map(|(id, _, gt)| (id, gt)).collect();
            let report = evaluate_run(&run_dir, &cases, cfg.threshold)?;
            let json = serde_json::to_string_pretty(&report).expect("serializable");
            write_text(&run_dir.join("metrics.json"), &json)?;
            print!("{}", report.render_table());
        }
        Command::CrossValidate { data } => {
            let cases = match data {
                Some(d) => load_cases(&d)?,
                None => (0..cfg.phantoms.count)
                    .map(|i| {
                        let ph = generate_phantom(&cfg.phantoms.spec(i))?;
                        Ok(Case {
                            id: phantom_id(i),
                            ct: ph.ct,
                            gt: ph.gt,
                        })
                    })
                    .collect::<suseg::Result<Vec<_>>>()?,
            };
            let opts = CvOptions {
                run_dir: Some(run_dir),
                ..CvOptions::default()
            };
            let result = cross_validate(&cases, &cfg, &opts)?;
            print!("{}", result.report.render_table());
        }
        Command::Report => {
            let path = run_dir.join("metrics.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let report: ExperimentReport =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Model => 3,
            })
        }
    }
}
