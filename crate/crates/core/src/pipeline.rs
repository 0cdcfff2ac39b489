//! End-to-end orchestration: per-scale training, tiled prediction, ensemble
//! stacking, aggregator training and k-fold cross-validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    stack_predictions, train_aggregator_on, AggregatorConfig, AggregatorLog, AggregatorModel, PredictionVolume,
};
use crate::checkpoint::{save_aggregator, save_isnet};
use crate::config::ExperimentConfig;
use crate::isnet::IsNetModel;
use crate::metrics::{binarize, evaluate_case, ArmReport, CaseMetrics, ExperimentReport, MetricsReport};
use crate::patching::{ensure_min_extent, tile_origins, to_original_grid, PatchSample, Reconstructor, ScaleSetting};
use crate::preprocess::{preprocess_ct, ScaledVolumePair};
use crate::train::{derive_seed, train_isnet, Case, TrainLog};
use crate::{write_volume, Error, Result, Volume};

/// Tiles the scaled pair with stride `stride`, runs `predict` on every tile
/// and averages overlaps.
pub fn predict_tiles<F>(
    pair: &ScaledVolumePair,
    scale: ScaleSetting,
    stride: usize,
    mut predict: F,
) -> Result<ndarray::Array3<f32>>
where
    F: FnMut(&PatchSample) -> Result<ndarray::Array3<f32>>,
{
    let shape = pair.shape();
    let p = scale.p;
    let mut rec = Reconstructor::new(shape);
    for o in tile_origins(shape, p, stride)? {
        let window = s![o[0]..o[0] + p, o[1]..o[1] + p, o[2]..o[2] + p];
        let sample = PatchSample {
            wrange: pair.wrange.slice(window).to_owned(),
            nrange: pair.nrange.slice(window).to_owned(),
            gt: None,
            origin: o,
            scale,
        };
        let pred = predict(&sample)?;
        rec.add(o, &pred)?;
    }
    rec.finish()
}

/// Prediction of one network over a whole CT volume, on the network's scaled grid.
pub fn predict_case(model: &IsNetModel, ct: &Volume, source: &str, stride: usize) -> Result<PredictionVolume> {
    let go = || -> Result<PredictionVolume> {
        let pair = preprocess_ct(ct, model.scale.v)?;
        let (pair, _) = ensure_min_extent(pair, None, model.scale.p);
        let data = predict_tiles(&pair, model.scale, stride, |s| model.predict_patch(s))?;
        Ok(PredictionVolume {
            source: source.to_string(),
            scale: model.scale,
            data,
            mapping: pair.mapping,
        })
    };
    go().map_err(|e| e.in_case(source))
}

/// Models in canonical channel order; duplicate scales or, when `expected`
/// is given, a scale set differing from it, are errors.
pub fn canonical_models<'a>(
    models: &'a [IsNetModel],
    expected: Option<&[ScaleSetting]>,
) -> Result<Vec<&'a IsNetModel>> {
    let mut sorted: Vec<&IsNetModel> = models.iter().collect();
    sorted.sort_by(|a, b| a.scale.canonical_cmp(&b.scale));
    if let Some(w) = sorted.windows(2).find(|w| w[0].scale == w[1].scale) {
        return Err(Error::Config(format!("duplicate scale {} in ensemble", w[0].scale)));
    }
    if let Some(exp) = expected {
        let mut exp = exp.to_vec();
        exp.sort_by(ScaleSetting::canonical_cmp);
        let got: Vec<ScaleSetting> = sorted.iter().map(|m| m.scale).collect();
        if got != exp {
            return Err(Error::Config(format!(
                "ensemble scales {got:?} do not match configured {exp:?}"
            )));
        }
    }
    Ok(sorted)
}

/// One prediction per model, in canonical channel order.
pub fn run_ensemble(
    models: &[IsNetModel],
    ct: &Volume,
    source: &str,
    cfg: &ExperimentConfig,
    expected: Option<&[ScaleSetting]>,
) -> Result<Vec<PredictionVolume>> {
    canonical_models(models, expected)?
        .into_iter()
        .map(|m| predict_case(m, ct, source, cfg.predict_stride(m.scale)))
        .collect()
}

pub fn aggregator_config(cfg: &ExperimentConfig, k: usize, seed: u64) -> AggregatorConfig {
    AggregatorConfig {
        in_channels: k,
        levels: cfg.aggregator.levels,
        base_channels: cfg.aggregator.base_channels,
        threshold: cfg.threshold,
        seed,
    }
}

/// Predicts every training case with the fold's networks and fits the
/// aggregator on the stacked predictions against the original masks.
pub fn train_aggregator(
    cases: &[Case],
    models: &[IsNetModel],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(AggregatorModel, AggregatorLog)> {
    let mut inputs = Vec::with_capacity(cases.len());
    for c in cases {
        let preds = run_ensemble(models, &c.ct, &c.id, cfg, None)?;
        inputs.push((stack_predictions(&preds)?, c.gt.data().clone()));
    }
    fit_aggregator(&inputs, cfg, models.len(), seed)
}

fn fit_aggregator(
    inputs: &[(crate::aggregator::AggregatorInput, ndarray::Array3<f32>)],
    cfg: &ExperimentConfig,
    k: usize,
    seed: u64,
) -> Result<(AggregatorModel, AggregatorLog)> {
    let a = &cfg.aggregator_train;
    train_aggregator_on(
        inputs,
        aggregator_config(cfg, k, derive_seed(seed, &[0])),
        a.batch_size,
        a.learning_rate,
        a.epochs,
        derive_seed(seed, &[1]),
    )
}

/// Seeded shuffle, then case `order[i]` goes to fold `i % folds`.
pub fn assign_folds(n_cases: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be >= 2, got {folds}")));
    }
    if n_cases < folds {
        return Err(Error::Data(format!("{n_cases} cases cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, c) in order.into_iter().enumerate() {
        out[i % folds].push(c);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Binarizes a prediction and scores it against the mask.
pub fn score(pred: &Volume, gt: &Volume, threshold: f32, id: &str) -> Result<CaseMetrics> {
    let mask = binarize(pred, threshold)?;
    Ok(CaseMetrics {
        case_id: id.to_string(),
        scores: evaluate_case(&mask, gt)?,
    })
}

pub fn arm_name(scale: ScaleSetting) -> String {
    format!("ISNet {scale}")
}

pub fn isnet_file(scale: ScaleSetting) -> String {
    format!("isnet_v{}_p{}.ckpt", scale.v, scale.p)
}

pub fn arm_dir(scale: ScaleSetting) -> String {
    format!("isnet_v{}_p{}", scale.v, scale.p)
}

pub const AGGREGATION_DIR: &str = "aggregation";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvOptions {
    /// Where checkpoints, reports and predictions go; nothing is written if `None`.
    pub run_dir: Option<PathBuf>,
    /// Train and evaluate the aggregator; off for single-network ablations.
    pub aggregate: bool,
    /// Also write each test case's per-arm prediction volumes.
    pub save_predictions: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            run_dir: None,
            aggregate: true,
            save_predictions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRun {
    pub scale: ScaleSetting,
    pub log: TrainLog,
    pub test: Vec<CaseMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub scales: Vec<ScaleRun>,
    pub aggregator_log: Option<AggregatorLog>,
    pub aggregated: Option<Vec<CaseMetrics>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub report: ExperimentReport,
}

/// Which cases trained each fold's models and which were tested on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Every training patch origin per scale.
    pub patch_origins: Vec<(ScaleSetting, Vec<(String, [usize; 3])>)>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn report_for(folds: &[FoldResult], scales: &[ScaleSetting]) -> ExperimentReport {
    let arms = scales
        .iter()
        .map(|&sc| {
            let cases = folds
                .iter()
                .flat_map(|f| {
                    f.scales
                        .iter()
                        .filter(move |r| r.scale == sc)
                        .flat_map(|r| r.test.clone())
                })
                .collect();
            ArmReport {
                name: arm_name(sc),
                report: MetricsReport::from_cases(cases),
            }
        })
        .collect();
    let agg = folds
        .iter()
        .map(|f| f.aggregated.clone())
        .collect::<Option<Vec<_>>>()
        .map(|v| MetricsReport::from_cases(v.into_iter().flatten().collect()));
    ExperimentReport::new(arms, agg)
}

fn loss_curves_csv(fold: &FoldResult) -> String {
    let mut out = String::from("model,epoch,loss\n");
    for r in &fold.scales {
        for (e, l) in r.log.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{e},{l}", arm_dir(r.scale));
        }
    }
    if let Some(a) = &fold.aggregator_log {
        for (e, l) in a.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "aggregator,{e},{l}");
        }
    }
    out
}

/// Runs the full experiment. Every case is tested exactly once, by models
/// that never saw it.
pub fn cross_validate(cases: &[Case], cfg: &ExperimentConfig, opts: &CvOptions) -> Result<CvResult> {
    cfg.validate()?;
    let scales = cfg.canonical_scales();
    let assignment = assign_folds(cases.len(), cfg.folds, derive_seed(cfg.seed, &[100]))?;
    if let Some(dir) = &opts.run_dir {
        mkdir(dir)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut audits = Vec::with_capacity(cfg.folds);
    for (k, test_idx) in assignment.iter().enumerate() {
        let train: Vec<Case> = (0..cases.len())
            .filter(|i| !test_idx.contains(i))
            .map(|i| cases[i].clone())
            .collect();
        let test: Vec<&Case> = test_idx.iter().map(|&i| &cases[i]).collect();
        let train_ids: Vec<String> = train.iter().map(|c| c.id.clone()).collect();
        let test_ids: Vec<String> = test.iter().map(|c| c.id.clone()).collect();
        if train_ids.iter().any(|id| test_ids.contains(id)) {
            return Err(Error::Data(format!("fold {k}: a case id appears in both splits")));
        }
        info!("fold {k}: {} train, {} test", train.len(), test.len());
        let fold_dir = opts.run_dir.as_ref().map(|d| d.join(format!("fold{k}")));
        if let Some(d) = &fold_dir {
            mkdir(d)?;
        }
        let fold_seed = derive_seed(cfg.seed, &[k as u64]);

        let mut models = Vec::with_capacity(scales.len());
        let mut runs = Vec::with_capacity(scales.len());
        for (si, &scale) in scales.iter().enumerate() {
            let (model, log) = train_isnet(&train, scale, cfg, derive_seed(fold_seed, &[si as u64]))?;
            if let Some(d) = &fold_dir {
                save_isnet(&model, &d.join(isnet_file(scale)))?;
            }
            models.push(model);
            runs.push(ScaleRun {
                scale,
                log,
                test: Vec::new(),
            });
        }

        let (aggregator, aggregator_log) = if opts.aggregate {
            let (m, l) = train_aggregator(&train, &models, cfg, derive_seed(fold_seed, &[1000]))?;
            if let Some(d) = &fold_dir {
                save_aggregator(&m, &d.join("aggregator.ckpt"))?;
            }
            (Some(m), Some(l))
        } else {
            (None, None)
        };

        let mut aggregated = opts.aggregate.then(Vec::new);
        for c in &test {
            let preds = run_ensemble(&models, &c.ct, &c.id, cfg, Some(&scales))?;
            for (run, pred) in runs.iter_mut().zip(&preds) {
                let vol = to_original_grid(&pred.data, &pred.mapping)?;
                run.test.push(score(&vol, &c.gt, cfg.threshold, &c.id)?);
                if let (true, Some(d)) = (opts.save_predictions, &opts.run_dir) {
                    let dir = d.join("predictions").join(arm_dir(run.scale));
                    mkdir(&dir)?;
                    write_volume(&vol, dir.join(format!("{}.nii.gz", c.id)))?;
                }
            }
            if let (Some(agg), Some(out)) = (&aggregator, aggregated.as_mut()) {
                let vol = agg.aggregate(&stack_predictions(&preds)?)?;
                out.push(score(&vol, &c.gt, cfg.threshold, &c.id)?);
                if let (true, Some(d)) = (opts.save_predictions, &opts.run_dir) {
                    let dir = d.join("predictions").join(AGGREGATION_DIR);
                    mkdir(&dir)?;
                    write_volume(&vol, dir.join(format!("{}.nii.gz", c.id)))?;
                }
            }
        }
        audits.push(FoldAudit {
            fold: k,
            train_ids: train_ids.clone(),
            test_ids: test_ids.clone(),
            patch_origins: runs.iter().map(|r| (r.scale, r.log.patch_origins.clone())).collect(),
        });
        let fold = FoldResult {
            fold: k,
            train_ids,
            test_ids,
            scales: runs,
            aggregator_log,
            aggregated,
        };
        if let Some(d) = &fold_dir {
            let rep = report_for(std::slice::from_ref(&fold), &scales);
            write_json(&d.join("metrics.json"), &rep)?;
            write_text(&d.join("report.txt"), &rep.render_table())?;
            write_text(&d.join("loss_curves.csv"), &loss_curves_csv(&fold))?;
        }
        folds.push(fold);
    }
    let report = report_for(&folds, &scales);
    if let Some(d) = &opts.run_dir {
        write_json(&d.join("metrics.json"), &report)?;
        write_text(&d.join("report.txt"), &report.render_table())?;
        write_json(&d.join("audit.json"), &audits)?;
    }
    Ok(CvResult { folds, report })
}

/// Recomputes the report from prediction volumes saved under
/// `run_dir/predictions/<arm>/<case>.nii.gz` and the given ground truth.
pub fn evaluate_run(run_dir: &Path, cases: &[(String, PathBuf)], threshold: f32) -> Result<ExperimentReport> {
    let pred_root = run_dir.join("predictions");
    let mut arms: Vec<(ScaleSetting, String)> = Vec::new();
    let mut has_agg = false;
    let entries = std::fs::read_dir(&pred_root).map_err(|e| Error::io(&pred_root, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(&pred_root, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if name == AGGREGATION_DIR {
            has_agg = true;
        } else if let Some(sc) = parse_arm_dir(&name) {
            arms.push((sc, name));
        }
    }
    if arms.is_empty() && !has_agg {
        return Err(Error::Data(format!("no predictions under {}", pred_root.display())));
    }
    arms.sort_by(|a, b| a.0.canonical_cmp(&b.0));
    let eval_arm = |dir: &str| -> Result<MetricsReport> {
        let mut per_case = Vec::new();
        for (id, gt_path) in cases {
            let path = pred_root.join(dir).join(format!("{id}.nii.gz"));
            if !path.exists() {
                continue;
            }
            let pred = crate::read_volume_as(&path, crate::VolumeKind::Prediction).map_err(|e| e.in_case(id))?;
            let gt = crate::read_volume_as(gt_path, crate::VolumeKind::Mask).map_err(|e| e.in_case(id))?;
            per_case.push(score(&pred, &gt, threshold, id).map_err(|e| e.in_case(id))?);
        }
        if per_case.is_empty() {
            return Err(Error::Data(format!("no predictions in {dir} match the given cases")));
        }
        Ok(MetricsReport::from_cases(per_case))
    };
    let isnets = arms
        .iter()
        .map(|(sc, dir)| {
            Ok(ArmReport {
                name: arm_name(*sc),
                report: eval_arm(dir)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = if has_agg {
        Some(eval_arm(AGGREGATION_DIR)?)
    } else {
        None
    };
    Ok(ExperimentReport::new(isnets, agg))
}

fn parse_arm_dir(name: &str) -> Option<ScaleSetting> {
    let rest = name.strip_prefix("isnet_v")?;
    let (v, p) = rest.split_once("_p")?;
    Some(ScaleSetting {
        v: v.parse().ok()?,
        p: p.parse().ok()?,
    })
}
