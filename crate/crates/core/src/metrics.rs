//! Case-level precision/recall/dice and the experiment report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Volume, VolumeKind};

/// Voxel is foreground iff its value is strictly greater than `threshold`.
pub fn binarize(pred: &Volume, threshold: f32) -> Result<Volume> {
    if pred.kind() != VolumeKind::Prediction {
        return Err(Error::Data(format!(
            "binarize expects a prediction, got {:?}",
            pred.kind()
        )));
    }
    pred.with_data(
        pred.data().mapv(|v| if v > threshold { 1.0 } else { 0.0 }),
        VolumeKind::Mask,
    )
}

/// Precision, recall and dice in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

impl Scores {
    fn from_counts(tp: u64, fp: u64, fneg: u64) -> Self {
        if tp + fp + fneg == 0 {
            return Scores {
                precision: 100.0,
                recall: 100.0,
                dice: 100.0,
            };
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        Scores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fneg),
            dice: ratio(2 * tp, 2 * tp + fp + fneg),
        }
    }
}

/// Voxel-wise confusion counts between two binary masks.
pub fn evaluate_case(pred_mask: &Volume, gt_mask: &Volume) -> Result<Scores> {
    if pred_mask.kind() != VolumeKind::Mask || gt_mask.kind() != VolumeKind::Mask {
        return Err(Error::Data("evaluate_case expects two masks".into()));
    }
    if pred_mask.shape() != gt_mask.shape() {
        return Err(Error::Data(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred_mask.shape(),
            gt_mask.shape()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred_mask.data().iter().zip(gt_mask.data()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok(Scores::from_counts(tp, fp, fneg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Per-case scores with their arithmetic mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetrics>,
    pub mean: Scores,
    pub stddev: Scores,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(all: &[Scores]) -> (Scores, Scores) {
    let col = |f: fn(&Scores) -> f64| mean_sd(&all.iter().map(f).collect::<Vec<_>>());
    let (pm, ps) = col(|s| s.precision);
    let (rm, rs) = col(|s| s.recall);
    let (dm, ds) = col(|s| s.dice);
    (
        Scores {
            precision: pm,
            recall: rm,
            dice: dm,
        },
        Scores {
            precision: ps,
            recall: rs,
            dice: ds,
        },
    )
}

impl MetricsReport {
    /// Cases are ordered by id, so the summary does not depend on fold order.
    pub fn from_cases(mut per_case: Vec<CaseMetrics>) -> Self {
        per_case.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let scores: Vec<Scores> = per_case.iter().map(|c| c.scores).collect();
        let (mean, stddev) = summarize(&scores);
        MetricsReport { per_case, mean, stddev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub report: MetricsReport,
}

/// Results of one experiment: individual networks, and optionally the
/// aggregation network fusing them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub isnets: Vec<ArmReport>,
    pub aggregation: Option<MetricsReport>,
    /// Mean and standard deviation over the individual networks' mean scores.
    pub isnet_mean: Scores,
    pub isnet_sd: Scores,
}

impl ExperimentReport {
    pub fn new(isnets: Vec<ArmReport>, aggregation: Option<MetricsReport>) -> Self {
        let means: Vec<Scores> = isnets.iter().map(|a| a.report.mean).collect();
        let (isnet_mean, isnet_sd) = summarize(&means);
        ExperimentReport {
            isnets,
            aggregation,
            isnet_mean,
            isnet_sd,
        }
    }

    /// Plain-text table: aggregation row, mean +- SD row of the individual
    /// networks, then one row per network.
    pub fn render_table(&self) -> String {
        let k = self.isnets.len();
        let mut rows: Vec<[String; 4]> = Vec::new();
        if let Some(agg) = &self.aggregation {
            rows.push([
                "Aggregation FCN".into(),
                format!("{:.1}", agg.mean.precision),
                format!("{:.1}", agg.mean.recall),
                format!("{:.1}", agg.mean.dice),
            ]);
        }
        let (m, s) = (self.isnet_mean, self.isnet_sd);
        rows.push([
            format!("Mean ± S.D. of {k} ISNets (before aggregation)"),
            format!("{:.1} ± {:.1}", m.precision, s.precision),
            format!("{:.1} ± {:.1}", m.recall, s.recall),
            format!("{:.1} ± {:.1}", m.dice, s.dice),
        ]);
        for arm in &self.isnets {
            let r = &arm.report;
            rows.push([
                arm.name.clone(),
                format!("{:.1}", r.mean.precision),
                format!("{:.1}", r.mean.recall),
                format!("{:.1}", r.mean.dice),
            ]);
        }
        render(&["Method", "Precision (%)", "Recall (%)", "Dice (%)"], &rows)
    }
}

fn render(header: &[&str; 4], rows: &[[String; 4]]) -> String {
    let mut widths = header.map(|h| h.chars().count());
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = String::from("|");
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                let _ = write!(s, " {}{} |", c, " ".repeat(pad));
            } else {
                let _ = write!(s, " {}{} |", " ".repeat(pad), c);
            }
        }
        s.push('\n');
        s
    };
    let sep = {
        let mut s = String::from("|");
        for w in widths {
            s.push_str(&"-".repeat(w + 2));
            s.push('|');
        }
        s.push('\n');
        s
    };
    let mut out = sep.clone();
    out.push_str(&line(*header));
    out.push_str(&sep);
    for r in rows {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
    }
    out.push_str(&sep);
    out
}
