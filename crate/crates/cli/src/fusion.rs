//! Fusion and evaluation shared by the full pipeline and `fuse`.

use std::collections::BTreeMap;

use hybrid_ensemble::metrics::{acc_sen_spe, auc, confusion, roc_curve, threshold, ConfusionMatrix};
use hybrid_ensemble::stacking::{combine, meta_predict, train_meta, MetaFitOptions, MetaLearner};
use hybrid_ensemble::weighted_avg::{optimize_weights, weighted_predict, WeightFit, WeightFitOptions};
use hybrid_ensemble::{split_dataset, Aggregation, Label, PredictionMatrix, PredictionTable, RocCurve, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, StageExt};

/// Fusion rows that follow the base-model rows in every report.
pub const FUSION_ROWS: [&str; 3] = ["weighted", "stacked", "hybrid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub weights: WeightFit<f64>,
    pub meta: MetaLearner<f64>,
}

/// Learns `alpha` on `(val, val_labels)` and the meta-learner on
/// `(meta_x, meta_labels)`.
pub fn fit_fusion(
    val: &PredictionMatrix,
    val_labels: &[Label],
    meta_x: &PredictionMatrix,
    meta_labels: &[Label],
    cfg: &RunConfig,
) -> Result<Fusion, CliError> {
    let wopts = WeightFitOptions {
        steps: cfg.weight_steps,
        step_size: cfg.weight_step_size,
        ..WeightFitOptions::default()
    };
    let weights = optimize_weights(val, val_labels, &wopts).stage("weights")?;
    let mopts = MetaFitOptions {
        epochs: cfg.meta_epochs,
        learning_rate: cfg.meta_learning_rate,
        l2: cfg.meta_l2,
    };
    let meta = train_meta(meta_x, meta_labels, &mopts).stage("meta-learner")?;
    Ok(Fusion { weights, meta })
}

/// Score columns: the K base columns, then weighted, stacked and hybrid.
pub fn score_columns(fusion: &Fusion, preds: &PredictionMatrix, cfg: &RunConfig) -> Result<Vec<Vec<f64>>, CliError> {
    let mut cols: Vec<Vec<f64>> = (0..preds.k()).map(|j| preds.column(j)).collect();
    let mut weighted = Vec::with_capacity(preds.n());
    let mut stacked = Vec::with_capacity(preds.n());
    for row in preds.rows() {
        weighted.push(weighted_predict(&fusion.weights.alpha, row).stage("fusion")?);
        stacked.push(meta_predict(&fusion.meta, row).stage("fusion")?);
    }
    let hybrid = weighted
        .iter()
        .zip(&stacked)
        .map(|(&w, &s)| combine(w, s, cfg.fusion_combine_rule))
        .collect();
    cols.extend([weighted, stacked, hybrid]);
    Ok(cols)
}

/// Slice scores, or per-subject mean scores in subject-id order.
pub fn aggregate(scores: &[f64], labels: &[Label], subjects: &[String], how: Aggregation) -> (Vec<f64>, Vec<Label>) {
    match how {
        Aggregation::Slice => (scores.to_vec(), labels.to_vec()),
        Aggregation::SubjectMean => {
            let mut acc: BTreeMap<&str, (f64, usize, Label)> = BTreeMap::new();
            for ((&s, &y), subj) in scores.iter().zip(labels).zip(subjects) {
                let e = acc.entry(subj.as_str()).or_insert((0.0, 0, y));
                e.0 += s;
                e.1 += 1;
            }
            acc.values().map(|&(sum, n, y)| (sum / n as f64, y)).unzip()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Base,
    Fusion,
}

/// One line of the ACC/SEN/SPE/AUC table. Rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub kind: RowKind,
    pub n: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Absent when the evaluated set holds a single class.
    pub auc: Option<f64>,
    /// Every score identical, so the ROC is the chance diagonal.
    pub constant_scores: bool,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roc_csv: Option<String>,
}

pub fn metric_row(
    model: &str,
    kind: RowKind,
    scores: &[f64],
    labels: &[Label],
    tau: f64,
) -> Result<(MetricRow, Option<RocCurve>), CliError> {
    let preds: Vec<Label> = scores.iter().map(|&p| threshold(p, tau)).collect();
    let cm = confusion(labels, &preds).stage("metrics")?;
    let rates = acc_sen_spe::<f64>(&cm).stage("metrics")?;
    let roc = roc_curve(labels, scores).ok();
    let constant = scores.windows(2).all(|w| w[0] == w[1]);
    let row = MetricRow {
        model: model.to_string(),
        kind,
        n: scores.len(),
        accuracy: rates.accuracy,
        sensitivity: rates.sensitivity,
        specificity: rates.specificity,
        auc: roc.as_ref().map(auc),
        constant_scores: constant,
        confusion: cm,
        roc_csv: None,
    };
    Ok((row, roc))
}

/// Metric rows (and ROC curves) for every score column.
pub fn evaluate_columns(
    names: &[String],
    columns: &[Vec<f64>],
    labels: &[Label],
    subjects: &[String],
    cfg: &RunConfig,
) -> Result<Vec<(MetricRow, Option<RocCurve>)>, CliError> {
    let k = names.len();
    columns
        .iter()
        .enumerate()
        .map(|(j, col)| {
            let (name, kind) = if j < k {
                (names[j].as_str(), RowKind::Base)
            } else {
                (FUSION_ROWS[j - k], RowKind::Fusion)
            };
            let (s, y) = aggregate(col, labels, subjects, cfg.aggregation);
            metric_row(name, kind, &s, &y, cfg.threshold)
        })
        .collect()
}

/// Fusion fitted and evaluated on a prediction table alone.
#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub fusion: Fusion,
    pub held_in: Vec<usize>,
    pub held_out: Vec<usize>,
    pub rows: Vec<(MetricRow, Option<RocCurve>)>,
}

/// Splits the rows with the configured ratios, fits `alpha` and the
/// meta-learner on the train and validation rows, and evaluates on the test
/// rows. Each row is its own subject.
pub fn fuse_only(table: &PredictionTable, cfg: &RunConfig) -> Result<FuseOutcome, CliError> {
    let keys = table.keys();
    let split = split_dataset(&keys, cfg.split_ratios, cfg.seed).stage("split")?;
    let mut held_in: Vec<usize> = split.train_ids.iter().chain(&split.val_ids).copied().collect();
    held_in.sort_unstable();
    let fit = table.select(&held_in);
    let fusion = fit_fusion(&fit.preds, &fit.labels, &fit.preds, &fit.labels, cfg)?;
    let test = table.select(&split.test_ids);
    let names: Vec<String> = (1..=table.preds.k()).map(|j| format!("p{j}")).collect();
    let columns = score_columns(&fusion, &test.preds, cfg)?;
    let slice_cfg = RunConfig {
        aggregation: Aggregation::Slice,
        ..cfg.clone()
    };
    let rows = evaluate_columns(&names, &columns, &test.labels, &test.ids, &slice_cfg)?;
    Ok(FuseOutcome {
        fusion,
        held_in,
        held_out: split.test_ids,
        rows,
    })
}
