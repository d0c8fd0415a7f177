//! Run report: JSON for machines, a fixed-width table for people.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hybrid_ensemble::stacking::MetaLearner;
use hybrid_ensemble::{Aggregation, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::fusion::{Fusion, MetricRow};
use crate::pipeline::{BaseOutputs, REPORT_FILE, TABLE_FILE};

/// Files written by a run, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base: Option<String>,
    pub weights: String,
    pub meta: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oof: Option<String>,
    pub roc: Vec<String>,
    pub checkpoints: Vec<String>,
    pub explanations: Vec<String>,
}

impl Artifacts {
    pub fn all(&self) -> Vec<&str> {
        let mut v: Vec<&str> = vec![&self.weights, &self.meta];
        v.extend(self.base.as_deref());
        v.extend(self.oof.as_deref());
        v.extend(self.roc.iter().map(String::as_str));
        v.extend(self.checkpoints.iter().map(String::as_str));
        v.extend(self.explanations.iter().map(String::as_str));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub folds: usize,
}

impl SplitSummary {
    pub fn from_base(base: &BaseOutputs) -> Self {
        Self {
            train_samples: base.train.ids.len(),
            val_samples: base.val.ids.len(),
            test_samples: base.test.ids.len(),
            folds: base.folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub positive_class: String,
    pub negative_class: String,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// `test` or `folds`: where the ROC points come from.
    pub roc_source: String,
    pub models: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub alpha: Vec<f64>,
    pub val_bce: f64,
    pub meta: MetaLearner<f64>,
    pub validation_auc: Vec<Option<f64>>,
    pub explained_model: Option<String>,
    pub split: SplitSummary,
    pub artifacts: Artifacts,
    pub config: RunConfig,
}

/// `"AD_vs_MCI"` -> `("AD", "MCI")`.
fn class_names(task: &str) -> (String, String) {
    match task.split_once("_vs_") {
        Some((p, n)) => (p.to_string(), n.to_string()),
        None => ("positive".into(), "negative".into()),
    }
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: &str,
        cfg: &RunConfig,
        models: &[String],
        rows: Vec<MetricRow>,
        fusion: &Fusion,
        validation_auc: Vec<Option<f64>>,
        split: SplitSummary,
        artifacts: Artifacts,
    ) -> Self {
        let (positive_class, negative_class) = class_names(task);
        Self {
            task: task.to_string(),
            positive_class,
            negative_class,
            seed: cfg.seed,
            aggregation: cfg.aggregation,
            roc_source: if cfg.roc_from_folds { "folds" } else { "test" }.into(),
            models: models.to_vec(),
            rows,
            alpha: fusion.weights.alpha.as_slice().to_vec(),
            val_bce: fusion.weights.val_bce,
            meta: fusion.meta.clone(),
            validation_auc,
            explained_model: None,
            split,
            artifacts,
            config: cfg.clone(),
        }
    }

    pub fn row(&self, model: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        for (name, text) in [(REPORT_FILE, self.to_json()), (TABLE_FILE, self.render_table())] {
            let path = out.join(name);
            fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// ACC/SEN/SPE in percent and AUC, one line per model.
    pub fn render_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} = positive)", self.task, self.positive_class);
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>6}", "Model", "ACC (%)", "SEN (%)", "SPE (%)", "AUC");
        for r in &self.rows {
            let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.2}"));
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>8} {:>8} {:>6}",
                r.model,
                pct(Some(r.accuracy)),
                pct(r.sensitivity),
                pct(r.specificity),
                auc
            );
        }
        s
    }
}
