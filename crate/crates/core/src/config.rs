//! Run configuration, read from and written to a single JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the weighted-average and stacked probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    #[default]
    Mean,
    WeightedOnly,
    StackedOnly,
}

impl std::str::FromStr for CombineRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(CombineRule::Mean),
            "weighted_only" => Ok(CombineRule::WeightedOnly),
            "stacked_only" => Ok(CombineRule::StackedOnly),
            other => Err(Error::invalid(format!("unknown combine rule {other:?}"))),
        }
    }
}

/// Level at which test metrics are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Slice,
    /// Mean of a subject's slice probabilities, thresholded once per subject.
    #[default]
    SubjectMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of base learners.
    #[serde(rename = "K")]
    pub k_models: usize,
    pub seed: u64,
    /// Fine-tuning (phase 2) learning rate.
    pub learning_rate: f64,
    /// Head-only (phase 1) learning rate.
    pub head_learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub threshold: f64,
    pub folds: usize,
    pub freeze_epochs: usize,
    pub finetune_epochs: usize,
    /// Trailing backbone conv layers unfrozen in phase 2.
    pub unfreeze_layers: usize,
    pub input_side: usize,
    pub fusion_combine_rule: CombineRule,
    pub split_ratios: [f64; 3],
    pub weight_steps: usize,
    pub weight_step_size: f64,
    pub meta_epochs: usize,
    pub meta_learning_rate: f64,
    pub meta_l2: f64,
    pub aggregation: Aggregation,
    /// Pool ROC points over cross-validation folds instead of the test split.
    pub roc_from_folds: bool,
    /// Keep each base learner at its lowest validation-loss epoch.
    pub early_stopping: bool,
    /// Base learner to explain; defaults to the best validation AUC.
    pub explain_model: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_models: 3,
            seed: 0,
            learning_rate: 2e-5,
            head_learning_rate: 1e-3,
            batch_size: 24,
            dropout_rate: 0.5,
            threshold: 0.5,
            folds: 10,
            freeze_epochs: 20,
            finetune_epochs: 5,
            unfreeze_layers: 1,
            input_side: 224,
            fusion_combine_rule: CombineRule::Mean,
            split_ratios: [0.6, 0.2, 0.2],
            weight_steps: 500,
            weight_step_size: 0.5,
            meta_epochs: 2000,
            meta_learning_rate: 1.0,
            meta_l2: 1e-3,
            aggregation: Aggregation::SubjectMean,
            roc_from_folds: false,
            early_stopping: true,
            explain_model: None,
        }
    }
}

impl RunConfig {
    /// Laptop-scale preset: 32-pixel inputs and, since the backbones start
    /// from random weights rather than pretrained ones, a short head phase
    /// followed by fine-tuning of every conv layer at the head rate.
    pub fn desk() -> Self {
        Self {
            input_side: 32,
            batch_size: 8,
            freeze_epochs: 10,
            finetune_epochs: 30,
            learning_rate: 1e-3,
            unfreeze_layers: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.k_models < 2 {
            return bad(format!("K must be at least 2, got {}", self.k_models));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.head_learning_rate > 0.0 && self.head_learning_rate.is_finite()) {
            return bad(format!("head_learning_rate must be positive, got {}", self.head_learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.input_side == 0 {
            return bad("input_side must be positive".into());
        }
        if !(self.weight_step_size > 0.0) || !(self.meta_learning_rate > 0.0) {
            return bad("optimizer step sizes must be positive".into());
        }
        if !(self.meta_l2 >= 0.0) {
            return bad(format!("meta_l2 must be nonnegative, got {}", self.meta_l2));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split_ratios must be positive and sum to 1, got {:?}", self.split_ratios));
        }
        if let Some(m) = self.explain_model {
            if m >= self.k_models {
                return bad(format!("explain_model {m} out of range for K={}", self.k_models));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Invalid(m) => Error::invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c.batch_size, 24);
        assert_eq!(c.dropout_rate, 0.5);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.folds, 10);
        assert_eq!(c.input_side, 224);
        assert_eq!(c.split_ratios, [0.6, 0.2, 0.2]);
        assert!(c.validate().is_ok());
        assert_eq!(RunConfig::desk().input_side, 32);
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"K": 4, "fusion_combine_rule": "stacked_only"}"#).unwrap();
        assert_eq!(partial.k_models, 4);
        assert_eq!(partial.fusion_combine_rule, CombineRule::StackedOnly);
        assert_eq!(partial.batch_size, 24);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        for doc in [
            r#"{"K": 1}"#,
            r#"{"dropout_rate": 1.0}"#,
            r#"{"threshold": 0.0}"#,
            r#"{"folds": 1}"#,
            r#"{"batch_size": 0}"#,
            r#"{"learning_rate": -1}"#,
            r#"{"split_ratios": [0.5, 0.2, 0.2]}"#,
            r#"{"fusion_combine_rule": "median"}"#,
            r#"{"bogus": 1}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }
}
