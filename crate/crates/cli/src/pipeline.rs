//! End-to-end pipeline: split, base training with out-of-fold predictions,
//! fusion, evaluation and explanation.
//!
//! All randomness descends from one `ChaCha8Rng` seeded with the run seed.
//! It is drawn in this order: split seed, fold seed, one seed per final base
//! model, then one seed per (model, fold) cross-validation job. Jobs run in
//! parallel but each owns its generator, so results do not depend on
//! scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use hybrid_ensemble::gradcam;
use hybrid_ensemble::ingest::load_image_dir;
use hybrid_ensemble::metrics::{auc, roc_curve};
use hybrid_ensemble::nn::{arch, checkpoint, predict, train_two_phase, EpochRecord, TrainOptions};
use hybrid_ensemble::stacking::{combine, meta_predict, oof_predictions, train_meta, BaseFactory, MetaFitOptions};
use hybrid_ensemble::weighted_avg::weighted_predict;
use hybrid_ensemble::{
    assign_folds, split_dataset, Error, Image, Label, LabeledSample, MicroNet, PredictionMatrix, RocCurve, RunConfig,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, StageExt};
use crate::fusion::{evaluate_columns, fit_fusion, score_columns, Fusion, MetricRow, FUSION_ROWS};
use crate::report::{Artifacts, RunReport, SplitSummary};

pub const BASE_FILE: &str = "base.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const META_FILE: &str = "meta.json";
pub const OOF_FILE: &str = "oof.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EXPLANATION_DIR: &str = "explanations";

/// Explanations written per class.
const EXPLAIN_PER_CLASS: usize = 2;

/// Rows of one partition with their base-model probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub ids: Vec<String>,
    pub subjects: Vec<String>,
    pub labels: Vec<Label>,
    /// One row of K probabilities per sample.
    pub preds: Vec<Vec<f64>>,
}

impl Partition {
    pub fn matrix(&self) -> Result<PredictionMatrix, CliError> {
        Ok(PredictionMatrix::from_rows(&self.preds)?)
    }
}

/// Everything `train-base` produces, persisted as `base.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseOutputs {
    pub models: Vec<String>,
    /// Training partition; `preds` are out-of-fold.
    pub train: Partition,
    pub folds: usize,
    pub fold_of: Vec<usize>,
    pub val: Partition,
    pub test: Partition,
    pub checkpoints: Vec<String>,
    pub history: Vec<Vec<EpochRecord>>,
}

impl BaseOutputs {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(BASE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// In-memory state kept alongside [`BaseOutputs`] for explanation.
pub struct Trained {
    pub base: BaseOutputs,
    pub nets: Vec<MicroNet>,
    pub test_images: Vec<Image>,
}

fn train_options(cfg: &RunConfig) -> TrainOptions<f64> {
    TrainOptions {
        freeze_epochs: cfg.freeze_epochs,
        finetune_epochs: cfg.finetune_epochs,
        head_learning_rate: cfg.head_learning_rate,
        finetune_learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        unfreeze_layers: cfg.unfreeze_layers,
        restore_best: cfg.early_stopping,
    }
}

/// Builds base architecture `model` from `seed` and trains it in two phases.
fn train_model(
    model: usize,
    cfg: &RunConfig,
    train: (&[&Image], &[Label]),
    val: Option<(&[&Image], &[Label])>,
    seed: u64,
) -> Result<(MicroNet, Vec<EpochRecord>), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = arch::build(model, cfg.input_side, cfg.dropout_rate, &mut rng)?;
    let history = train_two_phase(&mut net, train, val, &train_options(cfg), &mut rng)?;
    Ok((net, history))
}

/// Micro-CNN factory over the training partition.
struct CnnFactory<'a> {
    cfg: &'a RunConfig,
    images: Vec<&'a Image>,
    labels: Vec<Label>,
    /// Validation partition, used only to pick the early-stopping epoch.
    val_images: Vec<&'a Image>,
    val_labels: Vec<Label>,
    /// Seed of job `(model, fold)` at `model * folds + fold`.
    seeds: Vec<u64>,
}

impl BaseFactory<f64> for CnnFactory<'_> {
    fn n_models(&self) -> usize {
        self.cfg.k_models
    }

    fn fit_predict(&self, model: usize, fold: usize, train: &[usize], predict_at: &[usize]) -> hybrid_ensemble::Result<Vec<f64>> {
        let imgs: Vec<&Image> = train.iter().map(|&i| self.images[i]).collect();
        let labs: Vec<Label> = train.iter().map(|&i| self.labels[i]).collect();
        let seed = self.seeds[model * self.cfg.folds + fold];
        let val = Some((self.val_images.as_slice(), self.val_labels.as_slice()));
        let (net, _) = train_model(model, self.cfg, (&imgs, &labs), val, seed)?;
        let targets: Vec<&Image> = predict_at.iter().map(|&i| self.images[i]).collect();
        predict(&net, &targets)
    }
}

fn sample_id(s: &LabeledSample) -> String {
    format!("{}_{:02}", s.subject_id, s.slice_index)
}

fn partition(samples: &[LabeledSample], ids: &[usize], preds: Vec<Vec<f64>>) -> Partition {
    Partition {
        ids: ids.iter().map(|&i| sample_id(&samples[i])).collect(),
        subjects: ids.iter().map(|&i| samples[i].subject_id.clone()).collect(),
        labels: ids.iter().map(|&i| samples[i].label).collect(),
        preds,
    }
}

fn images_of<'a>(samples: &'a [LabeledSample], ids: &[usize]) -> Result<Vec<&'a Image>, CliError> {
    ids.iter()
        .map(|&i| {
            samples[i]
                .image()
                .ok_or_else(|| CliError::Data(format!("sample {} has no image", sample_id(&samples[i]))))
        })
        .collect()
}

fn rows_from_columns(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.first().map_or(0, Vec::len);
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// The pipeline up to the saved probabilities: split, train every base model
/// on the training partition, and build the out-of-fold table. Writes
/// checkpoints, `oof.csv` and `base.json` under `out`.
pub fn train_base(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Trained, CliError> {
    cfg.validate().map_err(CliError::config)?;
    create_dir(out)?;
    let samples: Vec<LabeledSample> = load_image_dir(data, cfg.input_side).stage("load")?;

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split_seed = master.next_u64();
    let fold_seed = master.next_u64();
    let final_seeds: Vec<u64> = (0..cfg.k_models).map(|_| master.next_u64()).collect();
    let oof_seeds: Vec<u64> = (0..cfg.k_models * cfg.folds).map(|_| master.next_u64()).collect();

    let split = split_dataset(&samples, cfg.split_ratios, split_seed).stage("split")?;
    let folds = assign_folds(&samples, &split.train_ids, cfg.folds, fold_seed).stage("folds")?;
    // folds.ids() is the training partition in a fixed order
    let train_ids = folds.ids().to_vec();

    let train_imgs = images_of(&samples, &train_ids)?;
    let train_labels: Vec<Label> = train_ids.iter().map(|&i| samples[i].label).collect();
    let val_imgs = images_of(&samples, &split.val_ids)?;
    let val_labels: Vec<Label> = split.val_ids.iter().map(|&i| samples[i].label).collect();
    let test_imgs = images_of(&samples, &split.test_ids)?;

    let finals: Vec<(MicroNet, Vec<EpochRecord>)> = (0..cfg.k_models)
        .into_par_iter()
        .map(|m| {
            train_model(
                m,
                cfg,
                (&train_imgs, &train_labels),
                Some((&val_imgs, &val_labels)),
                final_seeds[m],
            )
            .map_err(|e| CliError::from(e).in_stage("train-base"))
        })
        .collect::<Result<_, _>>()?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let mut checkpoints = Vec::new();
    for (net, _) in &finals {
        let rel = format!("{CHECKPOINT_DIR}/{}.ckpt", net.architecture_id());
        checkpoint::save(net, &out.join(&rel)).stage("train-base")?;
        checkpoints.push(rel);
    }

    let factory = CnnFactory {
        cfg,
        images: train_imgs.clone(),
        labels: train_labels.clone(),
        val_images: val_imgs.clone(),
        val_labels: val_labels.clone(),
        seeds: oof_seeds,
    };
    let oof = oof_predictions(&folds, &factory).stage("out-of-fold")?;
    if !oof.leakage_violations().is_empty() {
        return Err(CliError::Data("out-of-fold table leaks training samples".into()).in_stage("out-of-fold"));
    }
    let train_part = partition(&samples, &train_ids, oof.matrix.rows().map(<[f64]>::to_vec).collect());
    oof.write_csv(&out.join(OOF_FILE), &train_part.ids, &train_part.labels)
        .stage("out-of-fold")?;

    let predict_all = |imgs: &[&Image]| -> Result<Vec<Vec<f64>>, CliError> {
        let cols = finals
            .iter()
            .map(|(net, _)| predict(net, imgs).stage("predict"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rows_from_columns(&cols))
    };
    let val_part = partition(&samples, &split.val_ids, predict_all(&val_imgs)?);
    let test_part = partition(&samples, &split.test_ids, predict_all(&test_imgs)?);

    let base = BaseOutputs {
        models: finals.iter().map(|(n, _)| n.architecture_id().to_string()).collect(),
        train: train_part,
        folds: cfg.folds,
        fold_of: folds.folds().to_vec(),
        val: val_part,
        test: test_part,
        checkpoints,
        history: finals.iter().map(|(_, h)| h.clone()).collect(),
    };
    write_text(&out.join(BASE_FILE), &to_json(&base))?;
    Ok(Trained {
        base,
        nets: finals.into_iter().map(|(n, _)| n).collect(),
        test_images: test_imgs.into_iter().cloned().collect(),
    })
}

/// Validation AUC of each base model at slice level.
pub fn validation_aucs(base: &BaseOutputs) -> Vec<Option<f64>> {
    (0..base.models.len())
        .map(|j| {
            let col: Vec<f64> = base.val.preds.iter().map(|r| r[j]).collect();
            roc_curve(&base.val.labels, &col).ok().map(|c| auc(&c))
        })
        .collect()
}

/// Base model to explain: the configured one, else the best validation AUC
/// (lowest index on ties).
pub fn chosen_model(cfg: &RunConfig, base: &BaseOutputs) -> usize {
    if let Some(m) = cfg.explain_model {
        return m;
    }
    let aucs = validation_aucs(base);
    let mut best = 0;
    for (j, a) in aucs.iter().enumerate() {
        if a.unwrap_or(f64::NEG_INFINITY) > aucs[best].unwrap_or(f64::NEG_INFINITY) {
            best = j;
        }
    }
    best
}

/// Pooled cross-validation scores for the training partition: base OOF
/// columns, weighted OOF, a meta-learner cross-fitted over the same folds,
/// and their combination.
fn fold_columns(cfg: &RunConfig, base: &BaseOutputs, fusion: &Fusion) -> Result<Vec<Vec<f64>>, CliError> {
    let x = base.train.matrix()?;
    let n = x.n();
    let mut cols: Vec<Vec<f64>> = (0..x.k()).map(|j| x.column(j)).collect();
    let weighted: Vec<f64> = x
        .rows()
        .map(|r| weighted_predict(&fusion.weights.alpha, r))
        .collect::<hybrid_ensemble::Result<_>>()
        .stage("roc-from-folds")?;
    let mut stacked = vec![0.0; n];
    let mopts = MetaFitOptions {
        epochs: cfg.meta_epochs,
        learning_rate: cfg.meta_learning_rate,
        l2: cfg.meta_l2,
    };
    for f in 0..base.folds {
        let fit: Vec<usize> = (0..n).filter(|&i| base.fold_of[i] != f).collect();
        let labels: Vec<Label> = fit.iter().map(|&i| base.train.labels[i]).collect();
        let m = train_meta(&x.select_rows(&fit), &labels, &mopts).stage("roc-from-folds")?;
        for i in (0..n).filter(|&i| base.fold_of[i] == f) {
            stacked[i] = meta_predict(&m, x.row(i)).stage("roc-from-folds")?;
        }
    }
    let hybrid = weighted
        .iter()
        .zip(&stacked)
        .map(|(&w, &s)| combine(w, s, cfg.fusion_combine_rule))
        .collect();
    cols.extend([weighted, stacked, hybrid]);
    Ok(cols)
}

fn roc_name(model: &str) -> String {
    format!("roc_{model}.csv")
}

/// Fusion and evaluation over `train-base` outputs. Writes `weights.json`,
/// `meta.json`, the ROC CSVs, `report.json` and `report.txt`.
pub fn evaluate(cfg: &RunConfig, base: &BaseOutputs, out: &Path, task: &str) -> Result<RunReport, CliError> {
    create_dir(out)?;
    let fusion = fit_fusion(
        &base.val.matrix()?,
        &base.val.labels,
        &base.train.matrix()?,
        &base.train.labels,
        cfg,
    )?;
    write_text(&out.join(WEIGHTS_FILE), &to_json(&fusion.weights))?;
    write_text(&out.join(META_FILE), &to_json(&fusion.meta))?;

    let test_cols = score_columns(&fusion, &base.test.matrix()?, cfg)?;
    let mut evaluated = evaluate_columns(&base.models, &test_cols, &base.test.labels, &base.test.subjects, cfg)?;
    if cfg.roc_from_folds {
        let cols = fold_columns(cfg, base, &fusion)?;
        let pooled = evaluate_columns(&base.models, &cols, &base.train.labels, &base.train.subjects, cfg)?;
        for (row, p) in evaluated.iter_mut().zip(pooled) {
            row.1 = p.1;
        }
    }
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut roc_files = Vec::new();
    for (mut row, roc) in evaluated {
        if let Some(roc) = roc {
            let name = roc_name(&row.model);
            write_roc(&roc, &out.join(&name))?;
            row.roc_csv = Some(name.clone());
            roc_files.push(name);
        }
        rows.push(row);
    }

    let report = RunReport::new(
        task,
        cfg,
        &base.models,
        rows,
        &fusion,
        validation_aucs(base),
        SplitSummary::from_base(base),
        Artifacts {
            base: out.join(BASE_FILE).exists().then(|| BASE_FILE.to_string()),
            weights: WEIGHTS_FILE.into(),
            meta: META_FILE.into(),
            oof: out.join(OOF_FILE).exists().then(|| OOF_FILE.to_string()),
            roc: roc_files,
            checkpoints: base.checkpoints.clone(),
            explanations: Vec::new(),
        },
    );
    report.write(out)?;
    Ok(report)
}

fn write_roc(roc: &RocCurve, path: &Path) -> Result<(), CliError> {
    roc.write_csv(path).stage("evaluate")
}

/// Grad-CAM overlays for up to two test samples per class from base model
/// `model`, written under `explanations/`. Returns the relative paths.
pub fn explain_test_samples(trained: &Trained, model: usize, out: &Path) -> Result<Vec<String>, CliError> {
    let dir = out.join(EXPLANATION_DIR);
    create_dir(&dir)?;
    let net = &trained.nets[model];
    let test = &trained.base.test;
    let mut files = Vec::new();
    for class in [Label::Negative, Label::Positive] {
        let picks = (0..test.ids.len()).filter(|&i| test.labels[i] == class).take(EXPLAIN_PER_CLASS);
        for i in picks {
            let cam = gradcam::explain(net, &trained.test_images[i], class).stage("explain")?;
            let stem = format!("{}_{}_c{}", net.architecture_id(), test.ids[i], class.value());
            gradcam::export(&cam, &trained.test_images[i], net.architecture_id(), &dir, &stem).stage("explain")?;
            for suffix in [".ppm", "_cam.pgm", ".json"] {
                files.push(format!("{EXPLANATION_DIR}/{stem}{suffix}"));
            }
        }
    }
    Ok(files)
}

/// The whole pipeline over the image directory `data`.
pub fn run_pipeline(cfg: &RunConfig, data: &Path, out: &Path, task: &str) -> Result<RunReport, CliError> {
    let trained = train_base(cfg, data, out)?;
    let mut report = evaluate(cfg, &trained.base, out, task)?;
    let model = chosen_model(cfg, &trained.base);
    report.explained_model = Some(trained.base.models[model].clone());
    report.artifacts.explanations = explain_test_samples(&trained, model, out)?;
    report.write(out)?;
    Ok(report)
}

/// Grad-CAM for one image file against a saved checkpoint.
pub fn explain_file(checkpoint_path: &Path, image: &Path, class: Label, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let net: MicroNet = checkpoint::load(checkpoint_path).stage("explain")?;
    let [_, h, w] = net.input_shape();
    let ext = image.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let img: Image = match ext.as_str() {
        "png" => hybrid_ensemble::image::read_png(image),
        _ => hybrid_ensemble::image::read_pgm(image),
    }
    .stage("explain")?;
    let img = img.resize_bilinear(w, h).stage("explain")?;
    create_dir(out)?;
    let cam = gradcam::explain(&net, &img, class).stage("explain")?;
    let stem = format!(
        "{}_{}_c{}",
        net.architecture_id(),
        image.file_stem().and_then(|s| s.to_str()).unwrap_or("image"),
        class.value()
    );
    gradcam::export(&cam, &img, net.architecture_id(), out, &stem).stage("explain")?;
    Ok([".ppm", "_cam.pgm", ".json"].iter().map(|s| out.join(format!("{stem}{s}"))).collect())
}

/// Row names of a report over `models`, in table order.
pub fn row_names(models: &[String]) -> Vec<String> {
    models.iter().cloned().chain(FUSION_ROWS.iter().map(|s| s.to_string())).collect()
}

