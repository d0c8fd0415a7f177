//! Stacked generalization: out-of-fold base predictions, a logistic-regression
//! meta-learner trained on them, and the final hybrid combination.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::CombineRule;
use crate::data::{FoldAssignment, Label};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::weighted_avg::{weighted_predict, PredictionMatrix, WeightVector};

/// Logistic regression over the K base probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner<T> {
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Scalar> MetaLearner<T> {
    pub fn zeros(k: usize) -> Self {
        Self {
            w: vec![T::zero(); k],
            b: T::zero(),
        }
    }

    fn logit(&self, p: &[T]) -> T {
        self.w.iter().zip(p).map(|(&w, &x)| w * x).sum::<T>() + self.b
    }
}

pub fn meta_predict<T: Scalar>(m: &MetaLearner<T>, p: &[T]) -> Result<T> {
    if m.w.len() != p.len() {
        return Err(Error::shape(
            "meta_predict",
            format!("{} weights vs {} probabilities", m.w.len(), p.len()),
        ));
    }
    Ok(m.logit(p).sigmoid())
}

/// `log(1 + e^z) - y z`, the BCE of `sigmoid(z)` without clamping.
fn bce_from_logit<T: Scalar>(z: T, y: T) -> T {
    let softplus = if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

/// Mean BCE plus `(l2 / 2) |w|^2`.
pub fn meta_objective<T: Scalar>(m: &MetaLearner<T>, x: &PredictionMatrix<T>, labels: &[Label], l2: T) -> T {
    let data: T = x
        .rows()
        .zip(labels)
        .map(|(row, &y)| bce_from_logit(m.logit(row), y.target()))
        .sum();
    let ridge: T = m.w.iter().map(|&w| w * w).sum();
    data / T::from_count(x.n()) + l2 / T::lit(2.0) * ridge
}

/// Gradient of [`meta_objective`].
pub fn meta_gradient<T: Scalar>(m: &MetaLearner<T>, x: &PredictionMatrix<T>, labels: &[Label], l2: T) -> MetaLearner<T> {
    let mut g = MetaLearner::zeros(m.w.len());
    for (row, &y) in x.rows().zip(labels) {
        let r = m.logit(row).sigmoid() - y.target();
        for (gw, &v) in g.w.iter_mut().zip(row) {
            *gw += r * v;
        }
        g.b += r;
    }
    let n = T::from_count(x.n());
    for (gw, &w) in g.w.iter_mut().zip(&m.w) {
        *gw = *gw / n + l2 * w;
    }
    g.b /= n;
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaFitOptions<T> {
    pub epochs: usize,
    pub learning_rate: T,
    pub l2: T,
}

impl<T: Scalar> Default for MetaFitOptions<T> {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: T::one(),
            l2: T::lit(1e-3),
        }
    }
}

/// Full-batch gradient descent from zero parameters. Every epoch starts at
/// the configured rate and halves it (up to 30 times) until the objective
/// does not increase; training stops early once no step helps.
pub fn train_meta<T: Scalar>(x: &PredictionMatrix<T>, labels: &[Label], opts: &MetaFitOptions<T>) -> Result<MetaLearner<T>> {
    if x.n() != labels.len() {
        return Err(Error::shape(
            "train_meta",
            format!("{} rows vs {} labels", x.n(), labels.len()),
        ));
    }
    if x.n() == 0 {
        return Err(Error::invalid("train_meta needs at least one row"));
    }
    if !(opts.learning_rate > T::zero()) || !(opts.l2 >= T::zero()) {
        return Err(Error::invalid("meta learning rate must be positive and l2 nonnegative"));
    }
    let mut m = MetaLearner::zeros(x.k());
    let mut loss = meta_objective(&m, x, labels, opts.l2);
    for epoch in 0..opts.epochs {
        let g = meta_gradient(&m, x, labels, opts.l2);
        let mut lr = opts.learning_rate;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = MetaLearner {
                w: m.w.iter().zip(&g.w).map(|(&w, &d)| w - lr * d).collect(),
                b: m.b - lr * g.b,
            };
            let cand_loss = meta_objective(&cand, x, labels, opts.l2);
            if !cand_loss.is_finite() {
                return Err(Error::numeric(format!("meta-learner loss is {cand_loss} at epoch {epoch}")));
            }
            if cand_loss <= loss {
                accepted = Some((cand, cand_loss));
                break;
            }
            lr /= T::lit(2.0);
        }
        let Some((cand, cand_loss)) = accepted else {
            break;
        };
        let moved = cand
            .w
            .iter()
            .zip(&m.w)
            .map(|(a, b)| (*a - *b).abs())
            .fold((cand.b - m.b).abs(), T::max);
        m = cand;
        loss = cand_loss;
        if moved == T::zero() {
            break;
        }
    }
    Ok(m)
}

/// Final probability from the weighted-average and stacked components.
pub fn hybrid_predict<T: Scalar>(alpha: &WeightVector<T>, m: &MetaLearner<T>, p: &[T], rule: CombineRule) -> Result<T> {
    let weighted = weighted_predict(alpha, p)?;
    let stacked = meta_predict(m, p)?;
    Ok(combine(weighted, stacked, rule))
}

pub fn combine<T: Scalar>(weighted: T, stacked: T, rule: CombineRule) -> T {
    match rule {
        CombineRule::Mean => (weighted + stacked) / T::lit(2.0),
        CombineRule::WeightedOnly => weighted,
        CombineRule::StackedOnly => stacked,
    }
}

/// Produces base-learner probabilities for cross-validation.
///
/// Indices are positions in the training list handed to
/// [`oof_predictions`]. Implementations must be deterministic in
/// `(model, fold)`.
pub trait BaseFactory<T>: Sync {
    fn n_models(&self) -> usize;

    /// Trains base model `model` on `train` and returns its probabilities for
    /// each of `predict`, in order.
    fn fit_predict(&self, model: usize, fold: usize, train: &[usize], predict: &[usize]) -> Result<Vec<T>>;
}

/// Out-of-fold prediction table with the provenance of every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OofTable<T> {
    pub matrix: PredictionMatrix<T>,
    /// Fold of each row.
    pub fold_of: Vec<usize>,
    /// Training positions used by the models of each fold.
    pub fold_train: Vec<Vec<usize>>,
}

impl<T: Scalar> OofTable<T> {
    /// Fold and training set of the models that predicted row `i`.
    pub fn provenance(&self, i: usize) -> (usize, &[usize]) {
        let f = self.fold_of[i];
        (f, &self.fold_train[f])
    }

    /// Rows whose producing models saw them during training.
    pub fn leakage_violations(&self) -> Vec<usize> {
        (0..self.matrix.n())
            .filter(|&i| self.provenance(i).1.binary_search(&i).is_ok())
            .collect()
    }

    /// `id,fold,p1..pK,label` CSV.
    pub fn to_csv(&self, ids: &[String], labels: &[Label]) -> Result<String> {
        if ids.len() != self.matrix.n() || labels.len() != self.matrix.n() {
            return Err(Error::shape("oof csv", "ids/labels do not match table rows"));
        }
        let mut out = String::from("id,fold");
        for j in 1..=self.matrix.k() {
            out.push_str(&format!(",p{j}"));
        }
        out.push_str(",label\n");
        for (i, row) in self.matrix.rows().enumerate() {
            out.push_str(&format!("{},{}", ids[i], self.fold_of[i]));
            for p in row {
                out.push_str(&format!(",{}", p.as_f64()));
            }
            out.push_str(&format!(",{}\n", labels[i].value()));
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, ids: &[String], labels: &[Label]) -> Result<()> {
        std::fs::write(path, self.to_csv(ids, labels)?).map_err(|e| Error::io(path, e))
    }
}

/// Trains one model per (base model, fold) on everything outside the fold
/// and predicts the fold. Jobs may run in parallel; results land at fixed
/// positions so the table does not depend on scheduling.
pub fn oof_predictions<T: Scalar, F: BaseFactory<T>>(folds: &FoldAssignment, factory: &F) -> Result<OofTable<T>> {
    let n = folds.ids().len();
    let k_models = factory.n_models();
    if k_models == 0 {
        return Err(Error::invalid("factory provides no base models"));
    }
    let fold_of = folds.folds().to_vec();
    let members: Vec<Vec<usize>> = (0..folds.k()).map(|f| folds.members(f)).collect();
    let fold_train: Vec<Vec<usize>> = (0..folds.k())
        .map(|f| (0..n).filter(|&i| fold_of[i] != f).collect())
        .collect();

    let jobs: Vec<(usize, usize)> = (0..k_models)
        .flat_map(|m| (0..folds.k()).map(move |f| (m, f)))
        .collect();
    let results: Vec<Result<Vec<T>>> = jobs
        .par_iter()
        .map(|&(m, f)| {
            let out = factory
                .fit_predict(m, f, &fold_train[f], &members[f])
                .map_err(|e| Error::invalid(format!("fold {f}, model {m}: {e}")))?;
            if out.len() != members[f].len() {
                return Err(Error::shape(
                    format!("fold {f}, model {m}"),
                    format!("{} predictions for {} samples", out.len(), members[f].len()),
                ));
            }
            Ok(out)
        })
        .collect();

    let mut data = vec![T::nan(); n * k_models];
    for (&(m, f), res) in jobs.iter().zip(results) {
        for (&i, p) in members[f].iter().zip(res?) {
            data[i * k_models + m] = p;
        }
    }
    let matrix = PredictionMatrix::new(n, k_models, data)?;
    Ok(OofTable {
        matrix,
        fold_of,
        fold_train,
    })
}
