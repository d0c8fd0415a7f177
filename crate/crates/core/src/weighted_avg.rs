//! Convex combination of base-learner probabilities.
//!
//! The weights live on the probability simplex and are fitted by minimizing
//! mean binary cross-entropy on validation predictions with projected
//! gradient descent. Each iteration starts from the configured step size and
//! halves it (at most 30 times) until the objective does not increase, so the
//! accepted iterates are feasible and monotone in loss.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `n x k` row-major matrix of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix<T> {
    n: usize,
    k: usize,
    data: Vec<T>,
}

impl<T: Scalar> PredictionMatrix<T> {
    pub fn new(n: usize, k: usize, data: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::shape("prediction matrix", "needs at least one column"));
        }
        if data.len() != n * k {
            return Err(Error::shape(
                "prediction matrix",
                format!("{n}x{k} needs {} entries, got {}", n * k, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid(format!(
                "prediction ({}, {}) = {} outside [0, 1]",
                pos / k,
                pos % k,
                data[pos]
            )));
        }
        Ok(Self { n, k, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("prediction matrix", "ragged rows"));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    /// Builds a matrix from per-model columns.
    pub fn from_columns(cols: &[Vec<T>]) -> Result<Self> {
        let n = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::shape("prediction matrix", "columns differ in length"));
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            data.extend(cols.iter().map(|c| c[i]));
        }
        Self::new(n, cols.len(), data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.k)
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.k);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: rows.len(),
            k: self.k,
            data,
        }
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector<T> {
    alpha: Vec<T>,
}

impl<T: Scalar> WeightVector<T> {
    fn sum_tolerance(k: usize) -> T {
        T::lit(1e-12).max(T::epsilon() * T::from_count(4 * k.max(1)))
    }

    pub fn new(alpha: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("weight vector must be nonempty"));
        }
        if alpha.iter().any(|a| !(*a >= T::zero())) {
            return Err(Error::invalid(format!("weights must be nonnegative: {alpha:?}")));
        }
        let sum: T = alpha.iter().copied().sum();
        if (sum - T::one()).abs() > Self::sum_tolerance(alpha.len()) {
            return Err(Error::invalid(format!("weights must sum to 1, got {sum}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(k: usize) -> Self {
        let w = T::one() / T::from_count(k);
        Self { alpha: vec![w; k] }
    }

    pub fn one_hot(k: usize, at: usize) -> Self {
        let mut alpha = vec![T::zero(); k];
        alpha[at] = T::one();
        Self { alpha }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// `alpha . p`.
pub fn weighted_predict<T: Scalar>(alpha: &WeightVector<T>, p: &[T]) -> Result<T> {
    if alpha.len() != p.len() {
        return Err(Error::shape(
            "weighted_predict",
            format!("{} weights vs {} probabilities", alpha.len(), p.len()),
        ));
    }
    let v: T = alpha.alpha.iter().zip(p).map(|(&a, &x)| a * x).sum();
    // rounding can push a convex combination a hair outside [0, 1]
    Ok(v.max(T::zero()).min(T::one()))
}

/// Binary cross-entropy with `p_hat` clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Scalar>(p_hat: T, y: Label) -> T {
    let eps = T::prob_eps();
    let p = p_hat.max(eps).min(T::one() - eps);
    if y.is_positive() {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// `d bce / d p_hat`, zero where the clamp is active.
fn bce_slope<T: Scalar>(p_hat: T, y: Label) -> T {
    let eps = T::prob_eps();
    if p_hat < eps || p_hat > T::one() - eps {
        return T::zero();
    }
    if y.is_positive() {
        -T::one() / p_hat
    } else {
        T::one() / (T::one() - p_hat)
    }
}

/// Euclidean projection onto the simplex by the sort-and-threshold rule.
pub fn project_simplex<T: Scalar>(v: &[T]) -> WeightVector<T> {
    assert!(!v.is_empty(), "projection of an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumsum = T::zero();
    let mut theta = T::zero();
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - T::one()) / T::from_count(j + 1);
        if u - t > T::zero() {
            theta = t;
        }
    }
    let alpha = v.iter().map(|&x| (x - theta).max(T::zero())).collect();
    WeightVector { alpha }
}

fn check_inputs<T: Scalar>(preds: &PredictionMatrix<T>, labels: &[Label], k: usize) -> Result<()> {
    if preds.n() != labels.len() {
        return Err(Error::shape(
            "weight fit",
            format!("{} prediction rows vs {} labels", preds.n(), labels.len()),
        ));
    }
    if preds.n() == 0 {
        return Err(Error::invalid("weight fit needs at least one row"));
    }
    if preds.k() != k {
        return Err(Error::shape("weight fit", format!("{} columns vs {} weights", preds.k(), k)));
    }
    Ok(())
}

/// Mean BCE of the weighted prediction over the rows.
pub fn mean_bce<T: Scalar>(alpha: &WeightVector<T>, preds: &PredictionMatrix<T>, labels: &[Label]) -> Result<T> {
    check_inputs(preds, labels, alpha.len())?;
    let mut total = T::zero();
    for (row, &y) in preds.rows().zip(labels) {
        total += bce_loss(weighted_predict(alpha, row)?, y);
    }
    Ok(total / T::from_count(preds.n()))
}

/// Gradient of [`mean_bce`] with respect to the weights. Evaluated at any
/// real vector, not only feasible ones.
pub fn mean_bce_gradient<T: Scalar>(alpha: &[T], preds: &PredictionMatrix<T>, labels: &[Label]) -> Result<Vec<T>> {
    check_inputs(preds, labels, alpha.len())?;
    let mut grad = vec![T::zero(); alpha.len()];
    for (row, &y) in preds.rows().zip(labels) {
        let p_hat: T = alpha.iter().zip(row).map(|(&a, &x)| a * x).sum();
        let slope = bce_slope(p_hat, y);
        for (g, &x) in grad.iter_mut().zip(row) {
            *g += slope * x;
        }
    }
    let n = T::from_count(preds.n());
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFitOptions<T> {
    pub steps: usize,
    pub step_size: T,
    pub max_halvings: usize,
    /// Stop once no weight moves by more than this.
    pub tolerance: T,
}

impl<T: Scalar> Default for WeightFitOptions<T> {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: T::lit(0.5),
            max_halvings: 30,
            tolerance: T::lit(1e-10),
        }
    }
}

/// Fitted weights, persisted as `{"alpha":[...],"val_bce":x,"steps_used":n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit<T> {
    pub alpha: WeightVector<T>,
    pub val_bce: T,
    pub steps_used: usize,
}

pub fn optimize_weights<T: Scalar>(
    preds: &PredictionMatrix<T>,
    labels: &[Label],
    opts: &WeightFitOptions<T>,
) -> Result<WeightFit<T>> {
    optimize_weights_traced(preds, labels, opts, |_, _| {})
}

/// Like [`optimize_weights`], reporting every accepted iterate and its loss.
pub fn optimize_weights_traced<T: Scalar>(
    preds: &PredictionMatrix<T>,
    labels: &[Label],
    opts: &WeightFitOptions<T>,
    mut on_step: impl FnMut(&WeightVector<T>, T),
) -> Result<WeightFit<T>> {
    if !(opts.step_size > T::zero()) {
        return Err(Error::invalid("step size must be positive"));
    }
    let k = preds.k();
    let mut alpha = WeightVector::uniform(k);
    let mut loss = mean_bce(&alpha, preds, labels)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("initial validation loss is {loss}")));
    }
    let mut steps_used = 0;
    for step in 0..opts.steps {
        let grad = mean_bce_gradient(alpha.as_slice(), preds, labels)?;
        if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("gradient component {j} is {} at step {step}", grad[j])));
        }
        let mut eta = opts.step_size;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let moved: Vec<T> = alpha.as_slice().iter().zip(&grad).map(|(&a, &g)| a - eta * g).collect();
            let cand = project_simplex(&moved);
            let cand_loss = mean_bce(&cand, preds, labels)?;
            if !cand_loss.is_finite() {
                return Err(Error::numeric(format!("validation loss is {cand_loss} at step {step}")));
            }
            if cand_loss <= loss {
                accepted = Some((cand, cand_loss));
                break;
            }
            eta /= T::lit(2.0);
        }
        let Some((cand, cand_loss)) = accepted else {
            break;
        };
        let delta = cand
            .as_slice()
            .iter()
            .zip(alpha.as_slice())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        alpha = cand;
        loss = cand_loss;
        steps_used += 1;
        on_step(&alpha, loss);
        if delta < opts.tolerance {
            break;
        }
    }
    Ok(WeightFit {
        alpha,
        val_bce: loss,
        steps_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::{Negative as N, Positive as P};

    fn wv(a: &[f64]) -> WeightVector<f64> {
        WeightVector::new(a.to_vec()).unwrap()
    }

    #[test]
    fn weighted_predict_examples() {
        let p = [0.1, 0.7, 0.4];
        for k in 0..3 {
            assert_eq!(weighted_predict(&WeightVector::one_hot(3, k), &p).unwrap(), p[k]);
        }
        let c = 0.3;
        let u = WeightVector::<f64>::uniform(4);
        assert!((weighted_predict(&u, &[c; 4]).unwrap() - c).abs() < 1e-15);
        assert!((weighted_predict(&wv(&[0.6, 0.4]), &[0.5, 1.0]).unwrap() - 0.7).abs() < 1e-15);
        assert!(weighted_predict(&u, &[0.5; 3]).is_err());
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.5, -0.5]).is_err());
        assert!(WeightVector::<f64>::new(vec![]).is_err());
        assert!(WeightVector::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, P) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0, P) <= 1e-11);
        assert!(bce_loss(0.0, N) <= 1e-11);
        assert!((bce_loss(0.9, N) - 10f64.ln()).abs() < 1e-12);
        assert!(bce_loss(0.0f64, P).is_finite());
        assert!(bce_loss(1.0f32, N).is_finite());
    }

    fn brute_force_projection_2d(v: [f64; 2]) -> [f64; 2] {
        // grid over a in [0, 1], point (a, 1 - a)
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100_000 {
            let a = i as f64 / 100_000.0;
            let d = (a - v[0]).powi(2) + (1.0 - a - v[1]).powi(2);
            if d < best.0 {
                best = (d, a);
            }
        }
        [best.1, 1.0 - best.1]
    }

    #[test]
    fn projection_examples() {
        let on: [f64; 3] = [0.2, 0.5, 0.3];
        for (a, b) in project_simplex(&on).as_slice().iter().zip(on) {
            assert!((a - b).abs() < 1e-15);
        }
        let u = project_simplex(&[0.2f64, 0.2, 0.2]);
        assert!(u.as_slice().iter().all(|&a| (a - 1.0f64 / 3.0).abs() < 1e-15));
        let p = project_simplex(&[1.2, -0.2]);
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        assert_eq!(brute_force_projection_2d([1.2, -0.2]), [1.0, 0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let n = rng.random_range(5..40);
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.02..0.98)).collect();
            let preds = PredictionMatrix::new(n, k, data).unwrap();
            let labels: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.random())).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let alpha = project_simplex(&raw);
            let grad = mean_bce_gradient(alpha.as_slice(), &preds, &labels).unwrap();
            let f = |a: &[f64]| -> f64 {
                preds
                    .rows()
                    .zip(&labels)
                    .map(|(r, &y)| bce_loss(a.iter().zip(r).map(|(x, p)| x * p).sum::<f64>(), y))
                    .sum::<f64>()
                    / n as f64
            };
            let h = 1e-6;
            for j in 0..k {
                let mut up = alpha.as_slice().to_vec();
                let mut dn = up.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-8);
                assert!(rel <= 1e-5, "component {j}: analytic {} vs fd {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn perfect_column_wins() {
        let labels: Vec<Label> = (0..40).map(|i| Label::from_bool(i % 3 == 0)).collect();
        let cols = vec![labels.iter().map(|l| l.target::<f64>()).collect(), vec![0.5; 40]];
        let preds = PredictionMatrix::from_columns(&cols).unwrap();

        // the objective is strictly decreasing in alpha_1 on a grid
        let grid: Vec<f64> = (0..=100)
            .map(|i| mean_bce(&wv(&[i as f64 / 100.0, 1.0 - i as f64 / 100.0]), &preds, &labels).unwrap())
            .collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));

        let fit = optimize_weights(&preds, &labels, &WeightFitOptions::default()).unwrap();
        assert!(fit.alpha.as_slice()[0] >= 0.99, "{:?}", fit.alpha);
    }

    #[test]
    fn identical_columns_stay_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<Label> = (0..30).map(|_| Label::from_bool(rng.random())).collect();
        let preds = PredictionMatrix::from_columns(&[col.clone(), col.clone(), col]).unwrap();
        let fit = optimize_weights(&preds, &labels, &WeightFitOptions::default()).unwrap();
        for &a in fit.alpha.as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_is_uniform() {
        let preds = PredictionMatrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let opts = WeightFitOptions {
            steps: 0,
            ..Default::default()
        };
        let fit = optimize_weights(&preds, &[P, N], &opts).unwrap();
        assert_eq!(fit.alpha, WeightVector::uniform(2));
        assert_eq!(fit.steps_used, 0);
    }

    #[test]
    fn fit_json_schema() {
        let fit = WeightFit {
            alpha: wv(&[0.25, 0.75]),
            val_bce: 0.5,
            steps_used: 3,
        };
        let json = serde_json::to_string(&fit).unwrap();
        assert_eq!(json, r#"{"alpha":[0.25,0.75],"val_bce":0.5,"steps_used":3}"#);
        let back: WeightFit<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn works_in_single_precision() {
        let preds = PredictionMatrix::<f32>::new(3, 2, vec![0.9, 0.4, 0.1, 0.6, 0.8, 0.5]).unwrap();
        let fit = optimize_weights(&preds, &[P, N, P], &WeightFitOptions::default()).unwrap();
        let s: f32 = fit.alpha.as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_optimal(v in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
            let p = project_simplex(&v);
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.as_slice().iter().all(|&a| a >= 0.0));
            // KKT: v - p = theta on the support, <= theta off it
            let support: Vec<usize> = (0..v.len()).filter(|&i| p.as_slice()[i] > 0.0).collect();
            let theta = v[support[0]] - p.as_slice()[support[0]];
            for i in 0..v.len() {
                if p.as_slice()[i] > 0.0 {
                    prop_assert!((v[i] - p.as_slice()[i] - theta).abs() < 1e-12);
                } else {
                    prop_assert!(v[i] <= theta + 1e-12);
                }
            }
        }

        #[test]
        fn every_iterate_is_feasible_and_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(2..5);
            let n = rng.random_range(3..30);
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.0..1.0)).collect();
            let preds = PredictionMatrix::new(n, k, data).unwrap();
            let labels: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.random())).collect();
            let start = mean_bce(&WeightVector::uniform(k), &preds, &labels).unwrap();
            let mut prev = start;
            let mut ok = true;
            let fit = optimize_weights_traced(&preds, &labels, &WeightFitOptions::default(), |a, l| {
                let s: f64 = a.as_slice().iter().sum();
                ok &= (s - 1.0).abs() <= 1e-12 && a.as_slice().iter().all(|&x| x >= 0.0) && l <= prev;
                prev = l;
            }).unwrap();
            prop_assert!(ok);
            prop_assert!(fit.val_bce <= start);
        }

        #[test]
        fn convex_combination_stays_in_unit_interval(
            raw in proptest::collection::vec(0.0f64..1.0, 5),
            p in proptest::collection::vec(0.0f64..=1.0, 5),
        ) {
            let a = project_simplex(&raw);
            let v = weighted_predict(&a, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
