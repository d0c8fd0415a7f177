//! Samples, labels, and subject-grouped stratified partitioning.
//!
//! All partitioning is done at subject level: every slice of one subject lands
//! in the same split partition and the same cross-validation fold. Within each
//! class, subjects are ordered by id and then shuffled with the caller's seed,
//! so results are a pure function of `(samples, seed)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Binary class. `Positive` is the class of interest (e.g. the disease class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn value(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// 0 or 1 in the scalar type, as used by loss functions.
    pub fn target<T: Scalar>(self) -> T {
        if self.is_positive() {
            T::one()
        } else {
            T::zero()
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.value()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T> {
    Image(Image<T>),
    /// A precomputed row of base-learner probabilities.
    Predictions(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<T> {
    pub subject_id: String,
    pub slice_index: u32,
    pub payload: Payload<T>,
    pub label: Label,
}

impl<T: Scalar> LabeledSample<T> {
    pub fn image(&self) -> Option<&Image<T>> {
        match &self.payload {
            Payload::Image(img) => Some(img),
            Payload::Predictions(_) => None,
        }
    }
}

/// Anything that can be partitioned: it belongs to a subject and has a label.
pub trait Grouped {
    fn subject(&self) -> &str;
    fn label(&self) -> Label;
}

impl<T> Grouped for LabeledSample<T> {
    fn subject(&self) -> &str {
        &self.subject_id
    }

    fn label(&self) -> Label {
        self.label
    }
}

/// Minimal grouping key, for data that carries no payload of its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKey {
    pub subject_id: String,
    pub label: Label,
}

impl Grouped for SampleKey {
    fn subject(&self) -> &str {
        &self.subject_id
    }

    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl DatasetSplit {
    pub fn partitions(&self) -> [&[usize]; 3] {
        [&self.train_ids, &self.val_ids, &self.test_ids]
    }
}

/// Fold membership of the training partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    ids: Vec<usize>,
    folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Sample ids in the order they were passed to [`assign_folds`].
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Fold of each id, parallel to [`ids`](Self::ids).
    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    pub fn fold_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id).map(|p| self.folds[p])
    }

    /// Positions (into `ids`) of the members of `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&p| self.folds[p] == fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Builds an assignment from explicit fold ids; used for custom CV schemes.
    pub fn from_parts(k: usize, ids: Vec<usize>, folds: Vec<usize>) -> Result<Self> {
        if ids.len() != folds.len() {
            return Err(Error::shape("fold assignment", "ids and folds differ in length"));
        }
        if k < 2 {
            return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &f in &folds {
            if f >= k {
                return Err(Error::invalid(format!("fold id {f} outside [0, {k})")));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("every fold must be nonempty"));
        }
        Ok(Self { k, ids, folds })
    }
}

struct SubjectGroup {
    label: Label,
    members: Vec<usize>,
}

/// Groups `ids` by subject, rejecting subjects whose slices disagree on label.
fn group_subjects<S: Grouped>(samples: &[S], ids: &[usize]) -> Result<BTreeMap<String, SubjectGroup>> {
    let mut groups: BTreeMap<String, SubjectGroup> = BTreeMap::new();
    for &i in ids {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
        let g = groups.entry(s.subject().to_owned()).or_insert_with(|| SubjectGroup {
            label: s.label(),
            members: Vec::new(),
        });
        if g.label != s.label() {
            return Err(Error::invalid(format!(
                "subject {} has slices with different labels",
                s.subject()
            )));
        }
        g.members.push(i);
    }
    Ok(groups)
}

/// Per-class subject lists, each ordered by subject id then shuffled.
fn shuffled_by_class<'a>(groups: &'a BTreeMap<String, SubjectGroup>, rng: &mut ChaCha8Rng) -> [Vec<&'a str>; 2] {
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, g) in groups {
        by_class[g.label.value() as usize].push(id.as_str());
    }
    for class in by_class.iter_mut() {
        class.shuffle(rng);
    }
    by_class
}

/// Largest-remainder apportionment of `total` seats by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut seats: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - seats.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable: earlier partitions win ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &p in order.iter().cycle() {
        if left == 0 {
            break;
        }
        seats[p] += 1;
        left -= 1;
    }
    seats
}

/// Splits samples into train/validation/test partitions by subject,
/// stratified by label.
///
/// Partition totals follow a largest-remainder apportionment of the subject
/// count, and each class is apportioned so that its per-partition counts track
/// the same ratios while summing to those totals.
pub fn split_dataset<S: Grouped>(samples: &[S], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {sum}")));
    }
    let all: Vec<usize> = (0..samples.len()).collect();
    let groups = group_subjects(samples, &all)?;
    if groups.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 subjects to fill train/val/test, got {}",
            groups.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = shuffled_by_class(&groups, &mut rng);
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("split requires at least one subject of each class"));
    }

    let mut totals = apportion(groups.len(), &ratios);
    // no empty partition
    for p in 0..3 {
        if totals[p] == 0 {
            let donor = (0..3).max_by_key(|&q| (totals[q], std::cmp::Reverse(q))).unwrap();
            totals[donor] -= 1;
            totals[p] += 1;
        }
    }
    let counts = stratified_counts(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), &totals, &ratios);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, subjects) in by_class.iter().enumerate() {
        let mut cursor = subjects.iter();
        for (p, part) in parts.iter_mut().enumerate() {
            for subject in cursor.by_ref().take(counts[class][p]) {
                part.extend_from_slice(&groups[*subject].members);
            }
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    let [train_ids, val_ids, test_ids] = parts;
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Class-by-partition subject counts whose rows sum to the class sizes and
/// whose columns sum to `totals`.
fn stratified_counts(class_sizes: &[usize], totals: &[usize], ratios: &[f64]) -> Vec<Vec<usize>> {
    let parts = totals.len();
    let mut counts: Vec<Vec<usize>> = Vec::with_capacity(class_sizes.len());
    let mut remainders: Vec<(f64, usize, usize)> = Vec::new();
    let mut class_left = Vec::with_capacity(class_sizes.len());
    for (c, &n) in class_sizes.iter().enumerate() {
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        let row: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        class_left.push(n - row.iter().sum::<usize>());
        for p in 0..parts {
            remainders.push((exact[p] - exact[p].floor(), c, p));
        }
        counts.push(row);
    }
    let mut need: Vec<usize> = (0..parts)
        .map(|p| totals[p].saturating_sub(counts.iter().map(|r| r[p]).sum()))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    // Floors can overshoot a total only when a partition was topped up to stay
    // nonempty; take the surplus back from the largest class cell.
    for p in 0..parts {
        while counts.iter().map(|r| r[p]).sum::<usize>() > totals[p] {
            let c = (0..counts.len()).max_by_key(|&c| counts[c][p]).unwrap();
            counts[c][p] -= 1;
            class_left[c] += 1;
        }
        need[p] = totals[p] - counts.iter().map(|r| r[p]).sum::<usize>();
    }
    loop {
        let mut placed = false;
        for &(_, c, p) in &remainders {
            if class_left[c] > 0 && need[p] > 0 {
                counts[c][p] += 1;
                class_left[c] -= 1;
                need[p] -= 1;
                placed = true;
            }
        }
        if !placed {
            break;
        }
    }
    counts
}

/// Assigns the training ids to `k` folds by subject, stratified by label.
///
/// Subjects of class 0 then class 1 (each shuffled) are dealt round-robin,
/// so per-fold subject counts differ by at most one.
pub fn assign_folds<S: Grouped>(samples: &[S], train_ids: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
    }
    let groups = group_subjects(samples, train_ids)?;
    if groups.len() < k {
        return Err(Error::invalid(format!(
            "cannot make {k} folds from {} subjects",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = shuffled_by_class(&groups, &mut rng);

    let mut fold_of_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for (j, subject) in by_class.iter().flatten().enumerate() {
        fold_of_subject.insert(subject, j % k);
    }
    let folds = train_ids
        .iter()
        .map(|&i| fold_of_subject[samples[i].subject()])
        .collect();
    Ok(FoldAssignment {
        k,
        ids: train_ids.to_vec(),
        folds,
    })
}
