//! Character identification over per-region feature vectors.
//!
//! The trainable model is multinomial logistic regression fitted by full-batch gradient
//! descent on L2-regularized cross-entropy. Each ensemble member draws its own random
//! validation split and initialization, keeps the weights of its best validation epoch,
//! and the members' softmax outputs are averaged at prediction time.

mod assignment;
mod kmeans;

pub use assignment::{max_weight_assignment, optimal_cluster_mapping, ClusterMapping};
pub use kmeans::{kmeans, KMeansResult};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{CorpusError, ValidationError};
use crate::model::{Confidence, Label, LabelAssignment};
use crate::seed;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClassifierError {
    #[error("no pseudo-labels to train on")]
    EmptyTraining,
    #[error("pseudo-labels contain a single class ({0:?}); softmax training needs at least two")]
    DegenerateTraining(String),
    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("pseudo-labeled region {0:?} has no feature vector")]
    MissingFeatures(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("k-means needs k <= number of points (k = {k}, points = {points})")]
    TooFewPoints { k: usize, points: usize },
}

/// Character region id → feature vector of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<(), ValidationError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(ValidationError::at(
                id,
                format!("vector has dimension {}, table has {}", vector.len(), self.dim),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ValidationError::at(id, "vector contains a non-finite value"));
        }
        self.rows.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub val_fraction: f64,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            l2: 1e-3,
            val_fraction: 0.1,
            ensemble_size: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ClassifierError::InvalidConfig(format!(
                "val_fraction {} must lie in (0, 1)",
                self.val_fraction
            )));
        }
        if self.ensemble_size == 0 {
            return Err(ClassifierError::InvalidConfig("ensemble_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClassifierError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ClassifierError::InvalidConfig("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Row-major `classes × (dim + 1)` weight matrix; the last column is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub classes: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Weights {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Weights {
            classes,
            dim,
            data: vec![0.0; classes * (dim + 1)],
        }
    }

    fn row(&self, k: usize) -> &[f64] {
        let w = self.dim + 1;
        &self.data[k * w..(k + 1) * w]
    }

    /// Logits `W·[x; 1]`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let row = self.row(k);
                row[..self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[self.dim]
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

/// Labeled examples for one gradient evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[k] - lse
}

/// Mean cross-entropy plus `l2 / 2 · ‖W‖²` over non-bias weights.
pub fn loss(weights: &Weights, batch: Batch<'_>, l2: f64) -> f64 {
    let n = batch.features.len().max(1) as f64;
    let ce: f64 = batch
        .features
        .iter()
        .zip(batch.labels)
        .map(|(x, &y)| -log_softmax_at(&weights.logits(x), y))
        .sum::<f64>()
        / n;
    let w = weights.dim + 1;
    let reg: f64 = weights
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| i % w != weights.dim)
        .map(|(_, v)| v * v)
        .sum();
    ce + 0.5 * l2 * reg
}

/// Exact gradient of [`loss`] with respect to every weight.
pub fn gradient(weights: &Weights, batch: Batch<'_>, l2: f64) -> Weights {
    let n = batch.features.len().max(1) as f64;
    let w = weights.dim + 1;
    let mut g = Weights::zeros(weights.classes, weights.dim);
    for (x, &y) in batch.features.iter().zip(batch.labels) {
        let p = weights.probabilities(x);
        for (k, pk) in p.iter().enumerate() {
            let delta = (pk - if k == y { 1.0 } else { 0.0 }) / n;
            let row = &mut g.data[k * w..(k + 1) * w];
            for (gj, xj) in row[..weights.dim].iter_mut().zip(x) {
                *gj += delta * xj;
            }
            row[weights.dim] += delta;
        }
    }
    for (i, gi) in g.data.iter_mut().enumerate() {
        if i % w != weights.dim {
            *gi += l2 * weights.data[i];
        }
    }
    g
}

fn accuracy(weights: &Weights, batch: Batch<'_>) -> f64 {
    if batch.features.is_empty() {
        return 0.0;
    }
    let correct = batch
        .features
        .iter()
        .zip(batch.labels)
        .filter(|(x, &y)| argmax(&weights.logits(x)) == y)
        .count();
    correct as f64 / batch.features.len() as f64
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of fitting one ensemble member.
#[derive(Debug, Clone)]
pub struct MemberFit {
    pub weights: Weights,
    /// Training loss before the first epoch and after each epoch.
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
}

/// Gradient descent with a halve-on-increase step size: a step that would raise the
/// training loss is rejected and the learning rate halved. The returned weights are those
/// of the epoch with the best validation accuracy (ties: lower validation loss, then later).
pub fn fit_member(
    train: Batch<'_>,
    validation: Batch<'_>,
    classes: usize,
    config: &TrainConfig,
    init_seed: u64,
) -> MemberFit {
    let dim = train.features.first().map_or(0, Vec::len);
    let mut rng = seed::rng(init_seed, &[]);
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let mut weights = Weights {
        classes,
        dim,
        data: (0..classes * (dim + 1)).map(|_| normal.sample(&mut rng)).collect(),
    };
    let select = if validation.features.is_empty() {
        train
    } else {
        validation
    };
    let score = |w: &Weights| (accuracy(w, select), loss(w, select, 0.0));

    let mut lr = config.learning_rate;
    let mut current = loss(&weights, train, config.l2);
    let mut history = vec![current];
    let (mut best_acc, mut best_loss) = score(&weights);
    let mut best = weights.clone();
    let mut best_epoch = 0;
    for epoch in 1..=config.epochs {
        let g = gradient(&weights, train, config.l2);
        let candidate = Weights {
            data: weights.data.iter().zip(&g.data).map(|(w, d)| w - lr * d).collect(),
            ..weights.clone()
        };
        let next = loss(&candidate, train, config.l2);
        if next <= current {
            weights = candidate;
            current = next;
        } else {
            lr *= 0.5;
        }
        history.push(current);
        let (acc, vloss) = score(&weights);
        if acc > best_acc || (acc == best_acc && vloss <= best_loss) {
            best_acc = acc;
            best_loss = vloss;
            best = weights.clone();
            best_epoch = epoch;
        }
    }
    MemberFit {
        weights: best,
        loss_history: history,
        best_epoch,
    }
}

/// Trained softmax ensemble over a fixed class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub classes: Vec<String>,
    #[serde(rename = "d")]
    pub dim: usize,
    /// One row-major `classes × (d + 1)` array per member, bias last.
    pub ensemble: Vec<Vec<f64>>,
}

impl ClassifierModel {
    fn member(&self, i: usize) -> Weights {
        Weights {
            classes: self.classes.len(),
            dim: self.dim,
            data: self.ensemble[i].clone(),
        }
    }

    /// Ensemble-averaged class probabilities.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        if x.len() != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let k = self.classes.len();
        let mut avg = vec![0.0; k];
        for i in 0..self.ensemble.len() {
            for (a, p) in avg.iter_mut().zip(self.member(i).probabilities(x)) {
                *a += p;
            }
        }
        let m = self.ensemble.len() as f64;
        avg.iter_mut().for_each(|a| *a /= m);
        Ok(avg)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.classes.is_empty() || self.ensemble.is_empty() {
            return Err(ValidationError::new("model needs at least one class and one member"));
        }
        let expected = self.classes.len() * (self.dim + 1);
        for (i, w) in self.ensemble.iter().enumerate() {
            if w.len() != expected {
                return Err(ValidationError::at(
                    format!("ensemble[{}]", i),
                    format!("has {} weights, expected {}", w.len(), expected),
                ));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(ValidationError::at(format!("ensemble[{}]", i), "non-finite weight"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        crate::io::write_file(path.as_ref(), &crate::io::json_pretty(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let model: ClassifierModel = crate::io::parse_json(path, &crate::io::read_file(path)?)?;
        model.validate().map_err(|e| CorpusError::Invalid {
            path: path.to_path_buf(),
            error: e,
        })?;
        Ok(model)
    }
}

fn collect_examples(
    features: &FeatureTable,
    labels: &BTreeMap<String, String>,
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<usize>), ClassifierError> {
    if labels.is_empty() {
        return Err(ClassifierError::EmptyTraining);
    }
    let classes: Vec<String> = labels.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut xs = Vec::with_capacity(labels.len());
    let mut ys = Vec::with_capacity(labels.len());
    for (id, name) in labels {
        let x = features
            .get(id)
            .ok_or_else(|| ClassifierError::MissingFeatures(id.clone()))?;
        xs.push(x.to_vec());
        ys.push(classes.binary_search(name).expect("class collected above"));
    }
    Ok((classes, xs, ys))
}

/// Per-dimension mean and standard deviation (1.0 where a dimension is constant).
fn standardization(xs: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for x in xs {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in sd.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

/// Picks `count` validation indices from a shuffled order, never removing the last
/// training example of a class.
fn split_validation(labels: &[usize], classes: usize, count: usize, order: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut remaining = vec![0usize; classes];
    for &y in labels {
        remaining[y] += 1;
    }
    let mut val = Vec::new();
    let mut train = Vec::new();
    for &i in order {
        if val.len() < count && remaining[labels[i]] > 1 {
            remaining[labels[i]] -= 1;
            val.push(i);
        } else {
            train.push(i);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains the softmax ensemble on pseudo-labels (`region id → name`).
pub fn train(
    features: &FeatureTable,
    pseudo_labels: &BTreeMap<String, String>,
    config: &TrainConfig,
) -> Result<ClassifierModel, ClassifierError> {
    config.validate()?;
    let (classes, xs, ys) = collect_examples(features, pseudo_labels)?;
    if classes.len() < 2 {
        return Err(ClassifierError::DegenerateTraining(classes[0].clone()));
    }
    let dim = features.dim();
    let (mean, sd) = standardization(&xs, dim);
    let zs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let val_count = (zs.len() as f64 * config.val_fraction).floor() as usize;

    let ensemble = (0..config.ensemble_size)
        .map(|member| {
            let mut order: Vec<usize> = (0..zs.len()).collect();
            order.shuffle(&mut seed::rng(config.seed, &[member as u64, 1]));
            let (tr, va) = split_validation(&ys, classes.len(), val_count, &order);
            let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                (
                    idx.iter().map(|&i| zs[i].clone()).collect(),
                    idx.iter().map(|&i| ys[i]).collect(),
                )
            };
            let (tx, ty) = pick(&tr);
            let (vx, vy) = pick(&va);
            let fit = fit_member(
                Batch {
                    features: &tx,
                    labels: &ty,
                },
                Batch {
                    features: &vx,
                    labels: &vy,
                },
                classes.len(),
                config,
                seed::derive(config.seed, &[member as u64, 2]),
            );
            unstandardize(&fit.weights, &mean, &sd)
        })
        .collect();
    Ok(ClassifierModel { classes, dim, ensemble })
}

/// Folds `z = (x - mean) / sd` into the weights so the model consumes raw features.
fn unstandardize(w: &Weights, mean: &[f64], sd: &[f64]) -> Vec<f64> {
    let width = w.dim + 1;
    let mut out = vec![0.0; w.data.len()];
    for k in 0..w.classes {
        let row = &w.data[k * width..(k + 1) * width];
        let mut bias = row[w.dim];
        for j in 0..w.dim {
            out[k * width + j] = row[j] / sd[j];
            bias -= row[j] * mean[j] / sd[j];
        }
        out[k * width + w.dim] = bias;
    }
    out
}

/// Class centroids with a softmax over negative scaled squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    pub classes: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    /// Mean squared distance of training points to their own centroid; softmax temperature.
    pub spread: f64,
}

impl NearestCentroid {
    pub fn fit(features: &FeatureTable, labels: &BTreeMap<String, String>) -> Result<Self, ClassifierError> {
        let (classes, xs, ys) = collect_examples(features, labels)?;
        let dim = features.dim();
        let mut centroids = vec![vec![0.0; dim]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (x, &y) in xs.iter().zip(&ys) {
            counts[y] += 1;
            for (c, v) in centroids[y].iter_mut().zip(x) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let spread = xs.iter().zip(&ys).map(|(x, &y)| sq_dist(x, &centroids[y])).sum::<f64>() / xs.len() as f64;
        Ok(NearestCentroid {
            classes,
            centroids,
            spread: if spread > 1e-12 { spread } else { 1.0 },
        })
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        let dim = self.centroids[0].len();
        if x.len() != dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -sq_dist(x, c) / (2.0 * self.spread))
            .collect();
        Ok(softmax(&logits))
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Any fitted character classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum CharacterModel {
    Softmax(ClassifierModel),
    Centroid(NearestCentroid),
}

impl CharacterModel {
    pub fn classes(&self) -> &[String] {
        match self {
            CharacterModel::Softmax(m) => &m.classes,
            CharacterModel::Centroid(m) => &m.classes,
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        match self {
            CharacterModel::Softmax(m) => m.probabilities(x),
            CharacterModel::Centroid(m) => m.probabilities(x),
        }
    }
}

/// Labels every region of `features` with the argmax class and its probability.
pub fn predict(model: &CharacterModel, features: &FeatureTable) -> Result<LabelAssignment, ClassifierError> {
    let classes = model.classes();
    features
        .iter()
        .map(|(id, x)| {
            let p = model.probabilities(x)?;
            let k = argmax(&p);
            Ok((
                id.to_string(),
                Label::named(classes[k].clone(), Confidence::Prob(p[k].clamp(0.0, 1.0))),
            ))
        })
        .collect()
}
