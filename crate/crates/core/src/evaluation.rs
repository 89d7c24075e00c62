//! Accuracy metrics, pseudo-label quality, the Easy/Hard title split and IoU-matched
//! zero-shot scoring.
//!
//! Every accuracy keeps its raw counts ([`Rate`]) so titles can be pooled by summing
//! regions rather than averaging per-title ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundingBox, LabelAssignment, NameRoster, RelationshipMatrix};
use crate::propagation::PseudoLabelSet;

pub const EASY_THRESHOLD: f64 = 0.75;
pub const ZERO_SHOT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("metric over an empty region set")]
    EmptyUniverse,
    #[error("pseudo-label for {0} lies outside the evaluated regions")]
    OutsideUniverse(String),
}

/// `correct / total`, with the counts kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub correct: usize,
    pub total: usize,
}

impl Rate {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Rate) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Correct predictions over all ground-truth regions. Missing or ABSTAIN predictions are
/// wrong.
pub fn label_accuracy(
    assignment: &LabelAssignment,
    ground_truth: &BTreeMap<String, String>,
) -> Result<Rate, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyUniverse);
    }
    let correct = ground_truth
        .iter()
        .filter(|(id, gt)| assignment.get(id).and_then(|l| l.name()) == Some(gt.as_str()))
        .count();
    Ok(Rate {
        correct,
        total: ground_truth.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuality {
    pub emitted: usize,
    pub correct: usize,
    pub universe: usize,
    pub precision: f64,
    /// False when nothing was emitted; `precision` is then reported as 0.
    pub precision_defined: bool,
    pub recall: f64,
    /// Correctness of the unthresholded propagation, when it was supplied.
    pub accuracy: Option<f64>,
}

fn count_correct(pseudo: &PseudoLabelSet, truth: &BTreeMap<String, String>) -> usize {
    pseudo
        .iter()
        .filter(|(id, p)| truth.get(*id).is_some_and(|gt| *gt == p.name))
        .count()
}

/// Precision (correct / emitted) and recall (correct / regions) of a pseudo-label set.
///
/// `truth` maps each region of the evaluated universe to its ground-truth name; regions
/// without ground truth are left out of the universe by the caller.
pub fn pseudo_label_quality(
    pseudo: &PseudoLabelSet,
    unthresholded: Option<&PseudoLabelSet>,
    truth: &BTreeMap<String, String>,
) -> Result<PseudoQuality, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyUniverse);
    }
    for set in std::iter::once(pseudo).chain(unthresholded) {
        if let Some(id) = set.keys().find(|id| !truth.contains_key(*id)) {
            return Err(EvalError::OutsideUniverse(id.clone()));
        }
    }
    let correct = count_correct(pseudo, truth);
    let emitted = pseudo.len();
    let accuracy = unthresholded.map(|all| {
        if all.is_empty() {
            0.0
        } else {
            count_correct(all, truth) as f64 / all.len() as f64
        }
    });
    Ok(PseudoQuality {
        emitted,
        correct,
        universe: truth.len(),
        precision: if emitted == 0 {
            0.0
        } else {
            correct as f64 / emitted as f64
        },
        precision_defined: emitted > 0,
        recall: correct as f64 / truth.len() as f64,
        accuracy,
    })
}

/// Fraction of annotated texts whose highest-scoring character is the annotated speaker.
/// Texts without any scored pair count as wrong.
pub fn relationship_accuracy(matrix: &RelationshipMatrix, gt_pairs: &[(String, String)]) -> Result<Rate, EvalError> {
    let speaker: BTreeMap<&str, &str> = gt_pairs.iter().map(|(c, t)| (t.as_str(), c.as_str())).collect();
    if speaker.is_empty() {
        return Err(EvalError::EmptyUniverse);
    }
    let best = matrix.argmax_char_per_text();
    let correct = speaker
        .iter()
        .filter(|(t, c)| best.get(*t).is_some_and(|(bc, _)| bc == *c))
        .count();
    Ok(Rate {
        correct,
        total: speaker.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TitleSplit {
    pub easy: Vec<String>,
    pub hard: Vec<String>,
}

/// Titles whose relationship accuracy is strictly above `threshold` are Easy.
pub fn easy_hard_split(accuracies: &[(String, f64)], threshold: f64) -> TitleSplit {
    let mut split = TitleSplit::default();
    for (title, acc) in accuracies {
        if classify_split(*acc, threshold) == Split::Easy {
            split.easy.push(title.clone());
        } else {
            split.hard.push(title.clone());
        }
    }
    split
}

pub fn classify_split(relationship_accuracy: f64, threshold: f64) -> Split {
    if relationship_accuracy > threshold {
        Split::Easy
    } else {
        Split::Hard
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A region for detection-aware scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRegion {
    pub page_index: usize,
    pub bbox: BoundingBox,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotScore {
    pub rate: Rate,
    /// (prediction index, ground-truth index, IoU) of every accepted match.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching by descending IoU on the same page. A ground-truth region
/// counts as correct when its match has IoU above `iou_threshold` and the same label.
/// Predicted labels must already be mapped onto true names.
pub fn zero_shot_score(
    predictions: &[ScoredRegion],
    ground_truth: &[ScoredRegion],
    iou_threshold: f64,
) -> ZeroShotScore {
    let mut pairs = Vec::new();
    for (pi, p) in predictions.iter().enumerate() {
        for (gi, g) in ground_truth.iter().enumerate() {
            if p.page_index != g.page_index {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v > iou_threshold {
                pairs.push((pi, gi, v));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; predictions.len()];
    let mut gt_used = vec![false; ground_truth.len()];
    let mut matches = Vec::new();
    let mut correct = 0;
    for (pi, gi, v) in pairs {
        if pred_used[pi] || gt_used[gi] {
            continue;
        }
        pred_used[pi] = true;
        gt_used[gi] = true;
        matches.push((pi, gi, v));
        if predictions[pi].label.is_some() && predictions[pi].label == ground_truth[gi].label {
            correct += 1;
        }
    }
    ZeroShotScore {
        rate: Rate {
            correct,
            total: ground_truth.len(),
        },
        matches,
    }
}

/// Share of ground-truth regions whose true name is in the (name-mapped) roster.
pub fn upper_bound<'a>(roster: &NameRoster, gt_names: impl IntoIterator<Item = &'a str>) -> Rate {
    let mut rate = Rate::default();
    for name in gt_names {
        rate.total += 1;
        if roster.contains_name(name) {
            rate.correct += 1;
        }
    }
    rate
}

/// Metrics of one pipeline iteration on one title. Absent entries had no ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub speaker: Option<Rate>,
    pub character: Option<Rate>,
    /// Relationship accuracy of the matrix at the end of the iteration.
    pub relationship: Option<Rate>,
    pub pseudo_tc: Option<PseudoQuality>,
    pub pseudo_ct: Option<PseudoQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleMetrics {
    pub title: String,
    pub split: Split,
    /// Relationship accuracy of the initial scores; decides the split.
    pub initial_relationship: Option<f64>,
    pub iterations: Vec<MetricSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Set when ground truth was used to produce the predictions, not only to score them.
    pub gt_assisted: bool,
    pub easy_threshold: f64,
    pub titles: Vec<TitleMetrics>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledRow {
    pub speaker: Rate,
    pub character: Rate,
}

impl MetricReport {
    pub fn new(gt_assisted: bool) -> Self {
        MetricReport {
            gt_assisted,
            easy_threshold: EASY_THRESHOLD,
            titles: Vec::new(),
        }
    }

    /// Adds a title; the split comes from the first snapshot's relationship accuracy.
    pub fn push_title(&mut self, title: impl Into<String>, iterations: Vec<MetricSnapshot>) {
        let initial = iterations.first().and_then(|s| s.relationship).map(|r| r.value());
        let split = initial.map_or(Split::Hard, |v| classify_split(v, self.easy_threshold));
        self.titles.push(TitleMetrics {
            title: title.into(),
            split,
            initial_relationship: initial,
            iterations,
        });
    }

    pub fn iteration_count(&self) -> usize {
        self.titles.iter().map(|t| t.iterations.len()).max().unwrap_or(0)
    }

    /// Region-pooled accuracies at `iteration`, restricted to `split` when given.
    pub fn pooled(&self, iteration: usize, split: Option<Split>) -> PooledRow {
        let mut row = PooledRow::default();
        for t in self.titles.iter().filter(|t| split.is_none_or(|s| s == t.split)) {
            if let Some(s) = t.iterations.get(iteration) {
                if let Some(r) = s.speaker {
                    row.speaker.add(r);
                }
                if let Some(r) = s.character {
                    row.character.add(r);
                }
            }
        }
        row
    }

    /// Plain-text table: one row per iteration, speaker and character accuracy (percent)
    /// for Easy, Hard and all titles.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let marker = if self.gt_assisted { " *" } else { "" };
        let _ = writeln!(
            out,
            "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "iter", "easy/spk", "easy/chr", "hard/spk", "hard/chr", "all/spk", "all/chr"
        );
        let cell = |r: Rate| {
            if r.total == 0 {
                "-".to_string()
            } else {
                format!("{:.1}", 100.0 * r.value())
            }
        };
        for i in 0..self.iteration_count() {
            let e = self.pooled(i, Some(Split::Easy));
            let h = self.pooled(i, Some(Split::Hard));
            let a = self.pooled(i, None);
            let _ = writeln!(
                out,
                "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                format!("{}{}", i, marker),
                cell(e.speaker),
                cell(e.character),
                cell(h.speaker),
                cell(h.character),
                cell(a.speaker),
                cell(a.character)
            );
        }
        let easy = self.titles.iter().filter(|t| t.split == Split::Easy).count();
        let _ = writeln!(out, "titles: {} easy, {} hard", easy, self.titles.len() - easy);
        if self.gt_assisted {
            let _ = writeln!(out, "* ground truth used to map clusters to names");
        }
        out
    }
}
