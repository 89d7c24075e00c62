//! Optimal one-to-one cluster → label mapping (Hungarian algorithm).

use std::collections::{BTreeMap, BTreeSet};

/// Maximum-weight assignment of rows to columns of a rectangular matrix.
///
/// Returns, for each row, the matched column or `None` when there are more rows than
/// columns. Runs the O(n³) shortest-augmenting-path Hungarian method on a square padding.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return vec![];
    }
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0
        }
    };
    // 1-based potentials and matching, column 0 is a sentinel.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; rows];
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i <= rows && j <= cols {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMapping {
    /// Cluster → label; `None` for surplus clusters mapped to the always-wrong sink.
    pub mapping: BTreeMap<usize, Option<String>>,
    pub correct: usize,
    pub total: usize,
}

impl ClusterMapping {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Injective cluster → label mapping maximizing the number of points whose cluster maps to
/// their ground-truth label.
pub fn optimal_cluster_mapping(cluster_assignment: &[usize], gt_labels: &[&str]) -> ClusterMapping {
    assert_eq!(cluster_assignment.len(), gt_labels.len(), "one label per point");
    let clusters: Vec<usize> = cluster_assignment
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<&str> = gt_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts = vec![vec![0i64; labels.len()]; clusters.len()];
    for (c, l) in cluster_assignment.iter().zip(gt_labels) {
        let ci = clusters.binary_search(c).expect("collected");
        let li = labels.binary_search(l).expect("collected");
        counts[ci][li] += 1;
    }
    let assignment = max_weight_assignment(&counts);
    let mut mapping = BTreeMap::new();
    let mut correct = 0usize;
    for (ci, col) in assignment.iter().enumerate() {
        let label = col.map(|li| {
            correct += counts[ci][li] as usize;
            labels[li].to_string()
        });
        mapping.insert(clusters[ci], label);
    }
    ClusterMapping {
        mapping,
        correct,
        total: cluster_assignment.len(),
    }
}
