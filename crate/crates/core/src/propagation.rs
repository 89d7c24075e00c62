//! Label propagation across the relationship matrix.
//!
//! Both directions pick the single best-scoring partner region first and only then
//! apply the confidence cutoff to that partner's label. A region whose best partner is
//! unlabeled or below the cutoff gets no pseudo-label, even if a weaker partner would
//! have qualified.

use std::collections::BTreeMap;

use crate::model::{Confidence, Label, LabelAssignment, RelationshipMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub name: String,
    pub source_region_id: String,
    pub source_confidence: Confidence,
}

/// Region id → propagated label.
pub type PseudoLabelSet = BTreeMap<String, PseudoLabel>;

pub const DEFAULT_MIN_LEVEL: u8 = 3;
pub const DEFAULT_MIN_PROB: f64 = 0.5;

fn passes(label: &Label, accept: impl Fn(Confidence) -> bool) -> Option<(&str, Confidence)> {
    match label {
        Label::Named { name, confidence } if accept(*confidence) => Some((name, *confidence)),
        _ => None,
    }
}

/// Text labels → character pseudo-labels. Keeps the label of each character's
/// highest-scoring text if its level is at least `min_level`.
pub fn propagate_text_to_char(
    matrix: &RelationshipMatrix,
    text_assignment: &LabelAssignment,
    min_level: u8,
) -> PseudoLabelSet {
    let accept = |c: Confidence| match c {
        Confidence::Level(l) => l >= min_level,
        // Probability-valued text labels only arise from baselines; compare on the level scale.
        Confidence::Prob(p) => p * 5.0 >= f64::from(min_level),
    };
    matrix
        .argmax_text_per_char()
        .into_iter()
        .filter_map(|(char_id, (text_id, _))| {
            let (name, conf) = passes(text_assignment.label_or_abstain(text_id), accept)?;
            Some((
                char_id.to_string(),
                PseudoLabel {
                    name: name.to_string(),
                    source_region_id: text_id.to_string(),
                    source_confidence: conf,
                },
            ))
        })
        .collect()
}

/// Character labels → speaker candidates for text regions. Keeps the label of each
/// text's highest-scoring character if its probability is at least `min_prob`.
pub fn propagate_char_to_text(
    matrix: &RelationshipMatrix,
    char_assignment: &LabelAssignment,
    min_prob: f64,
) -> PseudoLabelSet {
    let accept = |c: Confidence| c.as_probability() >= min_prob;
    matrix
        .argmax_char_per_text()
        .into_iter()
        .filter_map(|(text_id, (char_id, _))| {
            let (name, conf) = passes(char_assignment.label_or_abstain(char_id), accept)?;
            Some((
                text_id.to_string(),
                PseudoLabel {
                    name: name.to_string(),
                    source_region_id: char_id.to_string(),
                    source_confidence: conf,
                },
            ))
        })
        .collect()
}
