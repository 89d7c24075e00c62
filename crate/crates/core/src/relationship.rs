//! Initial relationship scorers and label-agreement rescoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ComicDocument, Label, LabelAssignment, RelationshipMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum RelationshipError {
    #[error("rescoring lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("ground-truth pair references unknown {kind} region {id:?}")]
    UnknownRegion { kind: &'static str, id: String },
}

/// How the agreement scale is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescoreMode {
    /// Scale `a = max(1, λ·p_x·p_y)`: agreeing pairs are multiplied, disagreeing pairs divided.
    #[default]
    Intent,
    /// Scale `s = min(1, λ·p_x·p_y)` applied the same way, exactly as originally written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescoreConfig {
    pub lambda: f64,
    pub mode: RescoreMode,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lambda: 2.0,
            mode: RescoreMode::Intent,
        }
    }
}

/// Scores every same-page (character, text) pair by `1 / (1 + d)`, where `d` is the
/// Euclidean distance between box centers.
pub fn distance_scores(document: &ComicDocument) -> RelationshipMatrix {
    let mut m = RelationshipMatrix::new();
    for c in &document.characters {
        let (cx, cy) = c.bbox.center();
        for t in document.texts.iter().filter(|t| t.page_index == c.page_index) {
            let (tx, ty) = t.bbox.center();
            let dist = (cx - tx).hypot(cy - ty);
            m.insert(c.id.as_str(), t.id.as_str(), 1.0 / (1.0 + dist))
                .expect("distance score is in (0, 1]");
        }
    }
    m
}

/// Score 1.0 for each annotated (character, text) pair.
pub fn gt_scores(
    document: &ComicDocument,
    gt_pairs: &[(String, String)],
) -> Result<RelationshipMatrix, RelationshipError> {
    let mut m = RelationshipMatrix::new();
    for (c, t) in gt_pairs {
        if !document.has_character(c) {
            return Err(RelationshipError::UnknownRegion {
                kind: "character",
                id: c.clone(),
            });
        }
        if !document.has_text(t) {
            return Err(RelationshipError::UnknownRegion {
                kind: "text",
                id: t.clone(),
            });
        }
        m.insert(c.as_str(), t.as_str(), 1.0).expect("1.0 is a valid score");
    }
    Ok(m)
}

/// The multiplicative factor for one pair given both confidences as probabilities.
pub fn rescale_factor(mode: RescoreMode, lambda: f64, p_char: f64, p_text: f64) -> f64 {
    let raw = lambda * p_char * p_text;
    match mode {
        RescoreMode::Intent => raw.max(1.0),
        RescoreMode::Literal => raw.min(1.0),
    }
}

/// Updates every scored pair whose two regions are both labeled: multiplied by the
/// factor when the labels agree, divided by it otherwise. ABSTAIN on either side leaves
/// the score untouched. No pair is added or removed and nothing is renormalized.
pub fn rescore(
    matrix: &RelationshipMatrix,
    char_assignment: &LabelAssignment,
    text_assignment: &LabelAssignment,
    config: &RescoreConfig,
) -> Result<RelationshipMatrix, RelationshipError> {
    if !(config.lambda.is_finite() && config.lambda > 0.0) {
        return Err(RelationshipError::InvalidLambda(config.lambda));
    }
    Ok(matrix.map_scores(
        |c, t, r| match (char_assignment.label_or_abstain(c), text_assignment.label_or_abstain(t)) {
            (
                Label::Named {
                    name: xn,
                    confidence: xc,
                },
                Label::Named {
                    name: yn,
                    confidence: yc,
                },
            ) => {
                let a = rescale_factor(config.mode, config.lambda, xc.as_probability(), yc.as_probability());
                if xn == yn {
                    r * a
                } else {
                    r / a
                }
            }
            _ => r,
        },
    ))
}
