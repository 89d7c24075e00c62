//! Shared domain types: regions, rosters, label assignments and relationship scores.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Prefix carried by roster names whose extracted name has no true-name mapping.
/// Ground-truth labels may never start with it, so such names never score as correct.
pub const UNMAPPED_PREFIX: &str = "\u{2205}unmapped:";

/// Axis-aligned box in page-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ValidationError> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ValidationError::new(format!(
                "box {:?} has negative or non-finite coordinates",
                coords
            )));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(ValidationError::new(format!(
                "box {:?} is empty (requires x1 < x2 and y1 < y2)",
                coords
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterRegion {
    pub id: String,
    pub page_index: usize,
    pub bbox: BoundingBox,
    pub gt_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRegion {
    pub id: String,
    pub page_index: usize,
    pub bbox: BoundingBox,
    pub text: String,
    pub order: i64,
    pub gt_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Page {
    pub index: usize,
    pub width: f64,
    pub height: f64,
}

/// Which side of the bipartite character/text structure a region belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Character,
    Text,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionKind::Character => f.write_str("character"),
            RegionKind::Text => f.write_str("text"),
        }
    }
}

/// One roster entry: a short letter id (`A`, `B`, ...) and the character name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: String,
    pub name: String,
}

/// Ordered character-name list that defines the label space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameRoster {
    entries: Vec<RosterEntry>,
}

/// Spreadsheet-style letter id for position `index`: A..Z, AA, AB, ...
pub fn roster_letter(index: usize) -> String {
    let mut n = index + 1;
    let mut out = Vec::new();
    while n > 0 {
        let rem = (n - 1) % 26;
        out.push(b'A' + rem as u8);
        n = (n - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

impl NameRoster {
    /// Builds a roster from names, assigning ids A, B, ... in order.
    pub fn from_names<I, S>(names: I) -> Result<Self, ValidationError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| RosterEntry {
                id: roster_letter(i),
                name: n.into(),
            })
            .collect();
        Self::from_entries(entries)
    }

    /// Validates an explicit entry list: ids must follow A, B, ... and names must be distinct.
    pub fn from_entries(entries: Vec<RosterEntry>) -> Result<Self, ValidationError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id != roster_letter(i) {
                return Err(ValidationError::new(format!(
                    "roster entry {} has id {:?}, expected {:?}",
                    i,
                    e.id,
                    roster_letter(i)
                )));
            }
            if e.name.trim().is_empty() {
                return Err(ValidationError::new(format!("roster entry {} has an empty name", e.id)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(ValidationError::new(format!("duplicate roster name {:?}", e.name)));
            }
        }
        Ok(NameRoster { entries })
    }

    /// Name-mapped rosters may legitimately contain a true name twice.
    pub(crate) fn from_entries_allow_duplicates(entries: Vec<RosterEntry>) -> Self {
        NameRoster { entries }
    }

    pub fn entries(&self) -> &[RosterEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn name_for_id(&self, id: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.name.as_str())
    }

    pub fn id_for_name(&self, name: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id.as_str())
    }

    /// Keeps the names for which `keep` holds and reassigns ids from `A`.
    pub fn retain_names(&self, mut keep: impl FnMut(&str) -> bool) -> NameRoster {
        let entries = self
            .entries
            .iter()
            .filter(|e| keep(&e.name))
            .enumerate()
            .map(|(i, e)| RosterEntry {
                id: roster_letter(i),
                name: e.name.clone(),
            })
            .collect();
        NameRoster { entries }
    }
}

/// Confidence attached to a predicted label.
///
/// Text-side predictions carry an integer level (1..=5); classifier outputs carry a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Level(u8),
    Prob(f64),
}

impl Confidence {
    pub fn level(level: u8) -> Result<Self, ValidationError> {
        if (1..=5).contains(&level) {
            Ok(Confidence::Level(level))
        } else {
            Err(ValidationError::new(format!(
                "confidence level {} outside 1..=5",
                level
            )))
        }
    }

    pub fn prob(p: f64) -> Result<Self, ValidationError> {
        if p.is_finite() && (0.0..=1.0).contains(&p) {
            Ok(Confidence::Prob(p))
        } else {
            Err(ValidationError::new(format!("probability {} outside [0, 1]", p)))
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        match *self {
            Confidence::Level(l) => Confidence::level(l).map(|_| ()),
            Confidence::Prob(p) => Confidence::prob(p).map(|_| ()),
        }
    }

    /// Probability view used by rescoring: levels map to `level / 5`.
    pub fn as_probability(&self) -> f64 {
        match *self {
            Confidence::Level(l) => f64::from(l) / 5.0,
            Confidence::Prob(p) => p,
        }
    }
}

/// Label state of one region.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Abstain,
    Named { name: String, confidence: Confidence },
}

impl Label {
    pub fn named(name: impl Into<String>, confidence: Confidence) -> Self {
        Label::Named {
            name: name.into(),
            confidence,
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Label::Abstain => None,
            Label::Named { name, .. } => Some(name),
        }
    }

    pub fn confidence(&self) -> Option<Confidence> {
        match self {
            Label::Abstain => None,
            Label::Named { confidence, .. } => Some(*confidence),
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Label::Abstain)
    }
}

/// Per-region predicted labels for one modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelAssignment {
    labels: BTreeMap<String, Label>,
}

impl LabelAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every region in `ids` set to ABSTAIN.
    pub fn all_abstain<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        LabelAssignment {
            labels: ids.into_iter().map(|id| (id.to_string(), Label::Abstain)).collect(),
        }
    }

    pub fn insert(&mut self, region_id: impl Into<String>, label: Label) {
        self.labels.insert(region_id.into(), label);
    }

    pub fn get(&self, region_id: &str) -> Option<&Label> {
        self.labels.get(region_id)
    }

    /// Label of `region_id`, treating a missing entry as ABSTAIN.
    pub fn label_or_abstain(&self, region_id: &str) -> &Label {
        static ABSTAIN: Label = Label::Abstain;
        self.labels.get(region_id).unwrap_or(&ABSTAIN)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Label)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks that every non-ABSTAIN name is a roster name and confidences are in range.
    pub fn validate(&self, roster: &NameRoster) -> Result<(), ValidationError> {
        for (id, label) in &self.labels {
            if let Label::Named { name, confidence } = label {
                if !roster.contains_name(name) {
                    return Err(ValidationError::new(format!(
                        "region {} labeled {:?}, which is not in the roster",
                        id, name
                    )));
                }
                confidence
                    .validate()
                    .map_err(|e| ValidationError::new(format!("region {}: {}", id, e)))?;
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Label)> for LabelAssignment {
    fn from_iter<T: IntoIterator<Item = (String, Label)>>(iter: T) -> Self {
        LabelAssignment {
            labels: iter.into_iter().collect(),
        }
    }
}

/// Sparse speaker-affinity scores keyed by (character region id, text region id).
///
/// Absent pairs have score 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationshipMatrix {
    scores: BTreeMap<(String, String), f64>,
}

impl RelationshipMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a strictly positive, finite score.
    pub fn insert(
        &mut self,
        char_id: impl Into<String>,
        text_id: impl Into<String>,
        score: f64,
    ) -> Result<(), ValidationError> {
        let (c, t) = (char_id.into(), text_id.into());
        if !(score.is_finite() && score > 0.0) {
            return Err(ValidationError::new(format!(
                "score {} for ({}, {}) must be positive and finite",
                score, c, t
            )));
        }
        self.scores.insert((c, t), score);
        Ok(())
    }

    pub fn get(&self, char_id: &str, text_id: &str) -> f64 {
        self.scores
            .get(&(char_id.to_string(), text_id.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn contains(&self, char_id: &str, text_id: &str) -> bool {
        self.scores.contains_key(&(char_id.to_string(), text_id.to_string()))
    }

    /// Entries ordered by (character id, text id).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.scores.iter().map(|((c, t), s)| (c.as_str(), t.as_str(), *s))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Same sparsity pattern with every score replaced by `f(char, text, score)`.
    pub(crate) fn map_scores(&self, mut f: impl FnMut(&str, &str, f64) -> f64) -> Self {
        RelationshipMatrix {
            scores: self
                .scores
                .iter()
                .map(|((c, t), s)| ((c.clone(), t.clone()), f(c, t, *s)))
                .collect(),
        }
    }

    /// For each text region, the character with the highest score.
    /// Ties go to the lexicographically smaller character id.
    pub fn argmax_char_per_text(&self) -> BTreeMap<&str, (&str, f64)> {
        let mut best: BTreeMap<&str, (&str, f64)> = BTreeMap::new();
        // Iteration is ordered by char id, so strict `>` keeps the smaller id on ties.
        for ((c, t), &s) in &self.scores {
            match best.get(t.as_str()) {
                Some(&(_, cur)) if s <= cur => {}
                _ => {
                    best.insert(t.as_str(), (c.as_str(), s));
                }
            }
        }
        best
    }

    /// For each character region, the text with the highest score.
    /// Ties go to the lexicographically smaller text id.
    pub fn argmax_text_per_char(&self) -> BTreeMap<&str, (&str, f64)> {
        let mut best: BTreeMap<&str, (&str, f64)> = BTreeMap::new();
        for ((c, t), &s) in &self.scores {
            match best.get(c.as_str()) {
                Some(&(bt, cur)) if s < cur || (s == cur && bt <= t.as_str()) => {}
                _ => {
                    best.insert(c.as_str(), (t.as_str(), s));
                }
            }
        }
        best
    }
}

/// Validated comic volume: pages, regions, optional roster.
#[derive(Debug, Clone, PartialEq)]
pub struct ComicDocument {
    pub title: String,
    pub pages: Vec<Page>,
    pub characters: Vec<CharacterRegion>,
    pub texts: Vec<TextRegion>,
    pub roster: NameRoster,
}

impl ComicDocument {
    /// Checks id uniqueness, box validity, page references and reading-order keys.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let page_indices: BTreeSet<usize> = self.pages.iter().map(|p| p.index).collect();
        if page_indices.len() != self.pages.len() {
            return Err(ValidationError::new("duplicate page index"));
        }
        for p in &self.pages {
            if !(p.width.is_finite() && p.width > 0.0 && p.height.is_finite() && p.height > 0.0) {
                return Err(ValidationError::at(
                    format!("page {}", p.index),
                    "page dimensions must be positive and finite",
                ));
            }
        }
        let mut ids = HashSet::new();
        for c in &self.characters {
            if !ids.insert(c.id.as_str()) {
                return Err(ValidationError::at(
                    format!("character {}", c.id),
                    "duplicate region id",
                ));
            }
            c.bbox
                .validate()
                .map_err(|e| ValidationError::at(format!("character {}", c.id), e.message))?;
            if !page_indices.contains(&c.page_index) {
                return Err(ValidationError::at(
                    format!("character {}", c.id),
                    format!("unknown page {}", c.page_index),
                ));
            }
            check_gt_label(&c.id, c.gt_label.as_deref())?;
        }
        for t in &self.texts {
            if !ids.insert(t.id.as_str()) {
                return Err(ValidationError::at(format!("text {}", t.id), "duplicate region id"));
            }
            t.bbox
                .validate()
                .map_err(|e| ValidationError::at(format!("text {}", t.id), e.message))?;
            if !page_indices.contains(&t.page_index) {
                return Err(ValidationError::at(
                    format!("text {}", t.id),
                    format!("unknown page {}", t.page_index),
                ));
            }
            check_gt_label(&t.id, t.gt_label.as_deref())?;
        }
        reading_order(self)?;
        Ok(())
    }

    pub fn character(&self, id: &str) -> Option<&CharacterRegion> {
        self.characters.iter().find(|c| c.id == id)
    }

    pub fn text(&self, id: &str) -> Option<&TextRegion> {
        self.texts.iter().find(|t| t.id == id)
    }

    pub fn has_character(&self, id: &str) -> bool {
        self.character(id).is_some()
    }

    pub fn has_text(&self, id: &str) -> bool {
        self.text(id).is_some()
    }

    /// True when every region carries a ground-truth label.
    pub fn has_ground_truth(&self) -> bool {
        (!self.characters.is_empty() || !self.texts.is_empty())
            && self.characters.iter().all(|c| c.gt_label.is_some())
            && self.texts.iter().all(|t| t.gt_label.is_some())
    }

    pub fn character_ids(&self) -> impl Iterator<Item = &str> {
        self.characters.iter().map(|c| c.id.as_str())
    }

    pub fn text_ids(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().map(|t| t.id.as_str())
    }

    /// Ground-truth labels of character regions that have one.
    pub fn character_truth(&self) -> BTreeMap<String, String> {
        self.characters
            .iter()
            .filter_map(|c| c.gt_label.clone().map(|l| (c.id.clone(), l)))
            .collect()
    }

    /// Ground-truth labels of text regions that have one.
    pub fn text_truth(&self) -> BTreeMap<String, String> {
        self.texts
            .iter()
            .filter_map(|t| t.gt_label.clone().map(|l| (t.id.clone(), l)))
            .collect()
    }
}

fn check_gt_label(id: &str, label: Option<&str>) -> Result<(), ValidationError> {
    match label {
        Some(l) if l.trim().is_empty() => Err(ValidationError::at(id, "empty ground-truth label")),
        Some(l) if l.starts_with(UNMAPPED_PREFIX) => Err(ValidationError::at(
            id,
            "ground-truth label uses the reserved unmapped-name prefix",
        )),
        _ => Ok(()),
    }
}

/// Text region ids sorted by (page, order key), ties broken by id.
///
/// Two texts sharing the same (page, order) pair make the order ambiguous and are rejected.
pub fn reading_order(document: &ComicDocument) -> Result<Vec<String>, ValidationError> {
    let mut keys: Vec<(usize, i64, &str)> = document
        .texts
        .iter()
        .map(|t| (t.page_index, t.order, t.id.as_str()))
        .collect();
    keys.sort();
    for w in keys.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            return Err(ValidationError::at(
                format!("text {}", w[1].2),
                format!(
                    "reading-order key (page {}, order {}) also used by text {}",
                    w[1].0, w[1].1, w[0].2
                ),
            ));
        }
    }
    Ok(keys.into_iter().map(|(_, _, id)| id.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    fn text(id: &str, page: usize, order: i64) -> TextRegion {
        TextRegion {
            id: id.into(),
            page_index: page,
            bbox: bx(),
            text: String::new(),
            order,
            gt_label: None,
        }
    }

    fn doc(texts: Vec<TextRegion>) -> ComicDocument {
        ComicDocument {
            title: "t".into(),
            pages: vec![
                Page {
                    index: 0,
                    width: 10.0,
                    height: 10.0,
                },
                Page {
                    index: 1,
                    width: 10.0,
                    height: 10.0,
                },
            ],
            characters: vec![],
            texts,
            roster: NameRoster::default(),
        }
    }

    #[test]
    fn reading_order_follows_order_key() {
        let d = doc(vec![text("ta", 0, 1), text("tb", 0, 0)]);
        assert_eq!(reading_order(&d).unwrap(), vec!["tb", "ta"]);
    }

    #[test]
    fn reading_order_pages_first() {
        let d = doc(vec![text("ta", 1, 0), text("tb", 0, 5)]);
        assert_eq!(reading_order(&d).unwrap(), vec!["tb", "ta"]);
    }

    #[test]
    fn reading_order_rejects_duplicate_keys() {
        let d = doc(vec![text("ta", 0, 3), text("tb", 0, 3)]);
        assert!(reading_order(&d).is_err());
    }

    #[test]
    fn box_requires_positive_extent() {
        assert!(BoundingBox::new(5.0, 5.0, 3.0, 9.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 2.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn roster_letters() {
        assert_eq!(roster_letter(0), "A");
        assert_eq!(roster_letter(25), "Z");
        assert_eq!(roster_letter(26), "AA");
        assert_eq!(roster_letter(27), "AB");
    }

    #[test]
    fn roster_rejects_duplicates_and_bad_ids() {
        assert!(NameRoster::from_names(["Naru", "Naru"]).is_err());
        assert!(NameRoster::from_names([""]).is_err());
        let bad = vec![RosterEntry {
            id: "B".into(),
            name: "x".into(),
        }];
        assert!(NameRoster::from_entries(bad).is_err());
        let r = NameRoster::from_names(["Keitaro", "Naru"]).unwrap();
        assert_eq!(r.name_for_id("B"), Some("Naru"));
        assert_eq!(r.id_for_name("Keitaro"), Some("A"));
    }

    #[test]
    fn confidence_ranges() {
        assert!(Confidence::level(0).is_err());
        assert!(Confidence::level(6).is_err());
        assert!(Confidence::prob(1.2).is_err());
        assert_eq!(Confidence::Level(4).as_probability(), 0.8);
    }

    #[test]
    fn argmax_tie_breaks_by_id() {
        let mut m = RelationshipMatrix::new();
        m.insert("c2", "t1", 0.5).unwrap();
        m.insert("c1", "t1", 0.5).unwrap();
        m.insert("c1", "t3", 0.4).unwrap();
        m.insert("c1", "t2", 0.4).unwrap();
        assert_eq!(m.argmax_char_per_text()["t1"].0, "c1");
        assert_eq!(m.argmax_text_per_char()["c1"].0, "t1");
        assert_eq!(m.argmax_text_per_char()["c2"].0, "t1");
        let mut m2 = RelationshipMatrix::new();
        m2.insert("c1", "t3", 0.4).unwrap();
        m2.insert("c1", "t2", 0.4).unwrap();
        assert_eq!(m2.argmax_text_per_char()["c1"].0, "t2");
    }

    #[test]
    fn matrix_rejects_nonpositive() {
        let mut m = RelationshipMatrix::new();
        assert!(m.insert("c", "t", 0.0).is_err());
        assert!(m.insert("c", "t", f64::INFINITY).is_err());
    }
}
