//! Readers and writers for every on-disk artifact.
//!
//! Documents, rosters, name maps and model files are UTF-8 JSON; scores, features,
//! predictions and trace tables are JSON-lines. Non-finite numbers are never written.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::classifier::FeatureTable;
use crate::error::{CorpusError, ValidationError};
use crate::model::{
    BoundingBox, CharacterRegion, ComicDocument, Confidence, Label, LabelAssignment, NameRoster, Page, RegionKind,
    RelationshipMatrix, RosterEntry, TextRegion, UNMAPPED_PREFIX,
};
use crate::pipeline::PipelineTrace;

/// Version stamped into every document and trace this crate writes.
pub const FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentFile {
    #[serde(default = "default_version")]
    format_version: u32,
    title: String,
    pages: Vec<PageFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roster: Option<Vec<RosterEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageFile {
    index: usize,
    width: f64,
    height: f64,
    #[serde(default)]
    characters: Vec<CharacterFile>,
    #[serde(default)]
    texts: Vec<TextFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CharacterFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    text: String,
    order: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_label: Option<String>,
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

fn write_string(path: &Path, content: &str) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
        }
    }
    fs::write(path, content).map_err(|e| CorpusError::io(path, e))
}

fn json_error(path: &Path, err: serde_json::Error) -> CorpusError {
    CorpusError::parse(path, err.line(), err.to_string())
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

/// Parses a JSON-lines body, skipping blank lines. Errors carry the 1-based line number.
fn parse_jsonl<T: DeserializeOwned>(path: &Path, content: &str) -> Result<Vec<(usize, T)>, CorpusError> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| CorpusError::parse(path, i + 1, e.to_string()))
        })
        .collect()
}

fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("serializable record"));
        out.push('\n');
    }
    out
}

fn bbox_from_array(a: [f64; 4], locus: &str) -> Result<BoundingBox, ValidationError> {
    BoundingBox::new(a[0], a[1], a[2], a[3]).map_err(|e| ValidationError::at(locus, e.message))
}

/// Parses and validates a document. Regions without an id receive `c<k>` / `t<k>`,
/// numbered in reading order.
pub fn parse_document(path: &Path, content: &str) -> Result<ComicDocument, CorpusError> {
    let file: DocumentFile = serde_json::from_str(content).map_err(|e| json_error(path, e))?;
    if file.format_version != FORMAT_VERSION {
        return Err(CorpusError::invalid(
            path,
            ValidationError::new(format!(
                "unsupported format_version {} (expected {})",
                file.format_version, FORMAT_VERSION
            )),
        ));
    }
    let invalid = |e: ValidationError| CorpusError::invalid(path, e);

    let mut pages = Vec::with_capacity(file.pages.len());
    let mut characters = Vec::new();
    let mut texts = Vec::new();
    let mut missing_char_ids = Vec::new();
    let mut missing_text_ids = Vec::new();
    for (pi, p) in file.pages.into_iter().enumerate() {
        pages.push(Page {
            index: p.index,
            width: p.width,
            height: p.height,
        });
        for (ci, c) in p.characters.into_iter().enumerate() {
            let locus = format!("pages[{}].characters[{}]", pi, ci);
            if c.id.is_none() {
                missing_char_ids.push(characters.len());
            }
            characters.push(CharacterRegion {
                id: c.id.unwrap_or_default(),
                page_index: p.index,
                bbox: bbox_from_array(c.bbox, &locus).map_err(invalid)?,
                gt_label: c.gt_label,
            });
        }
        for (ti, t) in p.texts.into_iter().enumerate() {
            let locus = format!("pages[{}].texts[{}]", pi, ti);
            if t.id.is_none() {
                missing_text_ids.push(texts.len());
            }
            texts.push(TextRegion {
                id: t.id.unwrap_or_default(),
                page_index: p.index,
                bbox: bbox_from_array(t.bbox, &locus).map_err(invalid)?,
                text: t.text,
                order: t.order,
                gt_label: t.gt_label,
            });
        }
    }

    if !missing_char_ids.is_empty() {
        let mut idx: Vec<usize> = (0..characters.len()).collect();
        idx.sort_by_key(|&i| characters[i].page_index);
        let rank: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        for i in missing_char_ids {
            characters[i].id = format!("c{}", rank[&i] + 1);
        }
    }
    if !missing_text_ids.is_empty() {
        let mut idx: Vec<usize> = (0..texts.len()).collect();
        idx.sort_by_key(|&i| (texts[i].page_index, texts[i].order));
        let rank: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        for i in missing_text_ids {
            texts[i].id = format!("t{}", rank[&i] + 1);
        }
    }

    let roster = match file.roster {
        Some(entries) => {
            NameRoster::from_entries(entries).map_err(|e| invalid(ValidationError::at("roster", e.message)))?
        }
        None => NameRoster::default(),
    };
    let doc = ComicDocument {
        title: file.title,
        pages,
        characters,
        texts,
        roster,
    };
    doc.validate().map_err(invalid)?;
    Ok(doc)
}

pub fn load_document(path: impl AsRef<Path>) -> Result<ComicDocument, CorpusError> {
    let path = path.as_ref();
    parse_document(path, &read_to_string(path)?)
}

pub fn document_to_string(doc: &ComicDocument) -> String {
    let pages = doc
        .pages
        .iter()
        .map(|p| PageFile {
            index: p.index,
            width: p.width,
            height: p.height,
            characters: doc
                .characters
                .iter()
                .filter(|c| c.page_index == p.index)
                .map(|c| CharacterFile {
                    id: Some(c.id.clone()),
                    bbox: c.bbox.as_array(),
                    gt_label: c.gt_label.clone(),
                })
                .collect(),
            texts: doc
                .texts
                .iter()
                .filter(|t| t.page_index == p.index)
                .map(|t| TextFile {
                    id: Some(t.id.clone()),
                    bbox: t.bbox.as_array(),
                    text: t.text.clone(),
                    order: t.order,
                    gt_label: t.gt_label.clone(),
                })
                .collect(),
        })
        .collect();
    let file = DocumentFile {
        format_version: FORMAT_VERSION,
        title: doc.title.clone(),
        pages,
        roster: if doc.roster.is_empty() {
            None
        } else {
            Some(doc.roster.entries().to_vec())
        },
    };
    to_json_pretty(&file)
}

pub fn save_document(doc: &ComicDocument, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_string(path.as_ref(), &document_to_string(doc))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRecord {
    char_id: String,
    text_id: String,
    score: f64,
}

/// Parses score records. `initial` enforces the `(0, 1]` range of freshly detected
/// scores; rescored matrices (trace files) only need positive finite scores.
fn parse_scores(
    path: &Path,
    content: &str,
    document: Option<&ComicDocument>,
    initial: bool,
) -> Result<RelationshipMatrix, CorpusError> {
    let mut m = RelationshipMatrix::new();
    for (line, rec) in parse_jsonl::<ScoreRecord>(path, content)? {
        let locus = format!("line {}", line);
        let at = |msg: String| CorpusError::invalid(path, ValidationError::at(locus.clone(), msg));
        if let Some(doc) = document {
            if !doc.has_character(&rec.char_id) {
                return Err(at(format!("unknown char_id {:?}", rec.char_id)));
            }
            if !doc.has_text(&rec.text_id) {
                return Err(at(format!("unknown text_id {:?}", rec.text_id)));
            }
        }
        if initial && !(rec.score > 0.0 && rec.score <= 1.0) {
            return Err(at(format!("score {} outside (0, 1]", rec.score)));
        }
        if m.contains(&rec.char_id, &rec.text_id) {
            return Err(at(format!("duplicate pair ({}, {})", rec.char_id, rec.text_id)));
        }
        m.insert(rec.char_id, rec.text_id, rec.score)
            .map_err(|e| at(e.message))?;
    }
    Ok(m)
}

/// Loads externally produced relationship scores for `document`.
pub fn load_scores(path: impl AsRef<Path>, document: &ComicDocument) -> Result<RelationshipMatrix, CorpusError> {
    let path = path.as_ref();
    parse_scores(path, &read_to_string(path)?, Some(document), true)
}

pub(crate) fn parse_trace_scores(path: &Path, content: &str) -> Result<RelationshipMatrix, CorpusError> {
    parse_scores(path, content, None, false)
}

pub fn scores_to_string(matrix: &RelationshipMatrix) -> String {
    to_jsonl(matrix.iter().map(|(c, t, s)| ScoreRecord {
        char_id: c.to_string(),
        text_id: t.to_string(),
        score: s,
    }))
}

pub fn save_scores(matrix: &RelationshipMatrix, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_string(path.as_ref(), &scores_to_string(matrix))
}

/// Ground-truth speaker pairs stored as a score file whose scores are all 1.0.
pub fn load_gt_pairs(path: impl AsRef<Path>, document: &ComicDocument) -> Result<Vec<(String, String)>, CorpusError> {
    Ok(load_scores(path, document)?
        .iter()
        .map(|(c, t, _)| (c.to_string(), t.to_string()))
        .collect())
}

pub fn save_gt_pairs(pairs: &[(String, String)], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let content = to_jsonl(pairs.iter().map(|(c, t)| ScoreRecord {
        char_id: c.clone(),
        text_id: t.clone(),
        score: 1.0,
    }));
    write_string(path.as_ref(), &content)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    char_id: String,
    vector: Vec<f64>,
}

pub fn parse_features(path: &Path, content: &str) -> Result<FeatureTable, CorpusError> {
    let mut table: Option<FeatureTable> = None;
    for (line, rec) in parse_jsonl::<FeatureRecord>(path, content)? {
        let at = |msg: String| CorpusError::invalid(path, ValidationError::at(format!("line {}", line), msg));
        let t = table.get_or_insert_with(|| FeatureTable::new(rec.vector.len()));
        if t.contains(&rec.char_id) {
            return Err(at(format!("duplicate char_id {:?}", rec.char_id)));
        }
        t.insert(rec.char_id, rec.vector).map_err(|e| at(e.message))?;
    }
    table.ok_or_else(|| CorpusError::invalid(path, ValidationError::new("feature file is empty")))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTable, CorpusError> {
    let path = path.as_ref();
    parse_features(path, &read_to_string(path)?)
}

pub fn features_to_string(table: &FeatureTable) -> String {
    to_jsonl(table.iter().map(|(id, v)| FeatureRecord {
        char_id: id.to_string(),
        vector: v.to_vec(),
    }))
}

pub fn save_features(table: &FeatureTable, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_string(path.as_ref(), &features_to_string(table))
}

/// Mapping from extracted names to true names; `None` marks a name with no true counterpart.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameMap {
    entries: BTreeMap<String, Option<String>>,
}

impl NameMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, extracted: impl Into<String>, truth: Option<String>) {
        self.entries.insert(extracted.into(), truth);
    }

    /// `Some(Some(true_name))` when mapped, `Some(None)` when explicitly unmapped.
    pub fn lookup(&self, extracted: &str) -> Option<Option<&str>> {
        self.entries.get(extracted).map(|v| v.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_deref()))
    }
}

struct NameMapVisitor;

impl<'de> Visitor<'de> for NameMapVisitor {
    type Value = NameMap;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an object mapping extracted names to true names or null")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<NameMap, A::Error> {
        let mut entries = BTreeMap::new();
        while let Some((k, v)) = access.next_entry::<String, Option<String>>()? {
            if entries.contains_key(&k) {
                return Err(serde::de::Error::custom(format!("duplicate key {:?}", k)));
            }
            entries.insert(k, v);
        }
        Ok(NameMap { entries })
    }
}

impl<'de> Deserialize<'de> for NameMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_map(NameMapVisitor)
    }
}

impl Serialize for NameMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

pub fn load_name_map(path: impl AsRef<Path>) -> Result<NameMap, CorpusError> {
    let path = path.as_ref();
    serde_json::from_str(&read_to_string(path)?).map_err(|e| json_error(path, e))
}

/// Rewrites roster names through `map`. Names mapped to `null` get the reserved
/// unmapped prefix so they can never equal a ground-truth label.
pub fn apply_name_map(roster: &NameRoster, map: &NameMap) -> Result<NameRoster, ValidationError> {
    let mut entries = Vec::with_capacity(roster.len());
    for e in roster.entries() {
        let name = match map.lookup(&e.name) {
            None => {
                return Err(ValidationError::at(
                    "name map",
                    format!("no entry for extracted name {:?}", e.name),
                ))
            }
            Some(Some(truth)) => truth.to_string(),
            Some(None) => format!("{}{}", UNMAPPED_PREFIX, e.name),
        };
        entries.push(RosterEntry { id: e.id.clone(), name });
    }
    Ok(NameRoster::from_entries_allow_duplicates(entries))
}

pub fn load_roster(path: impl AsRef<Path>) -> Result<NameRoster, CorpusError> {
    let path = path.as_ref();
    let entries: Vec<RosterEntry> = serde_json::from_str(&read_to_string(path)?).map_err(|e| json_error(path, e))?;
    NameRoster::from_entries(entries).map_err(|e| CorpusError::invalid(path, e))
}

pub fn save_roster(roster: &NameRoster, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_string(path.as_ref(), &to_json_pretty(&roster.entries()))
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub iteration: usize,
    pub region_kind: RegionKind,
    pub region_id: String,
    pub name: Option<String>,
    pub confidence: Option<Confidence>,
}

/// Per-iteration label assignments recovered from a prediction dump.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionDump {
    pub iterations: BTreeMap<usize, IterationPredictions>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationPredictions {
    pub text_labels: LabelAssignment,
    pub char_labels: LabelAssignment,
}

fn label_to_record(iteration: usize, kind: RegionKind, id: &str, label: &Label) -> PredictionRecord {
    PredictionRecord {
        iteration,
        region_kind: kind,
        region_id: id.to_string(),
        name: label.name().map(str::to_string),
        confidence: label.confidence(),
    }
}

fn record_to_label(rec: &PredictionRecord) -> Result<Label, ValidationError> {
    match (&rec.name, rec.confidence) {
        (None, None) => Ok(Label::Abstain),
        (Some(name), Some(conf)) => {
            conf.validate()?;
            Ok(Label::named(name.clone(), conf))
        }
        (None, Some(_)) => Err(ValidationError::new("ABSTAIN record carries a confidence")),
        (Some(_), None) => Err(ValidationError::new("named record lacks a confidence")),
    }
}

pub fn predictions_to_string(trace: &PipelineTrace) -> String {
    let mut records = Vec::new();
    for it in &trace.iterations {
        for (id, l) in it.text_labels.iter() {
            records.push(label_to_record(it.iteration, RegionKind::Text, id, l));
        }
        for (id, l) in it.char_labels.iter() {
            records.push(label_to_record(it.iteration, RegionKind::Character, id, l));
        }
    }
    to_jsonl(records)
}

pub fn dump_predictions(trace: &PipelineTrace, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    if trace.iterations.is_empty() {
        return Err(CorpusError::invalid(
            path,
            ValidationError::new("trace has no iterations"),
        ));
    }
    write_string(path, &predictions_to_string(trace))
}

pub fn parse_predictions(path: &Path, content: &str) -> Result<PredictionDump, CorpusError> {
    let mut dump = PredictionDump::default();
    let mut seen = BTreeSet::new();
    for (line, rec) in parse_jsonl::<PredictionRecord>(path, content)? {
        let at = |msg: String| CorpusError::invalid(path, ValidationError::at(format!("line {}", line), msg));
        let label = record_to_label(&rec).map_err(|e| at(e.message))?;
        if !seen.insert((rec.iteration, rec.region_kind, rec.region_id.clone())) {
            return Err(at(format!(
                "duplicate record for {} {}",
                rec.region_kind, rec.region_id
            )));
        }
        let entry = dump.iterations.entry(rec.iteration).or_default();
        match rec.region_kind {
            RegionKind::Text => entry.text_labels.insert(rec.region_id, label),
            RegionKind::Character => entry.char_labels.insert(rec.region_id, label),
        }
    }
    if dump.iterations.is_empty() {
        return Err(CorpusError::invalid(
            path,
            ValidationError::new("prediction file is empty"),
        ));
    }
    Ok(dump)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionDump, CorpusError> {
    let path = path.as_ref();
    parse_predictions(path, &read_to_string(path)?)
}

pub fn labels_to_string(assignment: &LabelAssignment) -> String {
    #[derive(Serialize)]
    struct Rec<'a> {
        region_id: &'a str,
        name: Option<&'a str>,
        confidence: Option<Confidence>,
    }
    to_jsonl(assignment.iter().map(|(id, l)| Rec {
        region_id: id,
        name: l.name(),
        confidence: l.confidence(),
    }))
}

pub(crate) fn parse_labels(path: &Path, content: &str) -> Result<LabelAssignment, CorpusError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Rec {
        region_id: String,
        name: Option<String>,
        confidence: Option<Confidence>,
    }
    let mut out = LabelAssignment::new();
    for (line, rec) in parse_jsonl::<Rec>(path, content)? {
        let as_pred = PredictionRecord {
            iteration: 0,
            region_kind: RegionKind::Text,
            region_id: rec.region_id.clone(),
            name: rec.name,
            confidence: rec.confidence,
        };
        let label = record_to_label(&as_pred)
            .map_err(|e| CorpusError::invalid(path, ValidationError::at(format!("line {}", line), e.message)))?;
        out.insert(rec.region_id, label);
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, content: &str) -> Result<(), CorpusError> {
    write_string(path, content)
}

pub(crate) fn read_file(path: &Path) -> Result<String, CorpusError> {
    read_to_string(path)
}

pub(crate) fn parse_json<T: DeserializeOwned>(path: &Path, content: &str) -> Result<T, CorpusError> {
    serde_json::from_str(content).map_err(|e| json_error(path, e))
}

pub(crate) fn json_pretty<T: Serialize>(value: &T) -> String {
    to_json_pretty(value)
}

pub(crate) fn parse_jsonl_records<T: DeserializeOwned>(
    path: &Path,
    content: &str,
) -> Result<Vec<(usize, T)>, CorpusError> {
    parse_jsonl(path, content)
}

pub(crate) fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    to_jsonl(records)
}
