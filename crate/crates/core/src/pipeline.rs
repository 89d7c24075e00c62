//! The alternating loop: initial speaker prediction, then per iteration
//! text→character propagation, classifier training, rescoring, character→text
//! propagation, candidate-aware speaker prediction and a second rescoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, CharacterModel, ClassifierError, FeatureTable, NearestCentroid, TrainConfig};
use crate::error::{CorpusError, ValidationError};
use crate::evaluation::{self, MetricSnapshot};
use crate::io::{self, FORMAT_VERSION};
use crate::model::{ComicDocument, Confidence, LabelAssignment, NameRoster, RelationshipMatrix, RosterEntry};
use crate::propagation::{
    propagate_char_to_text, propagate_text_to_char, PseudoLabel, PseudoLabelSet, DEFAULT_MIN_LEVEL, DEFAULT_MIN_PROB,
};
use crate::relationship::{rescore, RelationshipError, RescoreConfig};
use crate::seed;
use crate::speaker::{self, PromptOptions, SpeakerBackend, SpeakerError, TemplateSet};

const STREAM_CLASSIFIER: u64 = 0x434c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub rescore: RescoreConfig,
    /// Start every iteration from the initial scores instead of the previous matrix.
    pub rescore_reset: bool,
    pub min_level: u8,
    pub min_prob: f64,
    pub prompt: PromptOptions,
    /// Roster names with a smaller share (percent) of labeled regions are dropped.
    pub roster_filter_pct: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iterations: 2,
            rescore: RescoreConfig::default(),
            rescore_reset: false,
            min_level: DEFAULT_MIN_LEVEL,
            min_prob: DEFAULT_MIN_PROB,
            prompt: PromptOptions::default(),
            roster_filter_pct: 3.0,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..100.0).contains(&self.roster_filter_pct) {
            return bad(format!("roster_filter_pct {} outside [0, 100)", self.roster_filter_pct));
        }
        if !(self.rescore.lambda.is_finite() && self.rescore.lambda > 0.0) {
            return bad(format!("lambda {} must be positive", self.rescore.lambda));
        }
        if !(0.0..=1.0).contains(&self.min_prob) {
            return bad(format!("min_prob {} outside [0, 1]", self.min_prob));
        }
        if self.min_level > 5 {
            return bad(format!("min_level {} above 5", self.min_level));
        }
        if self.prompt.chunk_size == 0 {
            return bad("chunk_size must be >= 1".into());
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Relationship(#[from] RelationshipError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("corrupted trace: {0}")]
    CorruptTrace(String),
}

/// A failed run: the error and everything completed before it.
#[derive(Debug)]
pub struct PipelineAbort {
    pub trace: PipelineTrace,
    pub error: PipelineError,
}

pub struct PipelineInputs<'a> {
    pub document: &'a ComicDocument,
    /// Initial relationship scores.
    pub scores: &'a RelationshipMatrix,
    pub features: &'a FeatureTable,
    /// Overrides the document's roster; names are extracted when both are empty.
    pub roster: Option<&'a NameRoster>,
    /// Annotated (character, text) speaker pairs, for relationship accuracy only.
    pub gt_pairs: Option<&'a [(String, String)]>,
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub iteration: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub format_version: u32,
    pub title: String,
    pub seed: u64,
    pub config: PipelineConfig,
    /// Free-form description of the speaker backend (recorded, not interpreted).
    #[serde(default)]
    pub backend: serde_json::Value,
    /// Roster after extraction and filtering; absent if setup never finished.
    pub roster: Option<Vec<RosterEntry>>,
    pub context: Option<String>,
    pub aborted: Option<AbortInfo>,
}

impl TraceMeta {
    pub fn roster(&self) -> Option<NameRoster> {
        self.roster.clone().map(NameRoster::from_entries_allow_duplicates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierKind {
    None,
    Softmax,
    NearestCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub chunks: usize,
    pub retries: usize,
    pub failed_chunks: usize,
    pub identifier: IdentifierKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub text_labels: LabelAssignment,
    pub char_labels: LabelAssignment,
    pub pseudo_tc: PseudoLabelSet,
    pub pseudo_ct: PseudoLabelSet,
    /// Relationship matrix at the end of the iteration.
    pub scores: RelationshipMatrix,
    pub metrics: MetricSnapshot,
    pub stats: IterationStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub meta: TraceMeta,
    pub iterations: Vec<IterationRecord>,
}

impl PipelineTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.meta.format_version != FORMAT_VERSION {
            return Err(PipelineError::CorruptTrace(format!(
                "format_version {} (expected {})",
                self.meta.format_version, FORMAT_VERSION
            )));
        }
        for (k, it) in self.iterations.iter().enumerate() {
            if it.iteration != k {
                return Err(PipelineError::CorruptTrace(format!(
                    "iteration {} stored at position {}",
                    it.iteration, k
                )));
            }
        }
        if !self.iterations.is_empty() && self.meta.roster.is_none() {
            return Err(PipelineError::CorruptTrace("iterations without a roster".into()));
        }
        Ok(())
    }
}

/// Drops roster names whose share of ground-truth-labeled regions (characters and texts
/// together) is below `pct` percent. Without ground truth the roster is returned as is.
pub fn filter_roster(roster: &NameRoster, document: &ComicDocument, pct: f64) -> NameRoster {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let labels = document
        .characters
        .iter()
        .filter_map(|c| c.gt_label.as_deref())
        .chain(document.texts.iter().filter_map(|t| t.gt_label.as_deref()));
    let mut total = 0usize;
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 || pct <= 0.0 {
        return roster.clone();
    }
    roster.retain_names(|name| {
        let n = counts.get(name).copied().unwrap_or(0);
        100.0 * n as f64 / total as f64 >= pct
    })
}

fn abort(trace: PipelineTrace, iteration: usize, error: PipelineError) -> Box<PipelineAbort> {
    let mut trace = trace;
    trace.meta.aborted = Some(AbortInfo {
        iteration,
        error: error.to_string(),
    });
    Box::new(PipelineAbort { trace, error })
}

/// Runs the loop for `config.iterations` iterations after the initial prediction.
pub fn run(
    inputs: &PipelineInputs<'_>,
    config: &PipelineConfig,
    backend: &mut dyn SpeakerBackend,
) -> Result<PipelineTrace, Box<PipelineAbort>> {
    let trace = PipelineTrace {
        meta: TraceMeta {
            format_version: FORMAT_VERSION,
            title: inputs.document.title.clone(),
            seed: config.seed,
            config: *config,
            backend: serde_json::Value::Null,
            roster: None,
            context: None,
            aborted: None,
        },
        iterations: Vec::new(),
    };
    if let Err(e) = config.validate() {
        return Err(abort(trace, 0, e));
    }
    advance(inputs, trace, backend)
}

/// Continues `trace` for `additional` more iterations; an aborted trace restarts at the
/// iteration that failed.
pub fn resume(
    inputs: &PipelineInputs<'_>,
    trace: PipelineTrace,
    additional: usize,
    backend: &mut dyn SpeakerBackend,
) -> Result<PipelineTrace, Box<PipelineAbort>> {
    if let Err(e) = trace.validate() {
        return Err(Box::new(PipelineAbort { trace, error: e }));
    }
    let mut trace = trace;
    trace.meta.config.iterations += additional;
    trace.meta.aborted = None;
    advance(inputs, trace, backend)
}

fn advance(
    inputs: &PipelineInputs<'_>,
    mut trace: PipelineTrace,
    backend: &mut dyn SpeakerBackend,
) -> Result<PipelineTrace, Box<PipelineAbort>> {
    let config = trace.meta.config;
    if trace.meta.roster.is_none() {
        match setup(inputs, &config, backend) {
            Ok((roster, context)) => {
                trace.meta.roster = Some(roster.entries().to_vec());
                trace.meta.context = context;
            }
            Err(e) => return Err(abort(trace, 0, e)),
        }
    }
    let roster = trace.meta.roster().expect("set above");
    let context = trace.meta.context.clone();
    let loop_state = LoopState {
        inputs,
        config: &config,
        roster: &roster,
        context: context.as_deref(),
    };
    while trace.iterations.len() <= config.iterations {
        let k = trace.iterations.len();
        let result = match trace.iterations.last() {
            None => loop_state.initial(backend),
            Some(prev) => loop_state.step(k, prev, backend),
        };
        match result {
            Ok(rec) => trace.iterations.push(rec),
            Err(e) => return Err(abort(trace, k, e)),
        }
    }
    Ok(trace)
}

fn setup(
    inputs: &PipelineInputs<'_>,
    config: &PipelineConfig,
    backend: &mut dyn SpeakerBackend,
) -> Result<(NameRoster, Option<String>), PipelineError> {
    let doc = inputs.document;
    let roster = match inputs.roster {
        Some(r) if !r.is_empty() => r.clone(),
        _ if !doc.roster.is_empty() => doc.roster.clone(),
        _ => speaker::extract_names(doc, backend, inputs.templates)?,
    };
    let roster = filter_roster(&roster, doc, config.roster_filter_pct);
    if roster.is_empty() {
        return Err(PipelineError::Speaker(SpeakerError::EmptyRoster));
    }
    let context = if config.prompt.ctx && backend.capabilities().supports_context {
        let c = speaker::extract_context(doc, &roster, backend, inputs.templates)?;
        Some(c).filter(|c| !c.trim().is_empty())
    } else {
        None
    };
    Ok((roster, context))
}

struct LoopState<'a> {
    inputs: &'a PipelineInputs<'a>,
    config: &'a PipelineConfig,
    roster: &'a NameRoster,
    context: Option<&'a str>,
}

impl LoopState<'_> {
    fn predict(
        &self,
        backend: &mut dyn SpeakerBackend,
        candidates: Option<&PseudoLabelSet>,
    ) -> Result<(LabelAssignment, speaker::PredictionStats), PipelineError> {
        Ok(speaker::predict_speakers(
            self.inputs.document,
            self.roster,
            backend,
            self.inputs.templates,
            &self.config.prompt,
            self.context,
            candidates,
        )?)
    }

    fn initial(&self, backend: &mut dyn SpeakerBackend) -> Result<IterationRecord, PipelineError> {
        let doc = self.inputs.document;
        let (text_labels, stats) = self.predict(backend, None)?;
        let char_labels = LabelAssignment::all_abstain(doc.character_ids());
        let scores = self.inputs.scores.clone();
        let metrics = self.metrics(&text_labels, &char_labels, &scores, None, None)?;
        Ok(IterationRecord {
            iteration: 0,
            text_labels,
            char_labels,
            pseudo_tc: PseudoLabelSet::new(),
            pseudo_ct: PseudoLabelSet::new(),
            scores,
            metrics,
            stats: IterationStats {
                chunks: stats.chunks,
                retries: stats.retries,
                failed_chunks: stats.failed_chunks,
                identifier: IdentifierKind::None,
            },
        })
    }

    fn step(
        &self,
        k: usize,
        prev: &IterationRecord,
        backend: &mut dyn SpeakerBackend,
    ) -> Result<IterationRecord, PipelineError> {
        let cfg = self.config;
        let base = if cfg.rescore_reset {
            self.inputs.scores
        } else {
            &prev.scores
        };
        let pseudo_tc = propagate_text_to_char(base, &prev.text_labels, cfg.min_level);

        let train = TrainConfig {
            seed: seed::derive(cfg.seed, &[k as u64, STREAM_CLASSIFIER]),
            ..cfg.train
        };
        let (char_labels, identifier) = identify(self.inputs.document, self.inputs.features, &pseudo_tc, &train)?;
        let after_id = rescore(base, &char_labels, &prev.text_labels, &cfg.rescore)?;

        let pseudo_ct = propagate_char_to_text(&after_id, &char_labels, cfg.min_prob);
        let (text_labels, stats) = self.predict(backend, Some(&pseudo_ct))?;
        let scores = rescore(&after_id, &char_labels, &text_labels, &cfg.rescore)?;

        let unthresholded = (
            propagate_text_to_char(base, &prev.text_labels, 0),
            propagate_char_to_text(&after_id, &char_labels, 0.0),
        );
        let metrics = self.metrics(
            &text_labels,
            &char_labels,
            &scores,
            Some((&pseudo_tc, &unthresholded.0)),
            Some((&pseudo_ct, &unthresholded.1)),
        )?;
        Ok(IterationRecord {
            iteration: k,
            text_labels,
            char_labels,
            pseudo_tc,
            pseudo_ct,
            scores,
            metrics,
            stats: IterationStats {
                chunks: stats.chunks,
                retries: stats.retries,
                failed_chunks: stats.failed_chunks,
                identifier,
            },
        })
    }

    fn metrics(
        &self,
        text_labels: &LabelAssignment,
        char_labels: &LabelAssignment,
        scores: &RelationshipMatrix,
        pseudo_tc: Option<(&PseudoLabelSet, &PseudoLabelSet)>,
        pseudo_ct: Option<(&PseudoLabelSet, &PseudoLabelSet)>,
    ) -> Result<MetricSnapshot, PipelineError> {
        let doc = self.inputs.document;
        let text_truth = doc.text_truth();
        let char_truth = doc.character_truth();
        let quality = |pair: Option<(&PseudoLabelSet, &PseudoLabelSet)>, truth: &BTreeMap<String, String>| {
            let (kept, all) = pair?;
            if truth.is_empty() {
                return None;
            }
            let restrict = |s: &PseudoLabelSet| -> PseudoLabelSet {
                s.iter()
                    .filter(|(id, _)| truth.contains_key(*id))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            };
            evaluation::pseudo_label_quality(&restrict(kept), Some(&restrict(all)), truth).ok()
        };
        Ok(MetricSnapshot {
            speaker: evaluation::label_accuracy(text_labels, &text_truth).ok(),
            character: evaluation::label_accuracy(char_labels, &char_truth).ok(),
            relationship: match self.inputs.gt_pairs {
                Some(pairs) => evaluation::relationship_accuracy(scores, pairs).ok(),
                None => None,
            },
            pseudo_tc: quality(pseudo_tc, &char_truth),
            pseudo_ct: quality(pseudo_ct, &text_truth),
        })
    }
}

/// Trains on the character pseudo-labels and labels every character region. Falls back
/// to nearest-centroid for single-class training data and to all-ABSTAIN when there is
/// nothing to train on.
pub fn identify(
    document: &ComicDocument,
    features: &FeatureTable,
    pseudo: &PseudoLabelSet,
    config: &TrainConfig,
) -> Result<(LabelAssignment, IdentifierKind), PipelineError> {
    let mut out = LabelAssignment::all_abstain(document.character_ids());
    let labels: BTreeMap<String, String> = pseudo
        .iter()
        .filter(|(id, _)| features.contains(id))
        .map(|(id, p)| (id.clone(), p.name.clone()))
        .collect();
    if labels.is_empty() {
        return Ok((out, IdentifierKind::None));
    }
    let (model, kind) = match classifier::train(features, &labels, config) {
        Ok(m) => (CharacterModel::Softmax(m), IdentifierKind::Softmax),
        Err(ClassifierError::DegenerateTraining(_)) => (
            CharacterModel::Centroid(NearestCentroid::fit(features, &labels)?),
            IdentifierKind::NearestCentroid,
        ),
        Err(e) => return Err(e.into()),
    };
    for (id, label) in classifier::predict(&model, features)?.iter() {
        if document.has_character(id) {
            out.insert(id, label.clone());
        }
    }
    Ok((out, kind))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PseudoRecord {
    region_id: String,
    name: String,
    source_region_id: String,
    source_confidence: Confidence,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IterationSummary {
    metrics: MetricSnapshot,
    stats: IterationStats,
}

fn pseudo_to_string(set: &PseudoLabelSet) -> String {
    io::jsonl(set.iter().map(|(id, p)| PseudoRecord {
        region_id: id.clone(),
        name: p.name.clone(),
        source_region_id: p.source_region_id.clone(),
        source_confidence: p.source_confidence,
    }))
}

fn parse_pseudo(path: &Path, content: &str) -> Result<PseudoLabelSet, CorpusError> {
    let mut out = PseudoLabelSet::new();
    for (line, r) in io::parse_jsonl_records::<PseudoRecord>(path, content)? {
        r.source_confidence
            .validate()
            .map_err(|e| CorpusError::invalid(path, ValidationError::at(format!("line {}", line), e.message)))?;
        out.insert(
            r.region_id,
            PseudoLabel {
                name: r.name,
                source_region_id: r.source_region_id,
                source_confidence: r.source_confidence,
            },
        );
    }
    Ok(out)
}

pub const META_FILE: &str = "meta.json";

fn iter_dir(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("iter_{}", k))
}

/// Writes `meta.json` and one `iter_<k>/` directory per iteration, replacing any
/// iteration directories already present.
pub fn write_trace(trace: &PipelineTrace, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let entries = fs::read_dir(dir).map_err(|e| CorpusError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CorpusError::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with("iter_") && entry.path().is_dir() {
            fs::remove_dir_all(entry.path()).map_err(|e| CorpusError::io(entry.path(), e))?;
        }
    }
    io::write_file(&dir.join(META_FILE), &io::json_pretty(&trace.meta))?;
    for it in &trace.iterations {
        let d = iter_dir(dir, it.iteration);
        fs::create_dir_all(&d).map_err(|e| CorpusError::io(&d, e))?;
        io::write_file(&d.join("text_labels.jsonl"), &io::labels_to_string(&it.text_labels))?;
        io::write_file(&d.join("char_labels.jsonl"), &io::labels_to_string(&it.char_labels))?;
        io::write_file(&d.join("pseudo_tc.jsonl"), &pseudo_to_string(&it.pseudo_tc))?;
        io::write_file(&d.join("pseudo_ct.jsonl"), &pseudo_to_string(&it.pseudo_ct))?;
        io::write_file(&d.join("scores.jsonl"), &io::scores_to_string(&it.scores))?;
        let summary = IterationSummary {
            metrics: it.metrics.clone(),
            stats: it.stats.clone(),
        };
        io::write_file(&d.join("metrics.json"), &io::json_pretty(&summary))?;
    }
    Ok(())
}

pub fn read_trace_meta(dir: impl AsRef<Path>) -> Result<TraceMeta, CorpusError> {
    let path = dir.as_ref().join(META_FILE);
    io::parse_json(&path, &io::read_file(&path)?)
}

pub fn read_trace(dir: impl AsRef<Path>) -> Result<PipelineTrace, CorpusError> {
    let dir = dir.as_ref();
    let meta = read_trace_meta(dir)?;
    let mut iterations = Vec::new();
    loop {
        let k = iterations.len();
        let d = iter_dir(dir, k);
        if !d.is_dir() {
            break;
        }
        let read = |name: &str| {
            let p = d.join(name);
            io::read_file(&p).map(|c| (p, c))
        };
        let (p, c) = read("text_labels.jsonl")?;
        let text_labels = io::parse_labels(&p, &c)?;
        let (p, c) = read("char_labels.jsonl")?;
        let char_labels = io::parse_labels(&p, &c)?;
        let (p, c) = read("pseudo_tc.jsonl")?;
        let pseudo_tc = parse_pseudo(&p, &c)?;
        let (p, c) = read("pseudo_ct.jsonl")?;
        let pseudo_ct = parse_pseudo(&p, &c)?;
        let (p, c) = read("scores.jsonl")?;
        let scores = io::parse_trace_scores(&p, &c)?;
        let (p, c) = read("metrics.json")?;
        let summary: IterationSummary = io::parse_json(&p, &c)?;
        iterations.push(IterationRecord {
            iteration: k,
            text_labels,
            char_labels,
            pseudo_tc,
            pseudo_ct,
            scores,
            metrics: summary.metrics,
            stats: summary.stats,
        });
    }
    Ok(PipelineTrace { meta, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, CharacterRegion, Page, TextRegion};
    use crate::relationship::gt_scores;
    use crate::speaker::{BackendError, BackendRequest, Capabilities, OracleConfig, ScriptedOracle};

    /// Two pages, three characters each speaking two texts, features on a line.
    fn fixture() -> (ComicDocument, Vec<(String, String)>, FeatureTable) {
        let names = ["Ann", "Bob", "Cid"];
        let mut characters = Vec::new();
        let mut texts = Vec::new();
        let mut pairs = Vec::new();
        let mut features = FeatureTable::new(2);
        let mut t = 0;
        for page in 0..2usize {
            for (i, name) in names.iter().enumerate() {
                let cid = format!("c{}", page * 3 + i + 1);
                let x = 100.0 * i as f64;
                characters.push(CharacterRegion {
                    id: cid.clone(),
                    page_index: page,
                    bbox: BoundingBox::new(x, 50.0, x + 40.0, 150.0).unwrap(),
                    gt_label: Some(name.to_string()),
                });
                features
                    .insert(cid.clone(), vec![5.0 * i as f64 + 0.1 * page as f64, -(i as f64)])
                    .unwrap();
                for _ in 0..2 {
                    t += 1;
                    let tid = format!("t{}", t);
                    texts.push(TextRegion {
                        id: tid.clone(),
                        page_index: page,
                        bbox: BoundingBox::new(x, 0.0, x + 30.0, 20.0).unwrap(),
                        text: format!("line {}", t),
                        order: t as i64,
                        gt_label: Some(name.to_string()),
                    });
                    pairs.push((cid.clone(), tid));
                }
            }
        }
        let doc = ComicDocument {
            title: "fixture".into(),
            pages: (0..2)
                .map(|i| Page {
                    index: i,
                    width: 400.0,
                    height: 200.0,
                })
                .collect(),
            characters,
            texts,
            roster: NameRoster::from_names(names).unwrap(),
        };
        (doc, pairs, features)
    }

    fn small_config(n: usize) -> PipelineConfig {
        PipelineConfig {
            iterations: n,
            train: TrainConfig {
                epochs: 50,
                ensemble_size: 2,
                ..TrainConfig::default()
            },
            seed: 3,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn perfect_inputs_give_perfect_identification() {
        let (doc, pairs, features) = fixture();
        let scores = gt_scores(&doc, &pairs).unwrap();
        let templates = TemplateSet::english();
        let inputs = PipelineInputs {
            document: &doc,
            scores: &scores,
            features: &features,
            roster: None,
            gt_pairs: Some(&pairs),
            templates: &templates,
        };
        let mut oracle = ScriptedOracle::new(OracleConfig::default(), &doc).unwrap();
        let trace = run(&inputs, &small_config(1), &mut oracle).unwrap();
        assert_eq!(trace.iterations.len(), 2);
        let last = trace.last().unwrap();
        assert_eq!(last.metrics.character.unwrap().value(), 1.0);
        assert_eq!(last.metrics.speaker.unwrap().value(), 1.0);
        assert_eq!(last.stats.identifier, IdentifierKind::Softmax);
    }

    #[test]
    fn zero_iterations_only_initial() {
        let (doc, pairs, features) = fixture();
        let scores = gt_scores(&doc, &pairs).unwrap();
        let templates = TemplateSet::english();
        let inputs = PipelineInputs {
            document: &doc,
            scores: &scores,
            features: &features,
            roster: None,
            gt_pairs: None,
            templates: &templates,
        };
        let mut oracle = ScriptedOracle::new(OracleConfig::default(), &doc).unwrap();
        let trace = run(&inputs, &small_config(0), &mut oracle).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        assert!(trace.iterations[0].char_labels.iter().all(|(_, l)| l.is_abstain()));
    }

    #[test]
    fn filter_roster_drops_rare_names() {
        let (mut doc, _, _) = fixture();
        doc.roster = NameRoster::from_names(["Ann", "Bob", "Cid", "Dee"]).unwrap();
        let kept = filter_roster(&doc.roster, &doc, 3.0);
        assert_eq!(kept.names().collect::<Vec<_>>(), vec!["Ann", "Bob", "Cid"]);
        assert_eq!(filter_roster(&doc.roster, &doc, 0.0).len(), 4);
        for c in doc.characters.iter_mut() {
            c.gt_label = None;
        }
        for t in doc.texts.iter_mut() {
            t.gt_label = None;
        }
        assert_eq!(filter_roster(&doc.roster, &doc, 50.0).len(), 4);
    }

    struct FailOnce {
        inner: ScriptedOracle,
        calls: usize,
        fail_at: usize,
    }

    impl SpeakerBackend for FailOnce {
        fn capabilities(&self) -> Capabilities {
            self.inner.capabilities()
        }
        fn retry_budget(&self) -> usize {
            0
        }
        fn complete(&mut self, r: &BackendRequest) -> Result<String, BackendError> {
            self.calls += 1;
            if self.calls == self.fail_at {
                return Err(BackendError::Transport("injected".into()));
            }
            self.inner.complete(r)
        }
    }

    #[test]
    fn resume_restarts_failed_iteration_and_matches_full_run() {
        let (doc, pairs, features) = fixture();
        let scores = crate::relationship::distance_scores(&doc);
        let templates = TemplateSet::english();
        let inputs = PipelineInputs {
            document: &doc,
            scores: &scores,
            features: &features,
            roster: None,
            gt_pairs: Some(&pairs),
            templates: &templates,
        };
        let cfg = small_config(2);
        let oc = OracleConfig {
            error_rate: 0.3,
            candidate_adopt_prob: 0.5,
            seed: 9,
            ..Default::default()
        };
        let full = run(&inputs, &cfg, &mut ScriptedOracle::new(oc, &doc).unwrap()).unwrap();

        // Calls: context, iteration 0, iteration 1, iteration 2 (one chunk each).
        let mut flaky = FailOnce {
            inner: ScriptedOracle::new(oc, &doc).unwrap(),
            calls: 0,
            fail_at: 3,
        };
        let aborted = run(&inputs, &cfg, &mut flaky).unwrap_err();
        assert_eq!(aborted.trace.iterations.len(), 1);
        assert_eq!(aborted.trace.meta.aborted.as_ref().unwrap().iteration, 1);
        let resumed = resume(&inputs, aborted.trace, 0, &mut flaky).unwrap();
        assert_eq!(resumed, full);

        let one = run(&inputs, &small_config(1), &mut ScriptedOracle::new(oc, &doc).unwrap()).unwrap();
        let two = resume(&inputs, one, 1, &mut ScriptedOracle::new(oc, &doc).unwrap()).unwrap();
        assert_eq!(two, full);
    }

    #[test]
    fn trace_directory_round_trip() {
        let (doc, pairs, features) = fixture();
        let scores = crate::relationship::distance_scores(&doc);
        let templates = TemplateSet::english();
        let inputs = PipelineInputs {
            document: &doc,
            scores: &scores,
            features: &features,
            roster: None,
            gt_pairs: Some(&pairs),
            templates: &templates,
        };
        let oc = OracleConfig {
            error_rate: 0.4,
            candidate_adopt_prob: 0.7,
            seed: 1,
            ..Default::default()
        };
        let trace = run(&inputs, &small_config(2), &mut ScriptedOracle::new(oc, &doc).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(&trace, dir.path()).unwrap();
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(back, trace);
    }
}
