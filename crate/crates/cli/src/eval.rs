use std::path::Path;

use comicfuse::evaluation::{
    label_accuracy, relationship_accuracy, upper_bound, zero_shot_score, MetricReport, MetricSnapshot, Rate,
    ScoredRegion, ZERO_SHOT_IOU,
};
use comicfuse::io::{apply_name_map, load_document, load_gt_pairs, load_name_map, NameMap};
use comicfuse::pipeline::{read_trace, PipelineTrace};
use comicfuse::{BoundingBox, ComicDocument, LabelAssignment};
use serde::Serialize;

use crate::args::EvalArgs;
use crate::common::{emit_report, require_out, write_json};
use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct ZeroShotIteration {
    pub speaker: Rate,
    pub character: Rate,
    pub matched_texts: usize,
    pub matched_characters: usize,
}

#[derive(Debug, Serialize)]
pub struct ZeroShotSummary {
    pub iou_threshold: f64,
    /// Extracted roster name and the true name it maps to (`None` when unmapped).
    pub name_map: Vec<(String, Option<String>)>,
    pub upper_bound_speaker: Rate,
    pub upper_bound_character: Rate,
    pub iterations: Vec<ZeroShotIteration>,
}

fn mapped_name(map: &NameMap, label: Option<&str>) -> CliResult<Option<String>> {
    match label {
        None => Ok(None),
        Some(n) => match map.lookup(n) {
            Some(t) => Ok(t.map(String::from)),
            None => Err(CliError::input(format!(
                "predicted name {n:?} is missing from the name map"
            ))),
        },
    }
}

fn predictions<'a>(
    regions: impl Iterator<Item = (&'a str, usize, BoundingBox)>,
    labels: &LabelAssignment,
    map: &NameMap,
) -> CliResult<Vec<ScoredRegion>> {
    regions
        .map(|(id, page_index, bbox)| {
            Ok(ScoredRegion {
                page_index,
                bbox,
                label: mapped_name(map, labels.label_or_abstain(id).name())?,
            })
        })
        .collect()
}

/// Scores a trace produced on detector output against annotated regions.
pub fn zero_shot(
    trace: &PipelineTrace,
    detections: &ComicDocument,
    truth: &ComicDocument,
    map: &NameMap,
    iou_threshold: f64,
) -> CliResult<(MetricReport, ZeroShotSummary)> {
    let roster = trace
        .meta
        .roster()
        .ok_or_else(|| CliError::input("trace has no roster; the run stopped before setup finished"))?;
    let mapped = apply_name_map(&roster, map)?;

    let gt_texts: Vec<ScoredRegion> = truth
        .texts
        .iter()
        .map(|t| ScoredRegion {
            page_index: t.page_index,
            bbox: t.bbox,
            label: t.gt_label.clone(),
        })
        .collect();
    let gt_chars: Vec<ScoredRegion> = truth
        .characters
        .iter()
        .map(|c| ScoredRegion {
            page_index: c.page_index,
            bbox: c.bbox,
            label: c.gt_label.clone(),
        })
        .collect();
    if gt_texts.iter().chain(&gt_chars).any(|r| r.label.is_none()) {
        return Err(CliError::input("ground-truth document has unlabeled regions"));
    }

    let mut snapshots = Vec::new();
    let mut iterations = Vec::new();
    for it in &trace.iterations {
        let pt = predictions(
            detections.texts.iter().map(|t| (t.id.as_str(), t.page_index, t.bbox)),
            &it.text_labels,
            map,
        )?;
        let pc = predictions(
            detections
                .characters
                .iter()
                .map(|c| (c.id.as_str(), c.page_index, c.bbox)),
            &it.char_labels,
            map,
        )?;
        let s = zero_shot_score(&pt, &gt_texts, iou_threshold);
        let c = zero_shot_score(&pc, &gt_chars, iou_threshold);
        snapshots.push(MetricSnapshot {
            speaker: Some(s.rate),
            character: Some(c.rate),
            ..MetricSnapshot::default()
        });
        iterations.push(ZeroShotIteration {
            speaker: s.rate,
            character: c.rate,
            matched_texts: s.matches.len(),
            matched_characters: c.matches.len(),
        });
    }
    let mut report = MetricReport::new(false);
    report.push_title(trace.meta.title.clone(), snapshots);
    let summary = ZeroShotSummary {
        iou_threshold,
        name_map: roster
            .names()
            .map(|n| (n.to_string(), map.lookup(n).flatten().map(String::from)))
            .collect(),
        upper_bound_speaker: upper_bound(&mapped, gt_texts.iter().filter_map(|r| r.label.as_deref())),
        upper_bound_character: upper_bound(&mapped, gt_chars.iter().filter_map(|r| r.label.as_deref())),
        iterations,
    };
    Ok((report, summary))
}

/// Recomputes speaker, character and relationship accuracy of every iteration.
pub fn annotated(
    trace: &PipelineTrace,
    document: &ComicDocument,
    gt_pairs: Option<&[(String, String)]>,
) -> CliResult<MetricReport> {
    let texts = document.text_truth();
    let chars = document.character_truth();
    let eval = |e: comicfuse::evaluation::EvalError| CliError::input(e.to_string());
    let mut snapshots = Vec::new();
    for it in &trace.iterations {
        let mut snap = it.metrics.clone();
        snap.speaker = if texts.is_empty() {
            None
        } else {
            Some(label_accuracy(&it.text_labels, &texts).map_err(eval)?)
        };
        snap.character = if chars.is_empty() {
            None
        } else {
            Some(label_accuracy(&it.char_labels, &chars).map_err(eval)?)
        };
        snap.relationship = match gt_pairs {
            Some(p) if !p.is_empty() => Some(relationship_accuracy(&it.scores, p).map_err(eval)?),
            _ => None,
        };
        snapshots.push(snap);
    }
    let mut report = MetricReport::new(false);
    report.push_title(trace.meta.title.clone(), snapshots);
    Ok(report)
}

pub fn check_iou(iou: Option<f64>) -> CliResult<f64> {
    let v = iou.unwrap_or(ZERO_SHOT_IOU);
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::usage(format!("--iou {v} outside [0, 1)")))
    }
}

pub fn emit_zero_shot(out: &Path, report: &MetricReport, summary: &ZeroShotSummary) -> CliResult<()> {
    write_json(&out.join("zero_shot.json"), summary)?;
    emit_report(out, report)?;
    println!(
        "upper bound: speaker {:.1}, character {:.1}",
        100.0 * summary.upper_bound_speaker.value(),
        100.0 * summary.upper_bound_character.value()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let out = require_out(&args.out)?;
    let trace_dir = args.trace.as_ref().ok_or_else(|| CliError::usage("missing --trace"))?;
    let doc_path = args
        .document
        .as_ref()
        .ok_or_else(|| CliError::usage("missing --document"))?;
    let zero = args.zero_shot.unwrap_or(false);
    let iou = check_iou(args.iou)?;
    if zero && (args.detections.is_none() || args.name_map.is_none()) {
        return Err(CliError::usage("--zero-shot needs --detections and --name-map"));
    }
    let trace = read_trace(trace_dir)?;
    let document = load_document(doc_path)?;
    if zero {
        let detections = load_document(args.detections.as_ref().expect("checked"))?;
        let map = load_name_map(args.name_map.as_ref().expect("checked"))?;
        let (report, summary) = zero_shot(&trace, &detections, &document, &map, iou)?;
        return emit_zero_shot(&out, &report, &summary);
    }
    let pairs = match &args.gt_pairs {
        Some(p) => Some(load_gt_pairs(p, &document)?),
        None => None,
    };
    let report = annotated(&trace, &document, pairs.as_deref())?;
    emit_report(&out, &report)
}
