use std::collections::BTreeSet;

use comicfuse::classifier::{kmeans, optimal_cluster_mapping};
use comicfuse::evaluation::{label_accuracy, relationship_accuracy, MetricReport, MetricSnapshot};
use comicfuse::io::labels_to_string;
use comicfuse::seed;
use comicfuse::{ComicDocument, Confidence, Label, LabelAssignment, RelationshipMatrix};

use crate::args::BaselineArgs;
use crate::common::{emit_report, load_corpus, require_out, resolve_paths, write_text, Corpus};
use crate::error::{CliError, CliResult};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;

pub struct BaselineLabels {
    pub characters: LabelAssignment,
    pub texts: LabelAssignment,
    pub k: usize,
}

fn class_count(document: &ComicDocument) -> usize {
    if document.roster.is_empty() {
        document
            .characters
            .iter()
            .filter_map(|c| c.gt_label.as_deref())
            .collect::<BTreeSet<_>>()
            .len()
    } else {
        document.roster.len()
    }
}

/// Each text takes the label of its highest-scoring character.
pub fn propagate_to_texts(
    document: &ComicDocument,
    scores: &RelationshipMatrix,
    chars: &LabelAssignment,
) -> LabelAssignment {
    let mut texts = LabelAssignment::all_abstain(document.text_ids());
    for (t, (c, _)) in scores.argmax_char_per_text() {
        if let Some(name) = chars.label_or_abstain(c).name() {
            texts.insert(t, Label::named(name, Confidence::Level(5)));
        }
    }
    texts
}

/// K-means with k = roster size, clusters mapped to names through the ground truth.
/// The lowest-SSE clustering over `restarts` seeded initializations is kept.
pub fn k_means_baseline(corpus: &Corpus, seed: u64, max_iter: usize, restarts: usize) -> CliResult<BaselineLabels> {
    let doc = &corpus.document;
    if !doc.characters.iter().any(|c| c.gt_label.is_some()) {
        return Err(CliError::input("baseline needs character ground truth to map clusters"));
    }
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for c in &doc.characters {
        let v = corpus
            .features
            .get(&c.id)
            .ok_or_else(|| CliError::input(format!("character {:?} has no feature vector", c.id)))?;
        ids.push(c.id.as_str());
        points.push(v.to_vec());
    }
    let k = class_count(doc);
    let mut clusters = kmeans(&points, k, seed::derive(seed, &[0]), max_iter)?;
    for r in 1..restarts.max(1) {
        let next = kmeans(&points, k, seed::derive(seed, &[r as u64]), max_iter)?;
        if next.sse() < clusters.sse() {
            clusters = next;
        }
    }

    let (labeled_clusters, gt): (Vec<usize>, Vec<&str>) = doc
        .characters
        .iter()
        .zip(&clusters.assignment)
        .filter_map(|(c, a)| c.gt_label.as_deref().map(|g| (*a, g)))
        .unzip();
    let mapping = optimal_cluster_mapping(&labeled_clusters, &gt);

    let mut characters = LabelAssignment::new();
    for (id, a) in ids.iter().zip(&clusters.assignment) {
        let label = match mapping.mapping.get(a).cloned().flatten() {
            Some(name) => Label::named(name, Confidence::Prob(1.0)),
            None => Label::Abstain,
        };
        characters.insert(*id, label);
    }
    let texts = propagate_to_texts(doc, &corpus.scores, &characters);
    Ok(BaselineLabels { characters, texts, k })
}

pub fn cmd_baseline(args: &BaselineArgs) -> CliResult<()> {
    let out = require_out(&args.out)?;
    let paths = resolve_paths(&args.corpus_args())?;
    let corpus = load_corpus(&paths)?;
    let labels = k_means_baseline(
        &corpus,
        args.seed.unwrap_or(0),
        args.max_iter.unwrap_or(DEFAULT_MAX_ITER),
        args.restarts.unwrap_or(DEFAULT_RESTARTS),
    )?;

    let doc = &corpus.document;
    let eval = |e: comicfuse::evaluation::EvalError| CliError::input(e.to_string());
    let texts = doc.text_truth();
    let chars = doc.character_truth();
    let snapshot = MetricSnapshot {
        speaker: if texts.is_empty() {
            None
        } else {
            Some(label_accuracy(&labels.texts, &texts).map_err(eval)?)
        },
        character: Some(label_accuracy(&labels.characters, &chars).map_err(eval)?),
        relationship: match &corpus.gt_pairs {
            Some(p) if !p.is_empty() => Some(relationship_accuracy(&corpus.scores, p).map_err(eval)?),
            _ => None,
        },
        ..MetricSnapshot::default()
    };
    write_text(&out.join("char_labels.jsonl"), &labels_to_string(&labels.characters))?;
    write_text(&out.join("text_labels.jsonl"), &labels_to_string(&labels.texts))?;
    let mut report = MetricReport::new(true);
    report.push_title(doc.title.clone(), vec![snapshot]);
    emit_report(&out, &report)?;
    println!("k = {}", labels.k);
    Ok(())
}
