use std::fs;
use std::path::{Path, PathBuf};

use comicfuse::classifier::FeatureTable;
use comicfuse::evaluation::MetricReport;
use comicfuse::io::{load_document, load_features, load_gt_pairs, load_scores};
use comicfuse::relationship::{distance_scores, gt_scores};
use comicfuse::{ComicDocument, RelationshipMatrix};

use crate::args::{CorpusArgs, Relation};
use crate::error::{CliError, CliResult};

pub struct Paths {
    pub document: PathBuf,
    pub features: PathBuf,
    pub scores: Option<PathBuf>,
    pub gt_pairs: Option<PathBuf>,
    pub relation: Relation,
}

pub struct Corpus {
    pub document: ComicDocument,
    pub features: FeatureTable,
    pub scores: RelationshipMatrix,
    pub gt_pairs: Option<Vec<(String, String)>>,
}

fn from_dir(dir: Option<&PathBuf>, name: &str, must_exist: bool) -> Option<PathBuf> {
    let p = dir?.join(name);
    (!must_exist || p.exists()).then_some(p)
}

/// Checks flag combinations without touching any file.
pub fn resolve_paths(args: &CorpusArgs) -> CliResult<Paths> {
    let document = args
        .document
        .clone()
        .or_else(|| from_dir(args.corpus.as_ref(), "document.json", false))
        .ok_or_else(|| CliError::usage("missing --document (or --corpus)"))?;
    let features = args
        .features
        .clone()
        .or_else(|| from_dir(args.corpus.as_ref(), "features.jsonl", false))
        .ok_or_else(|| CliError::usage("missing --features (or --corpus)"))?;
    let gt_pairs = args
        .gt_pairs
        .clone()
        .or_else(|| from_dir(args.corpus.as_ref(), "gt_pairs.jsonl", true));
    let relation = match (args.relation, &args.scores) {
        (Some(r), _) => r,
        (None, Some(_)) => Relation::Sgg,
        (None, None) => {
            return Err(CliError::usage(
                "no relationship scores: pass --scores, or --relation distance|gt",
            ))
        }
    };
    if relation == Relation::Sgg && args.scores.is_none() {
        return Err(CliError::usage("--relation sgg needs --scores"));
    }
    if relation == Relation::Gt && gt_pairs.is_none() {
        return Err(CliError::usage("--relation gt needs --gt-pairs"));
    }
    Ok(Paths {
        document,
        features,
        scores: args.scores.clone(),
        gt_pairs,
        relation,
    })
}

pub fn load_corpus(paths: &Paths) -> CliResult<Corpus> {
    let document = load_document(&paths.document)?;
    let features = load_features(&paths.features)?;
    let gt_pairs = match &paths.gt_pairs {
        Some(p) => Some(load_gt_pairs(p, &document)?),
        None => None,
    };
    let scores = match paths.relation {
        Relation::Distance => distance_scores(&document),
        Relation::Sgg => load_scores(paths.scores.as_ref().expect("checked in resolve_paths"), &document)?,
        Relation::Gt => gt_scores(&document, gt_pairs.as_deref().expect("checked in resolve_paths"))
            .map_err(|e| CliError::input(e.to_string()))?,
    };
    Ok(Corpus {
        document,
        features,
        scores,
        gt_pairs,
    })
}

pub fn require_out(out: &Option<PathBuf>) -> CliResult<PathBuf> {
    out.clone().ok_or_else(|| CliError::usage("missing --out"))
}

pub fn write_text(path: &Path, content: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::input(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, content).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes `report.json` and `report.txt` under `out` and prints the table.
pub fn emit_report(out: &Path, report: &MetricReport) -> CliResult<()> {
    let table = report.render_table();
    write_json(&out.join("report.json"), report)?;
    write_text(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
