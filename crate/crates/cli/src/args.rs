use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "comicfuse",
    version,
    about = "Speaker prediction and character identification for comics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic titles.
    Gen(GenArgs),
    /// Run the iterative pipeline on one title.
    Run(Box<RunArgs>),
    /// Re-score a finished trace against ground truth.
    Eval(EvalArgs),
    /// K-means + relationship baseline (uses ground truth to map clusters).
    Baseline(BaselineArgs),
    /// Compare trace directories.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// Reciprocal center distance.
    Distance,
    /// Scores from `--scores`.
    Sgg,
    /// Ground-truth pairs from `--gt-pairs`.
    Gt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescoreModeArg {
    Intent,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleLevels {
    Informative,
    Uniform,
}

/// Input files shared by `run` and `baseline`.
#[derive(Debug, Clone, Default)]
pub struct CorpusArgs {
    pub corpus: Option<PathBuf>,
    pub document: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub gt_pairs: Option<PathBuf>,
    pub relation: Option<Relation>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenArgs {
    /// Flat TOML file with defaults for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of titles.
    #[arg(long)]
    pub titles: Option<usize>,
    #[arg(long)]
    pub num_pages: Option<usize>,
    #[arg(long)]
    pub chars_per_page: Option<usize>,
    #[arg(long)]
    pub texts_per_page: Option<usize>,
    #[arg(long)]
    pub roster_size: Option<usize>,
    #[arg(long)]
    pub name_mention_prob: Option<f64>,
    #[arg(long)]
    pub nearest_speaker_prob: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub cluster_sep: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory holding document.json, features.jsonl and gt_pairs.jsonl.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub document: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Relationship score file (JSON lines).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub gt_pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub relation: Option<Relation>,
    /// Roster file overriding the document roster.
    #[arg(long)]
    pub roster: Option<PathBuf>,
    /// Prompt template directory.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the trace in this directory for `--iters` more iterations.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Treat the document as detector/OCR output; score against `--gt-document`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub zero_shot: Option<bool>,
    #[arg(long)]
    pub gt_document: Option<PathBuf>,
    #[arg(long)]
    pub name_map: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,

    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub oracle_error: Option<f64>,
    #[arg(long)]
    pub oracle_adopt: Option<f64>,
    #[arg(long)]
    pub oracle_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub oracle_levels: Option<OracleLevels>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    /// Call the endpoint and append every reply to this transcript.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Answer from this transcript without network access.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long)]
    pub retry_budget: Option<usize>,
    #[arg(long)]
    pub timeout: Option<u64>,

    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub rescore_mode: Option<RescoreModeArg>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub rescore_reset: Option<bool>,
    #[arg(long)]
    pub min_level: Option<u8>,
    #[arg(long)]
    pub min_prob: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ctx: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cand: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub prob: Option<bool>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub roster_filter_pct: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ground-truth document.
    #[arg(long)]
    pub document: Option<PathBuf>,
    #[arg(long)]
    pub gt_pairs: Option<PathBuf>,
    /// Match the regions of `--detections` to the ground truth by IoU.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub zero_shot: Option<bool>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub name_map: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BaselineArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory holding document.json, features.jsonl and gt_pairs.jsonl.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub document: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Relationship score file (JSON lines).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub gt_pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub relation: Option<Relation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// K-means initializations; the lowest within-cluster error wins.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Trace directory; repeat to compare several.
    #[arg(long)]
    #[serde(default)]
    pub trace: Vec<PathBuf>,
    /// Documents to draw label overlays for, matched to traces by title.
    #[arg(long)]
    #[serde(default)]
    pub overlay: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! corpus_args {
    ($t:ty) => {
        impl $t {
            pub fn corpus_args(&self) -> CorpusArgs {
                CorpusArgs {
                    corpus: self.corpus.clone(),
                    document: self.document.clone(),
                    features: self.features.clone(),
                    scores: self.scores.clone(),
                    gt_pairs: self.gt_pairs.clone(),
                    relation: self.relation,
                }
            }
        }
    };
}

corpus_args!(RunArgs);
corpus_args!(BaselineArgs);
