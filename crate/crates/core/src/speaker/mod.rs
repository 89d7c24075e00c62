//! Text-side speaker prediction.
//!
//! A [`SpeakerBackend`] answers rendered prompts with raw text; everything around it
//! (chunking, prompt construction, strict reply parsing, re-prompting on malformed
//! replies) lives here so every backend is held to the same protocol.

pub mod oracle;
pub mod prompt;
pub mod remote;

pub use oracle::{LevelModel, OracleConfig, ScriptedOracle};
pub use prompt::{
    build_prompt, format_reply, parse_reply, parse_roster_reply, PromptBundle, PromptLine, ReplyError, ReplyLine,
    SpeakerReply, TemplateSet,
};
pub use remote::{RemoteBackend, RemoteConfig, TranscriptMode, TranscriptRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{reading_order, ComicDocument, Confidence, Label, LabelAssignment, NameRoster};
use crate::propagation::PseudoLabelSet;

pub const DEFAULT_CHUNK_SIZE: usize = 60;
pub const DEFAULT_RETRY_BUDGET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_context: bool,
    pub supports_candidates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ExtractNames,
    ExtractContext,
    PredictSpeakers,
}

/// Everything a backend may look at for one completion.
///
/// Prompt-driven backends only need the two prompts; the scripted oracle reads the
/// structured fields instead.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub task: TaskKind,
    pub chunk_index: usize,
    pub attempt: usize,
    pub system_prompt: String,
    pub user_prompt: String,
    /// Region ids in prompt-line order (line `i + 1` ↔ `text_ids[i]`).
    pub text_ids: Vec<String>,
    /// Candidate `(name, probability)` per line, when candidates are shown.
    pub candidates: Vec<Option<(String, f64)>>,
    pub roster: NameRoster,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded reply for request {request_hash} (chunk {chunk_index})")]
    MissingRecording { chunk_index: usize, request_hash: String },
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("reply rejected after {attempts} attempt(s): {last_error}")]
    RetryExhausted { attempts: usize, last_error: ReplyError },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

pub trait SpeakerBackend {
    fn capabilities(&self) -> Capabilities;

    /// Extra attempts allowed after a reply fails to parse.
    fn retry_budget(&self) -> usize;

    /// Raw completion text for one request.
    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError>;
}

impl<B: SpeakerBackend + ?Sized> SpeakerBackend for Box<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn retry_budget(&self) -> usize {
        (**self).retry_budget()
    }
    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Error)]
pub enum SpeakerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid document: {0}")]
    Document(#[from] crate::error::ValidationError),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("empty roster")]
    EmptyRoster,
}

/// Prompt switches: context section, candidate column, candidate probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub ctx: bool,
    pub cand: bool,
    pub prob: bool,
    pub chunk_size: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            ctx: true,
            cand: true,
            prob: true,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

/// Reading-ordered text ids split into consecutive chunks of at most `chunk_size`.
pub fn chunk_dialogue(document: &ComicDocument, chunk_size: usize) -> Result<Vec<Vec<String>>, SpeakerError> {
    let size = chunk_size.max(1);
    Ok(reading_order(document)?.chunks(size).map(<[String]>::to_vec).collect())
}

fn retry_feedback(user_prompt: &str, error: &ReplyError) -> String {
    format!(
        "{}\n\n[Your previous reply was rejected: {}. Reply again using exactly the output format above.]",
        user_prompt, error
    )
}

/// Sends `request`, re-prompting with the parse error while the retry budget lasts.
/// Returns the parsed value and the number of retries used.
pub fn request_with_retries<T>(
    backend: &mut dyn SpeakerBackend,
    mut request: BackendRequest,
    parse: impl Fn(&str) -> Result<T, ReplyError>,
) -> Result<(T, usize), BackendError> {
    let budget = backend.retry_budget();
    let base_prompt = request.user_prompt.clone();
    let mut last_error = None;
    for attempt in 0..=budget {
        request.attempt = attempt;
        if let Some(err) = &last_error {
            request.user_prompt = retry_feedback(&base_prompt, err);
        }
        let raw = backend.complete(&request)?;
        match parse(&raw) {
            Ok(v) => return Ok((v, attempt)),
            Err(e) => last_error = Some(e),
        }
    }
    Err(BackendError::RetryExhausted {
        attempts: budget + 1,
        last_error: last_error.expect("at least one attempt"),
    })
}

fn texts_in_reading_order(document: &ComicDocument) -> Result<Vec<&str>, SpeakerError> {
    Ok(reading_order(document)?
        .iter()
        .map(|id| document.text(id).expect("ordered ids exist").text.as_str())
        .collect())
}

/// Asks the backend for the characters appearing in the dialogue.
pub fn extract_names(
    document: &ComicDocument,
    backend: &mut dyn SpeakerBackend,
    templates: &TemplateSet,
) -> Result<NameRoster, SpeakerError> {
    let texts = texts_in_reading_order(document)?;
    let bundle = prompt::build_names_prompt(templates, &texts);
    let request = BackendRequest {
        task: TaskKind::ExtractNames,
        chunk_index: 0,
        attempt: 0,
        system_prompt: bundle.system_prompt.clone(),
        user_prompt: bundle.user_prompt(),
        text_ids: vec![],
        candidates: vec![],
        roster: NameRoster::default(),
    };
    let (roster, _) = request_with_retries(backend, request, parse_roster_reply)?;
    Ok(roster)
}

/// Story summary and character profiles, kept verbatim for later prompts.
/// A whitespace-only reply yields an empty context.
pub fn extract_context(
    document: &ComicDocument,
    roster: &NameRoster,
    backend: &mut dyn SpeakerBackend,
    templates: &TemplateSet,
) -> Result<String, SpeakerError> {
    if roster.is_empty() {
        return Err(SpeakerError::EmptyRoster);
    }
    if !backend.capabilities().supports_context {
        return Err(SpeakerError::Unsupported("context extraction"));
    }
    let texts = texts_in_reading_order(document)?;
    let bundle = prompt::build_context_prompt(templates, &texts, roster);
    let request = BackendRequest {
        task: TaskKind::ExtractContext,
        chunk_index: 0,
        attempt: 0,
        system_prompt: bundle.system_prompt.clone(),
        user_prompt: bundle.user_prompt(),
        text_ids: vec![],
        candidates: vec![],
        roster: roster.clone(),
    };
    let raw = backend.complete(&request)?;
    let trimmed = raw.trim();
    Ok(if trimmed.is_empty() { String::new() } else { raw })
}

/// Per-call bookkeeping from [`predict_speakers`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionStats {
    pub chunks: usize,
    pub retries: usize,
    pub failed_chunks: usize,
}

/// Labels every text region. Texts of chunks whose replies never parsed become ABSTAIN;
/// transport and replay failures abort.
pub fn predict_speakers(
    document: &ComicDocument,
    roster: &NameRoster,
    backend: &mut dyn SpeakerBackend,
    templates: &TemplateSet,
    options: &PromptOptions,
    context: Option<&str>,
    candidates: Option<&PseudoLabelSet>,
) -> Result<(LabelAssignment, PredictionStats), SpeakerError> {
    if roster.is_empty() {
        return Err(SpeakerError::EmptyRoster);
    }
    let caps = backend.capabilities();
    let context = if options.ctx { context } else { None };
    if context.is_some_and(|c| !c.trim().is_empty()) && !caps.supports_context {
        return Err(SpeakerError::Unsupported("context"));
    }
    let candidates = if options.cand { candidates } else { None };
    if candidates.is_some() && !caps.supports_candidates {
        return Err(SpeakerError::Unsupported("speaker candidates"));
    }

    let mut assignment = LabelAssignment::all_abstain(document.text_ids());
    let mut stats = PredictionStats::default();
    for (chunk_index, chunk) in chunk_dialogue(document, options.chunk_size)?.iter().enumerate() {
        stats.chunks += 1;
        let cand_for = |id: &str| {
            candidates
                .and_then(|c| c.get(id))
                .map(|p| (p.name.as_str(), p.source_confidence.as_probability()))
        };
        let lines: Vec<PromptLine<'_>> = chunk
            .iter()
            .map(|id| PromptLine {
                text: &document.text(id).expect("chunked ids exist").text,
                candidate: cand_for(id),
            })
            .collect();
        let bundle = build_prompt(templates, &lines, roster, context, candidates.is_some(), options.prob);
        let line_ids: Vec<String> = (1..=chunk.len()).map(|i| i.to_string()).collect();
        let request = BackendRequest {
            task: TaskKind::PredictSpeakers,
            chunk_index,
            attempt: 0,
            system_prompt: bundle.system_prompt.clone(),
            user_prompt: bundle.user_prompt(),
            text_ids: chunk.clone(),
            candidates: chunk
                .iter()
                .map(|id| cand_for(id).map(|(n, p)| (n.to_string(), p)))
                .collect(),
            roster: roster.clone(),
        };
        match request_with_retries(backend, request, |raw| parse_reply(raw, &line_ids, roster)) {
            Ok((reply, retries)) => {
                stats.retries += retries;
                for line in reply.lines {
                    let pos: usize = line.text_id.parse::<usize>().expect("validated id") - 1;
                    let name = roster.name_for_id(&line.char_id).expect("validated char id");
                    assignment.insert(chunk[pos].clone(), Label::named(name, Confidence::Level(line.level)));
                }
            }
            Err(BackendError::RetryExhausted { attempts, .. }) => {
                stats.retries += attempts - 1;
                stats.failed_chunks += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((assignment, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Page, TextRegion};

    pub(crate) fn doc_with_texts(n: usize) -> ComicDocument {
        ComicDocument {
            title: "d".into(),
            pages: vec![Page {
                index: 0,
                width: 100.0,
                height: 100.0,
            }],
            characters: vec![],
            texts: (0..n)
                .map(|i| TextRegion {
                    id: format!("t{}", i + 1),
                    page_index: 0,
                    bbox: BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap(),
                    text: format!("line {}", i),
                    order: i as i64,
                    gt_label: None,
                })
                .collect(),
            roster: NameRoster::default(),
        }
    }

    #[test]
    fn chunking_sizes() {
        let sizes: Vec<usize> = chunk_dialogue(&doc_with_texts(130), 60)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![60, 60, 10]);
        assert!(chunk_dialogue(&doc_with_texts(0), 60).unwrap().is_empty());
        assert_eq!(chunk_dialogue(&doc_with_texts(7), 1).unwrap().len(), 7);
    }

    /// Replays canned replies in order.
    struct Canned {
        replies: Vec<String>,
        budget: usize,
        calls: usize,
    }

    impl SpeakerBackend for Canned {
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                supports_context: true,
                supports_candidates: true,
            }
        }
        fn retry_budget(&self) -> usize {
            self.budget
        }
        fn complete(&mut self, _: &BackendRequest) -> Result<String, BackendError> {
            let r = self.replies.get(self.calls).cloned().unwrap_or_default();
            self.calls += 1;
            Ok(r)
        }
    }

    #[test]
    fn retry_then_success_and_exhaustion() {
        let mut doc = doc_with_texts(2);
        doc.roster = NameRoster::from_names(["Keitaro", "Naru"]).unwrap();
        let roster = doc.roster.clone();
        let mut b = Canned {
            replies: vec!["garbage".into(), "1 | Keitaro | A | 5\n2 | Naru | B | 2".into()],
            budget: 2,
            calls: 0,
        };
        let (a, stats) = predict_speakers(
            &doc,
            &roster,
            &mut b,
            &TemplateSet::english(),
            &PromptOptions::default(),
            None,
            None,
        )
        .unwrap();
        assert_eq!(stats.retries, 1);
        assert_eq!(a.get("t1").unwrap().name(), Some("Keitaro"));
        assert_eq!(a.get("t2").unwrap().confidence(), Some(Confidence::Level(2)));

        let mut failing = Canned {
            replies: vec!["garbage".into()],
            budget: 0,
            calls: 0,
        };
        let (a, stats) = predict_speakers(
            &doc,
            &roster,
            &mut failing,
            &TemplateSet::english(),
            &PromptOptions::default(),
            None,
            None,
        )
        .unwrap();
        assert_eq!(stats.failed_chunks, 1);
        assert!(a.iter().all(|(_, l)| l.is_abstain()));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn names_and_context_extraction() {
        let doc = doc_with_texts(2);
        let mut b = Canned {
            replies: vec!["A | Keitaro\nB | Naru\nC | Naru".into()],
            budget: 0,
            calls: 0,
        };
        let roster = extract_names(&doc, &mut b, &TemplateSet::english()).unwrap();
        assert_eq!(roster.names().collect::<Vec<_>>(), vec!["Keitaro", "Naru"]);
        let mut empty = Canned {
            replies: vec!["".into()],
            budget: 0,
            calls: 0,
        };
        assert!(matches!(
            extract_names(&doc, &mut empty, &TemplateSet::english()),
            Err(SpeakerError::Backend(BackendError::RetryExhausted { .. }))
        ));
        let mut ws = Canned {
            replies: vec!["  \n ".into()],
            budget: 0,
            calls: 0,
        };
        assert_eq!(
            extract_context(&doc, &roster, &mut ws, &TemplateSet::english()).unwrap(),
            ""
        );
        let mut ctx = Canned {
            replies: vec!["1. Summary: x".into()],
            budget: 0,
            calls: 0,
        };
        assert_eq!(
            extract_context(&doc, &roster, &mut ctx, &TemplateSet::english()).unwrap(),
            "1. Summary: x"
        );
    }
}
