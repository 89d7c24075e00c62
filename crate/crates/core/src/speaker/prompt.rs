//! Prompt rendering and the pipe-delimited reply protocol.
//!
//! Requests list one `Text ID | Text` line per dialogue, optionally followed by
//! `| Candidate (0.56)`. Replies must contain exactly one
//! `Text ID | Character Name | Character ID | Confidence Level` line per request line.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::CorpusError;
use crate::model::NameRoster;

/// The four system-prompt templates. `{{name}}` substitutes a value and
/// `{{#flag}}...{{/flag}}` keeps its body only when `flag` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub language: String,
    pub names: String,
    pub context: String,
    pub speakers: String,
    pub speakers_candidates: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::english()
    }
}

impl TemplateSet {
    pub fn english() -> Self {
        TemplateSet {
            language: "en".into(),
            names: include_str!("../../templates/en/names.txt").into(),
            context: include_str!("../../templates/en/context.txt").into(),
            speakers: include_str!("../../templates/en/speakers.txt").into(),
            speakers_candidates: include_str!("../../templates/en/speakers_candidates.txt").into(),
        }
    }

    /// Loads `names.txt`, `context.txt`, `speakers.txt` and `speakers_candidates.txt`
    /// from `dir`; the directory name is used as the language tag.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| CorpusError::Io { path: p, source: e })
        };
        Ok(TemplateSet {
            language: dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            names: read("names.txt")?,
            context: read("context.txt")?,
            speakers: read("speakers.txt")?,
            speakers_candidates: read("speakers_candidates.txt")?,
        })
    }
}

/// Minimal renderer for the template syntax described on [`TemplateSet`].
pub fn render(template: &str, vars: &[(&str, &str)], flags: &[(&str, bool)]) -> String {
    let mut out = template.to_string();
    for (flag, on) in flags {
        let open = format!("{{{{#{}}}}}", flag);
        let close = format!("{{{{/{}}}}}", flag);
        while let Some(start) = out.find(&open) {
            let Some(rel_end) = out[start..].find(&close) else {
                break;
            };
            let end = start + rel_end;
            let body = out[start + open.len()..end].to_string();
            let mut tail_start = end + close.len();
            let replacement = if *on {
                body
            } else {
                // A block that fills whole lines disappears together with its line break.
                let at_line_start = start == 0 || out[..start].ends_with('\n');
                if at_line_start && out[tail_start..].starts_with('\n') {
                    tail_start += 1;
                }
                String::new()
            };
            out.replace_range(start..tail_start, &replacement);
        }
    }
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{}}}}}", name), value);
    }
    out
}

/// Dialogue text made safe for a single pipe-delimited line.
pub fn sanitize_text(text: &str) -> String {
    text.replace(['\r', '\n'], " ").replace('|', "\u{ff5c}")
}

pub fn roster_table(roster: &NameRoster) -> String {
    let mut s = String::from("Character ID | Character Name");
    for e in roster.entries() {
        s.push('\n');
        s.push_str(&e.id);
        s.push_str(" | ");
        s.push_str(&e.name);
    }
    s
}

/// Formats a candidate column value: `Name (0.56)` or just `Name`.
pub fn format_candidate(name: &str, prob: f64, with_prob: bool) -> String {
    if with_prob {
        format!("{} ({:.2})", name, prob)
    } else {
        name.to_string()
    }
}

/// A rendered request: the system prompt and one user line per text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_lines: Vec<String>,
}

impl PromptBundle {
    pub fn user_prompt(&self) -> String {
        self.user_lines.join("\n")
    }
}

/// One text of a chunk as presented to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLine<'a> {
    pub text: &'a str,
    pub candidate: Option<(&'a str, f64)>,
}

/// Builds the speaker-prediction request for one chunk. Line ids are 1-based positions.
///
/// With `candidates` set the candidate-aware template is used and texts that have a
/// candidate get a third column; otherwise the initial template is used and any candidate
/// on a line is ignored.
pub fn build_prompt(
    templates: &TemplateSet,
    lines: &[PromptLine<'_>],
    roster: &NameRoster,
    context: Option<&str>,
    candidates: bool,
    with_prob: bool,
) -> PromptBundle {
    let ctx = context.map(str::trim).filter(|c| !c.is_empty());
    let template = if candidates {
        &templates.speakers_candidates
    } else {
        &templates.speakers
    };
    let roster_s = roster_table(roster);
    let system_prompt = render(
        template,
        &[("roster", &roster_s), ("context", ctx.unwrap_or(""))],
        &[("context", ctx.is_some()), ("prob", with_prob)],
    );
    let user_lines = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut s = format!("{} | {}", i + 1, sanitize_text(l.text));
            if candidates {
                if let Some((name, p)) = l.candidate {
                    s.push_str(" | ");
                    s.push_str(&format_candidate(name, p, with_prob));
                }
            }
            s
        })
        .collect();
    PromptBundle {
        system_prompt,
        user_lines,
    }
}

/// `Text ID | Text` lines for the whole-document name and context requests.
pub fn dialogue_lines(texts: &[&str]) -> Vec<String> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{} | {}", i + 1, sanitize_text(t)))
        .collect()
}

pub fn build_names_prompt(templates: &TemplateSet, texts: &[&str]) -> PromptBundle {
    PromptBundle {
        system_prompt: templates.names.clone(),
        user_lines: dialogue_lines(texts),
    }
}

pub fn build_context_prompt(templates: &TemplateSet, texts: &[&str], roster: &NameRoster) -> PromptBundle {
    let skeleton: Vec<String> = roster.names().map(|n| format!("- {}:", n)).collect();
    PromptBundle {
        system_prompt: render(
            &templates.context,
            &[
                ("roster", &roster_table(roster)),
                ("profile_skeleton", &skeleton.join("\n")),
            ],
            &[],
        ),
        user_lines: dialogue_lines(texts),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyLine {
    pub text_id: String,
    pub name: String,
    pub char_id: String,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerReply {
    pub lines: Vec<ReplyLine>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ReplyError {
    #[error(
        "the number of output lines should be the same as the number of input lines: expected {expected}, got {actual}"
    )]
    LineCountMismatch { expected: usize, actual: usize },
    #[error("malformed line {line:?}: {reason}")]
    MalformedLine { line: String, reason: String },
    #[error("unknown character id in line {line:?}")]
    UnknownCharId { line: String },
    #[error("confidence level outside 1..=5 in line {line:?}")]
    LevelOutOfRange { line: String },
    #[error("text id not in request, or repeated, in line {line:?}")]
    UnexpectedTextId { line: String },
    #[error("empty reply")]
    Empty,
}

fn reply_lines(raw: &str) -> Vec<&str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Strictly parses a speaker reply for a chunk whose line ids are `expected_ids`.
pub fn parse_reply(raw: &str, expected_ids: &[String], roster: &NameRoster) -> Result<SpeakerReply, ReplyError> {
    let lines = reply_lines(raw);
    if lines.len() != expected_ids.len() {
        return Err(ReplyError::LineCountMismatch {
            expected: expected_ids.len(),
            actual: lines.len(),
        });
    }
    let mut seen = vec![false; expected_ids.len()];
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            return Err(ReplyError::MalformedLine {
                line: line.to_string(),
                reason: "expected four non-empty `|`-separated fields".into(),
            });
        }
        let pos = expected_ids.iter().position(|id| id == fields[0]);
        match pos {
            Some(p) if !seen[p] => seen[p] = true,
            _ => return Err(ReplyError::UnexpectedTextId { line: line.to_string() }),
        }
        if roster.name_for_id(fields[2]).is_none() {
            return Err(ReplyError::UnknownCharId { line: line.to_string() });
        }
        let level: i64 = fields[3].parse().map_err(|_| ReplyError::MalformedLine {
            line: line.to_string(),
            reason: "confidence level is not an integer".into(),
        })?;
        if !(1..=5).contains(&level) {
            return Err(ReplyError::LevelOutOfRange { line: line.to_string() });
        }
        out.push(ReplyLine {
            text_id: fields[0].to_string(),
            name: fields[1].to_string(),
            char_id: fields[2].to_string(),
            level: level as u8,
        });
    }
    Ok(SpeakerReply { lines: out })
}

pub fn format_reply(reply: &SpeakerReply) -> String {
    reply
        .lines
        .iter()
        .map(|l| format!("{} | {} | {} | {}", l.text_id, l.name, l.char_id, l.level))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses `Character ID | Character Name` lines into a roster. Ids are reassigned from
/// `A` in reply order and repeated names keep their first occurrence.
pub fn parse_roster_reply(raw: &str) -> Result<NameRoster, ReplyError> {
    let mut names: Vec<String> = Vec::new();
    for line in reply_lines(raw) {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() != 2 || fields[1].is_empty() {
            return Err(ReplyError::MalformedLine {
                line: line.to_string(),
                reason: "expected `Character ID | Character Name`".into(),
            });
        }
        if !names.iter().any(|n| n == fields[1]) {
            names.push(fields[1].to_string());
        }
    }
    if names.is_empty() {
        return Err(ReplyError::Empty);
    }
    Ok(NameRoster::from_names(names).expect("names are distinct and non-empty"))
}
