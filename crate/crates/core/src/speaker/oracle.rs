//! Offline stand-in for an LLM speaker predictor with a controllable error rate.
//!
//! Every random decision for a text is drawn from a stream seeded by `(seed, text id)`,
//! so replies do not depend on chunking, call order or how often the oracle is asked.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, Capabilities, SpeakerBackend, TaskKind, DEFAULT_RETRY_BUDGET};
use crate::model::{reading_order, ComicDocument, NameRoster};
use crate::seed;

/// How confidence levels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "level")]
pub enum LevelModel {
    /// Correct answers get 4 or 5, wrong answers 1, 2 or 3 (uniformly).
    #[default]
    Informative,
    /// Uniform over 1..=5 regardless of correctness.
    Uniform,
    Fixed(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub error_rate: f64,
    pub candidate_adopt_prob: f64,
    pub seed: u64,
    pub level_model: LevelModel,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            error_rate: 0.0,
            candidate_adopt_prob: 0.0,
            seed: 0,
            level_model: LevelModel::Informative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    config: OracleConfig,
    truth: BTreeMap<String, String>,
    /// Ground-truth names by first appearance (texts in reading order, then characters).
    appearance: Vec<String>,
    text_counts: BTreeMap<String, usize>,
}

const STREAM_SPEAKER: u64 = 0x5350;

impl ScriptedOracle {
    /// Fails when the configuration is out of range or any text lacks a ground-truth label.
    pub fn new(config: OracleConfig, document: &ComicDocument) -> Result<Self, BackendError> {
        for (name, v) in [
            ("error_rate", config.error_rate),
            ("candidate_adopt_prob", config.candidate_adopt_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BackendError::Config(format!("{} = {} outside [0, 1]", name, v)));
            }
        }
        if let LevelModel::Fixed(l) = config.level_model {
            if !(1..=5).contains(&l) {
                return Err(BackendError::Config(format!("fixed level {} outside 1..=5", l)));
            }
        }
        let mut truth = BTreeMap::new();
        let mut appearance: Vec<String> = Vec::new();
        let mut text_counts = BTreeMap::new();
        let order = reading_order(document).map_err(|e| BackendError::Config(e.to_string()))?;
        for id in &order {
            let t = document.text(id).expect("ordered id exists");
            let label = t.gt_label.clone().ok_or_else(|| {
                BackendError::Config(format!("scripted oracle needs ground truth; text {} has none", id))
            })?;
            if !appearance.contains(&label) {
                appearance.push(label.clone());
            }
            *text_counts.entry(label.clone()).or_insert(0) += 1;
            truth.insert(id.clone(), label);
        }
        for c in &document.characters {
            if let Some(l) = &c.gt_label {
                if !appearance.contains(l) {
                    appearance.push(l.clone());
                }
            }
        }
        Ok(ScriptedOracle {
            config,
            truth,
            appearance,
            text_counts,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// Name and level the oracle answers for `text_id`.
    pub fn answer(&self, text_id: &str, roster: &NameRoster, candidate: Option<&str>) -> (String, u8) {
        let gt = self.truth.get(text_id).map(String::as_str).unwrap_or("");
        let mut rng = seed::rng(self.config.seed, &[seed::hash_str(text_id), STREAM_SPEAKER]);
        let u_err: f64 = rng.random();
        let u_pick: f64 = rng.random();
        let u_adopt: f64 = rng.random();
        let u_level: f64 = rng.random();

        let others: Vec<&str> = roster.names().filter(|n| *n != gt).collect();
        let mut name = if (u_err >= self.config.error_rate && roster.contains_name(gt)) || others.is_empty() {
            gt.to_string()
        } else {
            let i = ((u_pick * others.len() as f64) as usize).min(others.len() - 1);
            others[i].to_string()
        };
        if let Some(c) = candidate {
            if u_adopt < self.config.candidate_adopt_prob && roster.contains_name(c) {
                name = c.to_string();
            }
        }
        if !roster.contains_name(&name) {
            // Only reachable with a roster that lacks the truth and every alternative.
            name = roster.names().next().unwrap_or_default().to_string();
        }
        let correct = name == gt;
        let level = match self.config.level_model {
            LevelModel::Informative if correct => 4 + u8::from(u_level >= 0.5),
            LevelModel::Informative => 1 + ((u_level * 3.0) as u8).min(2),
            LevelModel::Uniform => 1 + ((u_level * 5.0) as u8).min(4),
            LevelModel::Fixed(l) => l,
        };
        (name, level)
    }

    fn names_reply(&self) -> String {
        let roster = NameRoster::from_names(self.appearance.iter().cloned()).expect("distinct names");
        roster
            .entries()
            .iter()
            .map(|e| format!("{} | {}", e.id, e.name))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn context_reply(&self, roster: &NameRoster) -> String {
        let mut s = format!(
            "1. Summary: A story told in {} lines of dialogue among {} characters.\n2. Characters:",
            self.truth.len(),
            roster.len()
        );
        for name in roster.names() {
            let n = self.text_counts.get(name).copied().unwrap_or(0);
            s.push_str(&format!("\n- {}: speaks {} line(s).", name, n));
        }
        s
    }
}

impl SpeakerBackend for ScriptedOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_context: true,
            supports_candidates: true,
        }
    }

    fn retry_budget(&self) -> usize {
        DEFAULT_RETRY_BUDGET
    }

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        Ok(match request.task {
            TaskKind::ExtractNames => self.names_reply(),
            TaskKind::ExtractContext => self.context_reply(&request.roster),
            TaskKind::PredictSpeakers => request
                .text_ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let candidate = request
                        .candidates
                        .get(i)
                        .and_then(|c| c.as_ref())
                        .map(|(n, _)| n.as_str());
                    let (name, level) = self.answer(id, &request.roster, candidate);
                    let char_id = request.roster.id_for_name(&name).unwrap_or("?");
                    format!("{} | {} | {} | {}", i + 1, name, char_id, level)
                })
                .collect::<Vec<_>>()
                .join("\n"),
        })
    }
}
