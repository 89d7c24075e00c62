//! Seeded synthetic titles with ground truth, for exercising the loop without real data.
//!
//! Each page is a row of grid cells, one character per cell, standing in the lower half.
//! Text boxes sit in slots in the upper half of a cell, so the character of that cell is
//! always the nearest one. A text's speaker is that nearest character with probability
//! `nearest_speaker_prob` and another character on the page otherwise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::FeatureTable;
use crate::evaluation::{relationship_accuracy, Rate};
use crate::model::{BoundingBox, CharacterRegion, ComicDocument, NameRoster, Page, TextRegion};
use crate::relationship::distance_scores;
use crate::seed;

const CELL_W: f64 = 200.0;
const PAGE_H: f64 = 400.0;
const SLOT_COLS: usize = 2;
const SLOT_ROWS: usize = 3;
pub const SLOTS_PER_CELL: usize = SLOT_COLS * SLOT_ROWS;
const JITTER: f64 = 8.0;

const NAMES: [&str; 16] = [
    "Akira", "Botan", "Chiyo", "Daigo", "Emiko", "Fuyuki", "Goro", "Haruka", "Isamu", "Kaede", "Mamoru", "Natsuki",
    "Osamu", "Ryoko", "Sayaka", "Tetsuo",
];

const FILLERS: [&str; 12] = [
    "we should get moving before it gets dark.",
    "did you hear that noise?",
    "this is not what I expected at all.",
    "I will handle the rest myself.",
    "wait for me at the station.",
    "that was close, too close.",
    "let us talk about it tomorrow.",
    "nobody told me about this plan!",
    "I have a bad feeling about the weather.",
    "thanks, I owe you one.",
    "keep your voice down.",
    "where did everybody go?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub title: String,
    pub num_pages: usize,
    pub chars_per_page: usize,
    pub texts_per_page: usize,
    pub roster_size: usize,
    pub name_mention_prob: f64,
    pub nearest_speaker_prob: f64,
    pub feature_dim: usize,
    /// Distance between class centers in units of the within-class standard deviation.
    pub cluster_sep: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            title: "synthetic".into(),
            num_pages: 30,
            chars_per_page: 3,
            texts_per_page: 10,
            roster_size: 5,
            name_mention_prob: 0.2,
            nearest_speaker_prob: 0.85,
            feature_dim: 8,
            cluster_sep: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("infeasible layout: {0}")]
    Infeasible(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        for (n, v) in [
            ("name_mention_prob", self.name_mention_prob),
            ("nearest_speaker_prob", self.nearest_speaker_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{} = {} outside [0, 1]", n, v));
            }
        }
        if self.roster_size < 2 {
            return bad("roster_size must be >= 2".into());
        }
        if self.num_pages == 0 || self.chars_per_page == 0 {
            return bad("need at least one page and one character per page".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if !(self.cluster_sep.is_finite() && self.cluster_sep >= 0.0) {
            return bad(format!("cluster_sep {} must be finite and >= 0", self.cluster_sep));
        }
        if self.chars_per_page > self.roster_size {
            return Err(SynthError::Infeasible(format!(
                "{} characters per page but only {} names",
                self.chars_per_page, self.roster_size
            )));
        }
        if self.texts_per_page > self.chars_per_page * SLOTS_PER_CELL {
            return Err(SynthError::Infeasible(format!(
                "{} texts per page exceed {} slots",
                self.texts_per_page,
                self.chars_per_page * SLOTS_PER_CELL
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub document: ComicDocument,
    /// (speaker character id, text id) for every text.
    pub gt_pairs: Vec<(String, String)>,
    pub features: FeatureTable,
}

pub fn roster_names(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| {
            let base = NAMES[i % NAMES.len()];
            if i < NAMES.len() {
                base.to_string()
            } else {
                format!("{}{}", base, roster_suffix(i / NAMES.len()))
            }
        })
        .collect()
}

fn roster_suffix(round: usize) -> String {
    // Letters only, so names never collide with numbers in dialogue.
    crate::model::roster_letter(round - 1).to_lowercase()
}

fn class_centers(k: usize, d: usize, sep: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if d >= k {
        // Scaled axis vectors: every pair is exactly `sep` apart.
        let s = sep / std::f64::consts::SQRT_2;
        (0..k)
            .map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())
            .collect()
    } else {
        let normal = Normal::new(0.0, sep / (2.0 * d as f64).sqrt()).expect("finite sd");
        (0..k).map(|_| (0..d).map(|_| normal.sample(rng)).collect()).collect()
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, &[seed::hash_str("synthgen")]);
    let names = roster_names(config.roster_size);
    let centers = class_centers(config.roster_size, config.feature_dim, config.cluster_sep, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-JITTER..=JITTER);

    let mut pages = Vec::new();
    let mut characters = Vec::new();
    let mut texts = Vec::new();
    let mut gt_pairs = Vec::new();
    let mut features = FeatureTable::new(config.feature_dim);
    let width = CELL_W * config.chars_per_page as f64;

    for p in 0..config.num_pages {
        pages.push(Page {
            index: p,
            width,
            height: PAGE_H,
        });
        let mut cast: Vec<usize> = (0..config.roster_size).collect();
        cast.shuffle(&mut rng);
        cast.truncate(config.chars_per_page);

        let mut cell_chars = Vec::with_capacity(cast.len());
        for (cell, &who) in cast.iter().enumerate() {
            let id = format!("c{}", characters.len() + 1);
            let x0 = CELL_W * cell as f64 + 70.0 + jitter(&mut rng);
            let y0 = 210.0 + jitter(&mut rng);
            characters.push(CharacterRegion {
                id: id.clone(),
                page_index: p,
                bbox: BoundingBox::new(x0, y0, x0 + 60.0, y0 + 170.0).expect("positive extent"),
                gt_label: Some(names[who].clone()),
            });
            let v: Vec<f64> = centers[who].iter().map(|c| c + noise.sample(&mut rng)).collect();
            features.insert(id.clone(), v).expect("finite features");
            cell_chars.push((id, who));
        }

        let mut free: Vec<Vec<usize>> = (0..cast.len()).map(|_| (0..SLOTS_PER_CELL).collect()).collect();
        for j in 0..config.texts_per_page {
            let cell = if j < cast.len() {
                j
            } else {
                let open: Vec<usize> = (0..cast.len()).filter(|&c| !free[c].is_empty()).collect();
                *open.choose(&mut rng).expect("capacity checked")
            };
            let slot_pos = rng.random_range(0..free[cell].len());
            let slot = free[cell].remove(slot_pos);
            let (row, col) = (slot / SLOT_COLS, slot % SLOT_COLS);
            let x0 = CELL_W * cell as f64 + 45.0 + 60.0 * col as f64 + jitter(&mut rng) / 2.0;
            let y0 = 10.0 + 62.0 * row as f64 + jitter(&mut rng) / 2.0;

            let speaker_cell = if cast.len() == 1 || rng.random::<f64>() < config.nearest_speaker_prob {
                cell
            } else {
                let others: Vec<usize> = (0..cast.len()).filter(|&c| c != cell).collect();
                *others.choose(&mut rng).expect("at least one other")
            };
            let (speaker_id, speaker) = &cell_chars[speaker_cell];
            let filler = FILLERS[rng.random_range(0..FILLERS.len())];
            let mention = rng.random::<f64>() < config.name_mention_prob;
            let text = if mention {
                let others: Vec<usize> = (0..config.roster_size).filter(|w| w != speaker).collect();
                let on_page: Vec<usize> = others.iter().copied().filter(|w| cast.contains(w)).collect();
                let pool = if on_page.is_empty() { &others } else { &on_page };
                let addressee = pool.choose(&mut rng).expect("roster has >= 2 names");
                format!("{}, {}", names[*addressee], filler)
            } else {
                let mut f = filler.to_string();
                if let Some(first) = f.get_mut(0..1) {
                    first.make_ascii_uppercase();
                }
                f
            };
            let id = format!("t{}", texts.len() + 1);
            texts.push(TextRegion {
                id: id.clone(),
                page_index: p,
                bbox: BoundingBox::new(x0, y0, x0 + 50.0, y0 + 40.0).expect("positive extent"),
                text,
                order: j as i64,
                gt_label: Some(names[*speaker].clone()),
            });
            gt_pairs.push((speaker_id.clone(), id));
        }
    }

    let document = ComicDocument {
        title: config.title.clone(),
        pages,
        characters,
        texts,
        roster: NameRoster::from_names(names.iter().cloned()).expect("distinct names"),
    };
    document
        .validate()
        .map_err(|e| SynthError::Infeasible(format!("generated document invalid: {}", e)))?;
    Ok(SynthCorpus {
        document,
        gt_pairs,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    /// Relationship accuracy of the distance scorer.
    pub distance_relationship: Rate,
    /// Share of texts mentioning some roster name.
    pub mention_rate: f64,
    /// Share of character regions closer to another class mean than to their own.
    pub overlap_estimate: f64,
}

pub fn difficulty_report(corpus: &SynthCorpus) -> DifficultyReport {
    let doc = &corpus.document;
    let distance_relationship = relationship_accuracy(&distance_scores(doc), &corpus.gt_pairs).unwrap_or_default();

    let names: Vec<&str> = doc.roster.names().collect();
    let mentions = doc
        .texts
        .iter()
        .filter(|t| names.iter().any(|n| t.text.contains(n)))
        .count();
    let mention_rate = if doc.texts.is_empty() {
        0.0
    } else {
        mentions as f64 / doc.texts.len() as f64
    };

    let truth = doc.character_truth();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (id, label) in &truth {
        if let Some(x) = corpus.features.get(id) {
            let e = sums.entry(label.as_str()).or_insert_with(|| (vec![0.0; x.len()], 0));
            for (s, v) in e.0.iter_mut().zip(x) {
                *s += v;
            }
            e.1 += 1;
        }
    }
    let means: BTreeMap<&str, Vec<f64>> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut confused = 0usize;
    let mut total = 0usize;
    let labels: BTreeSet<&str> = means.keys().copied().collect();
    for (id, label) in &truth {
        let Some(x) = corpus.features.get(id) else { continue };
        total += 1;
        let own = crate::classifier::sq_dist(x, &means[label.as_str()]);
        if labels
            .iter()
            .any(|l| *l != label && crate::classifier::sq_dist(x, &means[l]) < own)
        {
            confused += 1;
        }
    }
    DifficultyReport {
        distance_relationship,
        mention_rate,
        overlap_estimate: if total == 0 {
            0.0
        } else {
            confused as f64 / total as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_speaker_one_gives_perfect_distance_accuracy() {
        let c = generate(&SynthConfig {
            nearest_speaker_prob: 1.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(difficulty_report(&c).distance_relationship.value(), 1.0);
    }

    #[test]
    fn no_mentions_when_prob_zero() {
        let c = generate(&SynthConfig {
            name_mention_prob: 0.0,
            roster_size: 16,
            chars_per_page: 4,
            ..Default::default()
        })
        .unwrap();
        for t in &c.document.texts {
            for n in c.document.roster.names() {
                assert!(!t.text.contains(n), "{:?} mentions {}", t.text, n);
            }
        }
        assert_eq!(difficulty_report(&c).mention_rate, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 12,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(
            generate(&cfg).unwrap(),
            generate(&SynthConfig { seed: 13, ..cfg }).unwrap()
        );
    }

    #[test]
    fn mention_rate_within_binomial_bound() {
        let p = 0.3;
        let c = generate(&SynthConfig {
            num_pages: 60,
            name_mention_prob: p,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let n = c.document.texts.len() as f64;
        assert!(n >= 500.0);
        let bound = 3.0 * (p * (1.0 - p) / n).sqrt();
        assert!((difficulty_report(&c).mention_rate - p).abs() <= bound);
    }

    #[test]
    fn separated_clusters_do_not_overlap() {
        let c = generate(&SynthConfig {
            cluster_sep: 40.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(difficulty_report(&c).overlap_estimate, 0.0);
    }

    #[test]
    fn infeasible_layouts_rejected() {
        let too_many = SynthConfig {
            texts_per_page: 3 * SLOTS_PER_CELL + 1,
            ..Default::default()
        };
        assert!(matches!(generate(&too_many), Err(SynthError::Infeasible(_))));
        let cast = SynthConfig {
            chars_per_page: 6,
            roster_size: 5,
            ..Default::default()
        };
        assert!(matches!(generate(&cast), Err(SynthError::Infeasible(_))));
    }

    #[test]
    fn every_text_speaker_is_on_its_page() {
        let c = generate(&SynthConfig {
            nearest_speaker_prob: 0.3,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        for (cid, tid) in &c.gt_pairs {
            let ch = c.document.character(cid).unwrap();
            let t = c.document.text(tid).unwrap();
            assert_eq!(ch.page_index, t.page_index);
            assert_eq!(ch.gt_label, t.gt_label);
        }
    }
}
