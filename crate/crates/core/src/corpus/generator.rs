//! Synthetic heterogeneous question-answer corpora.
//!
//! Token ids live in one global space rendered as `w{id}`. Ids below
//! `shared_vocab` are function words every participant uses; each
//! participant also owns a disjoint domain range laid out as
//!
//! ```text
//! [topic 0 | topic 1 | ... | filler words | entity words]
//! ```
//!
//! A topic block holds question markers followed by answer markers. Every
//! question owns one entity word. A question is a few question markers of
//! its topic, its entity and function words. Its positive answers repeat
//! the entity and carry answer markers of the same topic plus filler.
//! Each answer also mentions the entities of `borrowed_entities` random
//! questions from other topics.
//!
//! Splits are assigned before any text is drawn. Borrowed entities come
//! from questions of the same split, and a question's label-0 candidates
//! are positive answers of other questions of the same split and a
//! different topic that do not mention its entity. Every answer in a pool
//! is therefore a positive for some question, nothing about an answer alone
//! tells whether it is relevant, and no dev or test candidate is a
//! training answer.
//!
//! Lexical retrieval for a question finds its positives and the answers of
//! other topics that mention its entity, so mined negatives share the
//! entity and telling them apart needs the association between question and
//! answer markers.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_splits, split, Corpus, ParticipantCorpus, QAExample, SplitName, DEFAULT_RATIOS,
};
use crate::error::Result;
use crate::model::config::issues_to_result;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantProfile {
    pub name: String,
    /// First id of the participant's domain range.
    pub vocab_start: usize,
    pub vocab_size: usize,
    pub questions: usize,
    pub topics: usize,
    /// Inclusive range of positive answers per question.
    pub positives_per_question: [usize; 2],
    pub mean_question_len: f64,
    pub mean_answer_len: f64,
    /// Target share of label-1 rows among a question's candidates.
    pub positive_rate: f64,
}

impl ParticipantProfile {
    /// Candidates generated for a question with `positives` positive answers.
    pub fn candidates(&self, positives: usize) -> usize {
        ((positives as f64 / self.positive_rate).round() as usize).max(positives + 1)
    }
}

fn default_question_markers() -> usize {
    3
}

fn default_answer_markers() -> usize {
    6
}

fn default_question_keywords() -> usize {
    2
}

fn default_answer_keywords() -> usize {
    2
}

fn default_borrowed_entities() -> usize {
    3
}

fn default_filler_words() -> usize {
    40
}

fn default_function_share() -> f64 {
    0.5
}

fn default_ratios() -> [f64; 3] {
    DEFAULT_RATIOS
}

fn default_jsd_floor() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub shared_vocab: usize,
    /// Draw every participant from the first profile's distribution; only
    /// the question counts stay per participant. Entity words wrap around
    /// the first profile's entity range when questions outnumber it.
    #[serde(default)]
    pub iid: bool,
    /// Topic words only questions use.
    #[serde(default = "default_question_markers")]
    pub question_markers: usize,
    /// Topic words only answers use.
    #[serde(default = "default_answer_markers")]
    pub answer_markers: usize,
    /// Question markers per question.
    #[serde(default = "default_question_keywords")]
    pub question_keywords: usize,
    /// Answer markers per answer.
    #[serde(default = "default_answer_keywords")]
    pub answer_keywords: usize,
    /// Entities of other-topic questions each answer mentions.
    #[serde(default = "default_borrowed_entities")]
    pub borrowed_entities: usize,
    /// Domain filler words per participant.
    #[serde(default = "default_filler_words")]
    pub filler_words: usize,
    /// Probability that an answer filler word is a function word rather
    /// than domain filler.
    #[serde(default = "default_function_share")]
    pub answer_function_share: f64,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Pairwise unigram divergence a non-IID corpus is expected to exceed.
    #[serde(default = "default_jsd_floor")]
    pub jsd_floor: f64,
    pub profiles: Vec<ParticipantProfile>,
}

/// Question counts, mean lengths and positive rates of the five reference
/// domains. Lengths are shrunk to fit short sequences while keeping their
/// order; answers grow with the reference answer length.
const REFERENCE: [(&str, usize, f64, f64, f64); 5] = [
    ("law", 1750, 8.46, 139.62, 0.1429),
    ("biomedical", 2740, 10.5, 36.0, 0.2187),
    ("financial", 6648, 12.4, 202.0, 0.3215),
    ("insurance", 1309, 7.2, 92.3, 0.2567),
    ("medical", 380, 19.7, 469.7, 0.3722),
];

impl CorpusConfig {
    /// Five participants with the reference size ratios, question counts
    /// multiplied by `scale`. Domain ranges are sized to hold every entity.
    pub fn desk(scale: f64, seed: u64) -> Self {
        let mut config = Self {
            seed,
            shared_vocab: 40,
            iid: false,
            question_markers: default_question_markers(),
            answer_markers: default_answer_markers(),
            question_keywords: default_question_keywords(),
            answer_keywords: default_answer_keywords(),
            borrowed_entities: default_borrowed_entities(),
            filler_words: default_filler_words(),
            answer_function_share: default_function_share(),
            ratios: DEFAULT_RATIOS,
            jsd_floor: default_jsd_floor(),
            profiles: Vec::new(),
        };
        let mut start = config.shared_vocab;
        for &(name, questions, ql, al, rate) in &REFERENCE {
            let mut p = ParticipantProfile {
                name: name.to_string(),
                vocab_start: start,
                vocab_size: 0,
                questions: ((questions as f64 * scale).round() as usize).max(3),
                topics: 8,
                positives_per_question: [1, 2],
                mean_question_len: 3.0 + ql / 8.0,
                mean_answer_len: 4.0 + al / 60.0,
                positive_rate: rate,
            };
            p.vocab_size = config.entity_offset(&p) + p.questions;
            start += p.vocab_size;
            config.profiles.push(p);
        }
        config
    }

    /// Words in one topic block.
    pub fn topic_block(&self) -> usize {
        self.question_markers + self.answer_markers
    }

    /// Offset of the entity range inside a participant's domain range.
    pub fn entity_offset(&self, p: &ParticipantProfile) -> usize {
        p.topics * self.topic_block() + self.filler_words
    }

    pub fn issues(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.profiles.len() < 2 {
            out.push((
                format!("{prefix}profiles"),
                "at least two participants are required".into(),
            ));
        }
        if self.shared_vocab == 0 {
            out.push((format!("{prefix}shared_vocab"), "must be positive".into()));
        }
        if self.question_keywords == 0 || self.question_keywords > self.question_markers {
            out.push((
                format!("{prefix}question_keywords"),
                format!(
                    "must be in [1, question_markers = {}]",
                    self.question_markers
                ),
            ));
        }
        if self.answer_keywords == 0 || self.answer_keywords > self.answer_markers {
            out.push((
                format!("{prefix}answer_keywords"),
                format!("must be in [1, answer_markers = {}]", self.answer_markers),
            ));
        }
        if self.filler_words == 0 {
            out.push((format!("{prefix}filler_words"), "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.answer_function_share) {
            out.push((
                format!("{prefix}answer_function_share"),
                "must lie in [0, 1]".into(),
            ));
        }
        if (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.ratios.iter().any(|r| *r < 0.0)
        {
            out.push((
                format!("{prefix}ratios"),
                "must be non-negative and sum to 1".into(),
            ));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            let at = |f: &str| format!("{prefix}profiles[{i}].{f}");
            if p.name.is_empty()
                || !p
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                out.push((
                    at("name"),
                    format!(
                        "`{}` must be non-empty ASCII letters, digits, `_` or `-`",
                        p.name
                    ),
                ));
            }
            if self.profiles[..i].iter().any(|q| q.name == p.name) {
                out.push((at("name"), format!("duplicate participant `{}`", p.name)));
            }
            if p.vocab_start < self.shared_vocab {
                out.push((
                    at("vocab_start"),
                    format!("domain range of `{}` overlaps the shared range", p.name),
                ));
            }
            for q in &self.profiles[..i] {
                let overlap = p.vocab_start < q.vocab_start + q.vocab_size
                    && q.vocab_start < p.vocab_start + p.vocab_size;
                if overlap {
                    out.push((
                        at("vocab_start"),
                        format!("domain ranges of `{}` and `{}` overlap", q.name, p.name),
                    ));
                }
            }
            if p.topics < 2 {
                out.push((at("topics"), "need at least two topics".into()));
            }
            if p.questions < 3 {
                out.push((at("questions"), "need at least three questions".into()));
            }
            let [lo, hi] = p.positives_per_question;
            if lo == 0 || lo > hi {
                out.push((
                    at("positives_per_question"),
                    "must be a range [min, max] with 1 <= min <= max".into(),
                ));
            }
            let rate_ok = p.positive_rate > 0.0 && p.positive_rate < 1.0;
            if !rate_ok {
                out.push((at("positive_rate"), "must lie in (0, 1)".into()));
            }
            let needed = if self.iid { 1 } else { p.questions };
            let min_size = self.entity_offset(p) + needed;
            if p.vocab_size < min_size {
                out.push((
                    at("vocab_size"),
                    format!(
                        "must be at least {min_size} to hold topic blocks, filler and entity words"
                    ),
                ));
            }
            if p.mean_question_len.is_nan() || p.mean_question_len < (self.question_keywords + 1) as f64 {
                out.push((
                    at("mean_question_len"),
                    format!("must be at least {}", self.question_keywords + 1),
                ));
            }
            if p.mean_answer_len.is_nan() || p.mean_answer_len < (self.answer_keywords + 1) as f64 {
                out.push((
                    at("mean_answer_len"),
                    format!("must be at least {}", self.answer_keywords + 1),
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        issues_to_result(self.issues("corpus."))
    }
}

fn word(id: usize) -> String {
    format!("w{id}")
}

/// Draws a length around `mean`, uniformly within +-50%, never below `min`.
fn length<R: Rng>(rng: &mut R, mean: f64, min: usize) -> usize {
    let l = (mean * rng.gen_range(0.5..1.5)).round() as usize;
    l.max(min)
}

struct Sampler<'a> {
    config: &'a CorpusConfig,
    profile: &'a ParticipantProfile,
    shared: WeightedIndex<f64>,
}

impl<'a> Sampler<'a> {
    fn new(config: &'a CorpusConfig, profile: &'a ParticipantProfile) -> Self {
        // Zipf-like weights: low shared ids are the most frequent function words.
        let weights: Vec<f64> = (0..config.shared_vocab)
            .map(|r| 1.0 / (r + 1) as f64)
            .collect();
        Self {
            config,
            profile,
            shared: WeightedIndex::new(weights).expect("shared vocabulary is non-empty"),
        }
    }

    fn block(&self, topic: usize) -> usize {
        self.profile.vocab_start + topic * self.config.topic_block()
    }

    fn question_markers<R: Rng>(&self, rng: &mut R, topic: usize) -> Vec<usize> {
        let first = self.block(topic);
        index::sample(
            rng,
            self.config.question_markers,
            self.config.question_keywords,
        )
        .into_iter()
        .map(|k| first + k)
        .collect()
    }

    fn answer_markers<R: Rng>(&self, rng: &mut R, topic: usize) -> Vec<usize> {
        let first = self.block(topic) + self.config.question_markers;
        index::sample(rng, self.config.answer_markers, self.config.answer_keywords)
            .into_iter()
            .map(|k| first + k)
            .collect()
    }

    /// Entity word of question `qid`.
    fn entity(&self, qid: usize) -> usize {
        let offset = self.config.entity_offset(self.profile);
        let capacity = self.profile.vocab_size.saturating_sub(offset).max(1);
        self.profile.vocab_start + offset + qid % capacity
    }

    fn function_word<R: Rng>(&self, rng: &mut R) -> usize {
        self.shared.sample(rng)
    }

    fn domain_filler<R: Rng>(&self, rng: &mut R) -> usize {
        let first = self.profile.topics * self.config.topic_block();
        self.profile.vocab_start + first + rng.gen_range(0..self.config.filler_words)
    }

    fn answer<R: Rng>(&self, rng: &mut R, topic: usize, entities: &[usize]) -> Vec<String> {
        let mut ids = entities.to_vec();
        ids.extend(self.answer_markers(rng, topic));
        let len = length(rng, self.profile.mean_answer_len, ids.len() + 1);
        while ids.len() < len {
            let filler = if rng.gen_bool(self.config.answer_function_share) {
                self.function_word(rng)
            } else {
                self.domain_filler(rng)
            };
            ids.push(filler);
        }
        ids.shuffle(rng);
        ids.into_iter().map(word).collect()
    }
}

fn generate_participant<R: Rng>(
    config: &CorpusConfig,
    dist: &ParticipantProfile,
    name: &str,
    splits: &[SplitName],
    rng: &mut R,
) -> Vec<QAExample> {
    let questions = splits.len();
    let s = Sampler::new(config, dist);
    struct Draft {
        topic: usize,
        question: Vec<String>,
        positives: Vec<u64>,
    }
    let topics: Vec<usize> = (0..questions)
        .map(|_| rng.gen_range(0..dist.topics))
        .collect();
    // questions of the same split outside each topic
    let outside = |qid: usize| -> Vec<usize> {
        (0..questions)
            .filter(|&q| topics[q] != topics[qid] && splits[q] == splits[qid])
            .collect()
    };
    let borrow = |rng: &mut R, qid: usize| -> Vec<usize> {
        let pool = outside(qid);
        if pool.is_empty() {
            return Vec::new();
        }
        (0..config.borrowed_entities)
            .map(|_| s.entity(*pool.choose(rng).expect("non-empty")))
            .collect()
    };
    // (tokens, topic, split)
    let mut answers: Vec<(Vec<String>, usize, SplitName)> = Vec::new();
    let mut drafts = Vec::with_capacity(questions);
    for qid in 0..questions {
        let topic = topics[qid];
        let entity = s.entity(qid);
        let mut q = s.question_markers(rng, topic);
        q.push(entity);
        let qlen = length(rng, dist.mean_question_len, q.len() + 1);
        while q.len() < qlen {
            q.push(s.function_word(rng));
        }
        q.shuffle(rng);
        let [lo, hi] = dist.positives_per_question;
        let positives = (0..rng.gen_range(lo..=hi))
            .map(|_| {
                let entities: Vec<usize> =
                    std::iter::once(entity).chain(borrow(rng, qid)).collect();
                answers.push((s.answer(rng, topic, &entities), topic, splits[qid]));
                (answers.len() - 1) as u64
            })
            .collect();
        drafts.push(Draft {
            topic,
            question: q.into_iter().map(word).collect(),
            positives,
        });
    }

    let mut out = Vec::new();
    for (qid, d) in drafts.iter().enumerate() {
        let wanted = dist.candidates(d.positives.len()) - d.positives.len();
        let own = word(s.entity(qid));
        let pool: Vec<u64> = (0..answers.len() as u64)
            .filter(|&aid| {
                let (tokens, topic, split) = &answers[aid as usize];
                *topic != d.topic && *split == splits[qid] && !tokens.contains(&own)
            })
            .collect();
        let mut rows: Vec<(u64, u8)> = d.positives.iter().map(|&aid| (aid, 1)).collect();
        rows.extend(pool.choose_multiple(rng, wanted).map(|&aid| (aid, 0)));
        // a pool with too few other-topic answers is topped up with fresh ones
        while rows.len() < d.positives.len() + wanted {
            let mut other = rng.gen_range(0..dist.topics - 1);
            if other >= d.topic {
                other += 1;
            }
            let entities = borrow(rng, qid);
            answers.push((s.answer(rng, other, &entities), other, splits[qid]));
            rows.push(((answers.len() - 1) as u64, 0));
        }
        rows.shuffle(rng);
        for (aid, label) in rows {
            out.push(QAExample {
                qid: qid as u64,
                question: d.question.clone(),
                aid,
                answer: answers[aid as usize].0.clone(),
                label,
                participant: name.to_string(),
            });
        }
    }
    out
}

/// Every participant's examples, unsplit, in profile order.
pub fn generate_synthetic(
    config: &CorpusConfig,
) -> Result<Vec<(ParticipantProfile, Vec<QAExample>)>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.profiles.len());
    for (i, p) in config.profiles.iter().enumerate() {
        let dist = if config.iid { &config.profiles[0] } else { p };
        let mut rng = stream(config.seed, Purpose::Corpus, i as u64, 0);
        let qids: Vec<u64> = (0..p.questions as u64).collect();
        let mut split_rng = stream(config.seed, Purpose::Split, i as u64, 0);
        let assignment = assign_splits(&qids, config.ratios, &mut split_rng)?;
        let splits: Vec<SplitName> = qids.iter().map(|q| assignment[q]).collect();
        let rows = generate_participant(config, dist, &p.name, &splits, &mut rng);
        out.push((p.clone(), rows));
    }
    Ok(out)
}

/// Generates and splits; participants end up sorted by name.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let mut participants = Vec::new();
    for (i, (profile, rows)) in generate_synthetic(config)?.into_iter().enumerate() {
        let mut rng = stream(config.seed, Purpose::Split, i as u64, 0);
        let splits = split(&rows, config.ratios, &mut rng)?;
        participants.push(ParticipantCorpus {
            name: profile.name.clone(),
            profile: Some(profile),
            splits,
        });
    }
    participants.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Corpus { participants })
}
